"""Membership inference against explainable MLaaS models, with DP and active-learning defences."""

__version__ = "0.1.0"
