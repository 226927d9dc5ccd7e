"""Defended-record ratios from the attacker's predicted member set."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ExposureInput:
    all_ids: frozenset
    trained_ids: frozenset
    predicted_member_ids: frozenset

    def __init__(self, all_ids: Iterable[int], trained_ids: Iterable[int], predicted_member_ids: Iterable[int]):
        object.__setattr__(self, "all_ids", frozenset(int(i) for i in all_ids))
        object.__setattr__(self, "trained_ids", frozenset(int(i) for i in trained_ids))
        object.__setattr__(self, "predicted_member_ids", frozenset(int(i) for i in predicted_member_ids))
        if not self.trained_ids <= self.all_ids:
            raise ValueError("trained ids must be a subset of all ids")


def micro_defended(inp: ExposureInput) -> float:
    """|S \\ S_hat| / |S|, i.e. 1 - TPR."""
    if not inp.trained_ids:
        raise UndefinedMetricError("no trained records")
    protected = inp.trained_ids - inp.predicted_member_ids
    return len(protected) / len(inp.trained_ids)


def member_recall(inp: ExposureInput) -> float:
    if not inp.trained_ids:
        raise UndefinedMetricError("no trained records")
    return len(inp.trained_ids & inp.predicted_member_ids) / len(inp.trained_ids)


def macro_defended(inp: ExposureInput) -> float:
    """(|D \\ S| + |S \\ S_hat|) / |D|, cross-checked against 1 - (|S|/|D|) * recall."""
    if not inp.all_ids:
        raise UndefinedMetricError("empty dataset")
    saved = len(inp.all_ids - inp.trained_ids)
    protected = len(inp.trained_ids - inp.predicted_member_ids)
    set_form = (saved + protected) / len(inp.all_ids)
    if inp.trained_ids:
        recall_form = macro_from_recall(len(inp.trained_ids) / len(inp.all_ids), member_recall(inp))
        assert abs(set_form - recall_form) <= 1e-12, (set_form, recall_form)
    return set_form


def macro_from_recall(trained_fraction: float, recall: float) -> float:
    return 1.0 - trained_fraction * recall


def exposure_summary(inp: ExposureInput) -> dict:
    return {
        "micro_defended": micro_defended(inp),
        "macro_defended": macro_defended(inp),
        "n_all": len(inp.all_ids),
        "n_trained": len(inp.trained_ids),
        "n_predicted": len(inp.predicted_member_ids),
        "n_detected": len(inp.trained_ids & inp.predicted_member_ids),
    }
