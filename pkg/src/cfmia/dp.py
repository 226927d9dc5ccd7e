"""DP-SGD (with Adam) and a Renyi-DP accountant for the Poisson-subsampled Gaussian."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from . import nn
from .data import Dataset

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: tuple[float, ...] = (1.5, *map(float, range(2, 65)), 128.0, 256.0)
SIGMA_BOUNDS = (1e-2, 1e3)


class NumericError(ArithmeticError):
    pass


class CalibrationError(RuntimeError):
    pass


class NoFiniteEpsilonError(ValueError):
    pass


@dataclass
class DpBudget:
    epsilon: float
    delta: float = 1e-5
    clip_norm: float = 1.5
    noise_multiplier: float | None = None
    sample_rate: float | None = None
    steps: int | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


@dataclass
class RdpCurve:
    orders: list[float]
    rdp_values: list[float]

    def __post_init__(self):
        if len(self.orders) != len(self.rdp_values):
            raise ValueError("orders and rdp_values differ in length")


def _is_structure_list(grads) -> bool:
    return len(grads) > 0 and isinstance(grads[0], (list, tuple))


def _stack(structures: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    return [np.stack([s[k] for s in structures]) for k in range(len(structures[0]))]


def global_norms(per_example: list[np.ndarray]) -> np.ndarray:
    """L2 norm of each example's full parameter-gradient vector."""
    n = len(per_example[0])
    sq = np.zeros(n)
    for g in per_example:
        sq += np.square(g.reshape(n, -1)).sum(axis=1)
    return np.sqrt(sq)


def clip_grads(per_example, C: float, return_norms: bool = False):
    """Scale each example's gradient by min(1, C / ||g||).

    Accepts either stacked arrays (leading batch axis) or a list of
    per-example parameter lists, and returns the same layout.
    """
    if C <= 0:
        raise ValueError("clip norm must be positive")
    as_list = _is_structure_list(per_example)
    stacked = _stack(per_example) if as_list else per_example
    norms = global_norms(stacked)
    bad = np.flatnonzero(~np.isfinite(norms))
    if bad.size:
        raise NumericError(f"non-finite gradient for example {int(bad[0])}")
    with np.errstate(divide="ignore"):
        factor = np.minimum(1.0, C / np.where(norms > 0, norms, np.inf))
    clipped = [g * factor.reshape((-1,) + (1,) * (g.ndim - 1)) for g in stacked]
    out = nn.unstack(clipped) if as_list else clipped
    if return_norms:
        return out, norms * factor
    return out


def noisy_aggregate(
    clipped,
    C: float,
    sigma: float,
    rng: np.random.Generator,
    denom: float | None = None,
) -> list[np.ndarray]:
    """(sum of clipped grads + N(0, sigma^2 C^2)) / denom; denom defaults to the batch size."""
    stacked = _stack(clipped) if _is_structure_list(clipped) else clipped
    n = len(stacked[0])
    if n == 0:
        raise ValueError("empty batch")
    denom = float(n if denom is None else denom)
    out = []
    for g in stacked:
        total = g.sum(axis=0)
        if sigma > 0:
            total = total + rng.normal(0.0, sigma * C, size=total.shape)
        out.append(total / denom)
    return out


# --- Renyi DP of the sampled Gaussian mechanism -----------------------------


def _log_add(a: float, b: float) -> float:
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    if b == -np.inf:
        return a
    if a == b:
        return -np.inf
    if a < b:
        raise ValueError("log of a negative number")
    return a + math.log(-math.expm1(b - a))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -np.inf
    for i in range(alpha + 1):
        log_coef = math.log(special.binom(alpha, i)) + i * math.log(q) + (alpha - i) * math.log1p(-q)
        log_a = _log_add(log_a, log_coef + (i * i - i) / (2.0 * sigma**2))
    return log_a


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Two-sided series split at z0 where the mixture densities cross.
    log_a0, log_a1 = -np.inf, -np.inf
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 or i > 10_000:
            break
    return _log_add(log_a0, log_a1)


def _rdp_single_step(q: float, sigma: float, alpha: float) -> float:
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1.0)


def rdp_subsampled_gaussian(
    q: float, sigma: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS
) -> RdpCurve:
    """RDP at each order of ``steps`` compositions of the sampled Gaussian."""
    if not 0 < q <= 1:
        raise ValueError("sample rate must lie in (0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    values = []
    for a in orders:
        if a <= 1:
            raise ValueError("orders must exceed 1")
        try:
            r = _rdp_single_step(q, sigma, float(a)) * steps
        except (OverflowError, ValueError):
            r = math.inf
        values.append(r if math.isfinite(r) else math.inf)
    return RdpCurve(list(map(float, orders)), values)


def rdp_to_eps(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Minimise rdp(a) + log(1/delta)/(a-1) over the curve's orders."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not curve.orders:
        raise ValueError("empty curve")
    orders = np.asarray(curve.orders, dtype=float)
    eps = np.asarray(curve.rdp_values, dtype=float) + math.log(1.0 / delta) / (orders - 1.0)
    if not np.isfinite(eps).any():
        raise NoFiniteEpsilonError("every order has infinite RDP")
    k = int(np.nanargmin(np.where(np.isfinite(eps), eps, np.inf)))
    return float(eps[k]), float(orders[k])


def compute_epsilon(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    return rdp_to_eps(rdp_subsampled_gaussian(q, sigma, steps, orders), delta)[0]


def calibrate_sigma(
    eps_target: float,
    delta: float,
    q: float,
    steps: int,
    orders: Sequence[float] = DEFAULT_ORDERS,
    rel_slack: float = 0.01,
) -> float:
    """Smallest sigma (to within ``rel_slack`` in epsilon) meeting the target."""
    if eps_target <= 0:
        raise ValueError("eps_target must be positive")
    lo, hi = SIGMA_BOUNDS
    eps_of = lambda s: compute_epsilon(q, s, steps, delta, orders)  # noqa: E731
    if eps_of(hi) > eps_target:
        raise CalibrationError(f"sigma > {hi} needed for epsilon {eps_target}")
    if eps_of(lo) <= eps_target:
        return lo
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if eps_of(mid) <= eps_target:
            hi = mid
        else:
            lo = mid
        if eps_target - eps_of(hi) <= rel_slack * eps_target or hi / lo < 1 + 1e-9:
            break
    return hi


# --- training ---------------------------------------------------------------


@dataclass
class DpTrainState:
    budget: DpBudget
    step: int = 0
    realized_epsilon: float = 0.0
    budget_exhausted: bool = False
    audit: list[dict] = field(default_factory=list)


def prepare_budget(budget: DpBudget, n_train: int, config: nn.MlpConfig) -> DpBudget:
    """Fill in sample rate, step count and (if absent) a calibrated sigma."""
    q = budget.sample_rate if budget.sample_rate is not None else min(1.0, config.batch_size / n_train)
    steps = budget.steps
    if steps is None:
        steps = max(1, config.epochs * max(1, round(1.0 / q)))
    sigma = budget.noise_multiplier
    if sigma is None:
        sigma = calibrate_sigma(budget.epsilon, budget.delta, q, steps)
    if budget.delta >= 1.0 / n_train:
        logger.warning("delta=%g is not below 1/N=%g", budget.delta, 1.0 / n_train)
    return replace(budget, sample_rate=q, steps=steps, noise_multiplier=sigma)


def train_dp(
    config: nn.MlpConfig,
    budget: DpBudget,
    train: Dataset,
    valid: Dataset,
    *,
    audit_path: str | Path | None = None,
    check_clip: bool = False,
    batch_log: list | None = None,
) -> tuple[nn.MlpModel, float, dict]:
    """DP-SGD with Poisson sampling; the noisy mean gradient drives Adam.

    A zero noise multiplier disables accounting (realized epsilon is inf).
    ``batch_log``, when given, receives the sampled row positions per step.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and valid must be nonempty")
    budget = prepare_budget(budget, len(train), config)
    q, sigma, C = budget.sample_rate, budget.noise_multiplier, budget.clip_norm
    steps_per_epoch = max(1, budget.steps // max(1, config.epochs)) if config.epochs else 0
    state = DpTrainState(budget)
    model = nn.init_model(config)
    sample_rng = np.random.default_rng([config.seed, 4])
    noise_rng = np.random.default_rng([config.seed, 3])
    expected_batch = q * len(train)
    history = {"train_acc": [], "valid_acc": [], "max_clip_norm": [], "sigma": sigma, "q": q}
    rdp_one = None if sigma == 0 else rdp_subsampled_gaussian(q, sigma, 1)

    def eps_at(t: int) -> float:
        if rdp_one is None:
            return math.inf
        curve = RdpCurve(rdp_one.orders, [r * t for r in rdp_one.rdp_values])
        return rdp_to_eps(curve, budget.delta)[0]

    for epoch in range(config.epochs):
        max_norm = 0.0
        for _ in range(steps_per_epoch):
            if rdp_one is not None and eps_at(state.step + 1) > 1.01 * budget.epsilon:
                state.budget_exhausted = True
                break
            idx = np.flatnonzero(sample_rng.random(len(train)) < q)
            if batch_log is not None:
                batch_log.append(idx)
            model.train_mode = True
            if len(idx):
                per_ex = nn.per_example_grads(model, (train.rows[idx], train.labels[idx]))
                clipped, norms = clip_grads(per_ex, C, return_norms=True)
                if check_clip:
                    assert norms.max() <= C + 1e-9, norms.max()
                max_norm = max(max_norm, float(norms.max()))
                grads = noisy_aggregate(clipped, C, sigma, noise_rng, denom=expected_batch)
            else:
                grads = [noise_rng.normal(0.0, sigma * C, size=p.shape) / expected_batch for p in model.params]
            state.step += 1
            nn.adam_step(model, grads, state.step)
        model.train_mode = False
        state.realized_epsilon = eps_at(state.step) if state.step else 0.0
        history["train_acc"].append(nn.accuracy(model, train))
        history["valid_acc"].append(nn.accuracy(model, valid))
        history["max_clip_norm"].append(max_norm)
        state.audit.append({
            "step": state.step, "q": q, "sigma": sigma,
            "realized_epsilon": state.realized_epsilon, "delta": budget.delta,
        })
        if state.budget_exhausted:
            break

    model.train_mode = False
    history["audit"] = state.audit
    history["budget_exhausted"] = state.budget_exhausted
    history["steps"] = state.step
    if audit_path is not None:
        write_audit_log(state.audit, audit_path)
    return model, state.realized_epsilon, history


def write_audit_log(records: list[dict], path: str | Path, mode: str = "w") -> None:
    with Path(path).open(mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
