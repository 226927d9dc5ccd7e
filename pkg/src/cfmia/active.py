"""Least-confidence active learning used as a data-distillation defence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import dp, nn
from .data import Dataset

logger = logging.getLogger(__name__)


@dataclass
class AlConfig:
    initial_fraction: float = 0.10
    batch_per_iter: int = 50
    max_iters: int = 50
    trainer: str = "standard"  # "standard" | "dp"
    budget: dp.DpBudget | None = None
    acquisition: str = "least_confidence"  # or "entropy"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.initial_fraction < 1:
            raise ValueError("initial_fraction must lie in (0, 1)")
        if self.batch_per_iter < 1 or self.max_iters < 1:
            raise ValueError("batch_per_iter and max_iters must be >= 1")
        if self.trainer not in ("standard", "dp"):
            raise ValueError("trainer must be 'standard' or 'dp'")
        if self.trainer == "dp" and self.budget is None:
            raise ValueError("dp trainer needs a budget")
        if self.acquisition not in ("least_confidence", "entropy"):
            raise ValueError("unknown acquisition function")


@dataclass
class AlTrace:
    records: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    best_dataset_row_ids: set[int] = field(default_factory=set)
    caveats: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "records": self.records,
            "best_iteration": self.best_iteration,
            "best_dataset_row_ids": sorted(self.best_dataset_row_ids),
            "caveats": self.caveats,
        }, indent=1)


def least_confidence_scores(model, pool: Dataset) -> list[tuple[int, float]]:
    """(row_id, max posterior) for every pool row, eval mode."""
    if len(pool) == 0:
        raise ValueError("empty pool")
    conf = model.predict_proba(pool.rows).max(axis=1)
    return [(int(r), float(c)) for r, c in zip(pool.row_ids, conf)]


def entropy_scores(model, pool: Dataset) -> list[tuple[int, float]]:
    """Negative entropy, so that lower still means more informative."""
    p = np.clip(model.predict_proba(pool.rows), 1e-12, 1.0)
    return [(int(r), float(v)) for r, v in zip(pool.row_ids, (p * np.log(p)).sum(axis=1))]


def acquire(scores: Iterable[tuple[int, float]], already_labeled: Iterable[int], k: int) -> set[int]:
    """The k lowest-scoring unlabeled ids; ties go to the smaller row id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labeled = set(int(i) for i in already_labeled)
    cand = sorted((c, rid) for rid, c in scores if rid not in labeled)
    return {rid for _, rid in cand[:k]}


def _fit(config: AlConfig, mlp: nn.MlpConfig, train: Dataset, valid: Dataset):
    if config.trainer == "standard":
        model, _ = nn.train(mlp, train, valid)
        return model, None
    model, eps, hist = dp.train_dp(mlp, config.budget, train, valid)
    return model, {"realized_epsilon": eps, "sigma": hist["sigma"], "steps": hist["steps"]}


def run_al(config: AlConfig, mlp: nn.MlpConfig, train_pool: Dataset, valid: Dataset) -> tuple[nn.MlpModel, AlTrace]:
    """Grow the labeled set by least confidence, retraining from scratch each iteration.

    Iteration 0 trains on a random ``initial_fraction`` subset; the model with
    the best validation accuracy (earliest on ties) is returned.
    """
    n = len(train_pool)
    n0 = max(1, int(math.floor(config.initial_fraction * n)))
    if n < n0 + 1:
        raise ValueError("pool too small for the requested initial subset")
    rng = np.random.default_rng([config.seed, 7])
    labeled = set(int(i) for i in rng.choice(train_pool.row_ids, size=n0, replace=False))
    score_fn = least_confidence_scores if config.acquisition == "least_confidence" else entropy_scores
    trace = AlTrace()
    best_model, best_acc = None, -np.inf
    eps_spent: list[float] = []

    for it in range(config.max_iters + 1):
        selected: set[int] = set()
        if it > 0:
            pool = train_pool.subset(~np.isin(train_pool.row_ids, list(labeled)))
            if len(pool) == 0:
                break
            selected = acquire(score_fn(model, pool), labeled, config.batch_per_iter)
            if not selected:
                break
            labeled |= selected
        subset = train_pool.select_ids(labeled)
        mlp_it = replace(mlp, seed=mlp.seed * 1000 + it)
        model, dp_info = _fit(config, mlp_it, subset, valid)
        acc = nn.accuracy(model, valid)
        rec = {
            "iteration": it,
            "labeled_count": len(labeled),
            "validation_accuracy": acc,
            "selected_row_ids": sorted(selected),
        }
        if dp_info is not None:
            rec.update(dp_info)
            eps_spent.append(dp_info["realized_epsilon"])
        trace.records.append(rec)
        if acc > best_acc:
            best_acc, best_model = acc, model
            trace.best_iteration = it
            trace.best_dataset_row_ids = set(labeled)
        if len(labeled) >= n:
            break

    if eps_spent:
        trace.caveats.append(
            f"each of {len(eps_spent)} DP trainings spent up to epsilon={max(eps_spent):.4g}; "
            f"naive composition across iterations totals {sum(eps_spent):.4g}"
        )
    return best_model, trace


def write_best_ids(trace: AlTrace, path) -> None:
    Path(path).write_text("\n".join(str(i) for i in sorted(trace.best_dataset_row_ids)) + "\n")
