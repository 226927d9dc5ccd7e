"""Shadow-model membership inference, with or without counterfactual features.

The attacker holds raw rows from the shadow pool, trains its own shadow
models and queries the target only through :class:`~cfmia.facade.MlaasService`.
Attack features per record::

    no_cf: sorted posterior (K)
    cf:    sorted posterior (K) | heom(x, E) | L2(x, E) | sparsity | cf_missing
           | sorted posterior of E(x) (K)
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .counterfactual import EQ_TOL, HeomSpace, heom_rows
from .data import Dataset, SizeError
from .facade import MlaasService, ServiceConfig
from .gbdt import AttackModel, GbdtConfig, gbdt_train

SETTINGS = ("no_cf", "cf")
FEATURE_LAYOUT_VERSION = 1
CF_SENTINEL = -1.0


@dataclass
class ShadowConfig:
    shadow_arch: nn.MlpConfig
    num_shadows: int = 5
    member_fraction: float = 0.5
    shadow_size: int | None = None  # rows drawn per shadow; None = whole pool
    seed: int = 0
    reward: str = "proximity"

    def __post_init__(self):
        if self.num_shadows < 1:
            raise ValueError("num_shadows must be >= 1")
        if not 0 < self.member_fraction < 1:
            raise ValueError("member_fraction must lie in (0, 1)")


@dataclass
class AttackRecord:
    features: np.ndarray
    member: int
    source_shadow: int
    row_id: int = -1


@dataclass
class AttackReport:
    setting: str
    accuracy: float
    precision: float
    recall: float
    per_run: dict = field(default_factory=dict)
    undefined_precision: bool = False
    feature_layout_version: int = FEATURE_LAYOUT_VERSION

    @classmethod
    def from_runs(cls, setting: str, runs: Sequence[dict]) -> "AttackReport":
        per_run = {k: [float(r[k]) for r in runs] for k in ("accuracy", "precision", "recall")}
        for k in ("n_members", "n_nonmembers"):
            per_run[k] = [int(r[k]) for r in runs]
        undefined = any(r.get("undefined_precision", False) for r in runs)
        return cls(
            setting,
            float(np.mean(per_run["accuracy"])),
            float(np.mean(per_run["precision"])),
            float(np.mean(per_run["recall"])),
            per_run,
            undefined,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def feature_length(num_classes: int, setting: str) -> int:
    return num_classes if setting == "no_cf" else 2 * num_classes + 4


def build_shadow_splits(pool: Dataset, config: ShadowConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Member/non-member row ids per shadow (disjoint within a shadow)."""
    size = len(pool) if config.shadow_size is None else config.shadow_size
    n_mem = int(round(config.member_fraction * size))
    if size > len(pool) or n_mem < 1 or size - n_mem < 1:
        raise SizeError(f"shadow pool of {len(pool)} rows cannot supply {size}-row shadows")
    splits = []
    for s in range(config.num_shadows):
        perm = np.random.default_rng([config.seed, 100 + s]).permutation(len(pool))[:size]
        ids = pool.row_ids[perm]
        splits.append((np.sort(ids[:n_mem]), np.sort(ids[n_mem:])))
    return splits


def train_shadows(pool: Dataset, splits, config: ShadowConfig) -> list[nn.MlpModel]:
    models = []
    for s, (mem, non) in enumerate(splits):
        arch = replace(config.shadow_arch, seed=config.seed * 1000 + s)
        model, _ = nn.train(arch, pool.select_ids(mem), pool.select_ids(non))
        models.append(model)
    return models


def phi_features(service: MlaasService, X: np.ndarray, space: HeomSpace, setting: str) -> np.ndarray:
    """Attack feature rows for queries ``X`` against ``service``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    if setting == "no_cf":
        post = service.posteriors(X)
        return -np.sort(-post, axis=1)
    responses = service.query_many(X)
    post = np.array([r.posterior for r in responses])
    k = post.shape[1]
    out = np.full((len(X), 2 * k + 4), CF_SENTINEL)
    out[:, :k] = -np.sort(-post, axis=1)
    have = np.array([r.counterfactual is not None for r in responses])
    out[~have, k + 3] = 1.0
    if have.any():
        E = np.array([r.counterfactual.explanation for r in responses if r.counterfactual is not None])
        Xh = X[have]
        cf_post = service.posteriors(E)
        out[have, k] = heom_rows(space, Xh, E)
        out[have, k + 1] = np.linalg.norm(Xh - E, axis=1)
        out[have, k + 2] = (np.abs(Xh - E) > EQ_TOL).sum(axis=1)
        out[have, k + 3] = 0.0
        out[have, k + 4 :] = -np.sort(-cf_post, axis=1)
    return out


def assemble_attack_set(
    shadows: Sequence[nn.MlpModel],
    splits,
    pool: Dataset,
    setting: str,
    space: HeomSpace | None = None,
    reward: str = "proximity",
) -> list[AttackRecord]:
    """Label each shadow's members 1 and non-members 0, featurised via that shadow's own service."""
    space = space or HeomSpace.from_dataset(pool)
    records: list[AttackRecord] = []
    for s, (model, (mem, non)) in enumerate(zip(shadows, splits)):
        members = pool.select_ids(mem)
        service = MlaasService(model, members, ServiceConfig(cf_enabled=setting == "cf", reward=reward))
        for ids, bit in ((mem, 1), (non, 0)):
            part = pool.select_ids(ids)
            feats = phi_features(service, part.rows, space, setting)
            records.extend(AttackRecord(f, bit, s, int(r)) for f, r in zip(feats, part.row_ids))
    return records


def records_to_arrays(records: Sequence[AttackRecord]) -> tuple[np.ndarray, np.ndarray]:
    return np.array([r.features for r in records]), np.array([r.member for r in records], dtype=int)


def gbdt_attack(records: Sequence[AttackRecord], config: GbdtConfig | None = None) -> AttackModel:
    X, y = records_to_arrays(records)
    return gbdt_train(X, y, config)


def membership_metrics(truth, pred) -> dict:
    truth = np.asarray(truth, dtype=int)
    pred = np.asarray(pred, dtype=int)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    pos = int(truth.sum())
    out = {
        "accuracy": float(np.mean(pred == truth)),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / pos if pos else 0.0,
        "n_members": pos,
        "n_nonmembers": int(len(truth) - pos),
        "undefined_precision": tp + fp == 0 or pos == 0 or pos == len(truth),
    }
    return out


def attack_target(
    attack_model: AttackModel,
    service: MlaasService,
    eval_rows: np.ndarray,
    eval_ids: np.ndarray,
    is_member: np.ndarray,
    setting: str,
    space: HeomSpace,
    threshold: float = 0.5,
) -> tuple[dict, set[int]]:
    """Score evaluation points through the facade; returns (metrics, predicted member ids)."""
    feats = phi_features(service, eval_rows, space, setting)
    pred = (attack_model.predict_proba(feats) >= threshold).astype(int)
    metrics = membership_metrics(is_member, pred)
    return metrics, {int(i) for i in np.asarray(eval_ids)[pred == 1]}


@dataclass
class SuiteResult:
    reports: dict[str, AttackReport]
    predicted: dict[str, list[set[int]]]
    eval_ids: list[np.ndarray]


def run_attack_suite(
    service: MlaasService,
    pool: Dataset,
    eval_sets: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    shadow_config: ShadowConfig,
    gbdt_config: GbdtConfig | None = None,
    settings: Sequence[str] = SETTINGS,
    runs: int = 5,
    seed: int = 0,
    threshold: float = 0.5,
) -> SuiteResult:
    """Repeat shadow split -> shadow training -> attack fit -> evaluation ``runs`` times.

    ``eval_sets[r]`` is ``(rows, row_ids, is_member)`` for run ``r``; the
    shadows of a run are shared by both settings.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if len(eval_sets) < runs:
        raise ValueError("need one evaluation set per run")
    space = HeomSpace.from_dataset(pool)
    per_setting: dict[str, list[dict]] = {s: [] for s in settings}
    predicted: dict[str, list[set[int]]] = {s: [] for s in settings}
    for r in range(runs):
        cfg = replace(shadow_config, seed=int(seed) * 7919 + r)
        splits = build_shadow_splits(pool, cfg)
        shadows = train_shadows(pool, splits, cfg)
        rows, ids, truth = eval_sets[r]
        for setting in settings:
            records = assemble_attack_set(shadows, splits, pool, setting, space, cfg.reward)
            model = gbdt_attack(records, gbdt_config)
            metrics, s_hat = attack_target(model, service, rows, ids, truth, setting, space, threshold)
            per_setting[setting].append(metrics)
            predicted[setting].append(s_hat)
    reports = {s: AttackReport.from_runs(s, per_setting[s]) for s in settings}
    return SuiteResult(reports, predicted, [np.asarray(e[1]) for e in eval_sets[:runs]])


def write_records_csv(records: Sequence[AttackRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        n = len(records[0].features) if records else 0
        w.writerow([*(f"f{i}" for i in range(n)), "member", "source_shadow"])
        for r in records:
            w.writerow([*(repr(float(v)) for v in r.features), r.member, r.source_shadow])


def write_report_json(report: AttackReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))
