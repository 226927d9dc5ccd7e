"""Scenario orchestration: train a target per scenario, attack it, score exposure."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import __version__, active, attack, dp, nn
from .counterfactual import HeomSpace, NiceExplainer, cf_quality
from .data import DataSplits, Dataset
from .facade import MlaasService, ServiceConfig
from .gbdt import GbdtConfig
from .metrics import ExposureInput, exposure_summary

logger = logging.getLogger(__name__)

KINDS = ("baseline", "only_al", "only_dp", "dp_post_al", "al_guided_dp")
DP_KINDS = ("only_dp", "dp_post_al", "al_guided_dp")
AL_KINDS = ("only_al", "dp_post_al", "al_guided_dp")
DEFAULT_EPS = (1.0, 3.0, 5.0, 10.0)


class ScenarioError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    epsilon: float | None = None
    dataset: str = "surrogate"
    master_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in DP_KINDS and (self.epsilon is None or not self.epsilon > 0):
            raise ValueError(f"{self.kind} needs a positive epsilon")
        if self.kind not in DP_KINDS and self.epsilon is not None:
            raise ValueError(f"{self.kind} is trained without DP and takes no epsilon")

    @property
    def eps_tag(self) -> str:
        return "na" if self.epsilon is None else f"{self.epsilon:g}"

    @property
    def label(self) -> str:
        return f"{self.kind}_{self.eps_tag}"


def expand_grid(kinds: Sequence[str], eps: Sequence[float] = DEFAULT_EPS, seeds: Sequence[int] = (0,),
                dataset: str = "surrogate") -> list[ScenarioSpec]:
    """One spec per (seed, kind, eps); non-DP kinds ignore the eps list."""
    out = []
    for s in seeds:
        for k in kinds:
            for e in (eps if k in DP_KINDS else (None,)):
                out.append(ScenarioSpec(k, None if e is None else float(e), dataset, int(s)))
    return out


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")


@dataclass
class PipelineConfig:
    preset: str = "eeg"
    mlp: dict = field(default_factory=dict)  # overrides on top of the preset
    delta: float = 1e-5
    clip_norm: float = 1.5
    al: dict = field(default_factory=dict)
    shadow: dict = field(default_factory=dict)
    gbdt: dict = field(default_factory=dict)
    attack_runs: int = 5
    threshold: float = 0.5
    reward: str = "proximity"

    def __post_init__(self):
        if self.preset not in nn.PRESETS and self.preset != "custom":
            raise ValueError(f"unknown preset {self.preset!r}")
        _check_keys("mlp", self.mlp, {f.name for f in fields(nn.MlpConfig)} - {"input_dim", "num_classes", "seed"})
        _check_keys("al", self.al, {"initial_fraction", "batch_per_iter", "max_iters", "acquisition"})
        _check_keys("shadow", self.shadow, {"num_shadows", "member_fraction", "shadow_size"})
        _check_keys("gbdt", self.gbdt, {f.name for f in fields(GbdtConfig)})
        if self.attack_runs < 1:
            raise ValueError("attack_runs must be >= 1")
        if not 0 < self.delta < 1 or self.clip_norm <= 0:
            raise ValueError("delta must lie in (0, 1) and clip_norm be positive")
        # fail on bad values now rather than mid-grid
        self.gbdt_config()
        active.AlConfig(**self.al)

    def mlp_config(self, input_dim: int, num_classes: int, seed: int) -> nn.MlpConfig:
        overrides = dict(self.mlp)
        if "layer_widths" in overrides:
            overrides["layer_widths"] = tuple(overrides["layer_widths"])
        if self.preset == "custom":
            return nn.MlpConfig(input_dim=input_dim, num_classes=num_classes, seed=seed, **overrides)
        base = nn.PRESETS[self.preset](input_dim=input_dim, num_classes=num_classes, seed=seed)
        return replace(base, **overrides)

    def budget(self, eps: float) -> dp.DpBudget:
        return dp.DpBudget(eps, delta=self.delta, clip_norm=self.clip_norm)

    def al_config(self, seed: int, budget: dp.DpBudget | None = None) -> active.AlConfig:
        trainer = "standard" if budget is None else "dp"
        return active.AlConfig(**self.al, trainer=trainer, budget=budget, seed=seed)

    def gbdt_config(self) -> GbdtConfig:
        return GbdtConfig(**self.gbdt)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_ATTACK_SCHEMA = {
    "type": "object",
    "required": ["setting", "accuracy", "precision", "recall", "per_run", "feature_layout_version"],
    "properties": {
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
    },
}
_PRIVACY_SCHEMA = {
    "type": "object",
    "required": ["micro_defended", "macro_defended"],
    "properties": {
        "micro_defended": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_defended": {"type": "number", "minimum": 0, "maximum": 1},
    },
}
_SKIPPED = {"type": "object", "required": ["skipped"], "properties": {"skipped": {"type": "string"}}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["spec", "model_metrics", "train_subset_fraction", "attack", "privacy",
                 "cf_quality", "realized_epsilon", "timings", "version"],
    "properties": {
        "spec": {
            "type": "object",
            "required": ["kind", "epsilon", "dataset", "master_seed"],
            "properties": {
                "kind": {"enum": list(KINDS)},
                "epsilon": {"type": ["number", "null"]},
                "dataset": {"type": "string"},
                "master_seed": {"type": "integer"},
            },
        },
        "model_metrics": {
            "type": "object",
            "required": ["accuracy", "precision", "recall"],
        },
        "train_subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "attack": {
            "type": "object",
            "required": list(attack.SETTINGS),
            "additionalProperties": {"anyOf": [_ATTACK_SCHEMA, _SKIPPED]},
        },
        "privacy": {
            "type": "object",
            "required": list(attack.SETTINGS),
            "additionalProperties": {"anyOf": [_PRIVACY_SCHEMA, _SKIPPED]},
        },
        "cf_quality": {"anyOf": [{"type": "object", "required": ["avg_proximity", "validity"]}, _SKIPPED]},
        "realized_epsilon": {"type": ["number", "null"]},
        "al": {"type": ["object", "null"]},
        "timings": {"type": "object"},
        "version": {"type": "string"},
    },
}


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def _holdout(splits: DataSplits, trained_ids: set[int]) -> Dataset:
    """Records the target never saw: unused train-pool rows, validation, shadow pool."""
    tt = splits.target_train
    unused = tt.subset(~np.isin(tt.row_ids, list(trained_ids)))
    parts = [unused, splits.validation, splits.shadow_pool]
    return Dataset(
        tt.schema,
        np.vstack([p.rows for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.row_ids for p in parts]),
        tt.num_classes,
    )


def eval_sets(splits: DataSplits, trained_ids: set[int], runs: int, seed: int):
    """Per run: every member of S plus an equal-size random draw of non-members."""
    members = splits.target_train.select_ids(trained_ids)
    hold = _holdout(splits, trained_ids)
    k = min(len(members), len(hold))
    out = []
    for r in range(runs):
        pick = np.random.default_rng([seed, 11, r]).choice(len(hold), size=k, replace=False)
        rows = np.vstack([members.rows, hold.rows[pick]])
        ids = np.concatenate([members.row_ids, hold.row_ids[pick]])
        truth = np.concatenate([np.ones(len(members), dtype=int), np.zeros(k, dtype=int)])
        out.append((rows, ids, truth))
    return out


def _train_target(spec: ScenarioSpec, splits: DataSplits, config: PipelineConfig, cache: dict):
    """Returns (model, trained ids, realized eps, al summary)."""
    tt, valid = splits.target_train, splits.validation
    mlp = config.mlp_config(tt.n_features, tt.num_classes, spec.master_seed)
    seed = spec.master_seed

    def standard_al():
        key = ("al", seed)
        if key not in cache:
            cache[key] = active.run_al(config.al_config(seed), mlp, tt, valid)
        return cache[key]

    def al_summary(trace: active.AlTrace) -> dict:
        best = trace.records[trace.best_iteration]
        return {
            "iterations": len(trace.records),
            "best_iteration": trace.best_iteration,
            "best_labeled_count": best["labeled_count"],
            "best_validation_accuracy": best["validation_accuracy"],
            "caveats": list(trace.caveats),
        }

    all_ids = {int(i) for i in tt.row_ids}
    if spec.kind == "baseline":
        model, _ = nn.train(mlp, tt, valid)
        return model, all_ids, None, None
    if spec.kind == "only_dp":
        model, eps, _ = dp.train_dp(mlp, config.budget(spec.epsilon), tt, valid)
        return model, all_ids, eps, None
    if spec.kind == "only_al":
        model, trace = standard_al()
        return model, set(trace.best_dataset_row_ids), None, al_summary(trace)
    if spec.kind == "dp_post_al":
        _, trace = standard_al()
        ids = set(trace.best_dataset_row_ids)
        model, eps, _ = dp.train_dp(mlp, config.budget(spec.epsilon), tt.select_ids(ids), valid)
        return model, ids, eps, al_summary(trace)
    # al_guided_dp
    model, trace = active.run_al(config.al_config(seed, config.budget(spec.epsilon)), mlp, tt, valid)
    eps = trace.records[trace.best_iteration].get("realized_epsilon")
    return model, set(trace.best_dataset_row_ids), eps, al_summary(trace)


def _finite_or_none(v):
    return None if v is None or not np.isfinite(v) else float(v)


def run_scenario(spec: ScenarioSpec, splits: DataSplits, config: PipelineConfig | None = None,
                 cache: dict | None = None, model_sink=None) -> dict:
    """Train, explain, attack and score one scenario; returns a schema-valid report dict.

    ``model_sink(spec, model, trained_ids)`` is called once the target is trained.
    """
    config = config or PipelineConfig()
    cache = {} if cache is None else cache
    try:
        return _run_scenario(spec, splits, config, cache, model_sink)
    except Exception as exc:
        raise ScenarioError(f"{spec.label} (seed {spec.master_seed}): {type(exc).__name__}: {exc}") from exc


def _run_scenario(spec, splits, config, cache, model_sink) -> dict:
    t0 = time.perf_counter()
    timings = {}
    tt = splits.target_train
    model, trained_ids, eps, al_info = _train_target(spec, splits, config, cache)
    if model_sink is not None:
        model_sink(spec, model, trained_ids)
    timings["train_s"] = time.perf_counter() - t0
    reference = tt.select_ids(trained_ids)
    model_metrics = nn.evaluate(model, splits.validation)
    model_metrics = {
        "accuracy": model_metrics["accuracy"],
        "precision": model_metrics["macro_precision"],
        "recall": model_metrics["macro_recall"],
    }

    t = time.perf_counter()
    explainer = NiceExplainer(model, HeomSpace.from_dataset(reference), reference, config.reward)
    cfs = [c for c in explainer.explain_batch(splits.validation.rows) if c is not None]
    quality = cf_quality(cfs) if cfs else {"skipped": "no counterfactual found for any validation row"}
    if cfs:
        quality["coverage"] = len(cfs) / len(splits.validation)
    timings["cf_quality_s"] = time.perf_counter() - t

    t = time.perf_counter()
    service = MlaasService(model, reference, ServiceConfig(cf_enabled=True, reward=config.reward))
    shadow_arch = config.mlp_config(tt.n_features, tt.num_classes, spec.master_seed)
    shadow_cfg = attack.ShadowConfig(shadow_arch=shadow_arch, seed=spec.master_seed, reward=config.reward,
                                     **config.shadow)
    runs = config.attack_runs
    suite = attack.run_attack_suite(
        service, splits.shadow_pool, eval_sets(splits, trained_ids, runs, spec.master_seed),
        shadow_cfg, config.gbdt_config(), runs=runs, seed=spec.master_seed, threshold=config.threshold,
    )
    timings["attack_s"] = time.perf_counter() - t

    all_ids = [int(i) for i in tt.row_ids]
    privacy = {}
    for setting in attack.SETTINGS:
        per_run = []
        for s_hat in suite.predicted[setting]:
            inp = ExposureInput(all_ids, trained_ids, set(s_hat) & set(all_ids))
            per_run.append(exposure_summary(inp))
        privacy[setting] = {
            "micro_defended": float(np.mean([p["micro_defended"] for p in per_run])),
            "macro_defended": float(np.mean([p["macro_defended"] for p in per_run])),
            "per_run": per_run,
        }
    timings["total_s"] = time.perf_counter() - t0

    report = {
        "spec": asdict(spec),
        "model_metrics": model_metrics,
        "train_subset_fraction": len(trained_ids) / len(tt),
        "n_trained": len(trained_ids),
        "attack": {s: r.to_dict() for s, r in suite.reports.items()},
        "privacy": privacy,
        "cf_quality": quality,
        "realized_epsilon": _finite_or_none(eps),
        "al": al_info,
        "timings": timings,
        "version": __version__,
    }
    validate_report(report)
    return report


COMPARISON_COLUMNS = (
    "scenario", "epsilon", "setting", "master_seed", "model_accuracy", "train_subset_fraction",
    "attack_accuracy", "attack_precision", "attack_recall", "micro_defended", "macro_defended",
    "realized_epsilon",
)


def comparison_rows(reports: Sequence[dict]) -> list[dict]:
    rows = []
    for rep in reports:
        spec = rep["spec"]
        for setting in attack.SETTINGS:
            a, p = rep["attack"][setting], rep["privacy"][setting]
            rows.append({
                "scenario": spec["kind"],
                "epsilon": "" if spec["epsilon"] is None else repr(spec["epsilon"]),
                "setting": setting,
                "master_seed": spec["master_seed"],
                "model_accuracy": repr(rep["model_metrics"]["accuracy"]),
                "train_subset_fraction": repr(rep["train_subset_fraction"]),
                "attack_accuracy": repr(a["accuracy"]),
                "attack_precision": repr(a["precision"]),
                "attack_recall": repr(a["recall"]),
                "micro_defended": repr(p["micro_defended"]),
                "macro_defended": repr(p["macro_defended"]),
                "realized_epsilon": "" if rep["realized_epsilon"] is None else repr(rep["realized_epsilon"]),
            })
    return rows


def comparison_csv(reports: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(comparison_rows(reports))
    return buf.getvalue()


def report_filename(spec: ScenarioSpec, multi_seed: bool) -> str:
    return f"{spec.label}_seed{spec.master_seed}.json" if multi_seed else f"{spec.label}.json"


def summary_line(rep: dict) -> str:
    spec, a, p = rep["spec"], rep["attack"], rep["privacy"]
    eps = "-" if spec["epsilon"] is None else f"{spec['epsilon']:g}"
    return (
        f"{spec['kind']:<13} eps={eps:<4} seed={spec['master_seed']} acc={rep['model_metrics']['accuracy']:.4f} "
        f"attack no_cf={a['no_cf']['accuracy']:.4f} cf={a['cf']['accuracy']:.4f} "
        f"micro no_cf={p['no_cf']['micro_defended']:.4f} cf={p['cf']['micro_defended']:.4f} "
        f"macro no_cf={p['no_cf']['macro_defended']:.4f} cf={p['cf']['macro_defended']:.4f}"
    )


class CheckpointSink:
    """Writes ``<label>.ckpt.json`` and ``<label>.train_ids.txt`` next to the reports."""

    def __init__(self, out_dir, multi_seed: bool, scaler_ref: str | None = None):
        self.out_dir = Path(out_dir)
        self.multi_seed = multi_seed
        self.scaler_ref = scaler_ref

    def __call__(self, spec: ScenarioSpec, model, trained_ids) -> None:
        stem = report_filename(spec, self.multi_seed)[: -len(".json")]
        nn.save_checkpoint(model, self.out_dir / f"{stem}.ckpt.json", self.scaler_ref)
        (self.out_dir / f"{stem}.train_ids.txt").write_text("".join(f"{i}\n" for i in sorted(trained_ids)))


def _job(args):
    spec, splits, config, sink = args
    try:
        return spec, run_scenario(spec, splits, config, model_sink=sink), None
    except ScenarioError as exc:
        return spec, None, str(exc)


@dataclass
class GridResult:
    reports: list[dict]
    failures: list[dict]
    out_dir: Path | None = None


def run_grid(specs: Sequence[ScenarioSpec], splits: DataSplits, config: PipelineConfig | None = None,
             out_dir=None, jobs: int = 1, echo=None, save_models: bool = False,
             scaler_ref: str | None = None) -> GridResult:
    """Run every spec, write the bundle (if ``out_dir``) and collect failures instead of aborting.

    With ``jobs == 1`` the active-learning run is shared between scenarios of
    the same seed; worker processes each recompute it, with identical results.
    """
    if not specs:
        raise ValueError("no scenarios to run")
    config = config or PipelineConfig()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    multi_seed = len({s.master_seed for s in specs}) > 1
    sink = CheckpointSink(out, multi_seed, scaler_ref) if save_models and out is not None else None
    reports, failures = [], []

    def collect(spec, rep, err):
        if err is not None:
            logger.error("scenario failed: %s", err)
            failures.append({"scenario": spec.kind, "epsilon": spec.epsilon, "master_seed": spec.master_seed,
                             "error": err})
            return
        reports.append(rep)
        if out is not None:
            (out / report_filename(spec, multi_seed)).write_text(json.dumps(rep, indent=2, sort_keys=True))
        if echo is not None:
            echo(summary_line(rep))

    if jobs <= 1:
        cache: dict = {}
        for spec in specs:
            try:
                collect(spec, run_scenario(spec, splits, config, cache, sink), None)
            except ScenarioError as exc:
                collect(spec, None, str(exc))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for spec, rep, err in pool.map(_job, [(s, splits, config, sink) for s in specs]):
                collect(spec, rep, err)

    if out is not None:
        (out / "comparison.csv").write_text(comparison_csv(reports))
        manifest = {
            "version": __version__,
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
            "seeds": sorted({s.master_seed for s in specs}),
            "scenarios": [{"kind": s.kind, "epsilon": s.epsilon, "master_seed": s.master_seed,
                           "file": report_filename(s, multi_seed)} for s in specs],
            "n_failed": len(failures),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if failures:
            (out / "failures.json").write_text(json.dumps(failures, indent=2))
    return GridResult(reports, failures, out)


def load_bundle(path) -> tuple[dict, list[dict]]:
    """(manifest, reports present on disk) for a bundle directory."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    reports = []
    for entry in manifest["scenarios"]:
        f = path / entry["file"]
        if f.exists():
            reports.append(json.loads(f.read_text()))
    return manifest, reports
