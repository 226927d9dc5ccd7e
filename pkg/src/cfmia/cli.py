"""Command line: prepare | run | serve | report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors are printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from . import __version__, data, nn, pipeline
from .facade import MlaasService, QueryResponse, ServiceConfig, serve_lines

SPLIT_FILES = {"target_train": "target_train.csv", "shadow_pool": "shadow_pool.csv", "validation": "validation.csv"}
PREP_MANIFEST = "prepare.json"
SCENARIO_ALIASES = {
    "baseline": "baseline",
    "only_al": "only_al", "onlyal": "only_al",
    "only_dp": "only_dp", "onlydp": "only_dp",
    "dp_post_al": "dp_post_al", "dppostal": "dp_post_al",
    "al_guided_dp": "al_guided_dp", "alguideddp": "al_guided_dp",
}


class UsageError(Exception):
    pass


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": message, "kind": kind}), file=sys.stderr)
    return code


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    data: str | None = None
    label: str | None = None
    splits: str | None = None
    preset: str = "eeg"
    scenarios: list[str] = field(default_factory=lambda: list(pipeline.KINDS))
    eps: list[float] = field(default_factory=lambda: list(pipeline.DEFAULT_EPS))
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/out"
    jobs: int = 1
    pipeline: pipeline.PipelineConfig = field(default_factory=pipeline.PipelineConfig)


_TOP_SECTIONS = {"data", "run", "pipeline", "mlp", "al", "shadow", "gbdt"}
_DATA_KEYS = {"path", "label", "splits"}
_RUN_KEYS = {"preset", "scenarios", "eps", "seeds", "out", "jobs"}
_PIPE_KEYS = {"delta", "clip_norm", "attack_runs", "threshold", "reward"}


def parse_scenarios(names) -> list[str]:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n.strip()]
    out = []
    for n in names:
        key = n.strip().lower().replace("-", "_")
        kind = SCENARIO_ALIASES.get(key) or SCENARIO_ALIASES.get(key.replace("_", ""))
        if kind is None:
            raise UsageError(f"unknown scenario {n!r}")
        out.append(kind)
    if not out:
        raise UsageError("no scenarios selected")
    return out


def _float_list(v) -> list[float]:
    items = v.split(",") if isinstance(v, str) else list(v)
    try:
        out = [float(x) for x in items if str(x).strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {v!r}") from exc
    if not out or any(not e > 0 for e in out):
        raise UsageError("epsilon values must be positive")
    return out


def _int_list(v) -> list[int]:
    items = v.split(",") if isinstance(v, str) else list(v)
    try:
        return [int(x) for x in items if str(x).strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer list {v!r}") from exc


def load_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed TOML document; unknown keys are rejected."""
    unknown = set(doc) - _TOP_SECTIONS
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    for section, allowed in (("data", _DATA_KEYS), ("run", _RUN_KEYS), ("pipeline", _PIPE_KEYS)):
        bad = set(doc.get(section, {})) - allowed
        if bad:
            raise UsageError(f"unknown keys in [{section}]: {sorted(bad)}")
    d, r, p = doc.get("data", {}), doc.get("run", {}), doc.get("pipeline", {})
    cfg = RunConfig(data=d.get("path"), label=d.get("label"), splits=d.get("splits"))
    if "preset" in r:
        cfg.preset = r["preset"]
    if "scenarios" in r:
        cfg.scenarios = parse_scenarios(r["scenarios"])
    if "eps" in r:
        cfg.eps = _float_list(r["eps"])
    if "seeds" in r:
        cfg.seeds = _int_list(r["seeds"])
    if "out" in r:
        cfg.out = str(r["out"])
    if "jobs" in r:
        cfg.jobs = int(r["jobs"])
    try:
        cfg.pipeline = pipeline.PipelineConfig(
            preset=cfg.preset, mlp=dict(doc.get("mlp", {})), al=dict(doc.get("al", {})),
            shadow=dict(doc.get("shadow", {})), gbdt=dict(doc.get("gbdt", {})), **p,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def read_config_file(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"bad TOML in {path}: {exc}") from exc
    return load_config(doc)


# -- prepare -----------------------------------------------------------------

def prepare_splits(raw: data.Dataset, out: Path, seed: int, source: dict) -> dict:
    clean, scaler = data.preprocess(raw)
    splits = data.split_45_45_10(clean, seed)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLIT_FILES, splits.parts()):
        data.write_dataset_csv(part, out / SPLIT_FILES[name])
    (out / "scaler.json").write_text(scaler.to_json())
    manifest = {
        "version": __version__,
        "seed": seed,
        "source": source,
        "rows_raw": len(raw),
        "rows_clean": len(clean),
        "num_classes": clean.num_classes,
        "dropped_features": list(clean.dropped_features),
        "schema": data.schema_to_json(clean.schema),
        "splits": {name: len(part) for name, part in zip(SPLIT_FILES, splits.parts())},
        "files": {name: _sha256(out / f) for name, f in SPLIT_FILES.items()},
    }
    (out / PREP_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_prepared(path) -> tuple[data.DataSplits, dict]:
    path = Path(path)
    mf = path / PREP_MANIFEST
    if not mf.exists():
        raise UsageError(f"no prepared splits at {path} (missing {PREP_MANIFEST})")
    manifest = json.loads(mf.read_text())
    schema = data.schema_from_json(manifest["schema"])
    parts = [data.read_dataset_csv(path / SPLIT_FILES[n], schema, manifest["num_classes"]) for n in SPLIT_FILES]
    return data.DataSplits(*parts), manifest


def cmd_prepare(args) -> int:
    out = Path(args.out)
    if args.surrogate:
        raw = data.make_surrogate(n=args.rows, seed=args.data_seed)
        source = {"kind": "surrogate", "rows": args.rows, "data_seed": args.data_seed}
    else:
        if not args.data or not args.label:
            raise UsageError("prepare needs --data and --label (or --surrogate)")
        path = Path(args.data)
        if not path.is_file():
            raise UsageError(f"data file not found: {path}")
        raw = data.load_csv(path, args.label)
        source = {"kind": "csv", "path": str(path), "label": args.label, "sha256": _sha256(path)}
    m = prepare_splits(raw, out, args.seed, source)
    print(f"prepared {m['rows_clean']} rows -> {out} " + " ".join(f"{k}={v}" for k, v in m["splits"].items()))
    return 0


# -- run ---------------------------------------------------------------------

def _run_config_from_args(args) -> RunConfig:
    cfg = read_config_file(args.config) if args.config else RunConfig()
    if args.preset:
        cfg.preset = args.preset
    if args.scenarios:
        cfg.scenarios = parse_scenarios(args.scenarios)
    if args.eps:
        cfg.eps = _float_list(args.eps)
    if args.seeds:
        cfg.seeds = _int_list(args.seeds)
    elif args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out = args.out
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.splits:
        cfg.splits = args.splits
    overrides = {}
    if args.attack_runs is not None:
        overrides["attack_runs"] = args.attack_runs
    try:
        cfg.pipeline = replace(cfg.pipeline, preset=cfg.preset, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return cfg


def cmd_run(args) -> int:
    cfg = _run_config_from_args(args)
    specs = pipeline.expand_grid(cfg.scenarios, cfg.eps, cfg.seeds)
    if args.dry_run:
        print(f"{len(specs)} job(s), preset={cfg.preset}, config_hash={cfg.pipeline.config_hash()[:12]}")
        for s in specs:
            print(f"  {s.label} seed={s.master_seed}")
        return 0
    if not cfg.splits:
        raise UsageError("no prepared splits; pass --splits DIR (output of 'prepare')")
    splits, prep = load_prepared(cfg.splits)
    dataset = prep.get("source", {}).get("kind", "unknown")
    specs = [replace(s, dataset=dataset) for s in specs]
    res = pipeline.run_grid(
        specs, splits, cfg.pipeline, cfg.out, jobs=cfg.jobs, echo=print,
        save_models=args.save_models, scaler_ref=str(Path(cfg.splits) / "scaler.json"),
    )
    for f in res.failures:
        print(json.dumps({"error": f["error"], "kind": "ScenarioError"}), file=sys.stderr)
    return 1 if res.failures else 0


# -- serve -------------------------------------------------------------------

class ScaledService:
    """Accepts raw-unit queries, answers with raw-unit counterfactuals."""

    def __init__(self, service: MlaasService, scaler: data.ScalerState, schema):
        self._service = service
        idx = [j for j, f in enumerate(schema) if f.name in scaler.mean]
        self._idx = np.array(idx, dtype=int)
        self._mean = np.array([scaler.mean[schema[j].name] for j in idx])
        self._std = np.array([scaler.std[schema[j].name] for j in idx])

    def query(self, x) -> QueryResponse:
        x = np.asarray(x, dtype=float).copy()
        if x.ndim != 1:
            raise ValueError("features must be a flat array")
        if len(x) == self._service.num_features:
            x[self._idx] = (x[self._idx] - self._mean) / self._std
        resp = self._service.query(x)
        if resp.counterfactual is not None:
            e = resp.counterfactual.explanation.copy()
            e[self._idx] = e[self._idx] * self._std + self._mean
            resp.counterfactual = replace(resp.counterfactual, explanation=e)
        return resp


def cmd_serve(args) -> int:
    for p in (args.checkpoint, args.reference):
        if not Path(p).exists():
            raise UsageError(f"not found: {p}")
    model, scaler_ref = nn.load_checkpoint(args.checkpoint)
    ref_dir = Path(args.reference)
    splits, _ = load_prepared(ref_dir)
    reference = splits.target_train
    if args.train_ids:
        ids = [int(t) for t in Path(args.train_ids).read_text().split()]
        reference = reference.select_ids(ids)
    service = MlaasService(model, reference, ServiceConfig(cf_enabled=not args.no_cf, query_budget=args.budget))
    scaler_path = args.scaler or scaler_ref or str(ref_dir / "scaler.json")
    front = service
    if not args.scaled_input:
        if not Path(scaler_path).exists():
            raise UsageError(f"scaler not found: {scaler_path} (or pass --scaled-input)")
        front = ScaledService(service, data.ScalerState.from_json(Path(scaler_path).read_text()), reference.schema)
    serve_lines(front, sys.stdin, sys.stdout)
    return 0


# -- report ------------------------------------------------------------------

def cmd_report(args) -> int:
    path = Path(args.bundle)
    if not (path / "manifest.json").exists():
        raise UsageError(f"not a report bundle: {path}")
    manifest, reports = pipeline.load_bundle(path)
    print(f"bundle {path}  version={manifest['version']}  config={manifest['config_hash'][:12]}  "
          f"seeds={manifest['seeds']}")
    for rep in reports:
        print(pipeline.summary_line(rep))
    fails = path / "failures.json"
    if fails.exists():
        for f in json.loads(fails.read_text()):
            print(f"FAILED {f['scenario']} eps={f['epsilon']} seed={f['master_seed']}: {f['error']}")
    return 0


# -- entry point -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cfmia", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="clean, scale and split a CSV dataset")
    p.add_argument("--data")
    p.add_argument("--label")
    p.add_argument("--surrogate", action="store_true", help="use the synthetic two-class surrogate")
    p.add_argument("--rows", type=int, default=5000)
    p.add_argument("--data-seed", type=int, default=0, help="surrogate generator seed (splits use --seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="run a scenario grid and write a report bundle")
    p.add_argument("--config")
    p.add_argument("--splits", help="directory written by 'prepare'")
    p.add_argument("--preset", choices=sorted(nn.PRESETS) + ["custom"])
    p.add_argument("--scenarios")
    p.add_argument("--eps")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--attack-runs", type=int)
    p.add_argument("--save-models", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="answer JSON-lines queries on stdin")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True, help="prepared split directory")
    p.add_argument("--train-ids", help="restrict the reference set to these row ids")
    p.add_argument("--scaler")
    p.add_argument("--scaled-input", action="store_true",
                   help="requests are already standardised (same units as the split files)")
    p.add_argument("--no-cf", action="store_true")
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="pretty-print a report bundle")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(2, "UsageError", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(2, "UsageError", str(exc))
    except data.SchemaError as exc:
        return _fail(2, "SchemaError", str(exc))
    except data.ParseError as exc:
        return _fail(2, "ParseError", str(exc))
    except (data.DataError, ValueError, RuntimeError, OSError) as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
