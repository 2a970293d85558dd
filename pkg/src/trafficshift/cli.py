"""Command-line entry point: ingest, synth, train, evaluate, ablate, sweep.

Every command reads one JSON config (``--config``). Outputs are built in a
temporary sibling directory and renamed into place, so a failed run leaves
no partial results behind.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import fields, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .dataset import ScenarioSpec
from .errors import TrafficShiftError
from .evaluation import VARIANTS, MetricReport, get_variant, write_results
from .ingestion import (
    ChangePoint,
    GridSpec,
    SyntheticConfig,
    aggregate_trips,
    filter_regions,
    generate_synthetic,
    load_cube,
    read_trip_csv,
    save_cube,
)
from .models import MODELS
from .pipeline import grid_search, prepare_scenario, recency_stage, two_stage_pipeline
from .training import ALPHA_GRID, BETA_GRID, Checkpoint, TrainConfig, config_hash, deploy_predict

log = logging.getLogger("trafficshift")

COMMANDS = ("ingest", "synth", "train", "evaluate", "ablate", "sweep")
ABLATION_VARIANTS = ["full", "no_concept", "no_covariate", "no_regularizer", "original"]
TOP_KEYS = {"data", "scenario", "model", "variant", "variants", "train", "out", "seeds",
            "workers", "checkpoint", "alphas", "betas"}


class ConfigProblem(TrafficShiftError):
    """A config error tied to a line of the config file."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")


class Config:
    """Parsed config plus the raw text, kept for line-numbered errors."""

    def __init__(self, path, raw: dict, text: str):
        self.path = path
        self.raw = raw
        self.text = text

    def line_of(self, key: str | None) -> int:
        if key is None:
            return 1
        needle = f'"{key}"'
        for i, line in enumerate(self.text.splitlines(), start=1):
            if needle in line:
                return i
        return 1

    def fail(self, key, message):
        raise ConfigProblem(self.path, self.line_of(key), message)

    def get(self, key, default=None, required=False):
        if key not in self.raw:
            if required:
                self.fail(None, f"missing required key {key!r}")
            return default
        return self.raw[key]

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def load_config(path, seed=None, out=None) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigProblem(path, 0, f"cannot read config: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigProblem(path, exc.lineno, exc.msg) from None
    cfg = Config(path, raw, text)
    if not isinstance(raw, dict):
        cfg.fail(None, "config must be a JSON object")
    for key in raw:
        if key not in TOP_KEYS:
            cfg.fail(key, f"unknown key {key!r}")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        cfg.fail("seeds", "seeds must be a non-empty list of integers")
    if seed is not None:
        seeds = [seed] + seeds[1:]
    raw["seeds"] = seeds
    if out is not None:
        raw["out"] = str(out)
    return cfg


# --- config sections ------------------------------------------------------

def _dataclass_from(cfg: Config, section: str, cls, values: dict, convert=None):
    if not isinstance(values, dict):
        cfg.fail(section, f"{section!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            cfg.fail(key, f"unknown {section} key {key!r}")
    values = dict(values)
    if convert:
        values = convert(values)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        cfg.fail(section, f"invalid {section}: {exc}")


def train_config(cfg: Config) -> TrainConfig:
    return _dataclass_from(cfg, "train", TrainConfig, cfg.get("train", {}))


def scenario_spec(cfg: Config) -> ScenarioSpec:
    def convert(v):
        if "test_month" in v:
            v["test_month"] = tuple(v["test_month"])
        return v
    return _dataclass_from(cfg, "scenario", ScenarioSpec, cfg.get("scenario", required=True), convert)


def synthetic_config(cfg: Config, values: dict) -> SyntheticConfig:
    def convert(v):
        if "start" in v:
            v["start"] = tuple(v["start"])
        if v.get("mixing") is not None:
            v["mixing"] = np.asarray(v["mixing"], float)
        v["change_points"] = [
            ChangePoint(cp["month"], np.asarray(cp["mixing"], float), cp.get("offsets", 0.0))
            for cp in v.get("change_points", [])
        ]
        return v
    return _dataclass_from(cfg, "synthetic", SyntheticConfig, values, convert)


def _resolve(cfg: Config, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else (Path(cfg.path).parent / p)


def build_cube(cfg: Config):
    """Cube from the ``data`` section: a saved cube, a synthetic spec or a trip CSV."""
    data = cfg.get("data", required=True)
    if not isinstance(data, dict) or len(data) != 1:
        cfg.fail("data", "data needs exactly one of 'cube', 'synthetic', 'trips'")
    kind, values = next(iter(data.items()))
    if kind == "cube":
        path = _resolve(cfg, values)
        if not path.exists():
            cfg.fail("cube", f"cube directory {str(path)!r} does not exist")
        return load_cube(path), None
    if kind == "synthetic":
        return generate_synthetic(synthetic_config(cfg, values)), None
    if kind == "trips":
        return _ingest(cfg, values)
    cfg.fail("data", f"unknown data source {kind!r}")


def _ingest(cfg: Config, values: dict):
    for key in ("csv", "start", "end"):
        if key not in values:
            cfg.fail("trips", f"trips needs {key!r}")
    path = _resolve(cfg, values["csv"])
    if not path.exists():
        cfg.fail("csv", f"trip file {str(path)!r} does not exist")
    if "grid" in values:
        mapper = _dataclass_from(cfg, "grid", GridSpec, values["grid"])
    elif "zones" in values:
        mapper = {int(k): v for k, v in values["zones"].items()}
    else:
        cfg.fail("trips", "trips needs a 'grid' or a 'zones' mapping")
    frame = read_trip_csv(path)
    cube, tally = aggregate_trips(frame, mapper, datetime.fromisoformat(values["start"]),
                                  datetime.fromisoformat(values["end"]))
    cube, kept = filter_regions(cube, values.get("min_avg", 10.0))
    log.info("ingested %d trips; dropped %d pickups and %d dropoffs; kept %d regions",
             len(frame), tally.pickups, tally.dropoffs, len(kept))
    return cube, {"rows": len(frame), "dropped_pickups": tally.pickups,
                  "dropped_dropoffs": tally.dropoffs, "kept_regions": [str(k) for k in kept]}


def _model(cfg: Config) -> str:
    model = cfg.get("model", "gru_graph")
    if model not in MODELS:
        cfg.fail("model", f"unknown model {model!r}; choose from {sorted(MODELS)}")
    return model


def _variants(cfg: Config, key, default):
    names = cfg.get(key, default)
    names = [names] if isinstance(names, str) else names
    for name in names:
        if name not in VARIANTS:
            cfg.fail(key, f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return names


# --- atomic output --------------------------------------------------------

@contextmanager
def atomic_dir(target):
    """Yield a temp directory that replaces ``target`` only on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        old = target.with_name(f".{target.name}.old-{os.getpid()}")
        target.rename(old)
        tmp.rename(target)
        shutil.rmtree(old, ignore_errors=True)
    else:
        tmp.rename(target)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _out(cfg: Config) -> Path:
    return _resolve(cfg, cfg.get("out", required=True))


# --- commands -------------------------------------------------------------

def cmd_ingest(cfg: Config) -> Path:
    data = cfg.get("data", required=True)
    if "trips" not in data:
        cfg.fail("data", "ingest needs a 'trips' data source")
    cube, stats = _ingest(cfg, data["trips"])
    with atomic_dir(_out(cfg)) as tmp:
        save_cube(cube, tmp / "cube")
        _write_json(tmp / "ingest.json", {"config_hash": cfg.hash, **stats})
    return _out(cfg)


def cmd_synth(cfg: Config) -> Path:
    data = cfg.get("data", required=True)
    if "synthetic" not in data:
        cfg.fail("data", "synth needs a 'synthetic' data source")
    values = dict(data["synthetic"])
    values["seed"] = cfg.raw["seeds"][0]
    cube = generate_synthetic(synthetic_config(cfg, values))
    with atomic_dir(_out(cfg)) as tmp:
        save_cube(cube, tmp / "cube")
        _write_json(tmp / "synth.json", {"config_hash": cfg.hash, "seed": values["seed"]})
    return _out(cfg)


def _run_cell(args):
    """One pipeline run; top-level so process pools can pickle it."""
    data, model, variant, tcfg, seed, out_dir, stage1 = args
    return two_stage_pipeline(data, model, variant, tcfg, seed=seed, stage1=stage1, out_dir=out_dir).report


def _map(cfg: Config, jobs):
    workers = int(cfg.get("workers", 1))
    if workers <= 1 or len(jobs) <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


def _results(tmp, reports, cfg):
    write_results(reports, tmp / "results.csv", tmp / "results.json", config_hash=cfg.hash)
    _write_json(tmp / "config.json", {"config_hash": cfg.hash, "config": cfg.raw})


def cmd_train(cfg: Config) -> Path:
    cube, _ = build_cube(cfg)
    data = prepare_scenario(cube, scenario_spec(cfg))
    model, tcfg = _model(cfg), train_config(cfg)
    variant = _variants(cfg, "variant", "full")[0]
    with atomic_dir(_out(cfg)) as tmp:
        jobs = [(data, model, variant, tcfg, s, tmp / f"seed{s}", None) for s in cfg.raw["seeds"]]
        _results(tmp, _map(cfg, jobs), cfg)
    return _out(cfg)


def cmd_evaluate(cfg: Config) -> Path:
    cube, _ = build_cube(cfg)
    data = prepare_scenario(cube, scenario_spec(cfg))
    ckpt_dirs = cfg.get("checkpoint", required=True)
    ckpt_dirs = [ckpt_dirs] if isinstance(ckpt_dirs, str) else ckpt_dirs
    reports = []
    for d in ckpt_dirs:
        path = _resolve(cfg, d)
        if not (path / "manifest.json").exists():
            cfg.fail("checkpoint", f"no checkpoint at {str(path)!r}")
        ckpt = Checkpoint.load(path)
        meta = ckpt.meta
        pred = deploy_predict(ckpt, data.test)
        reports.append(MetricReport.from_predictions(
            pred, data.test.y(), scenario=data.spec.name, train_months=data.spec.train_months,
            model=meta["model"], variant=meta["variant"], seed=meta["seed"]))
    with atomic_dir(_out(cfg)) as tmp:
        _results(tmp, reports, cfg)
    return _out(cfg)


def cmd_ablate(cfg: Config) -> Path:
    cube, _ = build_cube(cfg)
    data = prepare_scenario(cube, scenario_spec(cfg))
    model, tcfg = _model(cfg), train_config(cfg)
    names = _variants(cfg, "variants", ABLATION_VARIANTS)
    with atomic_dir(_out(cfg)) as tmp:
        jobs = []
        for s in cfg.raw["seeds"]:
            needs = any(get_variant(n).covariate for n in names)
            stage1 = recency_stage(data, replace(tcfg, seed=s), s) if needs else None
            jobs += [(data, model, n, tcfg, s, tmp / f"seed{s}" / n, stage1) for n in names]
        _results(tmp, _map(cfg, jobs), cfg)
    return _out(cfg)


def cmd_sweep(cfg: Config) -> Path:
    cube, _ = build_cube(cfg)
    data = prepare_scenario(cube, scenario_spec(cfg))
    model, tcfg = _model(cfg), train_config(cfg)
    variant = _variants(cfg, "variant", "full")[0]
    alphas = tuple(cfg.get("alphas", ALPHA_GRID))
    betas = tuple(cfg.get("betas", BETA_GRID))
    with atomic_dir(_out(cfg)) as tmp:
        rows, best_rows = [], []
        for s in cfg.raw["seeds"]:
            best, cells = grid_search(data, model, variant, tcfg, alphas=alphas, betas=betas,
                                      seed=s, out_dir=tmp / f"seed{s}")
            for c in cells:
                rows.append({"seed": s, "alpha": c.alpha, "beta": c.beta, "val_mae": c.val_mae,
                             "test_mae": c.result.report.mae, "test_rmse": c.result.report.rmse,
                             "config_hash": cfg.hash})
            best_rows.append({"seed": s, "alpha": best.alpha, "beta": best.beta, "val_mae": best.val_mae,
                              "test_mae": best.result.report.mae})
        with open(tmp / "sweep.csv", "w", newline="") as fh:
            out = csv.DictWriter(fh, fieldnames=list(rows[0]))
            out.writeheader()
            out.writerows(rows)
        _write_json(tmp / "best.json", {"config_hash": cfg.hash, "best": best_rows})
        _write_json(tmp / "config.json", {"config_hash": cfg.hash, "config": cfg.raw})
    return _out(cfg)


HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficshift", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the first seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        out = HANDLERS[args.command](cfg)
    except ConfigProblem as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrafficShiftError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
