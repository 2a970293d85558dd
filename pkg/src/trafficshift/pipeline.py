"""Two-stage pipeline, grid search, ablations and the finetune baseline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import ScenarioSpec, WindowSet, fit_normalizer, make_windows, split_scenario, Normalizer
from .evaluation import MetricReport, VariantSpec, get_variant
from .ingestion import TrafficCube
from .models import build_geo_adjacency
from .reweight import (
    RECENT_WINDOW,
    WeightConfig,
    compute_weight,
    label_recency,
    normalize_weights,
    train_classifier,
    write_weights_csv,
)
from .training import (
    ALPHA_GRID,
    BETA_GRID,
    Batcher,
    Checkpoint,
    FitResult,
    TrainConfig,
    build_forecaster,
    config_dict,
    config_hash,
    deploy_predict,
    fit,
)

log = logging.getLogger(__name__)


@dataclass
class ScenarioData:
    spec: ScenarioSpec
    train: WindowSet
    val: WindowSet
    test: WindowSet
    normalizer: Normalizer
    geo_adj: np.ndarray

    @property
    def month0(self) -> int:
        """Global ordinal of the first training month (pool index 0)."""
        return self.spec.test_ordinal - self.spec.train_months

    @property
    def n_regions(self) -> int:
        return self.train.n_regions


def prepare_scenario(cube: TrafficCube, spec: ScenarioSpec) -> ScenarioData:
    windows = make_windows(cube, spec.t_in, spec.t_out)
    train, val, test = split_scenario(windows, spec)
    geo = build_geo_adjacency(cube.region_ids, cube.geometry)
    return ScenarioData(spec, train, val, test, fit_normalizer(train), geo)


@dataclass
class Stage1:
    delta: np.ndarray
    p: np.ndarray
    degenerate: bool

    def weights(self, beta: float, train_months: int) -> np.ndarray:
        raw = compute_weight(self.p, self.delta, WeightConfig(beta, train_months))
        return normalize_weights(raw).w


def recency_stage(data: ScenarioData, cfg: TrainConfig, seed: int) -> Stage1:
    """Train the recency classifier on training windows and cache p."""
    labels = label_recency(data.train.delta, RECENT_WINDOW)
    batcher = Batcher(data.train, data.normalizer, data.month0)
    clf = train_classifier(
        lambda idx: batcher(idx)[0], labels, data.geo_adj,
        epochs=cfg.classifier_epochs, lr=cfg.classifier_lr, batch_size=cfg.batch_size,
        seed=seed, halve_patience=cfg.halve_patience,
    )
    if clf.degenerate:
        log.info("recency classifier degenerate (single class); p = 1")
        p = np.ones(len(data.train))
    else:
        p = clf.predict_proba(lambda idx: batcher(idx)[0], len(data.train))
    return Stage1(data.train.delta.copy(), p, clf.degenerate)


@dataclass
class PipelineResult:
    checkpoint: Checkpoint
    fit: FitResult
    report: MetricReport
    stage1: Stage1 | None
    weights: np.ndarray | None


def two_stage_pipeline(
    data: ScenarioData,
    model: str,
    variant: VariantSpec | str,
    cfg: TrainConfig,
    *,
    seed: int | None = None,
    stage1: Stage1 | None = None,
    env: str | None = None,
    dynamic: bool | None = None,
    out_dir=None,
) -> PipelineResult:
    """Stage 1 caches recency weights; stage 2 trains the forecaster.

    ``env``/``dynamic`` override what the variant implies (used for the
    zero-feature equivalence check).
    """
    t0 = time.perf_counter()
    variant = get_variant(variant) if isinstance(variant, str) else variant
    seed = cfg.seed if seed is None else seed
    cfg = replace(cfg, seed=seed)
    delta_total = data.spec.train_months

    weights = None
    if variant.covariate:
        stage1 = stage1 if stage1 is not None else recency_stage(data, cfg, seed)
        weights = stage1.weights(cfg.beta, delta_total)
    else:
        stage1 = None

    env = env if env is not None else ("learned" if variant.concept else "off")
    dynamic = variant.concept if dynamic is None else dynamic
    fc = build_forecaster(model, data.n_regions, delta_total, data.geo_adj, env=env,
                          dynamic=dynamic, revin=variant.baseline == "revin", cfg=cfg, seed=seed)
    alpha = cfg.alpha if variant.regularizer else 0.0
    vrex = cfg.alpha if variant.baseline == "vrex" else 0.0

    lines = []
    result = fit(fc, data.train, data.val, data.normalizer, cfg, month0=data.month0,
                 weights=weights, alpha=alpha, vrex=vrex, on_epoch=lambda r: lines.append(r.line()))
    fc.load_state_dict(result.best_state)
    best_val, best_epoch = result.best_val_mae, result.best_epoch
    if variant.baseline == "finetune":
        ft = run_finetune(fc, data, cfg)
        lines.extend(r.line() for r in ft.history)
        result = FitResult(ft.best_state, ft.best_val_mae, ft.best_epoch, result.history + ft.history)
        best_val, best_epoch = ft.history[-1].val_mae, len(result.history)

    meta = {
        "model": model,
        "variant": variant.name,
        "n_regions": data.n_regions,
        "n_months": delta_total,
        "month0": data.month0,
        "env": env,
        "dynamic": fc.dynamic,
        "revin": variant.baseline == "revin",
        "env_dim": cfg.env_dim,
        "embed_dim": cfg.embed_dim,
        "hidden": cfg.hidden,
        "alpha": alpha,
        "beta": cfg.beta,
        "seed": seed,
        "scenario": data.spec.name,
        "geo_adj": data.geo_adj.tolist(),
    }
    chash = config_hash({"train": config_dict(cfg), "meta": {k: v for k, v in meta.items() if k != "geo_adj"}})
    ckpt = Checkpoint({k: v.clone() for k, v in fc.state_dict().items()}, data.normalizer,
                      best_val, best_epoch, chash, meta)
    pred = deploy_predict(ckpt, data.test)
    report = MetricReport.from_predictions(
        pred, data.test.y(), scenario=data.spec.name, train_months=delta_total, model=model,
        variant=variant.name, seed=seed, runtime_s=round(time.perf_counter() - t0, 3),
    )
    ckpt.metrics = {"val_mae": best_val, "test_mae": report.mae, "test_rmse": report.rmse}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "checkpoint")
        (out / "train.log").write_text(f"# config_hash={chash}\n" + "\n".join(lines) + "\n")
        if stage1 is not None:
            write_weights_csv(out / "weights.csv", stage1.delta, stage1.p, weights)
    return PipelineResult(ckpt, result, report, stage1, weights)


def train_vanilla(data: ScenarioData, model: str, cfg: TrainConfig, seed: int | None = None) -> FitResult:
    """Plain training: no environment, geographic adjacency, unit weights, no penalty."""
    seed = cfg.seed if seed is None else seed
    cfg = replace(cfg, seed=seed)
    fc = build_forecaster(model, data.n_regions, data.spec.train_months, data.geo_adj, cfg=cfg, seed=seed)
    return fit(fc, data.train, data.val, data.normalizer, cfg, month0=data.month0, alpha=0.0)


def run_finetune(forecaster, data: ScenarioData, cfg: TrainConfig, *, lr: float | None = None) -> FitResult:
    """Fixed-length finetune on training windows from the last 12 months.

    No weights, no regularizers and no early stopping; the returned state is
    the final one.
    """
    recent = data.train.subset(label_recency(data.train.delta, RECENT_WINDOW))
    result = fit(forecaster, recent, data.val, data.normalizer, cfg, month0=data.month0,
                 alpha=0.0, lr=cfg.finetune_lr if lr is None else lr,
                 epochs=cfg.finetune_epochs, early_stopping=False)
    final = {k: v.detach().clone() for k, v in forecaster.state_dict().items()}
    return FitResult(final, result.history[-1].val_mae, len(result.history), result.history)


@dataclass
class GridCell:
    alpha: float
    beta: float
    val_mae: float
    result: PipelineResult


def grid_search(
    data: ScenarioData,
    model: str,
    variant: VariantSpec | str,
    cfg: TrainConfig,
    *,
    alphas=ALPHA_GRID,
    betas=BETA_GRID,
    seed: int | None = None,
    out_dir=None,
) -> tuple[GridCell, list[GridCell]]:
    """Run every (alpha, beta) cell; best by validation MAE, ties to smaller alpha then beta."""
    variant = get_variant(variant) if isinstance(variant, str) else variant
    seed = cfg.seed if seed is None else seed
    stage1 = recency_stage(data, replace(cfg, seed=seed), seed) if variant.covariate else None
    cells = []
    for a in alphas:
        for b in betas:
            sub = None if out_dir is None else Path(out_dir) / f"alpha{a:g}_beta{b:g}"
            res = two_stage_pipeline(data, model, variant, replace(cfg, alpha=a, beta=b),
                                     seed=seed, stage1=stage1, out_dir=sub)
            cells.append(GridCell(a, b, res.checkpoint.best_val_mae, res))
    return select_best(cells), cells


def select_best(cells):
    return min(cells, key=lambda c: (c.val_mae, c.alpha, c.beta))


def run_ablation(data: ScenarioData, model: str, variants, cfg: TrainConfig, *, seed: int | None = None,
                 out_dir=None) -> list[MetricReport]:
    """One test report per variant, all under the same seed."""
    seed = cfg.seed if seed is None else seed
    reports = []
    stage1 = None
    for name in variants:
        variant = get_variant(name) if isinstance(name, str) else name
        if variant.covariate and stage1 is None:
            stage1 = recency_stage(data, replace(cfg, seed=seed), seed)
        sub = None if out_dir is None else Path(out_dir) / variant.name
        res = two_stage_pipeline(data, model, variant, cfg, seed=seed, stage1=stage1, out_dir=sub)
        reports.append(res.report)
    return reports
