"""Weighted, regularised training loop, plateau schedule and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .dataset import Normalizer, WindowSet
from .envpool import EnvFeaturePool, NodeEmbeddingPool, inject_env
from .errors import NumericError
from .evaluation import revin_wrap, vrex_penalty
from .models import build_model

log = logging.getLogger(__name__)

ALPHA_GRID = (0.1, 1.0, 10.0)
BETA_GRID = (0.1, 1.0, 10.0)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 0.005
    max_epochs: int = 100
    halve_patience: int = 5
    stop_patience: int = 10
    batch_size: int = 64
    seed: int = 0
    env_dim: int = 4
    embed_dim: int = 4
    hidden: int = 32
    finetune_epochs: int = 20
    finetune_lr: float = 1e-4
    classifier_epochs: int = 10
    classifier_lr: float = 1e-3
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.stop_patience < self.halve_patience:
            raise ValueError("stop_patience must be >= halve_patience")
        for name in ("learning_rate", "max_epochs", "halve_patience", "stop_patience", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- losses ----------------------------------------------------------------

@dataclass
class LossBreakdown:
    weighted_data_loss: float
    l1: float
    l2: float
    total: float


def weighted_data_loss(pred, target, w=None):
    """Batch mean of ``w_b * mean_{region,channel} |pred_b - target_b|``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    per_sample = (pred - target).abs().flatten(1).mean(dim=1)
    if w is None:
        w = torch.ones_like(per_sample)
    elif w.shape != per_sample.shape:
        raise ValueError("one weight per sample expected")
    return (w * per_sample).mean()


def total_loss(data, l1, l2, alpha) -> LossBreakdown:
    return LossBreakdown(data, l1, l2, data + alpha * (l1 + l2))


# --- schedule -------------------------------------------------------------

@dataclass
class ScheduleStep:
    improved: bool
    halve: bool
    stop: bool


@dataclass
class PlateauSchedule:
    """Halve after ``halve_patience`` non-improving epochs, stop after ``stop_patience``.

    Improvement means beating the best value by at least ``min_delta``.
    The halving counter restarts after each halving; stopping wins over
    halving on the same epoch.
    """

    halve_patience: int = 5
    stop_patience: int = 10
    min_delta: float = 1e-6
    best: float = float("inf")
    bad_epochs: int = 0
    since_halve: int = 0

    def step(self, value: float) -> ScheduleStep:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = self.since_halve = 0
            return ScheduleStep(True, False, False)
        self.bad_epochs += 1
        self.since_halve += 1
        if self.bad_epochs >= self.stop_patience:
            return ScheduleStep(False, False, True)
        if self.since_halve >= self.halve_patience:
            self.since_halve = 0
            return ScheduleStep(False, True, False)
        return ScheduleStep(False, False, False)


def schedule_trace(values, halve_patience=5, stop_patience=10, max_epochs=100, lr=0.005):
    """Replay a validation curve: (epochs run, lr per epoch, halving epochs)."""
    sched = PlateauSchedule(halve_patience, stop_patience)
    lrs, halved = [], []
    for epoch, v in enumerate(values[:max_epochs], start=1):
        lrs.append(lr)
        step = sched.step(v)
        if step.halve:
            lr /= 2
            halved.append(epoch)
        if step.stop:
            break
    return len(lrs), lrs, halved


# --- forecaster -----------------------------------------------------------

class Forecaster(nn.Module):
    """A predictor plus the environment machinery feeding it.

    ``env`` is "learned" (feature pool), "zero" (zero slices, no parameters)
    or "off". With ``dynamic`` the adjacency comes from the per-month node
    embeddings, otherwise the fixed geographic one is used.
    """

    def __init__(self, predictor, n_regions, n_months, geo_adj, env="off", dynamic=False,
                 env_dim=4, embed_dim=4):
        super().__init__()
        if env not in ("learned", "zero", "off"):
            raise ValueError(f"unknown env mode {env!r}")
        self.predictor = predictor
        self.env = env
        self.env_dim = env_dim
        self.dynamic = bool(dynamic and predictor.uses_dynamic_adjacency)
        self.env_pool = EnvFeaturePool(n_regions, n_months, env_dim) if env == "learned" else None
        self.node_pool = NodeEmbeddingPool(n_regions, n_months, embed_dim) if self.dynamic else None
        self.register_buffer("geo_adj", torch.as_tensor(np.asarray(geo_adj), dtype=torch.float32))

    def forward(self, x, env_index):
        if self.env == "learned":
            x = inject_env(x, self.env_pool.lookup(env_index))
        elif self.env == "zero":
            x = inject_env(x, x.new_zeros(*x.shape[:-2], self.env_dim))
        adj = self.node_pool.adjacency(env_index) if self.dynamic else self.geo_adj
        return self.predictor(x, adj)

    def regularizers(self):
        zero = self.geo_adj.new_zeros(())
        l1 = self.env_pool.tv() if self.env_pool is not None else zero
        l2 = self.node_pool.tv() if self.node_pool is not None else zero
        return l1, l2


def build_forecaster(model: str, n_regions: int, n_months: int, geo_adj, *, env="off",
                     dynamic=False, revin=False, cfg: TrainConfig | None = None, seed: int = 0):
    cfg = cfg or TrainConfig()
    torch.manual_seed(seed)
    predictor = build_model(model, hidden=cfg.hidden)
    if revin:
        predictor = revin_wrap(predictor)
    return Forecaster(predictor, n_regions, n_months, geo_adj, env=env, dynamic=dynamic,
                      env_dim=cfg.env_dim, embed_dim=cfg.embed_dim)


# --- batches --------------------------------------------------------------

class Batcher:
    """Gathers normalised [B, n, t, 2] inputs and [B, n, 1, 2] targets."""

    def __init__(self, windows: WindowSet, normalizer: Normalizer, month0: int):
        self.series = torch.as_tensor(normalizer.apply_series(windows.series), dtype=torch.float32)
        self.target = torch.as_tensor(windows.target_index, dtype=torch.long)
        self.env = torch.as_tensor(windows.env_month - month0, dtype=torch.long)
        self.offsets = torch.arange(-windows.t_in, 0)

    def __len__(self):
        return len(self.target)

    def __call__(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        t = self.target[idx]
        x = self.series[t[:, None] + self.offsets].permute(0, 2, 1, 3)
        y = self.series[t].unsqueeze(-2)
        return x, y, self.env[idx]


def predict(forecaster: Forecaster, windows: WindowSet, normalizer: Normalizer, month0: int,
            batch_size: int = 1024) -> np.ndarray:
    """Forecasts in original units, [S, n, 1, 2]."""
    batcher = Batcher(windows, normalizer, month0)
    forecaster.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(batcher), batch_size):
            x, _, e = batcher(np.arange(i, min(i + batch_size, len(batcher))))
            out.append(forecaster(x, e).double().numpy())
    pred = np.concatenate(out) if out else np.zeros((0, windows.n_regions, 1, 2))
    return normalizer.invert(pred)


def validation_mae(forecaster, windows, normalizer, month0) -> float:
    pred = predict(forecaster, windows, normalizer, month0)
    return float(np.mean(np.abs(pred - windows.y())))


# --- fit ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    data: float
    l1: float
    l2: float
    total: float
    val_mae: float

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.6g} data={self.data:.6f} l1={self.l1:.6f} "
                f"l2={self.l2:.6f} total={self.total:.6f} val_mae={self.val_mae:.6f}")


@dataclass
class FitResult:
    best_state: dict
    best_val_mae: float
    best_epoch: int
    history: list = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def fit(
    forecaster: Forecaster,
    train: WindowSet,
    val: WindowSet,
    normalizer: Normalizer,
    cfg: TrainConfig,
    *,
    month0: int,
    weights=None,
    alpha: float | None = None,
    vrex: float = 0.0,
    lr: float | None = None,
    epochs: int | None = None,
    early_stopping: bool = True,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """Adam over model and pool parameters with the plateau schedule.

    Validation MAE is unweighted, unregularised and in original units; the
    returned state is the best one seen on validation.
    """
    alpha = cfg.alpha if alpha is None else alpha
    lr = cfg.learning_rate if lr is None else lr
    epochs = cfg.max_epochs if epochs is None else epochs
    batcher = Batcher(train, normalizer, month0)
    w_all = None if weights is None else torch.as_tensor(np.asarray(weights), dtype=torch.float32)
    opt = torch.optim.Adam(forecaster.parameters(), lr=lr)
    schedule = PlateauSchedule(cfg.halve_patience, cfg.stop_patience, cfg.min_delta)
    rng = np.random.default_rng(cfg.seed)

    best_state = _state_copy(forecaster)
    best_val, best_epoch = float("inf"), 0
    history = []
    for epoch in range(1, epochs + 1):
        forecaster.train()
        order = rng.permutation(len(batcher))
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y, e = batcher(idx)
            pred = forecaster(x, e)
            w = None if w_all is None else w_all[idx]
            data = weighted_data_loss(pred, y, w)
            l1, l2 = forecaster.regularizers()
            parts = total_loss(data, l1, l2, alpha)
            loss = parts.total
            if vrex:
                per_sample = (pred - y).abs().flatten(1).mean(dim=1)
                months = torch.unique(e)
                month_losses = torch.stack([per_sample[e == m].mean() for m in months])
                loss = loss + vrex * vrex_penalty(month_losses)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                                   f"data={data.item()} l1={l1.item()} l2={l2.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [data.item(), l1.item(), l2.item(), loss.item()]
            n_batches += 1
        means = sums / max(n_batches, 1)
        val_mae = validation_mae(forecaster, val, normalizer, month0)
        rec = EpochRecord(epoch, opt.param_groups[0]["lr"], *means, val_mae)
        history.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if val_mae < best_val:
            best_val, best_epoch = val_mae, epoch
            best_state = _state_copy(forecaster)
        if not early_stopping:
            continue
        step = schedule.step(val_mae)
        if step.stop:
            break
        if step.halve:
            for group in opt.param_groups:
                group["lr"] /= 2
    return FitResult(best_state, best_val, best_epoch, history)


def _state_copy(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


# --- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained forecaster.

    ``meta`` carries the model name, region/month counts, env mode, dynamic
    flag, revin flag, month0 and the geographic adjacency.
    """

    state: dict
    normalizer: Normalizer
    best_val_mae: float
    epoch: int
    config_hash: str
    meta: dict
    metrics: dict = field(default_factory=dict)

    def build(self, cfg: TrainConfig | None = None) -> Forecaster:
        m = self.meta
        cfg = cfg or TrainConfig(env_dim=m["env_dim"], embed_dim=m["embed_dim"], hidden=m["hidden"])
        fc = build_forecaster(m["model"], m["n_regions"], m["n_months"], np.asarray(m["geo_adj"]),
                              env=m["env"], dynamic=m["dynamic"], revin=m["revin"], cfg=cfg)
        fc.load_state_dict({k: torch.as_tensor(np.asarray(v)) for k, v in self.state.items()})
        return fc

    def save(self, path) -> None:
        path = Path(path)
        (path / "params").mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name, value in self.state.items():
            arr = np.asarray(value.detach().cpu().numpy() if torch.is_tensor(value) else value)
            arr.astype("<f4").tofile(path / "params" / f"{name}.bin")
            shapes[name] = list(arr.shape)
        manifest = {
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "best_val_mae": self.best_val_mae,
            "metrics": self.metrics,
            "meta": self.meta,
            "normalizer": {"mean": self.normalizer.mean.tolist(), "std": self.normalizer.std.tolist()},
            "params": {k: {"shape": s, "dtype": "<f4", "file": f"params/{k}.bin"} for k, s in shapes.items()},
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        state = {
            k: np.fromfile(path / spec["file"], dtype=spec["dtype"]).reshape(spec["shape"])
            for k, spec in manifest["params"].items()
        }
        norm = manifest["normalizer"]
        return cls(
            state=state,
            normalizer=Normalizer(np.asarray(norm["mean"]), np.asarray(norm["std"])),
            best_val_mae=manifest["best_val_mae"],
            epoch=manifest["epoch"],
            config_hash=manifest["config_hash"],
            meta=manifest["meta"],
            metrics=manifest.get("metrics", {}),
        )


def deploy_predict(checkpoint: Checkpoint, test: WindowSet) -> np.ndarray:
    """Test-time forecasts in original units.

    Every test sample uses the last training month's environment features
    and adjacency.
    """
    fc = checkpoint.build()
    last = checkpoint.meta["month0"] + checkpoint.meta["n_months"] - 1
    pinned = WindowSet(test.series, test.target_index, np.full(len(test), last),
                       test.start_time, test.t_in, test.delta)
    return predict(fc, pinned, checkpoint.normalizer, checkpoint.meta["month0"])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
