"""Recency classifier and similarity x recency sample weights."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import NumericError
from .models import TemporalConvGraph

RECENT_WINDOW = 12


@dataclass(frozen=True)
class WeightConfig:
    beta: float
    train_months: int
    recent_window: int = RECENT_WINDOW

    def __post_init__(self):
        if self.beta < 0 or self.train_months < 1:
            raise ValueError("need beta >= 0 and train_months >= 1")


def label_recency(delta, recent_window: int = RECENT_WINDOW):
    """True where a sample lies within the most recent ``recent_window`` months."""
    delta = np.asarray(delta)
    if (delta < 1).any():
        raise ValueError("delta must be >= 1")
    labels = delta <= recent_window
    return bool(labels) if labels.ndim == 0 else labels


def compute_weight(p, delta, cfg: WeightConfig):
    """w = p * (1 - (delta - 1) / D) ** beta."""
    p = np.asarray(p, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if (delta > cfg.train_months).any() or (delta < 1).any():
        raise ValueError(f"delta must lie in [1, {cfg.train_months}]")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p must lie in [0, 1]")
    w = p * (1.0 - (delta - 1.0) / cfg.train_months) ** cfg.beta
    return float(w) if w.ndim == 0 else w


@dataclass
class SampleWeights:
    w: np.ndarray
    scale: float


def normalize_weights(raw) -> SampleWeights:
    raw = np.asarray(raw, dtype=float)
    mean = raw.mean() if raw.size else 0.0
    if not mean > 0:
        raise NumericError(
            f"sample weights are all zero ({raw.size} samples); the recency classifier "
            "gave p=0 everywhere or the weight config is degenerate"
        )
    return SampleWeights(raw / mean, float(mean))


def write_weights_csv(path, delta, p, w) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sample_index", "delta", "p", "w"])
        for i, row in enumerate(zip(delta, p, w)):
            out.writerow([i, int(row[0]), repr(float(row[1])), repr(float(row[2]))])


def read_weights_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    delta = np.array([int(r["delta"]) for r in rows])
    p = np.array([float(r["p"]) for r in rows])
    w = np.array([float(r["w"]) for r in rows])
    return delta, p, w


class RecencyClassifier(nn.Module):
    """TemporalConvGraph encoder, mean-pooled over regions, with a logistic head."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.encoder = TemporalConvGraph(hidden=hidden)
        del self.encoder.readout
        self.head = nn.Linear(hidden, 1)

    def forward(self, x, adj):
        return self.head(self.encoder.encode(x, adj).mean(dim=1)).squeeze(-1)


@dataclass
class TrainedClassifier:
    model: RecencyClassifier | None
    adj: torch.Tensor | None
    degenerate: bool = False

    def predict_proba(self, x, n: int | None = None, batch_size: int = 1024) -> np.ndarray:
        """Probability of being recent; ``x`` is an array or ``take(idx)`` with ``n`` rows."""
        take = x if callable(x) else (lambda idx: np.asarray(x)[idx])
        n = len(x) if n is None else n
        if self.degenerate:
            return np.ones(n)
        self.model.eval()
        out = [np.zeros(0)]
        with torch.no_grad():
            for i in range(0, n, batch_size):
                xb = torch.as_tensor(take(np.arange(i, min(i + batch_size, n))), dtype=torch.float32)
                out.append(torch.sigmoid(self.model(xb, self.adj)).double().numpy())
        return np.concatenate(out)


def train_classifier(
    x,
    labels,
    adj,
    *,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    halve_patience: int = 5,
) -> TrainedClassifier:
    """Fit the recency classifier with class-balanced mini-batches.

    ``x`` is anything indexable by an integer array returning [B, n, t, 2]
    (an array, or a callable for lazily built windows). Single-class input
    yields the constant p = 1 classifier.
    """
    labels = np.asarray(labels, dtype=bool)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    if len(pos) == 0 or len(neg) == 0:
        return TrainedClassifier(None, None, degenerate=True)

    from .training import PlateauSchedule

    take = x if callable(x) else (lambda idx: np.asarray(x)[idx])
    torch.manual_seed(seed)
    model = RecencyClassifier()
    adj_t = torch.as_tensor(adj, dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    schedule = PlateauSchedule(halve_patience=halve_patience, stop_patience=epochs + 1)
    rng = np.random.default_rng(seed)
    half = max(batch_size // 2, 1)
    n_batches = max(len(labels) // batch_size, 1)
    target = torch.cat([torch.ones(half), torch.zeros(half)])
    for _ in range(epochs):
        model.train()
        total = 0.0
        for _ in range(n_batches):
            idx = np.concatenate([rng.choice(pos, half), rng.choice(neg, half)])
            xb = torch.as_tensor(take(idx), dtype=torch.float32)
            loss = F.binary_cross_entropy_with_logits(model(xb, adj_t), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        if schedule.step(total / n_batches).halve:
            for group in opt.param_groups:
                group["lr"] /= 2
    return TrainedClassifier(model, adj_t)
