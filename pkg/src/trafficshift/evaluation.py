"""Metrics, baseline wrappers, variant toggles and results tables."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .models import Predictor

RESULT_COLUMNS = ["scenario", "train_months", "model", "variant", "seed", "mae", "rmse", "runtime_s"]


def _residuals(pred, actual) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {actual.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred - actual


def mae(pred, actual) -> float:
    return float(np.mean(np.abs(_residuals(pred, actual))))


def rmse(pred, actual) -> float:
    return float(np.sqrt(np.mean(_residuals(pred, actual) ** 2)))


@dataclass
class MetricReport:
    mae: float
    rmse: float
    region_mae: list = field(default_factory=list)
    region_rmse: list = field(default_factory=list)
    scenario: str = ""
    train_months: int = 0
    model: str = ""
    variant: str = ""
    seed: int = 0
    runtime_s: float = 0.0

    @classmethod
    def from_predictions(cls, pred, actual, **ids) -> "MetricReport":
        """``pred``/``actual`` laid out [samples, regions, ...] in original units."""
        res = _residuals(pred, actual)
        per_region = res.reshape(res.shape[0], res.shape[1], -1).transpose(1, 0, 2).reshape(res.shape[1], -1)
        return cls(
            mae=mae(pred, actual),
            rmse=rmse(pred, actual),
            region_mae=np.abs(per_region).mean(axis=1).tolist(),
            region_rmse=np.sqrt((per_region**2).mean(axis=1)).tolist(),
            **ids,
        )

    def row(self) -> dict:
        return {k: getattr(self, k) for k in RESULT_COLUMNS}


def write_results(reports, csv_path, json_path=None, config_hash: str | None = None) -> None:
    cols = RESULT_COLUMNS + (["config_hash"] if config_hash else [])
    with open(csv_path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=cols)
        out.writeheader()
        for rep in reports:
            row = rep.row()
            if config_hash:
                row["config_hash"] = config_hash
            out.writerow(row)
    if json_path is not None:
        payload = {"config_hash": config_hash, "rows": [asdict(r) for r in reports]}
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2)


@dataclass(frozen=True)
class VariantSpec:
    """Which shift modules a run uses.

    ``concept``: environment pool plus per-month adjacency; ``covariate``:
    recency-classifier sample weights; ``regularizer``: total-variation terms
    (alpha forced to 0 when off); ``baseline``: one of revin, finetune, vrex.
    """

    name: str
    concept: bool
    covariate: bool
    regularizer: bool
    baseline: str | None = None

    def toggles(self) -> tuple[bool, bool, bool, str | None]:
        return (self.concept, self.covariate, self.regularizer, self.baseline)


VARIANTS = {
    "full": VariantSpec("full", True, True, True),
    "no_concept": VariantSpec("no_concept", False, True, True),
    "no_covariate": VariantSpec("no_covariate", True, False, True),
    "no_regularizer": VariantSpec("no_regularizer", True, True, False),
    "original": VariantSpec("original", False, False, False),
    "revin": VariantSpec("revin", False, False, False, "revin"),
    "finetune": VariantSpec("finetune", False, False, False, "finetune"),
    "vrex": VariantSpec("vrex", False, False, False, "vrex"),
}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


class RevIN(Predictor):
    """Per-window instance normalisation around a base predictor.

    Each (region, channel) series of the input window is shifted by its mean
    and scaled by its std (floored at ``eps``); the forecast is mapped back.
    """

    def __init__(self, base: Predictor, eps: float = 1e-5):
        super().__init__()
        self.base = base
        self.eps = eps
        self.uses_dynamic_adjacency = base.uses_dynamic_adjacency

    def forward(self, x2, adj):
        mean = x2.mean(dim=-2, keepdim=True)
        std = x2.std(dim=-2, unbiased=False, keepdim=True).clamp(min=self.eps)
        out = self.base((x2 - mean) / std, adj)
        return out * std + mean


def revin_wrap(predictor: Predictor, eps: float = 1e-5) -> RevIN:
    return RevIN(predictor, eps)


def vrex_penalty(month_losses) -> torch.Tensor:
    """Population variance of per-month mean losses (0 for fewer than two months)."""
    losses = month_losses if torch.is_tensor(month_losses) else torch.as_tensor(month_losses, dtype=torch.float64)
    if losses.numel() < 2:
        return losses.sum() * 0
    return ((losses - losses.mean()) ** 2).mean()
