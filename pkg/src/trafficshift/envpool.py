"""Learnable per-month environment features and node embeddings.

The feature pool is injected as extra leading time slices; the node
embeddings produce one row-stochastic adjacency per month. Both are kept
temporally smooth by a total-variation penalty along the month axis.
"""
from __future__ import annotations

import torch
from torch import nn

from .errors import NumericError

INIT_SCALE = 0.01


def total_variation(params: torch.Tensor, month_axis: int) -> torch.Tensor:
    """Sum of absolute month-to-month differences over every series."""
    if params.shape[month_axis] < 2:
        return params.sum() * 0
    return torch.diff(params, dim=month_axis).abs().sum()


class _MonthPool(nn.Module):
    month_axis = 0

    @property
    def n_months(self) -> int:
        return self.weight.shape[self.month_axis]

    def _month_index(self, e) -> torch.Tensor:
        e = torch.as_tensor(e, device=self.weight.device, dtype=torch.long)
        if (e < 0).any():
            raise ValueError(f"negative environment index {int(e.min())}")
        # months past the pool (the test month) reuse the last training month
        return e.clamp(max=self.n_months - 1)

    def tv(self) -> torch.Tensor:
        return total_variation(self.weight, self.month_axis)


class EnvFeaturePool(_MonthPool):
    """Parameters of shape [n_regions, n_months, d]."""

    month_axis = 1

    def __init__(self, n_regions: int, n_months: int, d: int = 4, init_scale: float = INIT_SCALE):
        super().__init__()
        if d % 2:
            raise ValueError(f"feature dimension must be even, got {d}")
        self.weight = nn.Parameter(torch.randn(n_regions, n_months, d) * init_scale)

    @property
    def dim(self) -> int:
        return self.weight.shape[2]

    def lookup(self, e) -> torch.Tensor:
        """[n, d] for a scalar month, [B, n, d] for a batch of months."""
        idx = self._month_index(e)
        return self.weight[:, idx].movedim(0, -2)


class NodeEmbeddingPool(_MonthPool):
    """Parameters of shape [n_months, n_regions, d2]."""

    month_axis = 0

    def __init__(self, n_regions: int, n_months: int, d2: int = 4, init_scale: float = INIT_SCALE):
        super().__init__()
        if d2 < 1:
            raise ValueError("embedding dimension must be positive")
        self.weight = nn.Parameter(torch.randn(n_months, n_regions, d2) * init_scale)

    def lookup(self, e) -> torch.Tensor:
        return self.weight[self._month_index(e)]

    def adjacency(self, e) -> torch.Tensor:
        return adjacency_from_embeddings(self.lookup(e))


def inject_env(x: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
    """Prepend features as d/2 extra time slices: [..., n, t, 2] -> [..., n, t + d/2, 2].

    Feature f lands in time slot f // 2, channel f % 2.
    """
    d = feat.shape[-1]
    if d % 2 or feat.shape[:-1] != x.shape[:-2] or x.shape[-1] != 2:
        raise ValueError(f"cannot inject features {tuple(feat.shape)} into input {tuple(x.shape)}")
    slices = feat.reshape(*feat.shape[:-1], d // 2, 2)
    return torch.cat([slices.to(x.dtype), x], dim=-2)


def adjacency_from_embeddings(emb: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of ``emb @ emb.T`` for [..., n, d2] embeddings."""
    if not torch.isfinite(emb).all():
        raise NumericError("non-finite node embeddings")
    logits = emb @ emb.transpose(-1, -2)
    z = torch.exp(logits - logits.amax(dim=-1, keepdim=True))
    # summing in sorted order makes the normaliser independent of region order,
    # so permuting regions permutes A exactly
    return z / torch.sort(z, dim=-1).values.sum(dim=-1, keepdim=True)
