"""Predictor interface, two small reference models and geographic adjacency.

Both models map x2 [B, n, t', 2] and an adjacency ([n, n] or [B, n, n]) to
a one-step forecast [B, n, 1, 2]. Parameters are shared across regions.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import NumericError

HIDDEN = 32


def geo_adjacency_grid(cells, n_cols: int) -> np.ndarray:
    """8-neighbour adjacency with self-loops for grid cells, row-normalised."""
    cells = np.asarray(cells, dtype=int)
    rows, cols = np.divmod(cells, n_cols)
    near = (np.abs(rows[:, None] - rows[None, :]) <= 1) & (np.abs(cols[:, None] - cols[None, :]) <= 1)
    return _row_normalise(near.astype(float))


def geo_adjacency_centroids(coords, threshold_km: float) -> np.ndarray:
    """Edge when centroids lie within ``threshold_km`` (equirectangular distance)."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    mid = (lat[:, None] + lat[None, :]) / 2
    dx = (lon[:, None] - lon[None, :]) * np.cos(mid)
    dy = lat[:, None] - lat[None, :]
    dist = 6371.0 * np.sqrt(dx**2 + dy**2)
    return _row_normalise((dist <= threshold_km).astype(float))


def build_geo_adjacency(region_ids, geometry: dict) -> np.ndarray:
    kind = geometry.get("kind")
    if kind == "grid":
        return geo_adjacency_grid(region_ids, geometry["n_cols"])
    if "centroids" in geometry:
        return geo_adjacency_centroids(geometry["centroids"], geometry.get("threshold_km", 2.0))
    # no geometry known: self-loops only
    return np.eye(len(region_ids))


def _row_normalise(a: np.ndarray) -> np.ndarray:
    np.fill_diagonal(a, 1.0)
    return a / a.sum(axis=1, keepdims=True)


class GraphConv(nn.Module):
    """act(Linear(A @ h)) for h [..., n, f].

    With ``include_self`` the support set is {I, A}, as in Chebyshev or
    diffusion convolutions: act(W_self h + W_graph (A @ h)).
    """

    def __init__(self, in_features, out_features, bias=True, activation=None, include_self=False):
        super().__init__()
        self.linear = nn.Linear(in_features, out_features, bias=bias)
        self.self_linear = nn.Linear(in_features, out_features, bias=False) if include_self else None
        self.activation = activation

    def forward(self, h, adj):
        if h.shape[-2] != adj.shape[-1]:
            raise ValueError(f"adjacency {tuple(adj.shape)} does not match {h.shape[-2]} regions")
        out = self.linear(adj @ h)
        if self.self_linear is not None:
            out = out + self.self_linear(h)
        return out if self.activation is None else self.activation(out)


def graph_conv(h, adj, weight=None, bias=None, activation=None):
    """Functional graph convolution: act((A @ h) @ W + b)."""
    out = adj @ h
    if weight is not None:
        out = out @ weight
    if bias is not None:
        out = out + bias
    return out if activation is None else activation(out)


class Predictor(nn.Module):
    uses_dynamic_adjacency = False

    def _check(self, out):
        if not torch.isfinite(out).all():
            raise NumericError(f"{type(self).__name__} produced non-finite activations")
        return out


class TemporalConvGraph(Predictor):
    """Two (causal temporal conv -> graph conv) blocks, readout at the final step.

    Dilations 1 and 4 with kernel 3 give a receptive field of 11 steps, enough
    to see injected environment slices in front of a 6-hour window.
    """

    uses_dynamic_adjacency = False

    def __init__(self, in_channels=2, hidden=HIDDEN, kernel=3, dilations=(1, 4)):
        super().__init__()
        self.kernel = kernel
        self.dilations = tuple(dilations)
        self.convs = nn.ModuleList()
        self.gconvs = nn.ModuleList()
        c = in_channels
        for d in self.dilations:
            self.convs.append(nn.Conv1d(c, hidden, kernel, dilation=d))
            self.gconvs.append(GraphConv(hidden, hidden, activation=F.relu, include_self=True))
            c = hidden
        self.readout = nn.Linear(hidden, 2)
        _zero_biases(self)

    def encode(self, x2, adj):
        """Final-step hidden state [B, n, hidden]."""
        b, n, t, c = x2.shape
        h = x2.reshape(b * n, t, c).transpose(1, 2)
        for conv, gconv in zip(self.convs, self.gconvs):
            pad = (self.kernel - 1) * conv.dilation[0]
            h = F.relu(conv(F.pad(h, (pad, 0))))
            width = h.shape[1]
            h = h.reshape(b, n, width, t).permute(0, 3, 1, 2)  # [B, t, n, hidden]
            h = gconv(h, adj.unsqueeze(-3) if adj.dim() == 3 else adj)
            h = h.permute(0, 2, 3, 1).reshape(b * n, width, t)
        return h[:, :, -1].reshape(b, n, -1)

    def forward(self, x2, adj):
        out = self.readout(self.encode(x2, adj)).unsqueeze(-2)
        return self._check(out)


class GraphConvGRU(Predictor):
    """GRU whose input/hidden transforms are graph convolutions.

    The candidate transform has no bias, so a zero input from a zero state
    stays at zero: zero-valued leading slices leave the recurrence untouched.
    """

    uses_dynamic_adjacency = True

    def __init__(self, in_channels=2, hidden=HIDDEN):
        super().__init__()
        self.hidden = hidden
        self.gates = GraphConv(in_channels + hidden, 2 * hidden, include_self=True)
        self.candidate = GraphConv(in_channels + hidden, hidden, bias=False, include_self=True)
        self.readout = nn.Linear(hidden, 2)
        _zero_biases(self)

    def forward(self, x2, adj):
        b, n, t, _ = x2.shape
        h = x2.new_zeros(b, n, self.hidden)
        for k in range(t):
            xt = x2[:, :, k, :]
            zr = torch.sigmoid(self.gates(torch.cat([xt, h], dim=-1), adj))
            z, r = zr.split(self.hidden, dim=-1)
            cand = torch.tanh(self.candidate(torch.cat([xt, r * h], dim=-1), adj))
            h = z * h + (1 - z) * cand
        return self._check(self.readout(h).unsqueeze(-2))


def _zero_biases(module: nn.Module):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)


MODELS = {
    "tconv_graph": TemporalConvGraph,
    "gru_graph": GraphConvGRU,
}


def build_model(name: str, **kwargs) -> Predictor:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**kwargs)
