"""Central finite-difference helpers shared by the gradient tests."""
import numpy as np
import torch

from trafficshift.envpool import NodeEmbeddingPool
from trafficshift.training import TrainConfig, build_forecaster, total_loss, weighted_data_loss


def kink_free_pool(shape, month_axis, rng, min_gap=1e-3):
    while True:
        z = rng.normal(size=shape)
        if np.abs(np.diff(z, axis=month_axis)).min() >= min_gap:
            return torch.as_tensor(z)


def toy_forecaster(model, seed=0, n=4, m=5):
    rng = np.random.default_rng(seed)
    fc = build_forecaster(model, n, m, np.full((n, n), 1.0 / n), env="learned", dynamic=True,
                          cfg=TrainConfig(hidden=8), seed=seed).double()
    if fc.node_pool is None:
        # static models still accept a per-sample adjacency; route one through
        fc.dynamic = True
        fc.node_pool = NodeEmbeddingPool(n, m, 4).double()
    with torch.no_grad():
        fc.env_pool.weight.copy_(kink_free_pool(fc.env_pool.weight.shape, 1, rng))
        fc.node_pool.weight.copy_(kink_free_pool(fc.node_pool.weight.shape, 0, rng) * 0.5)
        for p in fc.predictor.parameters():
            p.add_(torch.as_tensor(rng.normal(size=p.shape)) * 0.1)
    x = torch.as_tensor(rng.normal(size=(3, n, 6, 2)))
    y = torch.as_tensor(rng.normal(size=(3, n, 1, 2)))
    e = torch.as_tensor([0, 2, m - 1])
    w = torch.as_tensor(rng.uniform(0.5, 1.5, size=3))
    return fc, (x, y, e, w)


def loss_fn(fc, batch, alpha=0.7):
    x, y, e, w = batch
    l1, l2 = fc.regularizers()
    return total_loss(weighted_data_loss(fc(x, e), y, w), l1, l2, alpha).total


def max_relative_error(fn, params, n_checks=20, seed=0, h=1e-5, floor=1e-6):
    """Largest relative error between autograd and central differences.

    Magnitudes below ``floor`` are compared absolutely: an exactly-zero
    gradient (an unused pool month) only differs from its difference
    quotient by roundoff.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    fn().backward()
    flat = [(p, i) for p in params for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_checks, len(flat)), replace=False)
    worst = 0.0
    for k in picks:
        p, i = flat[k]
        analytic = p.grad.reshape(-1)[i].item()
        with torch.no_grad():
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + h
            up = fn().item()
            view[i] = orig - h
            down = fn().item()
            view[i] = orig
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
