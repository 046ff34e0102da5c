"""Gradient checks through the differentiable paths used in training."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .cloud import SynthSpec
from .diffusion import rk4_tensor
from .heat import heat_weights, mean_neighbor_distance
from .kdtree import knn_graph
from .metrics import chamfer_loss
from .pipeline import TrainConfig, TrainedModel, TrainSample, prepare_pair, sample_loss


def _cloud(rng, n: int) -> np.ndarray:
    p = rng.standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True) + 0.05 * rng.standard_normal((n, 3))


def check_scale_to_weights(seed: int = 0, epsilon: float = 1e-6) -> float:
    """Scale-net parameters -> per-point sigma -> heat-kernel weights."""
    rng = np.random.default_rng(seed)
    model = TrainedModel(TrainConfig(steps=2, k=6, width=8))
    net = model.scale
    pts = _cloud(rng, 24)
    nbr = knn_graph(pts, 6)
    feats = mean_neighbor_distance(pts, nbr)
    coef = rng.standard_normal(nbr.shape)
    names = ["w1", "b1", "w2", "b2"]
    shapes = [net.params[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    x0 = np.concatenate([net.params[k].value.ravel() for k in names])
    x0 = x0 + 0.3 * rng.standard_normal(x0.shape)

    def f(x):
        off = 0
        for name, shape, size in zip(names, shapes, sizes):
            net.params[name] = ad.reshape(ad.index(x, slice(off, off + size)), shape)
            off += size
        w = heat_weights(Tensor(pts), nbr, net(feats, 0.3, 1.0))
        return ad.sum(w * coef)

    return grad_check(f, x0, epsilon)


def check_tau_rk4_chamfer(seed: int = 0, steps: int = 3) -> float:
    """tau -> ``steps`` unrolled RK4 steps -> Chamfer to a fixed target."""
    rng = np.random.default_rng(seed)
    pts = _cloud(rng, 32)
    target = _cloud(rng, 32)
    nbr = knn_graph(pts, 8)
    sig = Tensor(np.maximum(mean_neighbor_distance(pts, nbr), 1e-3))

    def f(tau):
        z = Tensor(pts)
        t = 0.0
        for _ in range(steps):
            z = rk4_tensor(z, nbr, lambda _t: sig, t, ad.index(tau, 0))
            t = t + ad.index(tau, 0)
        return chamfer_loss(z, target)

    return grad_check(f, np.array([0.2]))


def check_full_loss(seed: int = 0, n: int = 32, steps: int = 3, epsilon: float = 1e-5) -> float:
    """Whole surrogate loss with respect to a slice of every parameter group.

    Several of these gradients are around 1e-9, where a 1e-6 central
    difference on an O(0.1) loss is dominated by rounding, hence the larger
    default step.
    """
    rng = np.random.default_rng(seed)
    # a coarse step so tau has a visible effect on the discretisation error
    cfg = TrainConfig(steps=steps, k=8, width=8, seed=seed, tau_init=0.3)
    model = TrainedModel(cfg)
    # move the zero-initialised output heads off zero so every path carries gradient
    for name in ("coef_w", "coef_b", "out_w", "out_b"):
        p = model.denoiser.params[name]
        p.value = 0.05 * rng.standard_normal(p.shape)
    pair = prepare_pair(TrainSample(SynthSpec("sphere", n, 0.02, seed)), cfg.jitter, seed)
    groups = [
        (model.tau, "raw"), (model.schedule, "tmax_raw"), (model.schedule, "v_raw"),
        (model.scale, "b1"), (model.scale, "w2"), (model.denoiser, "coef_b"),
        (model.denoiser, "out_b"), (model.denoiser, "enc_b"),
    ]
    shapes = [mod.params[name].shape for mod, name in groups]
    sizes = [int(np.prod(s)) for s in shapes]
    x0 = np.concatenate([mod.params[name].value.ravel() for mod, name in groups])

    def f(x):
        off = 0
        for (mod, name), shape, size in zip(groups, shapes, sizes):
            mod.params[name] = ad.reshape(ad.index(x, slice(off, off + size)), shape)
            off += size
        return sample_loss(model, pair, np.random.default_rng(seed)).total

    return grad_check(f, x0, epsilon)


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error of each check, keyed by name."""
    return {
        "scale_to_weights": check_scale_to_weights(seed),
        "tau_rk4_chamfer": check_tau_rk4_chamfer(seed),
        "full_loss": check_full_loss(seed),
    }
