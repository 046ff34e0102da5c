"""Learnable pieces: monotone time schedule, kernel-scale MLP, step size, denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import PointCloud
from .diffusion import TAU_MAX, TAU_MIN, DiffusionSchedule
from .heat import SIGMA_MIN
from .kdtree import KdTree, build_kdtree, knn_graph, nearest


class ModelDivergenceError(FloatingPointError):
    pass


class Module:
    """Holds named leaf tensors; subclasses fill ``self.params``."""

    prefix = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=f"{self.prefix}.{name}")
        self.params[name] = t
        return t

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            key = f"{self.prefix}.{k}"
            if key not in state:
                raise KeyError(f"missing parameter {key!r}")
            if state[key].shape != v.value.shape:
                raise ValueError(f"{key}: shape {state[key].shape} != {v.value.shape}")
            v.value = np.array(state[key], dtype=np.float64)


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


# -- time schedule -----------------------------------------------------------


class MonotoneScheduleNet(Module):
    """g(s) = t_max * (h(s) - h(0)) / (h(1) - h(0)), s in [0, 1].

    h(s) = sum_j softplus(v_j) tanh(softplus(a_j) s + b_j) is non-decreasing in
    s because every slope is positive and tanh is increasing; subtracting h(0)
    pins g(0) = 0 and the final time is g(1) = t_max = softplus(tmax_raw).
    """

    prefix = "schedule"

    def __init__(self, hidden: int = 32, t_max: float = 1.0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        # small slopes keep tanh near-linear on [0, 1]: close to a uniform grid at init
        self._param("a_raw", -1.0 + 0.1 * rng.standard_normal(hidden))
        self._param("b", 0.1 * rng.standard_normal(hidden))
        self._param("v_raw", 0.1 * rng.standard_normal(hidden))
        self._param("tmax_raw", _inv_softplus(t_max))

    @classmethod
    def random(cls, rng, hidden: int = 32, spread: float = 3.0) -> "MonotoneScheduleNet":
        net = cls(hidden, rng=rng)
        for name in ("a_raw", "b", "v_raw"):
            net.params[name].value = spread * rng.standard_normal(hidden)
        net.params["tmax_raw"].value = np.array(spread * rng.standard_normal())
        return net

    def t_max(self) -> Tensor:
        return ad.softplus(self.params["tmax_raw"])

    def _h(self, s) -> Tensor:
        p = self.params
        slope = ad.softplus(p["a_raw"])
        amp = ad.softplus(p["v_raw"])
        s = ad.reshape(ad.as_tensor(s), (-1, 1))
        return ad.sum(amp * ad.tanh(s * slope + p["b"]), axis=1)

    def __call__(self, s) -> Tensor:
        """g at the progress values ``s`` (array-like in [0, 1])."""
        s_arr = np.atleast_1d(np.asarray(ad.as_tensor(s).value, dtype=np.float64))
        ends = self._h(np.array([0.0, 1.0]))
        h0 = ad.index(ends, 0)
        span = ad.index(ends, 1) - h0 + 1e-12
        return self.t_max() * (self._h(s_arr) - h0) / span

    def times(self, steps: int) -> Tensor:
        """Grid t_s = g(s/S) + s * 1e-6 * t_max, s = 0..S (differentiable)."""
        if steps < 1:
            raise ValueError("need at least one step")
        s = np.arange(steps + 1) / steps
        eps = 1e-6 * np.arange(steps + 1)
        return self(s) + self.t_max() * eps


def schedule_times(net: MonotoneScheduleNet, steps: int, tau: float = 0.05) -> DiffusionSchedule:
    return DiffusionSchedule(net.times(steps).value, tau)


# -- step size ---------------------------------------------------------------


class StepSizeParam(Module):
    """tau = tau_min + (tau_max - tau_min) * sigmoid(raw)."""

    prefix = "tau"

    def __init__(self, tau: float = 0.05):
        super().__init__()
        frac = (tau - TAU_MIN) / (TAU_MAX - TAU_MIN)
        self._param("raw", math.log(frac / (1.0 - frac)))

    def __call__(self) -> Tensor:
        return TAU_MIN + (TAU_MAX - TAU_MIN) * ad.sigmoid(self.params["raw"])

    def value(self) -> float:
        return float(np.clip(self().value, TAU_MIN, TAU_MAX))


# -- kernel scale ------------------------------------------------------------


class ScaleNet(Module):
    """Point-wise MLP (mean kNN distance, t / t_max) -> sigma_min + softplus(raw)."""

    prefix = "scale"

    def __init__(self, hidden: int = 16, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(1)
        self._param("w1", _glorot(rng, 2, hidden))
        self._param("b1", np.zeros(hidden))
        self._param("w2", 0.1 * _glorot(rng, hidden, 1))
        self._param("b2", np.zeros(1))

    def raw(self, features, t, t_max=1.0) -> Tensor:
        f = ad.reshape(ad.as_tensor(features), (-1, 1))
        n = f.shape[0]
        tt = ad.broadcast(ad.reshape(ad.as_tensor(t) / t_max, (1, 1)), (n, 1))
        x = ad.concat([f, tt], axis=1)
        p = self.params
        h = ad.tanh(x @ p["w1"] + p["b1"])
        return ad.reshape(h @ p["w2"] + p["b2"], (n,))

    def __call__(self, features, t, t_max=1.0) -> Tensor:
        return SIGMA_MIN + ad.softplus(self.raw(features, t, t_max))


def eval_scale(net: ScaleNet, features, t, t_max=1.0) -> Tensor:
    return net(features, t, t_max)


# -- denoiser ----------------------------------------------------------------

TIME_FREQS = (1.0, 2.0, 4.0, 8.0)


def time_embedding(t, t_max=1.0) -> Tensor:
    t = ad.as_tensor(t)
    parts = [ad.reshape(t / t_max, (1,))]
    parts += [ad.reshape(ad.sin(t * w), (1,)) for w in TIME_FREQS]
    return ad.concat(parts, axis=0)


@dataclass
class Condition:
    """Encoded low-quality input: per-point features, pooled vector, lookup tree."""

    points: np.ndarray
    features: Tensor
    pooled: Tensor
    tree: KdTree


class DenoiserNet(Module):
    """Permutation-equivariant displacement network.

    Scalar path: an encoder MLP over (position, time embedding, local shape
    invariants), one attention-weighted mean over the k neighbours whose values
    mix neighbour features with relative offsets, then concatenation with the
    conditioning features of the nearest low-quality point and the pooled
    global condition, and a tanh layer ``u``.

    Displacement head: per-point coefficients ``alpha = u W + b`` scale four
    offset vectors (uniform Laplacian, its second difference, the attention-
    weighted neighbour offset and the offset to the nearest conditioning
    point), plus a generic linear term. Both head layers start at zero, so the
    untrained network is the identity map.
    """

    prefix = "denoiser"
    n_vectors = 4

    def __init__(self, width: int = 64, cond_width: int = 32, key_width: int = 16,
                 out_scale: float = 0.1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(2)
        self.width, self.cond_width, self.key_width = width, cond_width, key_width
        self.out_scale = out_scale
        temb = 1 + len(TIME_FREQS)
        self._param("enc_w", _glorot(rng, 3 + temb + 3, width))
        self._param("enc_b", np.zeros(width))
        self._param("q_w", _glorot(rng, width, key_width))
        self._param("k_w", _glorot(rng, width, key_width))
        self._param("v_w", _glorot(rng, width, width))
        self._param("r_w", _glorot(rng, 3, width) * 4.0)
        self._param("cond_w", _glorot(rng, 6, cond_width))
        self._param("cond_b", np.zeros(cond_width))
        mid_in = 2 * width + 2 * cond_width + 3
        self._param("mid_w", _glorot(rng, mid_in, width))
        self._param("mid_b", np.zeros(width))
        self._param("coef_w", np.zeros((width, self.n_vectors)))
        self._param("coef_b", np.zeros(self.n_vectors))
        self._param("out_w", np.zeros((width, 3)))
        self._param("out_b", np.zeros(3))

    def encode_condition(self, x_l) -> Condition:
        pts = x_l.points if isinstance(x_l, PointCloud) else np.asarray(x_l, dtype=np.float64)
        tree = build_kdtree(pts)
        k = min(8, len(pts) - 1)
        if k >= 1:
            nbr = knn_graph(pts, k, tree)
            local = pts[nbr].mean(axis=1) - pts
        else:
            local = np.zeros_like(pts)
        x = Tensor(np.concatenate([pts, local], axis=1))
        p = self.params
        f = ad.tanh(x @ p["cond_w"] + p["cond_b"])
        return Condition(pts, f, ad.mean(f, axis=0), tree)

    def displacement(self, z, t, condition: Condition, neighbors: np.ndarray, t_max=1.0) -> Tensor:
        p = self.params
        z = ad.as_tensor(z)
        n, k = neighbors.shape
        rel = ad.gather(z, neighbors) - ad.reshape(z, (n, 1, 3))
        lap = ad.mean(rel, axis=1)
        lap2 = ad.mean(ad.gather(lap, neighbors), axis=1) - lap
        nn_idx, _ = nearest(condition.tree, z.value)
        c_off = Tensor(condition.points[nn_idx]) - z

        def norm(v):
            return ad.sqrt(ad.sum(ad.square(v), axis=1, keepdims=True) + 1e-12)

        inv = ad.concat([norm(lap), norm(lap2), norm(c_off)], axis=1) * 10.0
        temb = ad.broadcast(ad.reshape(time_embedding(t, t_max), (1, -1)), (n, 1 + len(TIME_FREQS)))
        h = ad.tanh(ad.concat([z, temb, inv], axis=1) @ p["enc_w"] + p["enc_b"])

        q = ad.reshape(h @ p["q_w"], (n, 1, self.key_width))
        kk = ad.gather(h @ p["k_w"], neighbors)
        logits = ad.sum(q * kk, axis=2) / math.sqrt(self.key_width)
        e = ad.exp(logits - logits.value.max(axis=1, keepdims=True))
        att = ad.reshape(e / ad.sum(e, axis=1, keepdims=True), (n, k, 1))
        vals = ad.gather(h @ p["v_w"], neighbors) + rel @ p["r_w"]
        agg = ad.sum(att * vals, axis=1)
        att_off = ad.sum(att * rel, axis=1)

        c_local = ad.gather(condition.features, nn_idx)
        c_glob = ad.broadcast(ad.reshape(condition.pooled, (1, -1)), (n, self.cond_width))
        u = ad.tanh(ad.concat([h, agg, c_local, c_glob, c_off], axis=1) @ p["mid_w"] + p["mid_b"])

        coef = u @ p["coef_w"] + p["coef_b"]
        delta = (u @ p["out_w"] + p["out_b"]) * self.out_scale
        for i, v in enumerate((lap, lap2, att_off, c_off)):
            delta = delta + ad.index(coef, (slice(None), slice(i, i + 1))) * v
        if not np.all(np.isfinite(delta.value)):
            raise ModelDivergenceError("non-finite denoiser activations")
        return delta

    def __call__(self, z, t, condition: Condition, neighbors=None, t_max=1.0) -> Tensor:
        z = ad.as_tensor(z)
        if neighbors is None:
            neighbors = knn_graph(z.value, min(16, len(z.value) - 1))
        return z + self.displacement(z, t, condition, neighbors, t_max)


def encode_condition(net: DenoiserNet, x_l) -> Condition:
    return net.encode_condition(x_l)


def denoise_step(net: DenoiserNet, z_t, t, condition: Condition, neighbors=None, t_max=1.0):
    """Predict z^{t - tau} from z^t: returns z_t + displacement (PointCloud in, PointCloud out)."""
    out = net(z_t.points if isinstance(z_t, PointCloud) else z_t, t, condition, neighbors, t_max)
    return z_t.with_points(out.value) if isinstance(z_t, PointCloud) else out
