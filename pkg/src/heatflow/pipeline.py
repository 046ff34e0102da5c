"""Training on the refined-VLB surrogate and reverse sampling from the diffused prior."""

from __future__ import annotations

import dataclasses
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor
from .cloud import (
    ConfigurationError,
    PointCloud,
    SynthSpec,
    farthest_point_sample,
    normalize_unit_sphere,
    synth_shape,
)
from .diffusion import diffuse_tensor, relax
from .heat import DEFAULT_K, mean_neighbor_distance
from .kdtree import InsufficientPointsError, knn_graph
from .metrics import ContractError, MetricsReport, VlbTerms, VlbWeights, compare, refined_vlb_loss
from .nets import DenoiserNet, MonotoneScheduleNet, ScaleNet, StepSizeParam
from .optim import OptimizerState, TrainingDivergenceError, adamw_step

log = logging.getLogger(__name__)

MODES = ("denoise", "upsample")
RATIOS = (1, 4, 16)


@dataclass(frozen=True)
class TrainSample:
    spec: SynthSpec
    mode: str = "denoise"
    ratio: int = 1


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 0.0002
    weight_decay: float = 0.01
    delta: float = 0.01
    steps: int = 10
    k: int = DEFAULT_K
    weights: VlbWeights = field(default_factory=VlbWeights)
    seed: int = 0
    jitter: float = 0.01
    tau_init: float = 0.05
    t_max_init: float = 1.0
    width: int = 64
    dataset: list[TrainSample] = field(default_factory=list)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "steps", "k", "width"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.delta < 0 or self.jitter < 0:
            raise ConfigurationError("lr must be positive; weight_decay, delta, jitter non-negative")
        if isinstance(self.weights, dict):
            self.weights = VlbWeights(**self.weights)
        self.dataset = [_sample_from(s) for s in self.dataset]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _sample_from(s) -> TrainSample:
    if isinstance(s, TrainSample):
        return s
    s = dict(s)
    spec = s.pop("spec", None)
    if spec is None:
        spec = {k: s.pop(k) for k in ("shape", "n", "noise", "seed") if k in s}
    return TrainSample(SynthSpec(**spec), **s)


def smoke_dataset(count: int = 8, n: int = 128, seed: int = 100, noises=(0.01, 0.02, 0.03)) -> list[TrainSample]:
    """Alternating spheres and tori with cycling noise levels, denoise mode."""
    shapes = ("sphere", "torus")
    return [
        TrainSample(SynthSpec(shapes[i % 2], n, noises[i % len(noises)], seed + i))
        for i in range(count)
    ]


def smoke_config(**overrides) -> TrainConfig:
    """Desk-scale run: 8 shapes of 128 points, S = 10, 20 epochs, one sample per step."""
    base = dict(epochs=20, batch_size=1, lr=2e-4, delta=0.01, steps=10, dataset=smoke_dataset())
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ResampleRequest:
    cloud: PointCloud
    mode: str = "denoise"
    ratio: int = 1
    delta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.ratio not in RATIOS:
            raise ConfigurationError(f"ratio must be one of {RATIOS}")
        if self.mode == "denoise" and self.ratio != 1:
            raise ConfigurationError("denoise requests use ratio 1")


# -- data preparation --------------------------------------------------------


def make_pair(spec: SynthSpec, mode: str, r: int = 1) -> tuple[PointCloud, PointCloud]:
    """(x_l, x_h): noisy/clean for denoising, sparse/dense clean for upsampling.

    For upsampling with n not divisible by r, x_l keeps ceil(n / r) points and
    x_h is padded by repeating its final points to r * |x_l|.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")
    clean, noisy = synth_shape(spec)
    if mode == "denoise":
        return noisy, clean
    if r < 1:
        raise ConfigurationError("ratio must be >= 1")
    if r == 1:
        return clean, clean
    m = -(-spec.n // r)
    x_l = clean.with_points(clean.points[farthest_point_sample(clean.points, m)])
    x_h = clean
    if m * r != spec.n:
        warnings.warn(f"n={spec.n} not divisible by r={r}; padding x_h to {m * r} points", stacklevel=2)
        pad = clean.points[-(m * r - spec.n):]
        x_h = clean.with_points(np.concatenate([clean.points, pad]))
    return x_l, x_h


def seed_upsample(x_l, r: int, jitter: float = 0.01, seed=0) -> PointCloud:
    """Replicate every point r times (copies adjacent) with N(0, jitter^2) offsets."""
    if r < 1:
        raise ConfigurationError("ratio must be >= 1")
    cloud = x_l if isinstance(x_l, PointCloud) else PointCloud(x_l)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    reps = np.repeat(cloud.points, r, axis=0)
    if jitter > 0:
        reps = reps + jitter * rng.standard_normal(reps.shape)
    return cloud.with_points(reps)


@dataclass
class PreparedPair:
    x_l: np.ndarray  # normalized, seeded to |x_h|
    x_h: np.ndarray  # same frame as x_l
    transform: object


def prepare_pair(sample: TrainSample, jitter: float, seed) -> PreparedPair:
    x_l, x_h = make_pair(sample.spec, sample.mode, sample.ratio)
    x_l_n, tf = normalize_unit_sphere(x_l)
    x_h_n = tf.apply(x_h)
    if sample.mode == "upsample" and sample.ratio > 1:
        x_l_n = seed_upsample(x_l_n, sample.ratio, jitter, seed)
    return PreparedPair(x_l_n.points, x_h_n.points, tf)


# -- model -------------------------------------------------------------------


class TrainedModel:
    """All learnables (schedule, scale, step size, denoiser), config and loss history."""

    def __init__(self, config: TrainConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        seeds = rng.integers(0, 2**31, size=3)
        self.schedule = MonotoneScheduleNet(t_max=config.t_max_init, rng=np.random.default_rng(seeds[0]))
        self.scale = ScaleNet(rng=np.random.default_rng(seeds[1]))
        self.tau = StepSizeParam(config.tau_init)
        self.denoiser = DenoiserNet(width=config.width, rng=np.random.default_rng(seeds[2]))
        self.history: list[float] = []
        self.epoch_losses: list[float] = []

    @property
    def modules(self):
        return (self.schedule, self.scale, self.tau, self.denoiser)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in self.modules:
            out.update(m.named_parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for m in self.modules:
            m.load_state_dict(state)

    def _meta(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "history": self.history,
            "epoch_losses": self.epoch_losses,
        }

    def dumps(self) -> str:
        return checkpoint.dumps(self.state_dict(), self._meta())

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict(), self._meta())

    @classmethod
    def loads(cls, text: str) -> "TrainedModel":
        return cls._from(*checkpoint.loads(text))

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls._from(*checkpoint.load(path))

    @classmethod
    def _from(cls, tensors: dict, meta: dict) -> "TrainedModel":
        model = cls(TrainConfig.from_dict(meta["config"]))
        model.load_state_dict(tensors)
        model.history = list(meta.get("history", []))
        model.epoch_losses = list(meta.get("epoch_losses", []))
        return model


def _neighbors(points: np.ndarray, k: int) -> np.ndarray:
    if len(points) <= k:
        raise InsufficientPointsError(f"k={k} needs more than {k} points, got {len(points)}")
    return knn_graph(points, k)


def sample_loss(model: TrainedModel, pair: PreparedPair, rng) -> VlbTerms:
    """Refined-VLB surrogate for one pair; call inside a Tape to get gradients.

    Both clouds are diffused with RK4 on the learned schedule; the reverse
    steps are teacher-forced on delta-relaxed states of the x_h trajectory.
    """
    cfg = model.config
    S = cfg.steps
    times_t = model.schedule.times(S)
    times = [ad.index(times_t, s) for s in range(S + 1)]
    tau = model.tau()
    t_max = model.schedule.t_max()

    def diffuse(points):
        nbr = _neighbors(points, cfg.k)
        feats = mean_neighbor_distance(points, nbr)
        states = diffuse_tensor(Tensor(points), times, tau, nbr, lambda t: model.scale(feats, t, t_max))
        return states, nbr

    hq, nbr_h = diffuse(pair.x_h)
    lq, _ = diffuse(pair.x_l)
    cond = model.denoiser.encode_condition(pair.x_l)
    preds = [None] * S
    for s in range(S, 0, -1):
        z_in = relax(hq[s], cfg.delta, rng)
        preds[s - 1] = model.denoiser(z_in, times[s], cond, nbr_h, t_max)
    return refined_vlb_loss(hq, lq, preds, preds[0], Tensor(pair.x_h), cfg.weights)


def train(config: TrainConfig, dataset: list[TrainSample] | None = None, callback=None) -> TrainedModel:
    """Jointly fit denoiser, schedule, kernel scale and step size with AdamW.

    Gradients are averaged over each batch before one optimizer step.
    ``callback(epoch, model)`` runs after every epoch.
    """
    data = [_sample_from(s) for s in (dataset if dataset is not None else config.dataset)]
    if not data:
        raise ConfigurationError("training dataset is empty")
    if dataset is not None:
        config = dataclasses.replace(config, dataset=data)
    model = TrainedModel(config)
    params = model.parameters()
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)

    pairs = [prepare_pair(s, config.jitter, np.random.default_rng([config.seed, 7, i])) for i, s in enumerate(data)]
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 11, epoch]).permutation(len(pairs))
        epoch_vals = []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0 : b0 + config.batch_size]
            acc = {name: np.zeros_like(p.value) for name, p in params.items()}
            for i in batch:
                rng = np.random.default_rng([config.seed, 13, epoch, int(i)])
                for p in params.values():
                    p.zero_grad()
                with Tape() as tape:
                    terms = sample_loss(model, pairs[i], rng)
                value = terms.total.item()
                if not np.isfinite(value):
                    raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}, sample {int(i)}")
                grads = tape.backward(terms.total, list(params.values()))
                for name, p in params.items():
                    acc[name] += grads[p]
                model.history.append(value)
                epoch_vals.append(value)
            scale = 1.0 / len(batch)
            adamw_step(params, {k: v * scale for k, v in acc.items()}, opt)
        model.epoch_losses.append(float(np.mean(epoch_vals)))
        log.info("epoch %d loss %.6g", epoch + 1, model.epoch_losses[-1])
        if callback is not None:
            callback(epoch, model)
    return model


# -- inference ---------------------------------------------------------------


def _reverse_normalized(model: TrainedModel, x: np.ndarray, delta: float, rng) -> np.ndarray:
    cfg = model.config
    S = cfg.steps
    nbr = _neighbors(x, cfg.k)
    feats = mean_neighbor_distance(x, nbr)
    times = model.schedule.times(S).value
    t_max = float(model.schedule.t_max().value)
    tau = model.tau.value()
    states = diffuse_tensor(Tensor(x), list(times), tau, nbr, lambda t: model.scale(feats, t, t_max))
    z = relax(states[-1], delta, rng)
    cond = model.denoiser.encode_condition(x)
    for s in range(S, 0, -1):
        z = model.denoiser(z, times[s], cond, nbr, t_max)
        if s > 1:
            z = relax(z, delta, rng)
    return z.value


def reverse_sample(model: TrainedModel, x_l, delta: float | None = None, seed=0,
                   steps: int | None = None, k: int | None = None) -> PointCloud:
    """Diffuse x_l to t_T, relax, then walk the denoiser back down the grid.

    ``x_l`` is given in its own coordinates (already seeded to the target size
    for upsampling); it is normalized internally and the output is returned in
    the same coordinates. ``steps``/``k``, when given, must match the model.
    """
    cfg = model.config
    if steps is not None and steps != cfg.steps:
        raise ContractError(f"model was trained with S={cfg.steps}, request has S={steps}")
    if k is not None and k != cfg.k:
        raise ContractError(f"model was trained with k={cfg.k}, request has k={k}")
    cloud = x_l if isinstance(x_l, PointCloud) else PointCloud(x_l)
    delta = cfg.delta if delta is None else delta
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x, tf = normalize_unit_sphere(cloud)
    out = _reverse_normalized(model, x.points, delta, rng)
    return cloud.with_points(tf.inverse_points(out))


def resample(model: TrainedModel, request: ResampleRequest) -> PointCloud:
    """Denoise, or seed-then-refine for upsampling (|x_o| = r |x_l|)."""
    delta = model.config.delta if request.delta is None else request.delta
    rng = np.random.default_rng(request.seed)
    x, tf = normalize_unit_sphere(request.cloud)
    pts = x.points
    if request.mode == "upsample" and request.ratio > 1:
        pts = seed_upsample(x, request.ratio, model.config.jitter, rng).points
    out = _reverse_normalized(model, pts, delta, rng)
    return PointCloud(tf.inverse_points(out))


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalCase:
    name: str
    request: ResampleRequest
    reference: PointCloud
    param: float | int


@dataclass
class EvalResult:
    rows: list[tuple[EvalCase, MetricsReport]]
    cells: dict[tuple[str, str], dict[str, float]]

    def csv(self) -> str:
        lines = ["sample,mode,param,cd,hd,emd"]
        for case, r in self.rows:
            lines.append(
                f"{case.name},{case.request.mode},{case.param},"
                f"{r.chamfer:.6e},{r.hausdorff:.6e},{r.emd:.6e}"
            )
        return "\n".join(lines) + "\n"


def aggregate(rows: list[tuple[EvalCase, MetricsReport]]) -> dict[tuple[str, str], dict[str, float]]:
    """Mean CD/HD/EMD per (mode, param) cell, like the benchmark tables."""
    groups: dict[tuple[str, str], list[MetricsReport]] = {}
    for case, r in rows:
        groups.setdefault((case.request.mode, str(case.param)), []).append(r)
    return {
        key: {
            "cd": float(np.mean([r.chamfer for r in rs])),
            "hd": float(np.mean([r.hausdorff for r in rs])),
            "emd": float(np.mean([r.emd for r in rs])),
            "count": len(rs),
        }
        for key, rs in sorted(groups.items(), key=lambda kv: (kv[0][0], float(kv[0][1])))
    }


def evaluate(model: TrainedModel, testset: list[EvalCase], workers: int = 1) -> EvalResult:
    def run(case: EvalCase):
        pred = resample(model, case.request)
        return case, compare(pred, case.reference, case.name)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, testset))
    else:
        rows = [run(c) for c in testset]
    return EvalResult(rows, aggregate(rows))


def synthetic_testset(count: int = 4, n: int = 128, seed: int = 5000,
                      noises=(0.01, 0.02, 0.03), ratios=(4, 16)) -> list[EvalCase]:
    """Held-out spheres/tori for every noise level and up-ratio."""
    cases = []
    shapes = ("sphere", "torus")
    for level in noises:
        for i in range(count):
            spec = SynthSpec(shapes[i % 2], n, level, seed + i)
            x_l, x_h = make_pair(spec, "denoise")
            cases.append(EvalCase(f"{spec.shape}{i}_noise{level}", ResampleRequest(x_l, "denoise", 1, seed=i), x_h, level))
    for r in ratios:
        for i in range(count):
            spec = SynthSpec(shapes[i % 2], n, 0.0, seed + 100 + i)
            x_l, x_h = make_pair(spec, "upsample", r)
            cases.append(EvalCase(f"{spec.shape}{i}_x{r}", ResampleRequest(x_l, "upsample", r, seed=i), x_h, r))
    return cases


def write_testset(cases: list[EvalCase], out_dir) -> Path:
    """Write inputs/references plus ``manifest.csv`` (name,mode,param,input,reference)."""
    from .cloud import write_xyz

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["name,mode,param,input,reference"]
    for c in cases:
        inp, ref = f"{c.name}_input.xyz", f"{c.name}_reference.xyz"
        (out / inp).write_text(write_xyz(c.request.cloud), encoding="utf-8", newline="\n")
        (out / ref).write_text(write_xyz(c.reference), encoding="utf-8", newline="\n")
        lines.append(f"{c.name},{c.request.mode},{c.param},{inp},{ref}")
    manifest = out / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return manifest


def read_testset(directory, seed: int = 0) -> list[EvalCase]:
    import csv

    from .cloud import read_cloud

    d = Path(directory)
    manifest = d / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(str(manifest))
    cases = []
    with manifest.open(encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            mode = row["mode"]
            param = float(row["param"]) if mode == "denoise" else int(row["param"])
            ratio = 1 if mode == "denoise" else int(param)
            req = ResampleRequest(read_cloud(d / row["input"]), mode, ratio, seed=seed + i)
            cases.append(EvalCase(row["name"], req, read_cloud(d / row["reference"]), param))
    return cases
