"""Command-line entry point: ``heatflow <subcommand> [flags]``.

Exit codes: 0 on success, 1 for usage errors (bad or unknown flags, invalid
values), 2 for runtime failures (missing files, parse errors, divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .cloud import SHAPES, CloudError, ConfigurationError, PointCloud, SynthSpec, read_cloud, synth_shape, write_xyz
from .diffusion import TAU_MAX, TAU_MIN, DiffusionSchedule, InstabilityError, ScheduleError, forward_diffuse, write_trajectory
from .heat import DEFAULT_K, SIGMA_MIN, build_heat_graph, mean_neighbor_distance
from .kdtree import InsufficientPointsError
from .metrics import ContractError
from .pipeline import ResampleRequest, TrainConfig, TrainedModel, evaluate, read_testset, resample, smoke_config, train

log = logging.getLogger("heatflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_input(path: str) -> PointCloud:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return read_cloud(p)


def _load_model(path: str) -> TrainedModel:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return TrainedModel.load(p)


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("HEATFLOW_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"HEATFLOW_THREADS must be a positive integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"HEATFLOW_THREADS must be a positive integer, got {env!r}")
    return n


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    clean, noisy = synth_shape(SynthSpec(args.shape, args.n, args.noise, args.seed))
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix == ".xyz" else out
    paths = (Path(f"{stem}_clean.xyz"), Path(f"{stem}_noisy.xyz"))
    _atomic_write(paths[0], write_xyz(clean))
    _atomic_write(paths[1], write_xyz(noisy))
    for p in paths:
        print(p)
    return 0


_TRAIN_OVERRIDES = ("epochs", "batch_size", "lr", "weight_decay", "delta", "steps", "k", "seed")


def cmd_train(args) -> int:
    cfg_dict: dict = {}
    if args.config is not None:
        p = Path(args.config)
        if not p.exists():
            raise FileNotFoundError(str(p))
        cfg_dict = json.loads(p.read_text(encoding="utf-8"))
        if not isinstance(cfg_dict, dict):
            raise ConfigurationError("training config must be a JSON object")
    for name in _TRAIN_OVERRIDES:
        v = getattr(args, name)
        if v is not None:
            cfg_dict[name] = v
    config = TrainConfig.from_dict(cfg_dict)
    if not config.dataset:
        config.dataset = smoke_config().dataset
    model = train(config, callback=lambda e, m: log.info("epoch %d/%d loss %.6g", e + 1, config.epochs, m.epoch_losses[-1]))

    out = Path(args.out)
    _atomic_write(out, model.dumps())
    rows = ["epoch,loss"] + [f"{i + 1},{v:.10e}" for i, v in enumerate(model.epoch_losses)]
    loss_csv = out.with_suffix(".loss.csv")
    _atomic_write(loss_csv, "\n".join(rows) + "\n")
    print(f"{out}\n{loss_csv}")
    return 0


def _resample_cmd(args, mode: str, ratio: int) -> int:
    model = _load_model(args.model)
    cloud = _read_input(args.inp)
    out = resample(model, ResampleRequest(cloud, mode, ratio, args.delta, args.seed))
    _atomic_write(Path(args.out), write_xyz(out))
    print(f"{args.out} ({out.n} points)")
    return 0


def cmd_denoise(args) -> int:
    return _resample_cmd(args, "denoise", 1)


def cmd_upsample(args) -> int:
    return _resample_cmd(args, "upsample", args.ratio)


def cmd_diffuse(args) -> int:
    if not TAU_MIN <= args.tau <= TAU_MAX:
        raise UsageError(f"--tau must lie in [{TAU_MIN}, {TAU_MAX}]")
    if args.sigma is not None and args.sigma < SIGMA_MIN:
        raise UsageError(f"--sigma must be >= {SIGMA_MIN}")
    cloud = _read_input(args.inp)
    schedule = DiffusionSchedule.uniform(args.tmax, args.steps, args.tau)
    graph = build_heat_graph(cloud.points, args.k)
    sig = args.sigma if args.sigma is not None else np.maximum(
        mean_neighbor_distance(cloud.points, graph.neighbors), SIGMA_MIN
    )
    graph = build_heat_graph(cloud.points, sigmas=sig, neighbors=graph.neighbors)
    traj = forward_diffuse(cloud, schedule, integrator=args.integrator, graph=graph)
    # build everything in a scratch directory first: no partial output on failure
    out = Path(args.out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        write_trajectory(traj, scratch)
        out.mkdir(exist_ok=True)
        for f in sorted(scratch.iterdir()):
            os.replace(f, out / f.name)
    finally:
        for f in scratch.iterdir():
            f.unlink()
        scratch.rmdir()
    print(f"{out} ({len(traj)} states)")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    d = Path(args.testset)
    if not d.is_dir():
        raise FileNotFoundError(str(d))
    cases = read_testset(d, args.seed)
    result = evaluate(model, cases, workers=_threads(args))
    _atomic_write(Path(args.out), result.csv())
    print(f"{'mode':<9}{'param':>7}{'n':>4}{'CD(1e-6)':>14}{'HD(1e-4)':>14}{'EMD(1e-4)':>14}")
    for (mode, param), c in result.cells.items():
        print(f"{mode:<9}{param:>7}{c['count']:>4}{c['cd'] * 1e6:>14.3f}{c['hd'] * 1e4:>14.3f}{c['emd'] * 1e4:>14.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .validation import gradient_suite

    results = gradient_suite(args.seed)
    for name, err in results.items():
        print(f"{name:<20}{err:.3e}")
    worst = max(results.values())
    print(f"worst relative error {worst:.3e}")
    return 0 if worst <= 1e-4 else 2


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heatflow", description="Point-cloud resampling with learnable heat diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="worker cap (default: $HEATFLOW_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a clean/noisy synthetic pair")
    p.add_argument("--shape", choices=SHAPES, required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--noise", type=_non_negative, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output stem (default: <shape>_<n>)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model, write checkpoint and loss CSV")
    p.add_argument("--config", default=None, help="JSON config; flags override its values")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr", type=_positive)
    p.add_argument("--weight-decay", dest="weight_decay", type=_non_negative)
    p.add_argument("--delta", type=_non_negative)
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    for name, func in (("denoise", cmd_denoise), ("upsample", cmd_upsample)):
        p = sub.add_parser(name, help=f"{name} a point cloud with a trained model")
        p.add_argument("--model", required=True)
        p.add_argument("--in", dest="inp", required=True)
        p.add_argument("--out", required=True)
        if name == "upsample":
            p.add_argument("--ratio", type=int, choices=(4, 16), required=True)
        p.add_argument("--delta", type=_non_negative, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("diffuse", help="dump a forward heat-diffusion trajectory (fixed sigma)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--steps", type=_positive_int, default=10)
    p.add_argument("--tmax", type=_positive, default=1.0)
    p.add_argument("--k", type=_positive_int, default=DEFAULT_K)
    p.add_argument("--tau", type=_positive, default=0.05)
    p.add_argument("--sigma", type=_positive, default=None, help="constant scale (default: mean kNN distance)")
    p.add_argument("--integrator", choices=("rk4", "implicit"), default="rk4")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_diffuse)

    p = sub.add_parser("eval", help="evaluate a model on a test-set directory")
    p.add_argument("--model", required=True)
    p.add_argument("--testset", required=True, help="directory holding manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient validation suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth" and args.out is None:
            args.out = f"{args.shape}_{args.n}"
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except (ConfigurationError, ContractError, InsufficientPointsError, ScheduleError) as e:
        sys.stderr.write(f"heatflow: invalid request: {e}\n")
        return 1
    except FileNotFoundError as e:
        sys.stderr.write(f"heatflow: file not found: {e}\n")
        return 2
    except (CloudError, CheckpointError, InstabilityError, FloatingPointError, OSError, ValueError) as e:
        sys.stderr.write(f"heatflow: {type(e).__name__}: {e}\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
