"""Point-cloud resampling with learnable heat diffusion.

The forward process smooths positions with a graph heat kernel on a frozen
kNN graph; a learned reverse process, conditioned on the low-quality input,
walks the diffused cloud back to a clean or denser one.
"""

from .autodiff import Tape, Tensor, grad_check
from .cloud import (
    NormalizeTransform,
    PointCloud,
    SynthSpec,
    normalize_unit_sphere,
    parse_ply_ascii,
    parse_xyz,
    read_cloud,
    synth_shape,
    write_xyz,
)
from .diffusion import DiffusionSchedule, Trajectory, forward_diffuse, implicit_euler_step, relax, rk4_step
from .heat import HeatGraph, apply_laplacian, build_heat_graph
from .kdtree import KdTree, build_kdtree, knn, knn_graph
from .metrics import chamfer, compare, emd_exact, hausdorff, refined_vlb_loss, set_distance_loss
from .nets import DenoiserNet, MonotoneScheduleNet, ScaleNet, StepSizeParam
from .pipeline import (
    ResampleRequest,
    TrainConfig,
    TrainedModel,
    evaluate,
    resample,
    reverse_sample,
    seed_upsample,
    smoke_dataset,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "DenoiserNet", "DiffusionSchedule", "HeatGraph", "KdTree", "MonotoneScheduleNet",
    "NormalizeTransform", "PointCloud", "ResampleRequest", "ScaleNet", "StepSizeParam",
    "SynthSpec", "Tape", "Tensor", "TrainConfig", "TrainedModel", "Trajectory",
    "apply_laplacian", "build_heat_graph", "build_kdtree", "chamfer", "compare",
    "emd_exact", "evaluate", "forward_diffuse", "grad_check", "hausdorff",
    "implicit_euler_step", "knn", "knn_graph", "normalize_unit_sphere", "parse_ply_ascii",
    "parse_xyz", "read_cloud", "refined_vlb_loss", "relax", "resample", "reverse_sample",
    "rk4_step", "seed_upsample", "set_distance_loss", "smoke_dataset", "synth_shape",
    "train", "write_xyz",
]
