"""Point-cloud data model, XYZ/PLY text I/O, normalization and synthetic shapes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class CloudError(ValueError):
    """Base class for point-cloud input problems."""


class ParseError(CloudError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyInputError(CloudError):
    pass


class PlyFormatError(CloudError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N ordered 3D positions. ``points`` is a read-only (N, 3) float64 array."""

    points: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CloudError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise EmptyInputError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise CloudError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)

    def allclose(self, other: "PointCloud", atol: float = 1e-6) -> bool:
        return self.points.shape == other.points.shape and bool(
            np.all(np.abs(self.points - other.points) <= atol)
        )

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, dict(self.meta))


def parse_xyz(text: str | Iterable[str]) -> PointCloud:
    """Read whitespace-separated ``x y z`` lines; ``#`` starts a comment line.

    Columns past the third are ignored.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 3:
            raise ParseError(f"expected 3 coordinates, found {len(fields)}", lineno)
        try:
            rows.append([float(f) for f in fields[:3]])
        except ValueError:
            raise ParseError(f"malformed number in {line!r}", lineno) from None
    if not rows:
        raise EmptyInputError("no data lines in XYZ input")
    return PointCloud(np.array(rows))


def write_xyz(cloud: PointCloud) -> str:
    if not isinstance(cloud, PointCloud) or cloud.n < 1:
        raise EmptyInputError("refusing to write an empty cloud")
    return "".join(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in cloud.points)


def parse_ply_ascii(text: str) -> PointCloud:
    """Read the vertex positions of an ASCII PLY file.

    Only the ``vertex`` element is read; other elements (faces and so on)
    after it are ignored, as are non-xyz vertex properties.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError("missing 'ply' magic on the first line")

    fmt = None
    elements: list[tuple[str, int, list[str]]] = []
    header_end = None
    for i, raw in enumerate(lines[1:], start=1):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else ""
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyFormatError(f"malformed element line {raw!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError("property declared before any element")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
        else:
            raise PlyFormatError(f"unexpected header line {raw!r}")

    if fmt is None:
        raise PlyFormatError("missing 'format' line")
    if fmt != "ascii":
        raise PlyFormatError(f"unsupported format {fmt!r}; only 'format ascii 1.0' is read")
    if header_end is None:
        raise PlyFormatError("missing 'end_header'")

    offset = header_end + 1
    body = [ln for ln in lines[offset:] if ln.strip()]
    cursor = 0
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        missing = [p for p in ("x", "y", "z") if p not in props]
        if missing:
            raise PlyFormatError(f"vertex element lacks properties {missing}")
        cols = [props.index(p) for p in ("x", "y", "z")]
        rows = body[cursor : cursor + count]
        if len(rows) != count:
            raise PlyFormatError(
                f"vertex count mismatch: header declares {count}, body has {len(rows)}"
            )
        pts = np.empty((count, 3))
        for r, row in enumerate(rows):
            fields = row.split()
            if len(fields) < len(props):
                raise PlyFormatError(f"vertex {r}: expected {len(props)} values")
            try:
                pts[r] = [float(fields[c]) for c in cols]
            except ValueError:
                raise PlyFormatError(f"vertex {r}: malformed number") from None
        if count == 0:
            raise EmptyInputError("PLY declares zero vertices")
        return PointCloud(pts)
    raise PlyFormatError("missing 'element vertex <N>'")


def read_cloud(path) -> PointCloud:
    """Load ``.ply`` (ASCII) or anything else as XYZ text."""
    from pathlib import Path

    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".ply":
        return parse_ply_ascii(text)
    return parse_xyz(text)


# -- normalization -----------------------------------------------------------


@dataclass(frozen=True)
class NormalizeTransform:
    centroid: np.ndarray
    scale: float

    def apply(self, cloud: PointCloud) -> PointCloud:
        return cloud.with_points((cloud.points - self.centroid) / self.scale)

    def inverse(self, cloud: PointCloud) -> PointCloud:
        return cloud.with_points(cloud.points * self.scale + self.centroid)

    def inverse_points(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.centroid


def normalize_unit_sphere(cloud: PointCloud) -> tuple[PointCloud, NormalizeTransform]:
    """Center on the centroid and scale so the farthest point has norm 1.

    Clouds whose points all coincide keep scale 1.
    """
    pts = cloud.points
    if np.all(pts == pts[0]):
        # exact test: the mean of equal values can be off by rounding
        tf = NormalizeTransform(pts[0].copy(), 1.0)
        return cloud.with_points(np.zeros_like(pts)), tf
    centroid = pts.mean(axis=0)
    shifted = pts - centroid
    scale = float(np.sqrt((shifted**2).sum(axis=1)).max())
    if not scale > 0.0:
        scale = 1.0
    tf = NormalizeTransform(centroid, scale)
    return cloud.with_points(shifted / scale), tf


# -- synthetic shapes --------------------------------------------------------

SHAPES = ("sphere", "torus", "plane-grid", "circle")


@dataclass(frozen=True)
class SynthSpec:
    shape: str
    n: int
    noise: float = 0.0
    seed: int = 0
    major_radius: float = 1.0
    minor_radius: float = 0.4


def _sphere(rng, m):
    v = rng.standard_normal((m, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus(rng, m, R, r):
    # rejection on the tube angle gives area-uniform samples
    out = np.empty((0, 3))
    while len(out) < m:
        u = rng.uniform(0, 2 * np.pi, 2 * m)
        v = rng.uniform(0, 2 * np.pi, 2 * m)
        keep = rng.uniform(0, 1, 2 * m) <= (R + r * np.cos(v)) / (R + r)
        u, v = u[keep], v[keep]
        ring = R + r * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:m]


def _circle(rng, m):
    a = rng.uniform(0, 2 * np.pi, m)
    return np.stack([np.cos(a), np.sin(a), np.zeros(m)], axis=1)


def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    """Indices of ``n`` points chosen greedily by farthest-point sampling from index 0."""
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = 0
    d2 = ((points - points[0]) ** 2).sum(axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(d2))
        d2 = np.minimum(d2, ((points - points[chosen[i]]) ** 2).sum(axis=1))
    return chosen


def surface_distance(points: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Unsigned distance from each point to the analytic surface of ``spec``."""
    p = np.asarray(points, dtype=np.float64)
    if spec.shape == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - 1.0)
    if spec.shape == "torus":
        ring = np.hypot(p[:, 0], p[:, 1]) - spec.major_radius
        return np.abs(np.hypot(ring, p[:, 2]) - spec.minor_radius)
    if spec.shape == "plane-grid":
        return np.abs(p[:, 2])
    if spec.shape == "circle":
        return np.hypot(np.hypot(p[:, 0], p[:, 1]) - 1.0, p[:, 2])
    raise ConfigurationError(f"unknown shape kind {spec.shape!r}")


def synth_shape(spec: SynthSpec) -> tuple[PointCloud, PointCloud]:
    """Clean samples on an analytic surface plus a Gaussian-perturbed copy.

    Sphere, torus and circle draw 4n uniform surface samples and keep n of them
    by farthest-point sampling, which gives the even, blue-noise spacing typical
    of Poisson-disk sampled benchmark patches. ``plane-grid`` is a regular grid
    on z = 0 over [-1, 1]^2.
    """
    if spec.shape not in SHAPES:
        raise ConfigurationError(f"unknown shape kind {spec.shape!r}; expected one of {SHAPES}")
    if spec.n < 4:
        raise ConfigurationError("synth_shape needs n >= 4")
    if spec.noise < 0:
        raise ConfigurationError("noise sigma must be non-negative")

    rng = np.random.default_rng(spec.seed)
    if spec.shape == "plane-grid":
        side = int(np.ceil(np.sqrt(spec.n)))
        g = np.linspace(-1.0, 1.0, side)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        clean = np.stack([xx.ravel(), yy.ravel(), np.zeros(side * side)], axis=1)[: spec.n]
    else:
        m = 4 * spec.n
        if spec.shape == "sphere":
            pool = _sphere(rng, m)
        elif spec.shape == "torus":
            pool = _torus(rng, m, spec.major_radius, spec.minor_radius)
        else:
            pool = _circle(rng, m)
        clean = pool[farthest_point_sample(pool, spec.n)]

    noisy = clean + spec.noise * rng.standard_normal(clean.shape)
    meta = {"shape": spec.shape, "seed": spec.seed}
    return PointCloud(clean, dict(meta)), PointCloud(noisy, dict(meta, noise=spec.noise))
