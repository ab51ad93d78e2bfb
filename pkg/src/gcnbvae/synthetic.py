"""Parametric aneurysm-like tube meshes sharing one connectivity.

Each sample is a capped tube swept along a bent centerline, with a Gaussian
bulge (the sac) in its radius profile. Per-sample parameters are drawn
uniformly from the ranges of a :class:`SyntheticSpec`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .mesh import Mesh
from .rng import stream
from .procaug import euler_zyx_to_rotation


class GenerationError(ValueError):
    """Parameters would produce a self-intersecting tube."""


Range = tuple[float, float]


@dataclass(frozen=True)
class SyntheticSpec:
    """Grid resolution and per-sample parameter ranges (lengths in cm, angles in radians)."""

    n_theta: int = 12
    n_len: int = 32
    corpus_size: int = 64
    seed: int = 0
    length: Range = (8.0, 12.0)
    neck_radius: Range = (0.9, 1.3)
    sac_radius: Range = (1.8, 3.2)
    sac_center: Range = (0.3, 0.7)
    sac_width: Range = (0.08, 0.16)
    sac_eccentricity: Range = (0.0, 0.25)
    bend: Range = (-1.5, 1.5)
    rotation: Range = (-0.3, 0.3)
    scale: Range = (0.85, 1.15)

    def __post_init__(self):
        if self.n_theta < 3 or self.n_len < 2:
            raise ValueError("need n_theta >= 3 and n_len >= 2")
        for name in ("length", "neck_radius", "sac_radius", "sac_center", "sac_width",
                     "sac_eccentricity", "bend", "rotation", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.neck_radius[0] <= 0:
            raise ValueError("neck radius must be positive")
        if self.sac_radius[0] < self.neck_radius[1]:
            raise ValueError("sac radius range must lie above the neck radius range")
        if not (0 < self.sac_center[0] and self.sac_center[1] < 1):
            raise ValueError("sac center must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TubeParams:
    length: float
    neck_radius: float
    sac_radius: float
    sac_center: float
    sac_width: float
    sac_eccentricity: float = 0.0
    sac_direction: float = 0.0
    bend: float = 0.0
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    extra: dict = field(default_factory=dict, compare=False)


def tube_faces(n_theta: int, n_len: int) -> np.ndarray:
    """Outward-oriented faces of a capped tube with ``n_theta * n_len + 2`` vertices."""
    faces = []
    for i in range(n_len - 1):
        for k in range(n_theta):
            a = i * n_theta + k
            b = i * n_theta + (k + 1) % n_theta
            c = (i + 1) * n_theta + k
            d = (i + 1) * n_theta + (k + 1) % n_theta
            faces.append((a, b, c))
            faces.append((b, d, c))
    start, end = n_theta * n_len, n_theta * n_len + 1
    last = (n_len - 1) * n_theta
    for k in range(n_theta):
        faces.append((start, (k + 1) % n_theta, k))
        faces.append((end, last + k, last + (k + 1) % n_theta))
    return np.asarray(faces, dtype=np.int64)


def _centerline(t: np.ndarray, length: float, bend: float):
    z = (t - 0.5) * length
    x = bend * np.sin(np.pi * t)
    pts = np.stack([x, np.zeros_like(t), z], axis=1)
    dx = bend * np.pi * np.cos(np.pi * t)
    tangent = np.stack([dx, np.zeros_like(t), np.full_like(t, length)], axis=1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    ddx = -bend * np.pi**2 * np.sin(np.pi * t)
    curvature = np.abs(ddx * length) / (dx**2 + length**2) ** 1.5
    return pts, tangent, curvature


def tube_mesh(params: TubeParams, n_theta: int, n_len: int) -> Mesh:
    """Build one capped tube mesh from explicit shape parameters."""
    t = np.linspace(0.0, 1.0, n_len)
    phi = 2.0 * np.pi * np.arange(n_theta) / n_theta
    center, tangent, curvature = _centerline(t, params.length, params.bend)
    bump = np.exp(-((t - params.sac_center) ** 2) / (2.0 * params.sac_width**2))
    radius = params.neck_radius + (params.sac_radius - params.neck_radius) * bump
    ecc = 1.0 + params.sac_eccentricity * bump[:, None] * np.cos(phi[None, :] - params.sac_direction)
    r = radius[:, None] * ecc
    if np.max(r.max(axis=1) * curvature) >= 1.0:
        raise GenerationError("sac radius exceeds the centerline bend clearance")
    ref = np.array([0.0, 1.0, 0.0])
    n1 = ref[None, :] - (tangent @ ref)[:, None] * tangent
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(tangent, n1)
    rings = (center[:, None, :]
             + r[:, :, None] * (np.cos(phi)[None, :, None] * n1[:, None, :]
                                + np.sin(phi)[None, :, None] * n2[:, None, :]))
    verts = np.concatenate([rings.reshape(-1, 3), center[[0, -1]]], axis=0)
    rot = euler_zyx_to_rotation(*params.angles)
    verts = params.scale * verts @ rot.T
    return Mesh(verts, tube_faces(n_theta, n_len))


def sample_params(spec: SyntheticSpec, rng: np.random.Generator) -> TubeParams:
    u = lambda rg: float(rng.uniform(*rg))  # noqa: E731
    return TubeParams(
        length=u(spec.length),
        neck_radius=u(spec.neck_radius),
        sac_radius=u(spec.sac_radius),
        sac_center=u(spec.sac_center),
        sac_width=u(spec.sac_width),
        sac_eccentricity=u(spec.sac_eccentricity),
        sac_direction=float(rng.uniform(0.0, 2.0 * np.pi)),
        bend=u(spec.bend),
        angles=(u(spec.rotation), u(spec.rotation), u(spec.rotation)),
        scale=u(spec.scale),
    )


def generate_corpus(spec: SyntheticSpec) -> list[Mesh]:
    """``spec.corpus_size`` meshes with identical faces; member ``i`` uses its own seed stream."""
    out = []
    for i in range(spec.corpus_size):
        rng = stream(spec.seed, "corpus", i)
        out.append(tube_mesh(sample_params(spec, rng), spec.n_theta, spec.n_len))
    return out
