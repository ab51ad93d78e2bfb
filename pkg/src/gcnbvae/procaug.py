"""Procrustes alignment and the augmentation policy fitted from it.

Meshes are normalized to unit Frobenius norm and rotated onto a reference
with the orthogonal Procrustes solution. The per-mesh rotations (as ZYX Euler
angles) and the corpus norms give uniform ranges from which training-time
augmentations are drawn: identity, rescaling, or rotation, each with
probability 1/3.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

IDENTITY, SCALE, ROTATE = 0, 1, 2
BRANCHES = {
    "procaug": (IDENTITY, SCALE, ROTATE),
    "scale-only": (IDENTITY, SCALE),
    "rotation-only": (IDENTITY, ROTATE),
    "none": (IDENTITY,),
}


class GimbalLockError(ValueError):
    """The middle ZYX angle is at +-pi/2 and the outer angles are not separable."""


# ---------------------------------------------------------------------------
# linear algebra


def frobenius_normalize(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Return ``(m / ||m||_F, ||m||_F)``."""
    m = np.asarray(m, dtype=np.float64)
    norm = float(np.linalg.norm(m))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero matrix")
    return m / norm, norm


def jacobi_svd3(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """SVD of a 3x3 matrix by one-sided (Hestenes) Jacobi rotations.

    Returns ``u, s, vt`` with ``a = u @ diag(s) @ vt``, singular values descending
    and ``u``, ``vt`` orthogonal.
    """
    w = np.array(a, dtype=np.float64)
    v = np.eye(3)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(2):
            for j in range(i + 1, 3):
                alpha = w[:, i] @ w[:, i]
                beta = w[:, j] @ w[:, j]
                gamma = w[:, i] @ w[:, j]
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                # rotation angle ~ gamma / (beta - alpha) would be below roundoff
                if abs(gamma) <= 1e-150 * abs(beta - alpha):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                w[:, [i, j]] = w[:, [i, j]] @ rot
                v[:, [i, j]] = v[:, [i, j]] @ rot
        if not rotated:
            break
    sig = np.linalg.norm(w, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, w, v = sig[order], w[:, order], v[:, order]
    u = np.zeros((3, 3))
    scale = max(sig[0], 1e-300)
    for k in range(3):
        if sig[k] > 1e-14 * scale:
            u[:, k] = w[:, k] / sig[k]
        else:
            u[:, k] = _complete_basis(u[:, :k])
    return u, sig, v.T


def _complete_basis(cols: np.ndarray) -> np.ndarray:
    """A unit vector orthogonal to the given orthonormal columns."""
    if cols.shape[1] == 2:
        return np.cross(cols[:, 0], cols[:, 1])
    for e in np.eye(3):
        x = e - cols @ (cols.T @ e) if cols.size else e.copy()
        n = np.linalg.norm(x)
        if n > 1e-6:
            return x / n
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ProcrustesResult:
    rotation: np.ndarray
    residual: float
    scale_in: float


def procrustes_rotation(m: np.ndarray, m_ref: np.ndarray, *, proper: bool = False,
                        center: bool = False) -> ProcrustesResult:
    """Orthogonal ``Omega`` minimizing ``||M Omega - M_ref||_F`` for unit-norm inputs.

    Inputs are Frobenius-normalized first (a no-op for unit-norm arrays);
    ``scale_in`` is the norm of ``m`` before that. ``Omega = U V^T`` from the
    SVD of ``M^T M_ref``, which may be a reflection unless ``proper`` is set.
    """
    m = np.asarray(m, dtype=np.float64)
    m_ref = np.asarray(m_ref, dtype=np.float64)
    if m.shape != m_ref.shape:
        raise ValueError(f"shape mismatch: {m.shape} vs {m_ref.shape}")
    if center:
        m = m - m.mean(axis=0)
        m_ref = m_ref - m_ref.mean(axis=0)
    m_hat, norm = frobenius_normalize(m)
    ref_hat, _ = frobenius_normalize(m_ref)
    u, _, vt = jacobi_svd3(m_hat.T @ ref_hat)
    if proper and np.linalg.det(u @ vt) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
    omega = u @ vt
    residual = float(np.linalg.norm(m_hat @ omega - ref_hat))
    return ProcrustesResult(omega, residual, norm)


# ---------------------------------------------------------------------------
# Euler angles


def euler_zyx_to_rotation(psi: float, xi: float, gamma: float) -> np.ndarray:
    """``Rz(gamma) @ Ry(xi) @ Rx(psi)``."""
    cx, sx = math.cos(psi), math.sin(psi)
    cy, sy = math.cos(xi), math.sin(xi)
    cz, sz = math.cos(gamma), math.sin(gamma)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def rotation_to_euler_zyx(omega: np.ndarray, *, allow_gimbal: bool = False) -> tuple[float, float, float]:
    """Inverse of :func:`euler_zyx_to_rotation` on the principal range.

    At gimbal lock, raises :class:`GimbalLockError` unless ``allow_gimbal``,
    in which case ``psi = 0`` and the remaining rotation goes into ``gamma``.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if abs(np.linalg.det(omega) - 1.0) > 1e-8:
        raise ValueError("not a proper rotation (det != +1)")
    s = omega[2, 0]
    if abs(s) >= 1.0 - 1e-9:
        if not allow_gimbal:
            raise GimbalLockError(f"gimbal lock: Omega[2,0] = {s:.12f}")
        xi = -math.copysign(math.pi / 2, s)
        return 0.0, xi, math.atan2(-omega[0, 1], omega[1, 1])
    xi = -math.asin(s)
    psi = math.atan2(omega[2, 1], omega[2, 2])
    gamma = math.atan2(omega[1, 0], omega[0, 0])
    return psi, xi, gamma


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class AugmentPolicy:
    """Uniform ranges for the three Euler angles (radians) and the target Frobenius norm."""

    psi: tuple[float, float]
    xi: tuple[float, float]
    gamma: tuple[float, float]
    scale: tuple[float, float]
    branches: tuple[int, ...] = BRANCHES["procaug"]

    def __post_init__(self):
        for name in ("psi", "xi", "gamma", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ValueError("s_min must be positive")
        if not self.branches:
            raise ValueError("policy needs at least one branch")

    @property
    def num_transforms(self) -> int:
        return len(self.branches)

    def with_mode(self, mode: str) -> "AugmentPolicy":
        """Same ranges, restricted to the branches of an ablation arm."""
        return AugmentPolicy(self.psi, self.xi, self.gamma, self.scale, BRANCHES[mode])


def choose_reference(corpus: Sequence) -> int:
    """Index of the member with the median Frobenius norm (lower median for even sizes)."""
    norms = [float(np.linalg.norm(_coords(m))) for m in corpus]
    order = sorted(range(len(norms)), key=lambda i: (norms[i], i))
    return order[(len(order) - 1) // 2]


def _coords(m) -> np.ndarray:
    return np.asarray(getattr(m, "vertices", m), dtype=np.float64)


def fit_policy(corpus: Sequence, reference, *, proper: bool = False, center: bool = False) -> AugmentPolicy:
    """Angle ranges from Procrustes rotations onto ``reference``; scale range from corpus norms."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    ref = _coords(reference)
    angles = []
    for i, m in enumerate(corpus):
        res = procrustes_rotation(_coords(m), ref, proper=proper, center=center)
        try:
            angles.append(rotation_to_euler_zyx(res.rotation))
        except GimbalLockError:
            warnings.warn(f"mesh {i}: gimbal lock, psi set to 0", RuntimeWarning, stacklevel=2)
            angles.append(rotation_to_euler_zyx(res.rotation, allow_gimbal=True))
        except ValueError:
            warnings.warn(f"mesh {i}: Procrustes solution is a reflection; excluded",
                          RuntimeWarning, stacklevel=2)
    if not angles:
        raise ValueError("no corpus member produced a usable rotation")
    a = np.asarray(angles)
    norms = [float(np.linalg.norm(_coords(m))) for m in corpus]
    rng = lambda col: (float(a[:, col].min()), float(a[:, col].max()))  # noqa: E731
    return AugmentPolicy(rng(0), rng(1), rng(2), (min(norms), max(norms)))


def augment(mesh, policy: AugmentPolicy, rng: np.random.Generator, branch: int | None = None):
    """One random transform of ``mesh``: identity, rescale to a sampled norm, or a sampled rotation.

    Accepts a :class:`~gcnbvae.mesh.Mesh` (returns a Mesh) or an (N, 3) array.
    """
    if branch is None:
        branch = policy.branches[int(rng.integers(len(policy.branches)))]
    coords = _coords(mesh)
    if branch == IDENTITY:
        out = coords.copy()
    elif branch == SCALE:
        s = rng.uniform(*policy.scale)
        out = coords * (s / np.linalg.norm(coords))
    elif branch == ROTATE:
        omega = euler_zyx_to_rotation(rng.uniform(*policy.psi), rng.uniform(*policy.xi),
                                      rng.uniform(*policy.gamma))
        out = coords @ omega.T
    else:
        raise ValueError(f"unknown branch {branch}")
    if hasattr(mesh, "with_vertices"):
        return mesh.with_vertices(out)
    return out


def alignment_report(corpus: Sequence, reference, *, proper: bool = False,
                     center: bool = False) -> list[dict]:
    """Per-mesh L2 and Chamfer error to ``reference`` before and after alignment.

    "Before" compares raw coordinates. "After" normalizes the mesh, rotates it
    onto the normalized reference and rescales both to the reference norm, so
    both columns are in the reference's units.
    """
    from .analysis import metric_chamfer

    ref = _coords(reference)
    ref_c = ref - ref.mean(axis=0) if center else ref
    ref_hat, ref_norm = frobenius_normalize(ref_c)
    rows = []
    for i, m in enumerate(corpus):
        x = _coords(m)
        res = procrustes_rotation(x, ref, proper=proper, center=center)
        xc = x - x.mean(axis=0) if center else x
        aligned = (xc / res.scale_in) @ res.rotation * ref_norm
        target = ref_hat * ref_norm
        rows.append({
            "mesh_id": i,
            "l2_before": float(np.linalg.norm(x - ref)),
            "l2_after": float(np.linalg.norm(aligned - target)),
            "chamfer_before": metric_chamfer(x, ref),
            "chamfer_after": metric_chamfer(aligned, target),
        })
    return rows
