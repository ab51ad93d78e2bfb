"""Reconstruction losses, the KL term and their weighted total.

Every reconstruction loss accepts either one mesh as ``(N, 3)`` or a
node-major batch ``(N, 3*B)`` together with ``batch=B``. Terms are sums over
vertices, face pairs and latent entries; :func:`total_loss` divides by the
batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .mesh import face_edge_pairs, face_unit_normals

NORMAL_EPS = 1e-12


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is not finite ({value})")
        self.term = term


def _rows(x, batch: int) -> ad.Value:
    """Node-major (N, 3B) -> (N*B, 3); row ``n*B + b`` is vertex n of sample b."""
    x = ad.as_value(x)
    if x.data.ndim != 2 or x.shape[1] != 3 * batch:
        raise ad.ShapeError(f"expected (N, {3 * batch}) coordinates, got {x.shape}")
    return x if batch == 1 else ad.reshape(x, (x.shape[0] * batch, 3))


_PAIR_CACHE: dict = {}


def _pair_rows(faces: np.ndarray, batch: int) -> tuple[np.ndarray, np.ndarray]:
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    key = (faces.shape, faces.tobytes(), batch)
    hit = _PAIR_CACHE.get(key)
    if hit is None:
        if len(_PAIR_CACHE) > 32:
            _PAIR_CACHE.clear()
        hit = _PAIR_CACHE[key] = _build_pair_rows(faces, batch)
    return hit


def _build_pair_rows(faces: np.ndarray, batch: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = face_edge_pairs(faces)
    b = np.arange(batch)
    i = (pairs[:, 0:1] * batch + b).T.ravel()
    j = (pairs[:, 1:2] * batch + b).T.ravel()
    return i, j  # sample-major: all pairs of sample 0, then sample 1, ...


def loss_vertex(m, m_star, batch: int = 1) -> ad.Value:
    """L1 distance summed over all coordinates."""
    m, m_star = ad.as_value(m), ad.as_value(m_star)
    if m.shape != m_star.shape:
        raise ad.ShapeError(f"loss_vertex: {m.shape} vs {m_star.shape}")
    return ad.sum_(ad.absolute(m - m_star))


def nearest_indices(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """For each row of ``x`` the index of its nearest row of ``y``."""
    return cKDTree(y, balanced_tree=False).query(x, k=1)[1].astype(np.int64)


def loss_chamfer(m, m_star, batch: int = 1) -> ad.Value:
    """Symmetric sum of squared nearest-neighbour distances, per sample."""
    x, y = _rows(m, batch), _rows(m_star, batch)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("loss_chamfer: point sets must be non-empty")
    nx, ny = x.shape[0] // batch, y.shape[0] // batch
    xd = x.data.reshape(nx, batch, 3)
    yd = y.data.reshape(ny, batch, 3)
    idx_xy = np.empty((nx, batch), dtype=np.int64)
    idx_yx = np.empty((ny, batch), dtype=np.int64)
    for b in range(batch):
        idx_xy[:, b] = nearest_indices(xd[:, b], yd[:, b]) * batch + b
        idx_yx[:, b] = nearest_indices(yd[:, b], xd[:, b]) * batch + b
    forward = ad.sum_(ad.square(x - ad.gather_rows(y, idx_xy.ravel())))
    backward = ad.sum_(ad.square(y - ad.gather_rows(x, idx_yx.ravel())))
    return forward + backward


def loss_normal(m, faces, gt_normals, batch: int = 1, absolute: bool = True) -> ad.Value:
    """Sum over face pairs of ``|<unit edge, target face normal>|``.

    ``gt_normals`` is ``(F, 3)`` for one mesh or ``(B*F, 3)`` sample-major for a
    batch. With ``absolute=False`` the signed inner products are summed.
    Edges shorter than ``1e-12`` are skipped.
    """
    x = _rows(m, batch)
    faces = np.asarray(faces, dtype=np.int64)
    n_faces = faces.shape[0]
    normals = np.asarray(gt_normals, dtype=np.float64).reshape(batch * n_faces, 3)
    i, j = _pair_rows(faces, batch)
    # pair p of face f (3 per face), sample b -> normal row b*F + f
    face_of_pair = np.tile(np.repeat(np.arange(n_faces), 3), batch)
    sample = np.repeat(np.arange(batch), 3 * n_faces)
    nrm = normals[sample * n_faces + face_of_pair]
    diff = ad.gather_rows(x, i) - ad.gather_rows(x, j)
    keep = np.linalg.norm(diff.data, axis=1) > NORMAL_EPS
    if not keep.all():
        sel = np.flatnonzero(keep)
        diff, nrm = ad.gather_rows(diff, sel), nrm[sel]
    if diff.shape[0] == 0:
        return ad.as_value(0.0)
    inner = ad.sum_(ad.mul(diff, nrm), axis=1)
    cos = ad.divide(inner, ad.row_norms(diff))
    return ad.sum_(ad.absolute(cos) if absolute else cos)


def loss_edge(m, m_star, faces, batch: int = 1) -> ad.Value:
    """Sum over face pairs of the absolute edge-length difference."""
    x, y = _rows(m, batch), _rows(m_star, batch)
    if x.shape != y.shape:
        raise ad.ShapeError(f"loss_edge: {x.shape} vs {y.shape}")
    i, j = _pair_rows(faces, batch)
    lx = ad.row_norms(ad.gather_rows(x, i) - ad.gather_rows(x, j))
    ly = ad.row_norms(ad.gather_rows(y, i) - ad.gather_rows(y, j))
    return ad.sum_(ad.absolute(lx - ly))


def loss_kl(mu, log_var, beta: float) -> ad.Value:
    """``-(beta/2) * sum(1 + log_var - mu^2 - exp(log_var))``."""
    mu, log_var = ad.as_value(mu), ad.as_value(log_var)
    if mu.shape != log_var.shape:
        raise ad.ShapeError(f"loss_kl: {mu.shape} vs {log_var.shape}")
    inner = ad.sum_(1.0 + log_var - ad.square(mu) - ad.exp(log_var))
    return ad.scale(inner, -0.5 * float(beta))


@dataclass(frozen=True)
class LossTerms:
    """Batch-averaged, unweighted term values of one evaluation."""

    vertex: float
    chamfer: float
    edge: float
    normal: float
    kl: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return dict(vertex=self.vertex, chamfer=self.chamfer, edge=self.edge,
                    normal=self.normal, kl=self.kl, total=self.total)


def total_loss(config, outputs, targets, mu, log_var, faces, gt_normals=None,
               batch: int = 1) -> tuple[ad.Value, LossTerms]:
    """Weighted objective averaged over the batch, plus the individual terms.

    ``gt_normals`` defaults to the unit face normals of ``targets``. Raises
    :class:`NonFiniteLossError` naming the first non-finite term.
    """
    outputs, targets = ad.as_value(outputs), ad.as_value(targets)
    if gt_normals is None:
        gt_normals = target_normals(targets.data, faces, batch)
    makers = {
        "vertex": lambda: loss_vertex(outputs, targets, batch),
        "chamfer": lambda: loss_chamfer(outputs, targets, batch),
        "edge": lambda: loss_edge(outputs, targets, faces, batch),
        "normal": lambda: loss_normal(outputs, faces, gt_normals, batch, absolute=config.normal_abs),
        "kl": lambda: loss_kl(mu, log_var, config.beta),
    }
    terms = {}
    for name, make in makers.items():
        # the vertex term sees any non-finite output first; the nearest-neighbour search would reject it
        terms[name] = make()
        v = float(terms[name].data)
        if not np.isfinite(v):
            raise NonFiniteLossError(name, v)
    weighted = ad.sum_all([
        terms["kl"],
        ad.scale(terms["vertex"], config.alpha_vertex),
        ad.scale(terms["chamfer"], config.alpha_chamfer),
        ad.scale(terms["edge"], config.alpha_edge),
        ad.scale(terms["normal"], config.alpha_normal),
    ])
    total = ad.scale(weighted, 1.0 / batch)
    report = LossTerms(**{k: float(v.data) / batch for k, v in terms.items()}, total=float(total.data))
    if not np.isfinite(report.total):
        raise NonFiniteLossError("total", report.total)
    return total, report


def target_normals(targets: np.ndarray, faces, batch: int = 1) -> np.ndarray:
    """Unit face normals of node-major targets, sample-major ``(B*F, 3)``."""
    t = np.asarray(targets, dtype=np.float64)
    n = t.shape[0]
    samples = t.reshape(n, batch, 3).transpose(1, 0, 2)
    return np.concatenate([face_unit_normals(s, faces) for s in samples], axis=0)
