"""Reconstruction metrics, latent statistics, PCA baseline and greedy mode ranking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree


def _pts(m) -> np.ndarray:
    a = np.asarray(getattr(m, "vertices", m), dtype=np.float64)
    return a.reshape(-1, 3)


# ---------------------------------------------------------------------------
# metrics


def metric_E(m, m_star) -> float:
    """Reconstruction percentage ``100 * (1 - ||M - M*|| / ||M*||)`` over flattened coordinates."""
    x, y = _pts(m), _pts(m_star)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    ref = np.linalg.norm(y)
    if ref == 0.0:
        raise ValueError("ground truth has zero norm")
    return float((1.0 - np.linalg.norm(x - y) / ref) * 100.0)


def _nn_sq(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared distance from each row of ``x`` to its nearest row of ``y``."""
    idx = cKDTree(y).query(x, k=1)[1]
    d = x - y[idx]
    return np.einsum("ij,ij->i", d, d)


def metric_chamfer(m, m_star) -> float:
    """Symmetric sum of squared nearest-neighbour distances (cm^2)."""
    x, y = _pts(m), _pts(m_star)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("point sets must be non-empty")
    return float(_nn_sq(x, y).sum() + _nn_sq(y, x).sum())


def metric_rcd(m, m_star) -> float:
    """Root Chamfer distance (cm)."""
    return math.sqrt(metric_chamfer(m, m_star))


def per_vertex_rcd(m, m_star) -> np.ndarray:
    """Distance from each vertex of ``m`` to its nearest vertex of ``m_star``."""
    x, y = _pts(m), _pts(m_star)
    return np.sqrt(_nn_sq(x, y))


def metric_l2_rms(m, m_star) -> float:
    """Root-mean-square per-vertex Euclidean error (cm)."""
    x, y = _pts(m), _pts(m_star)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.mean(np.sum((x - y) ** 2, axis=1))))


@dataclass(frozen=True)
class MetricsReport:
    E_percent: float
    chamfer: float
    rcd: float
    l2_rms: float
    kl: float = float("nan")
    per_vertex: np.ndarray | None = None


def evaluate_pair(m, m_star, kl: float = float("nan"), with_map: bool = False) -> MetricsReport:
    ch = metric_chamfer(m, m_star)
    return MetricsReport(metric_E(m, m_star), ch, math.sqrt(ch), metric_l2_rms(m, m_star), kl,
                         per_vertex_rcd(m, m_star) if with_map else None)


# ---------------------------------------------------------------------------
# latent statistics


def correlation_det(x) -> tuple[np.ndarray, float]:
    """Correlation matrix of the columns of ``x`` and ``100 * det(R)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (n, d) matrix with n >= 2")
    c = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    var = np.diag(c).copy()
    bad = np.flatnonzero(var <= 1e-15)
    if bad.size:
        raise ValueError(f"latent dimension {int(bad[0])} has zero variance")
    s = np.sqrt(var)
    r = c / s[:, None] / s[None, :]
    r = np.clip(0.5 * (r + r.T), -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    # LAPACK getrf: LU with partial pivoting
    return r, float(np.linalg.det(r) * 100.0)


@dataclass(frozen=True)
class Histogram:
    dim: int
    edges: np.ndarray
    density: np.ndarray
    reference: np.ndarray  # N(0, 1) density at bin centres

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def latent_histograms(x, bins: int = 20) -> list[Histogram]:
    """Density-normalized histogram per column with a standard-normal overlay."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < bins:
        raise ValueError(f"need at least {bins} observations, got {x.shape[0]}")
    out = []
    for j in range(x.shape[1]):
        density, edges = np.histogram(x[:, j], bins=bins, density=True)
        centers = 0.5 * (edges[:-1] + edges[1:])
        ref = np.exp(-0.5 * centers**2) / math.sqrt(2.0 * math.pi)
        out.append(Histogram(j, edges, density, ref))
    return out


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray          # (3N,)
    components: np.ndarray    # (d, 3N), orthonormal rows
    variances: np.ndarray     # (d,), descending

    @property
    def dim(self) -> int:
        return self.components.shape[0]


def _flat(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.ndim == 2 and data.shape[1] != 3:
        return data.astype(np.float64)
    return np.stack([_pts(m).ravel() for m in data])


def pca_fit(train, d: int) -> PcaModel:
    """Top-``d`` principal directions of an ``(n, 3N)`` matrix or a list of meshes.

    Uses the thin SVD of the centred data, which equals the covariance
    eigenbasis and stays cheap when ``n`` is much smaller than ``3N``.
    """
    x = _flat(train)
    n, p = x.shape
    if d < 0 or d > min(n - 1, p):
        raise ValueError(f"d={d} must lie in [0, min(n-1, 3N)] = [0, {min(n - 1, p)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:d].copy()
    # fix the sign so each component's largest-magnitude entry is positive
    for k in range(d):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] *= -1.0
    return PcaModel(mean, comps, (s[:d] ** 2) / (n - 1))


def pca_reconstruct(model: PcaModel, mesh) -> np.ndarray:
    """Project onto the model and map back; returns the same layout as the input."""
    arr = np.asarray(getattr(mesh, "vertices", mesh), dtype=np.float64)
    x = arr.reshape(-1, model.mean.size) - model.mean
    rec = model.mean + (x @ model.components.T) @ model.components
    return rec.reshape(arr.shape)


# ---------------------------------------------------------------------------
# mode ranking


@dataclass(frozen=True)
class ModeRanking:
    order: list[int]
    cumulative_E: np.ndarray
    cumulative_chamfer: np.ndarray


def rank_modes(encoder: Callable, decoder: Callable, data: Sequence) -> ModeRanking:
    """Greedy ordering of latent modes by corpus-mean reconstruction percentage.

    ``encoder`` maps one mesh to its mean latent vector; ``decoder`` maps an
    ``(n, d)`` latent batch to ``(n, N, 3)`` vertices. At each step every
    unselected mode is tried together with the modes already chosen (all other
    entries zeroed); the best mean E wins, ties going to the lower index.
    """
    targets = [_pts(m) for m in data]
    z = np.stack([np.asarray(encoder(m), dtype=np.float64).ravel() for m in data])
    d = z.shape[1]
    chosen: list[int] = []
    curve_e, curve_c = [], []
    for _ in range(d):
        best = None
        for c in range(d):
            if c in chosen:
                continue
            mask = np.zeros(d, dtype=bool)
            mask[chosen + [c]] = True
            recon = np.asarray(decoder(np.where(mask, z, 0.0)))
            e = float(np.mean([metric_E(r, t) for r, t in zip(recon, targets)]))
            if best is None or e > best[1]:
                best = (c, e, recon)
        c, e, recon = best
        chosen.append(c)
        curve_e.append(e)
        curve_c.append(float(np.mean([metric_chamfer(r, t) for r, t in zip(recon, targets)])))
    return ModeRanking(chosen, np.asarray(curve_e), np.asarray(curve_c))


# ---------------------------------------------------------------------------
# CSV export


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def export_mode_curve(path, ranking: ModeRanking) -> None:
    rows = [(k + 1, m, e, c) for k, (m, e, c) in
            enumerate(zip(ranking.order, ranking.cumulative_E, ranking.cumulative_chamfer))]
    write_csv(path, ("mode_rank", "mode", "E", "chamfer"), rows)


def export_histograms(path, hists: Sequence[Histogram]) -> None:
    rows = [(h.dim, left, dens, ref)
            for h in hists for left, dens, ref in zip(h.edges[:-1], h.density, h.reference)]
    write_csv(path, ("dim", "bin_left", "density", "normal_density"), rows)


def export_correlation(path, r: np.ndarray) -> None:
    write_csv(path, [f"z{j}" for j in range(r.shape[1])], r.tolist())


def export_per_vertex(path, values: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{float(v)!r}\n" for v in values))
