"""Quadric-error mesh simplification and the down/up-sampling matrices built from it."""

from __future__ import annotations

import heapq
import math
from functools import cached_property
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .mesh import Mesh, build_adjacency
from .spectral import estimate_lambda_max, exact_lambda_max, normalized_laplacian, scale_laplacian

MIN_VERTICES = 4  # hierarchy floor
MIN_TARGET = 3  # smallest triangle mesh a single simplification may produce
SINGULAR_COND = 1e12


class SimplificationError(RuntimeError):
    """The simplifier could not reach the requested vertex count."""

    def __init__(self, message: str, achieved: int):
        super().__init__(f"{message} (achieved {achieved} vertices)")
        self.achieved = achieved


# ---------------------------------------------------------------------------
# quadrics


def face_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """(F, 4, 4) fundamental error quadrics ``p p^T`` of the face planes, unit weight per face."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    p = np.concatenate([n, -np.sum(n * a, axis=1, keepdims=True)], axis=1)
    return p[:, :, None] * p[:, None, :]


def vertex_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    kf = face_quadrics(vertices, faces)
    q = np.zeros((vertices.shape[0], 4, 4))
    for k in range(3):
        np.add.at(q, faces[:, k], kf)
    return q


def contraction_target(q: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> tuple[np.ndarray, float]:
    """Quadric-optimal position for merging two vertices with summed quadric ``q``.

    Falls back to the midpoint when the system is singular.
    """
    a = q.copy()
    a[3] = (0.0, 0.0, 0.0, 1.0)
    if np.linalg.cond(a) > SINGULAR_COND:
        x = 0.5 * (p1 + p2)
    else:
        x = np.linalg.solve(a, np.array([0.0, 0.0, 0.0, 1.0]))[:3]
    h = np.append(x, 1.0)
    return x, max(float(h @ q @ h), 0.0)


# ---------------------------------------------------------------------------
# simplification


class _Simplifier:
    def __init__(self, mesh: Mesh):
        self.pos = np.array(mesh.vertices, dtype=np.float64)
        self.faces = np.array(mesh.faces, dtype=np.int64)
        n = self.pos.shape[0]
        self.q = vertex_quadrics(self.pos, self.faces)
        self.face_alive = np.ones(len(self.faces), dtype=bool)
        self.vert_faces: list[set[int]] = [set() for _ in range(n)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vert_faces[v].add(fi)
        self.alive = np.ones(n, dtype=bool)
        self.version = np.zeros(n, dtype=np.int64)
        self.n_alive = n
        self.heap: list = []
        self.rejected: set[tuple[int, int]] = set()

    def neighbors(self, v: int) -> set[int]:
        out = set()
        for fi in self.vert_faces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def edge_faces(self, a: int, b: int) -> set[int]:
        return self.vert_faces[a] & self.vert_faces[b]

    def is_boundary_vertex(self, v: int) -> bool:
        return any(len(self.edge_faces(v, w)) == 1 for w in self.neighbors(v))

    def push(self, a: int, b: int, cost: float | None = None):
        a, b = min(a, b), max(a, b)
        if cost is None:
            _, cost = contraction_target(self.q[a] + self.q[b], self.pos[a], self.pos[b])
        heapq.heappush(self.heap, (cost, a, b, int(self.version[a]), int(self.version[b])))

    def valid_topology(self, a: int, b: int) -> bool:
        shared = self.edge_faces(a, b)
        if not shared:
            return False
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {a, b}
        if self.neighbors(a) & self.neighbors(b) != opposite:
            return False
        if len(shared) == 2 and self.is_boundary_vertex(a) and self.is_boundary_vertex(b):
            return False
        return True

    def no_flips(self, keep: int, drop: int, target: np.ndarray) -> bool:
        touched = (self.vert_faces[keep] | self.vert_faces[drop]) - self.edge_faces(keep, drop)
        for fi in touched:
            f = self.faces[fi]
            old = self.pos[f]
            new = old.copy()
            for k in range(3):
                if f[k] in (keep, drop):
                    new[k] = target
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            area_new = np.linalg.norm(n_new)
            if area_new <= 1e-12 * max(np.linalg.norm(n_old), 1e-300):
                return False
            if float(n_old @ n_new) < 0.0:
                return False
        return True

    def contract(self, keep: int, drop: int, target: np.ndarray):
        for fi in self.edge_faces(keep, drop):
            self.face_alive[fi] = False
            for v in self.faces[fi]:
                self.vert_faces[v].discard(fi)
        for fi in list(self.vert_faces[drop]):
            f = self.faces[fi]
            f[f == drop] = keep
            self.vert_faces[keep].add(fi)
        self.vert_faces[drop] = set()
        self.pos[keep] = target
        self.q[keep] = self.q[keep] + self.q[drop]
        self.alive[drop] = False
        self.n_alive -= 1
        self.version[keep] += 1
        self.version[drop] += 1

    def run(self, target_count: int):
        for i in range(len(self.pos)):
            for j in self.neighbors(i):
                if i < j:
                    self.push(i, j)
        while self.n_alive > target_count:
            if not self.heap or math.isinf(self.heap[0][0]):
                raise SimplificationError(
                    f"no valid contraction left before reaching {target_count} vertices",
                    self.n_alive,
                )
            cost, a, b, va, vb = heapq.heappop(self.heap)
            if not (self.alive[a] and self.alive[b]):
                continue
            if self.version[a] != va or self.version[b] != vb:
                continue
            target, _ = contraction_target(self.q[a] + self.q[b], self.pos[a], self.pos[b])
            if not (self.valid_topology(a, b) and self.no_flips(a, b, target)):
                if not math.isinf(cost):
                    self.rejected.add((a, b))
                    self.push(a, b, math.inf)
                continue
            self.contract(a, b, target)
            ring = self.neighbors(a) | {a}
            for w in self.neighbors(a):
                self.push(a, w)
            retry = [e for e in self.rejected if e[0] in ring or e[1] in ring]
            for e in sorted(retry):
                self.rejected.discard(e)
                if self.alive[e[0]] and self.alive[e[1]] and self.edge_faces(*e):
                    self.push(*e)


def qem_simplify(mesh: Mesh, target_vertex_count: int) -> tuple[Mesh, sp.csr_matrix]:
    """Contract edges in order of quadric error until ``target_vertex_count`` vertices remain.

    Each contraction keeps the lower-indexed endpoint. The coarse mesh keeps
    the original coordinates of the surviving vertices, so that
    ``Q_d @ fine_vertices == coarse_vertices``. Returns ``(coarse, Q_d)``.
    """
    n = mesh.n_vertices
    if target_vertex_count < MIN_TARGET:
        raise ValueError(f"target must be >= {MIN_TARGET}, got {target_vertex_count}")
    if target_vertex_count > n:
        raise ValueError(f"target {target_vertex_count} exceeds vertex count {n}")
    simp = _Simplifier(mesh)
    if target_vertex_count < n:
        simp.run(target_vertex_count)
    kept = np.flatnonzero(simp.alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    coarse_faces = remap[simp.faces[simp.face_alive]]
    coarse = Mesh(mesh.vertices[kept], coarse_faces)
    q_d = sp.csr_matrix((np.ones(kept.size), (np.arange(kept.size), kept)), shape=(kept.size, n))
    return coarse, q_d


# ---------------------------------------------------------------------------
# up-sampling


def closest_point_barycentric(points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Barycentric coordinates of the closest point on each triangle to each point.

    ``points`` is (P, 3); ``a, b, c`` are (T, 3). Returns ``(dist2, bary)`` with
    shapes (P, T) and (P, T, 3).
    """
    p = points[:, None, :]
    ab, ac = (b - a)[None], (c - a)[None]
    ap, bp, cp = p - a[None], p - b[None], p - c[None]
    d1, d2 = np.sum(ab * ap, -1), np.sum(ac * ap, -1)
    d3, d4 = np.sum(ab * bp, -1), np.sum(ac * bp, -1)
    d5, d6 = np.sum(ab * cp, -1), np.sum(ac * cp, -1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    one, zero = np.ones_like(d1), np.zeros_like(d1)
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    wa = np.select(conds, [one, zero, 1 - v_ab, zero, 1 - w_ac, zero], 1 - v_in - w_in)
    wb = np.select(conds, [zero, one, v_ab, zero, zero, 1 - w_bc], v_in)
    wc = np.select(conds, [zero, zero, zero, one, w_ac, w_bc], w_in)
    bary = np.stack([wa, wb, wc], axis=-1)
    closest = wa[..., None] * a[None] + wb[..., None] * b[None] + wc[..., None] * c[None]
    dist2 = np.sum((p - closest) ** 2, axis=-1)
    return dist2, bary


def build_upsampling(mesh_fine: Mesh, mesh_coarse: Mesh, q_d) -> sp.csr_matrix:
    """Barycentric up-sampling matrix ``Q_u`` (N x n) paired with ``Q_d``.

    Retained vertices copy their coarse counterpart; discarded vertices are
    projected onto the nearest coarse triangle (lowest index on ties).
    """
    if mesh_coarse.n_faces == 0:
        raise ValueError("coarse mesh has no faces")
    q_d = sp.csr_matrix(q_d)
    n_fine, n_coarse = mesh_fine.n_vertices, mesh_coarse.n_vertices
    if q_d.shape != (n_coarse, n_fine):
        raise ValueError(f"Q_d shape {q_d.shape} != ({n_coarse}, {n_fine})")
    if not np.array_equal(np.diff(q_d.indptr), np.ones(n_coarse, dtype=q_d.indptr.dtype)):
        raise ValueError("every Q_d row must select exactly one fine vertex")
    kept_fine = q_d.indices.astype(np.int64)
    rows, cols, vals = [kept_fine], [np.arange(n_coarse)], [np.ones(n_coarse)]
    discarded = np.setdiff1d(np.arange(n_fine), kept_fine)
    if discarded.size:
        cf = mesh_coarse.faces
        cv = mesh_coarse.vertices
        dist2, bary = closest_point_barycentric(
            mesh_fine.vertices[discarded], cv[cf[:, 0]], cv[cf[:, 1]], cv[cf[:, 2]]
        )
        best = np.argmin(dist2, axis=1)
        w = np.clip(bary[np.arange(discarded.size), best], 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        rows.append(np.repeat(discarded, 3))
        cols.append(cf[best].reshape(-1))
        vals.append(w.reshape(-1))
    q_u = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_fine, n_coarse),
    ).tocsr()
    q_u.sum_duplicates()
    q_u.eliminate_zeros()
    return q_u


# ---------------------------------------------------------------------------
# hierarchy


@dataclass(frozen=True)
class PoolingLevel:
    mesh_fine: Mesh
    mesh_coarse: Mesh
    down: sp.csr_matrix
    up: sp.csr_matrix

    @cached_property
    def down_t(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.down.T)

    @cached_property
    def up_t(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.up.T)


@dataclass(frozen=True)
class PoolingHierarchy:
    """Meshes ``meshes[0]`` (finest) ... ``meshes[L]`` with the matrices linking them.

    ``laplacians[l]`` is the rescaled Laplacian of ``meshes[l]``.
    """

    levels: tuple[PoolingLevel, ...]
    factor: float
    laplacians: tuple[sp.csr_matrix, ...] = field(repr=False)
    lambda_max: tuple[float, ...]

    @property
    def meshes(self) -> list[Mesh]:
        if not self.levels:
            return []
        return [self.levels[0].mesh_fine] + [lvl.mesh_coarse for lvl in self.levels]

    @property
    def sizes(self) -> list[int]:
        return [m.n_vertices for m in self.meshes]


def level_targets(n: int, num_levels: int, factor: float) -> list[int]:
    """Vertex counts per level: floor division by ``factor`` with a floor of 4."""
    out, cur = [], n
    for _ in range(num_levels):
        cur = max(MIN_VERTICES, int(math.floor(cur / factor)))
        out.append(cur)
    return out


def min_vertices_for(num_levels: int, factor: float) -> int:
    """Smallest N for which every level but the last reduces without hitting the clamp."""
    if num_levels == 0:
        return MIN_VERTICES
    return int(math.ceil(MIN_VERTICES * factor ** (num_levels - 1)))


def laplacian_for(mesh: Mesh, method: str = "exact"):
    """Rescaled Laplacian of ``mesh`` and the ``lambda_max`` used.

    ``"exact"`` uses a symmetric eigensolver; ``"power"`` uses power iteration
    at its default tolerance, which can undershoot when the top eigenvalues
    are clustered and leave the rescaled spectrum slightly above 1.
    """
    lap = normalized_laplacian(build_adjacency(mesh))
    if method == "exact":
        lam = exact_lambda_max(lap)
    elif method == "power":
        lam = estimate_lambda_max(lap)
    else:
        raise ValueError(f"unknown lambda_max method {method!r}")
    return scale_laplacian(lap, lam), lam


def make_hierarchy(meshes, downs, ups, factor: float) -> PoolingHierarchy:
    """Assemble a hierarchy from precomputed meshes and matrices, recomputing Laplacians."""
    levels = tuple(
        PoolingLevel(meshes[i], meshes[i + 1], sp.csr_matrix(downs[i]), sp.csr_matrix(ups[i]))
        for i in range(len(downs))
    )
    laps, lams = [], []
    for m in meshes:
        lbar, lam = laplacian_for(m)
        laps.append(lbar)
        lams.append(lam)
    return PoolingHierarchy(levels, float(factor), tuple(laps), tuple(lams))


def build_hierarchy(mesh: Mesh, num_levels: int, factor: float = 4.0) -> PoolingHierarchy:
    """Repeatedly simplify ``mesh`` by ``factor`` and pair each step with its up-sampler."""
    if factor <= 1:
        raise ValueError(f"factor must exceed 1, got {factor}")
    if num_levels < 0:
        raise ValueError("num_levels must be >= 0")
    need = min_vertices_for(num_levels, factor)
    if mesh.n_vertices < need:
        raise ValueError(
            f"mesh has {mesh.n_vertices} vertices; {num_levels} levels at factor {factor} "
            f"need at least {need}"
        )
    meshes, downs, ups = [mesh], [], []
    for target in level_targets(mesh.n_vertices, num_levels, factor):
        fine = meshes[-1]
        coarse, q_d = qem_simplify(fine, min(target, fine.n_vertices))
        downs.append(q_d)
        ups.append(build_upsampling(fine, coarse, q_d))
        meshes.append(coarse)
    return make_hierarchy(meshes, downs, ups, factor)


def apply_down(level: PoolingLevel, signal) -> ad.Value:
    """``Q_d @ signal`` for a node-major (N, C) signal."""
    signal = ad.as_value(signal)
    if signal.shape[0] != level.down.shape[1]:
        raise ad.ShapeError(f"signal has {signal.shape[0]} rows, level expects {level.down.shape[1]}")
    return ad.spmm(level.down, signal, level.down_t)


def apply_up(level: PoolingLevel, signal) -> ad.Value:
    """``Q_u @ signal`` for a node-major (n, C) signal."""
    signal = ad.as_value(signal)
    if signal.shape[0] != level.up.shape[1]:
        raise ad.ShapeError(f"signal has {signal.shape[0]} rows, level expects {level.up.shape[1]}")
    return ad.spmm(level.up, signal, level.up_t)
