"""Triangle meshes with a fixed face list, OFF/OBJ IO and topology helpers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class MeshFormatError(ValueError):
    """A mesh file could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class MeshValidationError(ValueError):
    """A mesh violates a structural invariant."""


class DegenerateGeometryError(ValueError):
    """A face has zero area where a direction is required."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle surface: ``vertices`` (N, 3) in cm and ``faces`` (F, 3) CCW index triples.

    Arrays are copied and frozen on construction.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True)
        f = np.array(self.faces, dtype=np.int64, copy=True)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"vertices must be (N, 3), got {v.shape}")
        if f.size == 0:
            raise MeshValidationError("mesh has no faces")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshValidationError(f"faces must be (F, 3), got {f.shape}")
        n = v.shape[0]
        if f.min() < 0 or f.max() >= n:
            bad = int(np.flatnonzero((f < 0).any(1) | (f >= n).any(1))[0])
            raise MeshValidationError(f"face {bad} has index out of range [0, {n})")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshValidationError(f"face {int(np.flatnonzero(degenerate)[0])} is degenerate")
        used = np.zeros(n, dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise MeshValidationError(f"vertex {int(np.flatnonzero(~used)[0])} is isolated")
        if not np.isfinite(v).all():
            raise MeshValidationError("vertices contain non-finite values")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "Mesh":
        """Same connectivity, new coordinates."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshValidationError(
                f"vertex array shape {vertices.shape} != {self.vertices.shape}"
            )
        return Mesh(vertices, self.faces)


# ---------------------------------------------------------------------------
# IO


def load_mesh(path) -> Mesh:
    """Read an OFF or OBJ triangle mesh, preserving vertex order."""
    path = Path(path)
    suffix = path.suffix.lower()
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if suffix == ".off":
        vertices, faces = _parse_off(path, lines)
    elif suffix == ".obj":
        vertices, faces = _parse_obj(path, lines)
    else:
        raise MeshFormatError(path, 0, f"unsupported extension {suffix!r} (OFF or OBJ only)")
    return Mesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def _content_lines(lines):
    for no, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            yield no, text


def _floats(path, no, tokens):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise MeshFormatError(path, no, f"expected numbers, got {' '.join(tokens)!r}") from None


def _ints(path, no, tokens):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise MeshFormatError(path, no, f"expected integers, got {' '.join(tokens)!r}") from None


def _parse_off(path, lines):
    it = _content_lines(lines)
    try:
        no, header = next(it)
    except StopIteration:
        raise MeshFormatError(path, 1, "empty file") from None
    tokens = header.split()
    if tokens[0] != "OFF":
        raise MeshFormatError(path, no, f"expected 'OFF' header, got {tokens[0]!r}")
    counts = tokens[1:]
    if counts and not counts[0].lstrip("-").isdigit():
        raise MeshFormatError(path, no, "binary or non-standard OFF is not supported")
    if not counts:
        try:
            no, text = next(it)
        except StopIteration:
            raise MeshFormatError(path, no, "missing counts line") from None
        counts = text.split()
    if len(counts) < 2:
        raise MeshFormatError(path, no, "counts line needs 'N F [E]'")
    n_v, n_f = _ints(path, no, counts[:2])
    vertices, faces = [], []
    for _ in range(n_v):
        try:
            no, text = next(it)
        except StopIteration:
            raise MeshFormatError(path, no, f"expected {n_v} vertices, got {len(vertices)}") from None
        tok = text.split()
        if len(tok) < 3:
            raise MeshFormatError(path, no, "vertex line needs 3 coordinates")
        vertices.append(_floats(path, no, tok[:3]))
    for _ in range(n_f):
        try:
            no, text = next(it)
        except StopIteration:
            raise MeshFormatError(path, no, f"expected {n_f} faces, got {len(faces)}") from None
        tok = _ints(path, no, text.split())
        if tok[0] != 3 or len(tok) < 4:
            raise MeshFormatError(path, no, "only triangle faces '3 i j k' are supported")
        faces.append(tok[1:4])
    return vertices, faces


def _parse_obj(path, lines):
    vertices, faces = [], []
    for no, text in _content_lines(lines):
        tok = text.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshFormatError(path, no, "vertex line needs 3 coordinates")
            vertices.append(_floats(path, no, tok[1:4]))
        elif tok[0] == "f":
            if len(tok) != 4:
                raise MeshFormatError(path, no, "only triangle faces are supported")
            idx = _ints(path, no, [t.split("/", 1)[0] for t in tok[1:]])
            if min(idx) < 1:
                raise MeshValidationError(f"{path}:{no}: OBJ face indices are 1-based, got {idx}")
            faces.append([i - 1 for i in idx])
    return vertices, faces


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` as OFF or OBJ depending on the file extension."""
    if not isinstance(mesh, Mesh):
        raise MeshValidationError("save_mesh expects a Mesh")
    path = Path(path)
    suffix = path.suffix.lower()
    vlines = [" ".join(f"{c:.9g}" for c in row) for row in mesh.vertices]
    if suffix == ".off":
        out = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
        out += vlines
        out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    elif suffix == ".obj":
        out = ["v " + line for line in vlines]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    else:
        raise MeshFormatError(path, 0, f"unsupported extension {suffix!r} (OFF or OBJ only)")
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# topology


def face_edge_pairs(faces: np.ndarray) -> np.ndarray:
    """(3F, 2) vertex pairs (0,1), (1,2), (2,0) of every face, in face order."""
    faces = np.asarray(faces)
    return np.stack(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1
    ).reshape(-1, 2)


def edge_set(mesh: Mesh) -> list[tuple[int, int]]:
    """Undirected edges (i, j), i < j, each once, sorted lexicographically."""
    pairs = np.sort(face_edge_pairs(mesh.faces), axis=1)
    uniq = np.unique(pairs, axis=0)
    return [(int(i), int(j)) for i, j in uniq]


def build_adjacency(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric binary adjacency with zero diagonal."""
    pairs = face_edge_pairs(mesh.faces)
    n = mesh.n_vertices
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    return adj


def face_unit_normals(mesh_or_vertices, faces=None) -> np.ndarray:
    """Right-hand-rule unit normal per face.

    Accepts either a :class:`Mesh` or a ``(vertices, faces)`` pair.
    """
    if faces is None:
        vertices, faces = mesh_or_vertices.vertices, mesh_or_vertices.faces
    else:
        vertices = np.asarray(mesh_or_vertices, dtype=np.float64)
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    cross = np.cross(b - a, c - a)
    norms = np.linalg.norm(cross, axis=1)
    scale = np.maximum.reduce([
        np.sum((b - a) ** 2, axis=1), np.sum((c - a) ** 2, axis=1), np.sum((c - b) ** 2, axis=1)
    ])
    bad = norms <= 1e-14 * scale
    bad |= norms == 0.0
    if bad.any():
        raise DegenerateGeometryError(f"face {int(np.flatnonzero(bad)[0])} has zero area")
    return cross / norms[:, None]


def edge_face_counts(mesh: Mesh) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for i, j in np.sort(face_edge_pairs(mesh.faces), axis=1):
        key = (int(i), int(j))
        counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(mesh: Mesh) -> bool:
    """True when every edge is shared by exactly two faces."""
    return all(c == 2 for c in edge_face_counts(mesh).values())


def euler_characteristic(mesh: Mesh) -> int:
    return mesh.n_vertices - len(edge_set(mesh)) + mesh.n_faces


def validate_shared_topology(corpus: Sequence[Mesh]) -> None:
    """Raise if the corpus members do not share one vertex count and face list."""
    if len(corpus) == 0:
        raise MeshValidationError("corpus is empty")
    ref = corpus[0]
    for k, m in enumerate(corpus[1:], start=1):
        if m.n_vertices != ref.n_vertices:
            raise MeshValidationError(
                f"mesh {k} has {m.n_vertices} vertices, mesh 0 has {ref.n_vertices}"
            )
        if m.faces.shape != ref.faces.shape or not np.array_equal(m.faces, ref.faces):
            raise MeshValidationError(f"mesh {k} face list differs from mesh 0")
