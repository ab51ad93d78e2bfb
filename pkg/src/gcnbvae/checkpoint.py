"""Binary checkpoints holding a trained model and the hierarchy it runs on.

Layout::

    bytes 0-7     magic b"GCNBVAE1"
    bytes 8-15    header length H, unsigned little-endian
    next H bytes  UTF-8 JSON header (indented, sorted keys)
    remainder     payload: little-endian float64 / int64 blocks at the
                  offsets listed in the header

The header records the format version, model configuration, training seed
and epoch, the name, offset and shape of every parameter block, and for each
hierarchy level the vertex/face blocks plus the (row, col, value) triplets of
the down- and up-sampling matrices. Payload offsets are in bytes from the
start of the payload. Laplacians are not stored; they are recomputed on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .model import ModelConfig, ModelParams, param_shapes
from .pooling import make_hierarchy

MAGIC = b"GCNBVAE1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""

    def __init__(self, msg: str, offset: int | None = None):
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{msg}{where}")
        self.offset = offset


@dataclass
class Checkpoint:
    version: int
    params: ModelParams
    seed: int
    epoch: int

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def hierarchy(self):
        return self.params.hierarchy


class _Payload:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray, dtype: str) -> dict:
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entry = {"offset": self.size, "dtype": dtype, "shape": list(np.shape(arr))}
        self.chunks.append(data)
        self.size += len(data)
        return entry


def _triplets(m) -> np.ndarray:
    coo = sp.coo_matrix(m)
    order = np.lexsort((coo.col, coo.row))
    return np.stack([coo.row[order], coo.col[order], coo.data[order]], axis=1).astype(np.float64)


def save_checkpoint(path, params: ModelParams, seed: int = 0, epoch: int = 0) -> None:
    payload = _Payload()
    blocks = [{"name": name, **payload.add(v, "<f8")} for name, v in params.values.items()]
    h = params.hierarchy
    meshes = [{"vertices": payload.add(m.vertices, "<f8"), "faces": payload.add(m.faces, "<i8")}
              for m in h.meshes]
    levels = []
    for lvl in h.levels:
        levels.append({
            "down": {"shape": list(lvl.down.shape), "triplets": payload.add(_triplets(lvl.down), "<f8")},
            "up": {"shape": list(lvl.up.shape), "triplets": payload.add(_triplets(lvl.up), "<f8")},
        })
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "params": blocks,
        "hierarchy": {"factor": h.factor, "meshes": meshes, "levels": levels},
        "payload_bytes": payload.size,
    }
    head = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in payload.chunks:
            fh.write(c)


def _read_block(buf: bytes, base: int, entry: dict) -> np.ndarray:
    dtype = np.dtype(entry["dtype"])
    shape = tuple(entry["shape"])
    n = int(np.prod(shape)) if shape else 1
    start = base + int(entry["offset"])
    end = start + n * dtype.itemsize
    if end > len(buf):
        raise CheckpointError(f"block needs bytes {start}..{end} but file ends", len(buf))
    return np.frombuffer(buf, dtype=dtype, count=n, offset=start).reshape(shape).copy()


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise CheckpointError("file too short for magic and header length", len(buf))
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic", 0)
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise CheckpointError(f"header of {hlen} bytes is truncated", len(buf))
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise CheckpointError(f"unreadable header ({exc.__class__.__name__})", 16 + pos) from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version} is not supported (expected {FORMAT_VERSION})", 16)
    base = 16 + hlen
    if len(buf) - base != header.get("payload_bytes"):
        raise CheckpointError(
            f"payload has {len(buf) - base} bytes, header declares {header.get('payload_bytes')}", len(buf))
    try:
        config = ModelConfig.from_dict(header["model_config"])
        hh = header["hierarchy"]
        meshes = [Mesh(_read_block(buf, base, m["vertices"]), _read_block(buf, base, m["faces"]))
                  for m in hh["meshes"]]
        downs, ups = [], []
        for lvl in hh["levels"]:
            for key, out in (("down", downs), ("up", ups)):
                t = _read_block(buf, base, lvl[key]["triplets"]).reshape(-1, 3)
                out.append(sp.csr_matrix((t[:, 2], (t[:, 0].astype(np.int64), t[:, 1].astype(np.int64))),
                                         shape=tuple(lvl[key]["shape"])))
        hierarchy = make_hierarchy(meshes, downs, ups, hh["factor"])
        values = {b["name"]: _read_block(buf, base, b) for b in header["params"]}
    except KeyError as exc:
        raise CheckpointError(f"header is missing field {exc}", 16) from exc
    expected = param_shapes(config, hierarchy.sizes)
    got = {k: v.shape for k, v in values.items()}
    if got != expected:
        raise CheckpointError("parameter blocks do not match the model configuration", 16)
    return Checkpoint(version, ModelParams(config, hierarchy, values), header["seed"], header["epoch"])
