"""Named random streams split deterministically from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("corpus", "folds", "init", "shuffle", "augment", "sampling", "power")


def stream(master_seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(name, *keys)`` under ``master_seed``.

    The same arguments always give the same stream, across processes and platforms.
    """
    entropy = [int(master_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    entropy += [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
