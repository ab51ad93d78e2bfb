import json
import struct

import numpy as np
import pytest

from gcnbvae.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from gcnbvae.model import ModelConfig, build_model, reconstruct


@pytest.fixture(scope="module")
def params(small_hierarchy):
    return build_model(ModelConfig(latent_dim=4, beta=2e-3), small_hierarchy, seed=2)


@pytest.fixture
def saved(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, seed=7, epoch=12)
    return path


def _split(path):
    buf = path.read_bytes()
    (hlen,) = struct.unpack("<Q", buf[8:16])
    return buf, hlen, json.loads(buf[16:16 + hlen])


def test_round_trip(saved, params, small_corpus):
    ck = load_checkpoint(saved)
    assert (ck.version, ck.seed, ck.epoch) == (1, 7, 12)
    assert ck.config == params.config
    assert ck.params.names() == params.names()
    for k in params.values:
        assert ck.params.values[k].tobytes() == params.values[k].tobytes()
    for a, b in zip(ck.hierarchy.levels, params.hierarchy.levels):
        assert (a.down != b.down).nnz == 0 and (a.up != b.up).nnz == 0
        np.testing.assert_array_equal(a.mesh_coarse.faces, b.mesh_coarse.faces)
    for a, b in zip(ck.hierarchy.laplacians, params.hierarchy.laplacians):
        assert abs(a - b).max() == 0
    v = small_corpus[0].vertices
    assert reconstruct(ck.params, v).tobytes() == reconstruct(params, v).tobytes()


def test_save_is_deterministic(tmp_path, saved, params):
    other = tmp_path / "again.ckpt"
    save_checkpoint(other, params, seed=7, epoch=12)
    assert other.read_bytes() == saved.read_bytes()


def test_bad_magic(saved):
    buf = bytearray(saved.read_bytes())
    buf[0:8] = b"NOTACKPT"
    saved.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(saved)
    assert exc.value.offset == 0


def test_truncated(saved):
    buf = saved.read_bytes()
    saved.write_bytes(buf[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)
    saved.write_bytes(buf[:12])
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)
    saved.write_bytes(buf[:40])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(saved)


def _rewrite(path, header, payload):
    head = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + payload)


def test_version_mismatch(saved):
    buf, hlen, header = _split(saved)
    header["format_version"] = 99
    _rewrite(saved, header, buf[16 + hlen:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(saved)


def test_missing_field(saved):
    buf, hlen, header = _split(saved)
    del header["hierarchy"]
    _rewrite(saved, header, buf[16 + hlen:])
    with pytest.raises(CheckpointError, match="hierarchy"):
        load_checkpoint(saved)


def test_shape_mismatch(saved):
    buf, hlen, header = _split(saved)
    header["model_config"]["latent_dim"] = 5
    _rewrite(saved, header, buf[16 + hlen:])
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(saved)


def test_garbled_header(saved):
    buf, hlen, _ = _split(saved)
    bad = bytearray(buf)
    bad[16] = ord("#")
    saved.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="unreadable header"):
        load_checkpoint(saved)
