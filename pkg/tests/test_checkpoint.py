"""Checkpoint container format: bit-exact round trips and documented layout."""

import struct

import numpy as np
import pytest

from ts3d.checkpoint import MAGIC, VERSION, load_arrays, load_model, save_arrays, save_model
from ts3d.tensor import Module, Parameter, bind_parameter_names


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "backbone.stem.w": rng.normal(size=(3, 3, 3, 8)).astype(np.float32),
        "decoder.layer2.ffn.w1": rng.normal(size=(16, 64)).astype(np.float64),
        "scalar.step": np.array([42.0]),
    }
    path = tmp_path / "model.ts3d"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert loaded[k].shape == arrays[k].shape
        assert loaded[k].tobytes() == arrays[k].tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "one.ts3d"
    save_arrays(path, {"w": np.array([1.5, 2.5], dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    version, count = struct.unpack_from("<II", blob, 4)
    assert version == VERSION and count == 1
    (nlen,) = struct.unpack_from("<I", blob, 12)
    assert blob[16 : 16 + nlen] == b"w"
    tag, rank = struct.unpack_from("<BB", blob, 16 + nlen)
    assert tag == 0 and rank == 1
    (extent,) = struct.unpack_from("<I", blob, 18 + nlen)
    assert extent == 2
    data = np.frombuffer(blob, dtype="<f4", count=2, offset=22 + nlen)
    assert np.allclose(data, [1.5, 2.5])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ts3d"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_arrays(path)


class _Net(Module):
    def __init__(self, scale=1.0):
        super().__init__()
        self.w = Parameter(np.full((2, 3), scale, dtype=np.float32))
        self.b = Parameter(np.zeros(3, dtype=np.float32))


def test_model_roundtrip(tmp_path):
    net = _Net(scale=0.25)
    bind_parameter_names(net)
    path = tmp_path / "net.ts3d"
    save_model(path, net)
    other = _Net(scale=9.0)
    bind_parameter_names(other)
    load_model(path, other)
    assert np.array_equal(other.w.data, net.w.data)


def test_model_mismatch_lists_keys(tmp_path):
    net = _Net()
    bind_parameter_names(net)
    path = tmp_path / "net.ts3d"
    save_arrays(path, {"w": net.w.data, "stray": np.zeros(1, dtype=np.float32)})
    with pytest.raises(ValueError) as exc:
        load_model(path, net)
    assert "b" in str(exc.value) and "stray" in str(exc.value)
