import json
import struct

import numpy as np
import pytest

from drn.checkpoint import (MAGIC, BadMagicError, CheckpointError, CheckpointShapeError,
                            ConfigMismatchError, TruncatedCheckpointError, VersionMismatchError,
                            dumps, load_checkpoint, load_model, loads, save_checkpoint)
from drn.model import DrnConfig, build_model, init_params

CFG = DrnConfig(scale=2, base_channels=8, groups=2, blocks_per_group=1, rd_units_per_block=2, distill_width=2)


@pytest.fixture
def model():
    m = build_model(CFG)
    init_params(m, 4)
    rng = np.random.default_rng(0)
    for name, p in m.params.params.items():
        if name.endswith(".bias"):
            p[...] = rng.standard_normal(p.shape)
    return m


def test_roundtrip_is_byte_identical(model, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, a)
    save_checkpoint(load_model(a), b)
    assert a.read_bytes() == b.read_bytes()
    config, params = load_checkpoint(a)
    assert config == CFG
    for name in model.params.names():
        assert params[name].tobytes() == model.params[name].tobytes()


def test_layout_header(model):
    data = dumps(model)
    assert data[:8] == b"DRNCKPT1"
    assert struct.unpack("<I", data[8:12]) == (1,)
    (n,) = struct.unpack("<I", data[12:16])
    cfg = json.loads(data[16:16 + n])
    assert DrnConfig(**cfg) == CFG
    (count,) = struct.unpack("<I", data[16 + n:20 + n])
    assert count == len(model.params)
    pos = 20 + n
    (name_len,) = struct.unpack("<H", data[pos:pos + 2])
    assert data[pos + 2:pos + 2 + name_len] == b"lfe.weight"
    rank = data[pos + 2 + name_len]
    dims = struct.unpack("<4I", data[pos + 3 + name_len:pos + 19 + name_len])
    assert rank == 4 and dims == (8, 3, 3, 3)
    values = np.frombuffer(data[pos + 19 + name_len:pos + 19 + name_len + 4 * 216], "<f4")
    np.testing.assert_array_equal(values, model.params["lfe.weight"].ravel())


def test_bad_magic(model):
    data = bytearray(dumps(model))
    data[0:8] = b"XXXXXXXX"
    with pytest.raises(BadMagicError):
        loads(bytes(data))


def test_version_mismatch(model):
    data = bytearray(dumps(model))
    data[8:12] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        loads(bytes(data))


def test_truncation_names_parameter(model):
    data = dumps(model)
    with pytest.raises(TruncatedCheckpointError) as err:
        loads(data[:-10])
    assert err.value.parameter == "head.out.bias"
    assert "head.out.bias" in str(err.value)


def test_error_classes_are_distinct():
    classes = {BadMagicError, VersionMismatchError, TruncatedCheckpointError, CheckpointShapeError,
               ConfigMismatchError}
    assert len(classes) == 5
    for a in classes:
        assert issubclass(a, CheckpointError)
        assert not any(issubclass(a, b) for b in classes - {a})


def test_shape_mismatch(model):
    data = bytearray(dumps(model))
    n = struct.unpack("<I", data[12:16])[0]
    pos = 20 + n + 2 + len("lfe.weight") + 1
    data[pos:pos + 4] = struct.pack("<I", 9)
    with pytest.raises(CheckpointShapeError):
        loads(bytes(data))


def test_different_config_fails_loudly(model):
    other = DrnConfig(scale=3, base_channels=8, groups=2, blocks_per_group=1, rd_units_per_block=2,
                      distill_width=2)
    with pytest.raises(ConfigMismatchError):
        loads(dumps(model), expected_config=other)


def test_trailing_bytes_rejected(model):
    with pytest.raises(CheckpointError):
        loads(dumps(model) + b"\0")


def test_magic_constant():
    assert MAGIC == b"DRNCKPT1"
