"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DRNCKPT1"
    u32 version (= 1)
    u32 n, n bytes of UTF-8 JSON (the DrnConfig)
    u32 parameter count
    per parameter:
        u16 name length, UTF-8 name
        u8 rank, rank x u32 dims
        prod(dims) float32 values, row-major
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import DRN, ConfigError, DrnConfig, build_model

MAGIC = b"DRNCKPT1"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class CheckpointShapeError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _config_json(cfg: DrnConfig) -> bytes:
    return json.dumps(cfg.to_json_dict(), sort_keys=True, separators=(",", ":")).encode()


def dumps(model: DRN) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _config_json(model.config)
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, value in model.params.params.items():
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", value.ndim)]
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: DRN, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(model))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, parameter=None) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what}", parameter=parameter
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str, parameter=None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, parameter))


def loads(data: bytes, expected_config: DrnConfig | None = None, dtype=np.float32):
    """Parse checkpoint bytes into a freshly built model."""
    r = _Reader(data)
    magic = data[:len(MAGIC)]
    if magic != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(magic):
            raise TruncatedCheckpointError("checkpoint truncated inside the magic string")
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    r.pos = len(MAGIC)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (n,) = r.unpack("<I", "config length")
    try:
        config = DrnConfig.from_json_dict(json.loads(r.take(n, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"checkpoint config {config} != expected {expected_config}")
    try:
        model = build_model(config, dtype)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from exc

    (count,) = r.unpack("<I", "parameter count")
    expected = model.params.params
    if count != len(expected):
        raise CheckpointShapeError(f"checkpoint has {count} parameters, config implies {len(expected)}")
    for index in range(count):
        label = f"parameter #{index}"
        (name_len,) = r.unpack("<H", "name length", label)
        name = r.take(name_len, "name", label).decode()
        (rank,) = r.unpack("<B", "rank", name)
        dims = r.unpack(f"<{rank}I", "dims", name)
        if name not in expected:
            raise CheckpointShapeError(f"unexpected parameter {name!r}")
        if tuple(dims) != expected[name].shape:
            raise CheckpointShapeError(f"{name}: shape {tuple(dims)} != expected {expected[name].shape}")
        size = int(np.prod(dims)) * 4
        raw = r.take(size, f"values of {name}", name)
        model.params.set(name, np.frombuffer(raw, dtype="<f4").reshape(dims).astype(dtype))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the parameter table")
    return model


def load_checkpoint(path, expected_config: DrnConfig | None = None, dtype=np.float32):
    """Return ``(config, params)`` via the rebuilt model's ParamStore."""
    model = load_model(path, expected_config, dtype)
    return model.config, model.params


def load_model(path, expected_config: DrnConfig | None = None, dtype=np.float32) -> DRN:
    with open(path, "rb") as fh:
        data = fh.read()
    return loads(data, expected_config, dtype)
