"""MCKP checkpoint files.

Layout (integers are little-endian u32)::

    b"MCKP" | version | sha256(config text) [32 bytes] | len | config text (UTF-8)
    | count | count x (len | name | rows | cols | rows*cols f64 LE row-major)

The embedded config text must hash to the stored digest; a mismatch means
the header was damaged or edited.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_config
from .sampler import ModelDims, ModelParameters

MAGIC = b"MCKP"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class BadCheckpointMagic(CheckpointError):
    pass


class ConfigDigestMismatch(CheckpointError):
    pass


def encode_checkpoint(params: ModelParameters, cfg: ExperimentConfig) -> bytes:
    text = cfg.serialize().encode("utf-8")
    out = [MAGIC, _U32.pack(VERSION), hashlib.sha256(text).digest(), _U32.pack(len(text)), text,
           _U32.pack(len(params.values))]
    for name in sorted(params.values):
        arr = params.values[name]
        raw = name.encode("utf-8")
        out += [_U32.pack(len(raw)), raw, _U32.pack(arr.shape[0]), _U32.pack(arr.shape[1]),
                np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>",
                      expected_digest: bytes | None = None) -> tuple[ModelParameters, ExperimentConfig]:
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise BadCheckpointMagic(f"{source}: not an MCKP checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    digest = r.take(32)
    text = r.take(r.u32())
    if hashlib.sha256(text).digest() != digest:
        raise ConfigDigestMismatch(f"{source}: embedded config does not match its digest")
    if expected_digest is not None and digest != expected_digest:
        raise ConfigDigestMismatch(f"{source}: checkpoint was trained with a different config")
    cfg = parse_config(text.decode("utf-8"), f"{source}[config]")
    values = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rows, cols = r.u32(), r.u32()
        values[name] = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")
    try:
        D, d_o = values["trunk.w1"].shape
        H = values["gru.u_z"].shape[0]
        C = values["cls.w"].shape[1]
    except KeyError as exc:
        raise CheckpointError(f"{source}: missing parameter {exc}") from None
    try:
        params = ModelParameters(ModelDims(D=D, d_o=d_o, H=H, C=C, M=cfg.M), values)
    except ValueError as exc:
        raise CheckpointError(f"{source}: {exc}") from None
    return params, cfg


def save_checkpoint(path: str | Path, params: ModelParameters, cfg: ExperimentConfig) -> None:
    Path(path).write_bytes(encode_checkpoint(params, cfg))


def load_checkpoint(path: str | Path, expected_digest: bytes | None = None):
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path), expected_digest)
