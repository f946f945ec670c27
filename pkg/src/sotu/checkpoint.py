"""Bit-exact binary persistence for checkpoints, sparse deltas and prototypes.

One self-describing container family: magic ``SOTU``, a version byte, a
record-kind byte, then a canonical little-endian body. Conventional
extensions are ``.sotu`` (checkpoint), ``.sdelta`` (sparse delta) and
``.protos`` (prototype set). Files are byte-identical across runs and
platforms for identical inputs.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SotuError
from .tensors import DenseTensor, ParamSet

__all__ = [
    "Fingerprint",
    "fingerprint",
    "save_paramset",
    "load_paramset",
    "save_sparse_delta",
    "load_sparse_delta",
    "save_prototypes",
    "load_prototypes",
]

_MAGIC = b"SOTU"
_VERSION = 1
_KIND_PARAMSET = 1
_KIND_SPARSE_DELTA = 2
_KIND_PROTOTYPES = 3

_DIGEST_LEN = 32
_MAX_RANK = 255


@dataclass(frozen=True)
class Fingerprint:
    """32-byte content hash of a checkpoint's canonical serialization.

    Covers names, shapes and raw value bytes in serialization order, so any
    semantic difference (including tensor reordering) changes the digest.
    """

    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != _DIGEST_LEN:
            raise ValueError(f"fingerprint digest must be {_DIGEST_LEN} bytes")

    def hex(self) -> str:
        return self.digest.hex()


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _encode_dims(shape: tuple[int, ...]) -> bytes:
    return struct.pack("<Q", len(shape)) + np.asarray(shape, dtype="<u8").tobytes()


def _paramset_body(ps: ParamSet) -> bytes:
    parts = [struct.pack("<Q", len(ps))]
    for name, tensor in ps.items():
        parts.append(_encode_name(name))
        parts.append(_encode_dims(tensor.shape))
        parts.append(tensor.values.astype("<f8").tobytes())
    return b"".join(parts)


def fingerprint(ps: ParamSet) -> Fingerprint:
    """Deterministic SHA-256 digest of the canonical checkpoint bytes."""
    return Fingerprint(hashlib.sha256(_paramset_body(ps)).digest())


class _Reader:
    """Sequential little-endian reader that turns truncation into FormatError."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise FormatError("file truncated")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def u64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<u8").astype(np.int64)

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def name(self) -> str:
        length = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8") from exc

    def dims(self) -> tuple[int, ...]:
        rank = self.u64()
        if rank > _MAX_RANK:
            raise FormatError(f"implausible tensor rank {rank}")
        dims = tuple(int(d) for d in self.u64_array(rank))
        if any(d <= 0 for d in dims):
            raise FormatError(f"non-positive dimension in {dims}")
        return dims

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise FormatError("trailing bytes after record")


def _read_record(path, expected_kind: int) -> _Reader:
    data = Path(path).read_bytes()
    reader = _Reader(data)
    if reader.take(4) != _MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version = reader.u8()
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    kind = reader.u8()
    if kind != expected_kind:
        raise FormatError(f"{path}: record kind {kind}, expected {expected_kind}")
    return reader


def _write_record(path, kind: int, body: bytes) -> None:
    Path(path).write_bytes(_MAGIC + bytes([_VERSION, kind]) + body)


def save_paramset(ps: ParamSet, path) -> None:
    _write_record(path, _KIND_PARAMSET, _paramset_body(ps))


def load_paramset(path) -> ParamSet:
    reader = _read_record(path, _KIND_PARAMSET)
    count = reader.u64()
    entries = []
    for _ in range(count):
        name = reader.name()
        dims = reader.dims()
        values = reader.f64_array(math.prod(dims))
        try:
            entries.append((name, DenseTensor(dims, values)))
        except SotuError as exc:
            raise FormatError(f"invalid tensor {name!r}: {exc}") from exc
    reader.finish()
    try:
        return ParamSet(entries)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_sparse_delta(delta, path) -> None:
    parts = [
        delta.base.digest,
        struct.pack("<d", delta.keep_prob),
        struct.pack("<Q", delta.seed),
        struct.pack("<Q", len(delta.entries)),
    ]
    for entry in delta.entries:
        parts.append(_encode_name(entry.name))
        parts.append(_encode_dims(entry.shape))
        parts.append(struct.pack("<Q", len(entry.indices)))
        parts.append(entry.indices.astype("<u8").tobytes())
        parts.append(entry.values.astype("<f8").tobytes())
    _write_record(path, _KIND_SPARSE_DELTA, b"".join(parts))


def load_sparse_delta(path):
    from .deltas import SparseDelta, SparseEntry

    reader = _read_record(path, _KIND_SPARSE_DELTA)
    base = Fingerprint(reader.take(_DIGEST_LEN))
    keep_prob = reader.f64()
    seed = reader.u64()
    count = reader.u64()
    entries = []
    for _ in range(count):
        name = reader.name()
        dims = reader.dims()
        kept = reader.u64()
        indices = reader.u64_array(kept)
        values = reader.f64_array(kept)
        try:
            entries.append(SparseEntry(name, dims, indices, values))
        except SotuError as exc:
            raise FormatError(f"invalid delta entry {name!r}: {exc}") from exc
    reader.finish()
    try:
        return SparseDelta(tuple(entries), base, keep_prob, seed)
    except (SotuError, ValueError) as exc:
        raise FormatError(str(exc)) from exc


_NONLINEARITY_CODES = {"none": 0, "relu": 1}
_NONLINEARITY_NAMES = {code: name for name, code in _NONLINEARITY_CODES.items()}


def save_prototypes(protos, path) -> None:
    spec = protos.projection
    parts = []
    if spec is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(struct.pack("<Q", spec.out_dim))
        parts.append(struct.pack("<Q", spec.seed))
        parts.append(bytes([_NONLINEARITY_CODES[spec.nonlinearity]]))
    parts.append(struct.pack("<Q", len(protos)))
    parts.append(struct.pack("<Q", protos.feature_dim))
    for class_id in protos.class_ids():
        parts.append(struct.pack("<q", class_id))
        parts.append(protos.prototype(class_id).astype("<f8").tobytes())
    _write_record(path, _KIND_PROTOTYPES, b"".join(parts))


def load_prototypes(path):
    from .prototypes import ProjectionSpec, PrototypeSet

    reader = _read_record(path, _KIND_PROTOTYPES)
    spec = None
    has_projection = reader.u8()
    if has_projection not in (0, 1):
        raise FormatError("projection flag must be 0 or 1")
    if has_projection:
        out_dim = reader.u64()
        seed = reader.u64()
        code = reader.u8()
        if code not in _NONLINEARITY_NAMES:
            raise FormatError(f"unknown nonlinearity code {code}")
        try:
            spec = ProjectionSpec(out_dim, seed, _NONLINEARITY_NAMES[code])
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
    count = reader.u64()
    feature_dim = reader.u64()
    if feature_dim <= 0:
        raise FormatError("feature_dim must be positive")
    protos = PrototypeSet(feature_dim, projection=spec)
    for _ in range(count):
        class_id = reader.i64()
        vector = reader.f64_array(feature_dim)
        try:
            protos.add(class_id, vector)
        except SotuError as exc:
            raise FormatError(f"invalid prototype for class {class_id}: {exc}") from exc
    reader.finish()
    return protos
