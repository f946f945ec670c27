"""Delta extraction, seeded Bernoulli masking, sparse merging, and diagnostics.

A task's delta is the elementwise difference between its fine-tuned
checkpoint and the shared base. Masking zeroes each coordinate independently
with probability ``mask_rate`` and stores the survivors sparsely, tagged with
the base fingerprint so a delta can never be applied to the wrong
checkpoint. Merging adds every kept coordinate back onto the base; where two
deltas kept the same coordinate their values sum — collisions are not
resolved, which is exactly what the collision diagnostics quantify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Fingerprint, fingerprint
from .errors import (
    BaseMismatchError,
    EmptyListError,
    InvalidProbabilityError,
    NameMismatchError,
    NonFiniteError,
    ShapeMismatchError,
    ZeroDeltaError,
)
from .tensors import DenseTensor, ParamSet

__all__ = [
    "SparseEntry",
    "SparseDelta",
    "CollisionReport",
    "compute_delta",
    "mask_delta",
    "merge_deltas",
    "delta_cosine_matrix",
    "collision_report",
    "expected_multi_collision_rate",
]


class SparseEntry:
    """Kept coordinates of one tensor: sorted flat indices plus their values."""

    __slots__ = ("name", "shape", "indices", "values")

    def __init__(self, name: str, shape, indices, values):
        shape = tuple(int(d) for d in shape)
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        size = math.prod(shape)
        if not name:
            raise ValueError("entry name must be nonempty")
        if any(d <= 0 for d in shape):
            raise ShapeMismatchError(f"dimensions must be positive, got {shape}")
        if indices.ndim != 1 or values.ndim != 1 or indices.size != values.size:
            raise ShapeMismatchError("indices and values must be 1-D and equal length")
        if indices.size:
            if indices[0] < 0 or indices[-1] >= size:
                raise ValueError("indices must lie in [0, size)")
            if np.any(np.diff(indices) <= 0):
                raise ValueError("indices must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("kept values must be finite")
        indices.flags.writeable = False
        values.flags.writeable = False
        self.name = name
        self.shape = shape
        self.indices = indices
        self.values = values

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseEntry):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class SparseDelta:
    """A masked task delta: per-tensor kept coordinates plus its provenance.

    ``base`` fingerprints the checkpoint the delta was computed against,
    ``keep_prob`` is the per-coordinate survival probability and ``seed``
    drove the mask, so any stored delta is auditable after the fact.
    """

    entries: tuple[SparseEntry, ...]
    base: Fingerprint
    keep_prob: float
    seed: int

    def __post_init__(self):
        if not isinstance(self.base, Fingerprint):
            raise TypeError("base must be a Fingerprint")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise InvalidProbabilityError(f"keep_prob {self.keep_prob} outside [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tensor name in delta")

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((e.name, e.shape) for e in self.entries)

    def total_size(self) -> int:
        return sum(e.size for e in self.entries)

    def kept_count(self) -> int:
        return sum(e.indices.size for e in self.entries)

    def density(self) -> float:
        total = self.total_size()
        return self.kept_count() / total if total else 0.0

    def to_dense(self) -> ParamSet:
        """Reconstruct the dense delta (zeros everywhere except kept coords)."""
        entries = []
        for e in self.entries:
            flat = np.zeros(e.size)
            flat[e.indices] = e.values
            entries.append((e.name, DenseTensor(e.shape, flat)))
        return ParamSet(entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseDelta):
            return NotImplemented
        return (
            self.entries == other.entries
            and self.base == other.base
            and self.keep_prob == other.keep_prob
            and self.seed == other.seed
        )


@dataclass(frozen=True)
class CollisionReport:
    """Support overlap between masked deltas.

    ``pairwise_overlap[i, j]`` is the fraction of all coordinates kept by
    both delta i and delta j (the diagonal is each delta's own density).
    ``multi_collision_rate`` is |kept by >= 2 deltas| / |kept by >= 1 delta|,
    or 0 when nothing was kept at all.
    """

    pairwise_overlap: np.ndarray
    multi_collision_rate: float


def _require_matching_layout(names_a, shapes_a, names_b, shapes_b) -> None:
    if tuple(names_a) != tuple(names_b):
        raise NameMismatchError(f"tensor names differ: {tuple(names_a)} vs {tuple(names_b)}")
    for name, sa, sb in zip(names_a, shapes_a, shapes_b):
        if sa != sb:
            raise ShapeMismatchError(f"tensor {name!r}: shapes differ, {sa} vs {sb}")


def compute_delta(theta_ft: ParamSet, theta_pre: ParamSet) -> ParamSet:
    """Per-tensor difference fine-tuned minus base."""
    _require_matching_layout(
        theta_ft.names(), [t.shape for _, t in theta_ft.items()],
        theta_pre.names(), [t.shape for _, t in theta_pre.items()],
    )
    return ParamSet(
        (name, DenseTensor(t.shape, t.values - theta_pre[name].values))
        for name, t in theta_ft.items()
    )


def _mask_generator(seed: int, tensor_index: int) -> np.random.Generator:
    # Counter-based: each tensor gets its own disjoint Philox stream, so a
    # tensor's mask depends only on (seed, its position, its size).
    return np.random.Generator(np.random.Philox(key=seed, counter=tensor_index << 128))


def mask_delta(delta: ParamSet, mask_rate: float, seed: int, base: Fingerprint) -> SparseDelta:
    """Randomly zero each coordinate with probability ``mask_rate``.

    A coordinate survives with probability ``1 - mask_rate``; survivors are
    stored sparsely even when their value is zero, so density statistics
    reflect the mask rather than the data. The mask is a pure function of
    (delta layout, mask_rate, seed).
    """
    mask_rate = float(mask_rate)
    if not 0.0 <= mask_rate <= 1.0:
        raise InvalidProbabilityError(f"mask_rate {mask_rate} outside [0, 1]")
    if int(seed) < 0:
        raise ValueError("seed must be a nonnegative integer")
    entries = []
    for idx, (name, tensor) in enumerate(delta.items()):
        u = _mask_generator(int(seed), idx).random(tensor.size)
        kept = np.flatnonzero(u >= mask_rate)
        entries.append(SparseEntry(name, tensor.shape, kept, tensor.values[kept]))
    return SparseDelta(tuple(entries), base, 1.0 - mask_rate, int(seed))


def _check_applicable(delta: SparseDelta, theta_pre: ParamSet, base_fp: Fingerprint) -> None:
    if delta.base != base_fp:
        raise BaseMismatchError(
            f"delta was computed against base {delta.base.hex()[:12]}..., "
            f"got checkpoint {base_fp.hex()[:12]}..."
        )
    _require_matching_layout(
        [e.name for e in delta.entries], [e.shape for e in delta.entries],
        theta_pre.names(), [t.shape for _, t in theta_pre.items()],
    )


def merge_deltas(theta_pre: ParamSet, deltas: Sequence[SparseDelta]) -> ParamSet:
    """Add every delta's kept coordinates onto the base checkpoint.

    Deltas are applied left to right; coordinates kept by several deltas
    simply sum. Each delta's base fingerprint must match ``theta_pre``.
    """
    base_fp = fingerprint(theta_pre)
    accum = {name: t.values.copy() for name, t in theta_pre.items()}
    for delta in deltas:
        _check_applicable(delta, theta_pre, base_fp)
        for e in delta.entries:
            accum[e.name][e.indices] += e.values
    for name, flat in accum.items():
        if not np.all(np.isfinite(flat)):
            raise NonFiniteError(f"merge produced non-finite values in {name!r}")
    return ParamSet(
        (name, DenseTensor(theta_pre[name].shape, accum[name])) for name in theta_pre.names()
    )


def _require_common_layout(deltas: Sequence[SparseDelta]) -> None:
    if not deltas:
        raise EmptyListError("need at least one delta")
    first = deltas[0]
    for d in deltas[1:]:
        if d.base != first.base:
            raise BaseMismatchError("deltas were computed against different bases")
        _require_matching_layout(
            [e.name for e in first.entries], [e.shape for e in first.entries],
            [e.name for e in d.entries], [e.shape for e in d.entries],
        )


def _flatten(delta: SparseDelta) -> np.ndarray:
    out = np.zeros(delta.total_size())
    offset = 0
    for e in delta.entries:
        out[offset + e.indices] = e.values
        offset += e.size
    return out


def delta_cosine_matrix(deltas: Sequence[SparseDelta]) -> np.ndarray:
    """Pairwise cosine similarity between dense reconstructions of the deltas.

    Entry (i, j) compares delta i with delta j over the full flattened
    parameter space; the diagonal is exactly 1. An all-zero delta makes the
    cosine undefined and is treated as an error rather than silently 0.
    """
    deltas = list(deltas)
    _require_common_layout(deltas)
    vectors = np.stack([_flatten(d) for d in deltas])
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        which = int(np.flatnonzero(norms == 0.0)[0])
        raise ZeroDeltaError(f"delta {which} has all-zero values; cosine undefined")
    unit = vectors / norms[:, None]
    matrix = unit @ unit.T
    np.fill_diagonal(matrix, 1.0)
    return matrix


def collision_report(deltas: Sequence[SparseDelta]) -> CollisionReport:
    """Quantify support overlap across masked deltas."""
    deltas = list(deltas)
    _require_common_layout(deltas)
    total = deltas[0].total_size()
    supports = np.zeros((len(deltas), total), dtype=bool)
    for row, delta in enumerate(deltas):
        offset = 0
        for e in delta.entries:
            supports[row, offset + e.indices] = True
            offset += e.size
    counts = supports.sum(axis=0)
    union = int(np.count_nonzero(counts >= 1))
    multi = int(np.count_nonzero(counts >= 2))
    rate = multi / union if union else 0.0
    overlap = (supports.astype(np.float64) @ supports.T.astype(np.float64)) / total
    return CollisionReport(pairwise_overlap=overlap, multi_collision_rate=rate)


def expected_multi_collision_rate(keep_prob: float, num_deltas: int) -> float:
    """Closed-form multi-collision rate for independent Bernoulli masks.

    With T masks each keeping a coordinate with probability q, a coordinate
    is kept by at least one mask with probability 1 - (1-q)^T and by at
    least two with that minus T*q*(1-q)^(T-1); the rate is their ratio.
    """
    q = float(keep_prob)
    if not 0.0 <= q <= 1.0:
        raise InvalidProbabilityError(f"keep_prob {q} outside [0, 1]")
    if num_deltas < 1:
        raise EmptyListError("need at least one delta")
    p_any = 1.0 - (1.0 - q) ** num_deltas
    p_multi = p_any - num_deltas * q * (1.0 - q) ** (num_deltas - 1)
    return p_multi / p_any if p_any > 0.0 else 0.0
