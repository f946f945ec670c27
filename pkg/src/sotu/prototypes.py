"""Prototype (nearest-class-mean) classification over backbone embeddings.

Each class is represented by the mean feature of a bounded buffer of its
examples; queries are classified by highest cosine similarity. An optional
seeded Gaussian random projection (with relu) expands embeddings into a
higher-dimensional space before prototypes are formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyPrototypeSetError,
    ShapeMismatchError,
    UnknownClassError,
    ZeroFeatureError,
)
from .tensors import ParamSet
from .training import LabeledDataset, embed_batch, embed_forward

__all__ = [
    "ProjectionSpec",
    "Projection",
    "PrototypeSet",
    "make_projection",
    "feature",
    "feature_batch",
    "build_prototypes",
    "ncm_predict",
    "ncm_predict_batch",
]

NONLINEARITIES = ("relu", "none")


@dataclass(frozen=True)
class ProjectionSpec:
    """Seeded random feature expansion: output width, seed, nonlinearity."""

    out_dim: int
    seed: int
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.out_dim < 1:
            raise ValueError("out_dim must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")


def make_projection(spec: ProjectionSpec, in_dim: int) -> np.ndarray:
    """out_dim x in_dim matrix of i.i.d. standard normals, fixed by the seed."""
    if in_dim < 1:
        raise ValueError("in_dim must be positive")
    return np.random.default_rng(spec.seed).standard_normal((spec.out_dim, in_dim))


@dataclass(frozen=True)
class Projection:
    """A realized projection: its spec plus the materialized matrix."""

    spec: ProjectionSpec
    matrix: np.ndarray

    @classmethod
    def from_spec(cls, spec: ProjectionSpec, in_dim: int) -> Projection:
        return cls(spec, make_projection(spec, in_dim))


def _apply_projection(embeddings: np.ndarray, proj: Projection) -> np.ndarray:
    z = embeddings @ proj.matrix.T
    if proj.spec.nonlinearity == "relu":
        z = np.maximum(z, 0.0)
    return z


def feature_batch(backbone: ParamSet, x: np.ndarray, proj: Projection | None = None,
                  activation: str = "relu") -> np.ndarray:
    """Embed a batch of rows, optionally through the random projection."""
    emb = embed_batch(backbone, x, activation)
    if proj is None:
        return emb
    if proj.matrix.shape[1] != emb.shape[1]:
        raise ShapeMismatchError(
            f"projection expects {proj.matrix.shape[1]}-dim embeddings, got {emb.shape[1]}"
        )
    return _apply_projection(emb, proj)


def feature(backbone: ParamSet, x, proj: Projection | None = None,
            activation: str = "relu") -> np.ndarray:
    """Feature vector for a single example (equals embed_forward when proj is None)."""
    if proj is None:
        return embed_forward(backbone, x, activation)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError("expected a 1-D feature vector")
    return feature_batch(backbone, x[None, :], proj, activation)[0]


class PrototypeSet:
    """Per-class mean feature vectors, accumulated task by task.

    Adding a class never touches previously stored prototypes; a class id
    may only be added once across the lifetime of the set.
    """

    def __init__(self, feature_dim: int, projection: ProjectionSpec | None = None):
        if feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        self.feature_dim = int(feature_dim)
        self.projection = projection
        self._prototypes: dict[int, np.ndarray] = {}

    def class_ids(self) -> tuple[int, ...]:
        return tuple(self._prototypes)

    def prototype(self, class_id: int) -> np.ndarray:
        return self._prototypes[int(class_id)]

    def add(self, class_id: int, vector) -> None:
        class_id = int(class_id)
        vector = np.ascontiguousarray(vector, dtype=np.float64)
        if class_id in self._prototypes:
            raise UnknownClassError(f"class {class_id} already has a prototype")
        if vector.shape != (self.feature_dim,):
            raise ShapeMismatchError(
                f"prototype must have shape ({self.feature_dim},), got {vector.shape}"
            )
        if not np.all(np.isfinite(vector)):
            raise ValueError("prototype values must be finite")
        vector.flags.writeable = False
        self._prototypes[class_id] = vector

    def __len__(self) -> int:
        return len(self._prototypes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeSet):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.projection == other.projection
            and self.class_ids() == other.class_ids()
            and all(np.array_equal(self._prototypes[c], other._prototypes[c])
                    for c in self._prototypes)
        )

    def __repr__(self) -> str:
        return f"PrototypeSet({len(self)} classes, dim={self.feature_dim})"


def build_prototypes(backbone: ParamSet, data: LabeledDataset, buffer_per_class: int,
                     proj: Projection | None = None, protos: PrototypeSet | None = None,
                     activation: str = "relu") -> PrototypeSet:
    """Add one mean-feature prototype per class in ``data``.

    At most ``buffer_per_class`` examples per class contribute, taken in
    dataset order (first seen wins). When ``protos`` is given, the new
    classes are appended to it; a class id recurring across calls is an
    error.
    """
    if buffer_per_class < 1:
        raise ValueError("buffer_per_class must be at least 1")
    spec = proj.spec if proj is not None else None
    feature_dim = spec.out_dim if spec is not None else embed_batch(
        backbone, data.features[:1], activation).shape[1]
    if protos is None:
        protos = PrototypeSet(feature_dim, projection=spec)
    elif protos.projection != spec:
        raise ValueError("prototype set was built with a different projection")
    for class_id in data.classes:
        rows = np.flatnonzero(data.labels == class_id)[:buffer_per_class]
        if rows.size == 0:
            raise ValueError(f"class {class_id} has no examples")
        feats = feature_batch(backbone, data.features[rows], proj, activation)
        protos.add(class_id, feats.mean(axis=0))
    return protos


def _cosine(f: np.ndarray, f_norm: float, proto: np.ndarray) -> float:
    p_norm = math.sqrt(float(np.dot(proto, proto)))
    if p_norm == 0.0:
        return float("-inf")  # zero prototypes are never selected
    return float(np.dot(f, proto)) / (f_norm * p_norm)


def ncm_predict(protos: PrototypeSet, f) -> int:
    """Class id with the highest cosine similarity; ties go to the lowest id."""
    if len(protos) == 0:
        raise EmptyPrototypeSetError("prototype set has no classes")
    f = np.ascontiguousarray(f, dtype=np.float64)
    if f.shape != (protos.feature_dim,):
        raise ShapeMismatchError(
            f"feature must have shape ({protos.feature_dim},), got {f.shape}"
        )
    f_norm = math.sqrt(float(np.dot(f, f)))
    if f_norm == 0.0:
        raise ZeroFeatureError("all-zero feature vector; cosine undefined")
    best_id = None
    best_sim = float("-inf")
    for class_id in protos.class_ids():
        sim = _cosine(f, f_norm, protos.prototype(class_id))
        if sim > best_sim or (sim == best_sim and (best_id is None or class_id < best_id)):
            best_sim = sim
            best_id = class_id
    return int(best_id)


def ncm_predict_batch(protos: PrototypeSet, features: np.ndarray) -> np.ndarray:
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeMismatchError("expected a 2-D batch of feature rows")
    return np.asarray([ncm_predict(protos, row) for row in features], dtype=np.int64)
