"""Small feed-forward embedding network with a detachable linear head.

The backbone maps inputs through one or more activated dense layers to an
embedding. For each task a fresh linear head is attached, both parts are
trained jointly by mini-batch SGD on cross-entropy, and the head is
returned only for inspection: downstream stages use the backbone alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyBatchError, FormatError, ShapeMismatchError
from .tensors import DenseTensor, ParamSet

__all__ = [
    "ModelSpec",
    "Hyper",
    "LabeledDataset",
    "TrainResult",
    "init_model",
    "embed_forward",
    "embed_batch",
    "embedding_dim",
    "loss_and_grad",
    "train",
    "predict_labels",
    "concat_datasets",
    "load_labeled_csv",
    "save_labeled_csv",
]

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the embedding network."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    embed_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ValueError("need at least one positive hidden layer width")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass(frozen=True)
class Hyper:
    """SGD settings. ``epochs=0`` is allowed and leaves the model untouched."""

    learning_rate: float
    epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive and finite")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")


class LabeledDataset:
    """Feature matrix plus integer class labels from a declared class set."""

    __slots__ = ("features", "labels", "classes")

    def __init__(self, features, labels, classes=None):
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ShapeMismatchError("features must be a 2-D matrix")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ShapeMismatchError("labels must be one per feature row")
        if features.shape[0] == 0:
            raise EmptyBatchError("dataset has no examples")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        if classes is None:
            classes = np.unique(labels)
        classes = tuple(int(c) for c in sorted(set(int(c) for c in classes)))
        if not set(labels.tolist()) <= set(classes):
            raise ValueError("every label must belong to the declared class set")
        features.flags.writeable = False
        labels.flags.writeable = False
        self.features = features
        self.labels = labels
        self.classes = classes

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TrainResult:
    """Trained backbone, the per-task head (discardable), and loss history."""

    backbone: ParamSet
    head: ParamSet
    epoch_losses: tuple[float, ...]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(spec: ModelSpec, seed: int) -> ParamSet:
    """Deterministically initialize backbone weights (scaled-uniform, zero bias)."""
    rng = np.random.default_rng(seed)
    dims = (spec.input_dim, *spec.hidden_dims, spec.embed_dim)
    entries = []
    for i in range(len(dims) - 1):
        entries.append((f"layer{i}.w", DenseTensor.from_array(_glorot(rng, dims[i], dims[i + 1]))))
        entries.append((f"layer{i}.b", DenseTensor.zeros((dims[i + 1],))))
    return ParamSet(entries)


def _layer_arrays(backbone: ParamSet) -> list[tuple[np.ndarray, np.ndarray]]:
    """Validate layer naming/shape chain and return (W, b) array pairs."""
    indices = set()
    for name in backbone.names():
        if name.startswith("head."):
            continue
        prefix, _, field = name.partition(".")
        if not prefix.startswith("layer") or field not in ("w", "b"):
            raise ShapeMismatchError(f"unexpected tensor name {name!r}")
        try:
            indices.add(int(prefix[len("layer"):]))
        except ValueError:
            raise ShapeMismatchError(f"unexpected tensor name {name!r}") from None
    if not indices or indices != set(range(len(indices))):
        raise ShapeMismatchError("layer indices must be contiguous from 0")
    layers = []
    prev_out = None
    for i in range(len(indices)):
        try:
            w = backbone[f"layer{i}.w"]
            b = backbone[f"layer{i}.b"]
        except KeyError as exc:
            raise ShapeMismatchError(f"missing tensor for layer {i}") from exc
        if len(w.shape) != 2 or len(b.shape) != 1 or b.shape[0] != w.shape[1]:
            raise ShapeMismatchError(f"layer {i} has inconsistent shapes")
        if prev_out is not None and w.shape[0] != prev_out:
            raise ShapeMismatchError(f"layer {i} input dim {w.shape[0]} != {prev_out}")
        prev_out = w.shape[1]
        layers.append((w.array, b.array))
    return layers


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    raise ValueError(f"activation must be one of {ACTIVATIONS}")


def embed_batch(backbone: ParamSet, x: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Forward a batch of rows through every activated layer."""
    layers = _layer_arrays(backbone)
    h = np.ascontiguousarray(x, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeMismatchError("expected a 2-D batch of feature rows")
    if h.shape[1] != layers[0][0].shape[0]:
        raise ShapeMismatchError(
            f"input dim {h.shape[1]} != layer0 dim {layers[0][0].shape[0]}"
        )
    for w, b in layers:
        h = _activate(h @ w + b, activation)
    return h


def embed_forward(backbone: ParamSet, x, activation: str = "relu") -> np.ndarray:
    """Embed a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError("expected a 1-D feature vector")
    return embed_batch(backbone, x[None, :], activation)[0]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _class_indices(labels: np.ndarray, classes: tuple[int, ...]) -> np.ndarray:
    lookup = np.asarray(classes, dtype=np.int64)
    return np.searchsorted(lookup, labels)


def _forward_backward(params: dict[str, np.ndarray], n_layers: int, x, y_idx, activation):
    """Mean cross-entropy and exact analytic gradients for every tensor."""
    n = x.shape[0]
    pre = []
    h = x
    hs = [h]
    for i in range(n_layers):
        z = h @ params[f"layer{i}.w"] + params[f"layer{i}.b"]
        pre.append(z)
        h = _activate(z, activation)
        hs.append(h)
    logits = h @ params["head.w"] + params["head.b"]
    probs = _softmax_rows(logits)
    # Clamp only guards against underflow to exactly 0 at extreme saturation.
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y_idx], 1e-300))))

    grads: dict[str, np.ndarray] = {}
    dlogits = probs.copy()
    dlogits[np.arange(n), y_idx] -= 1.0
    dlogits /= n
    grads["head.w"] = hs[-1].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dh = dlogits @ params["head.w"].T
    for i in range(n_layers - 1, -1, -1):
        if activation == "relu":
            dz = dh * (pre[i] > 0)
        else:
            dz = dh * (1.0 - np.tanh(pre[i]) ** 2)
        grads[f"layer{i}.w"] = hs[i].T @ dz
        grads[f"layer{i}.b"] = dz.sum(axis=0)
        dh = dz @ params[f"layer{i}.w"].T
    return loss, grads


def _split_params(params: ParamSet) -> tuple[dict[str, np.ndarray], int]:
    layers = _layer_arrays(params)
    if "head.w" not in params or "head.b" not in params:
        raise ShapeMismatchError("params must include head.w and head.b")
    head_w = params["head.w"].array
    head_b = params["head.b"].array
    if head_w.ndim != 2 or head_b.ndim != 1 or head_b.shape[0] != head_w.shape[1]:
        raise ShapeMismatchError("head tensors have inconsistent shapes")
    if head_w.shape[0] != layers[-1][0].shape[1]:
        raise ShapeMismatchError("head input dim does not match embedding dim")
    arrays = {name: t.array for name, t in params.items()}
    return arrays, len(layers)


def loss_and_grad(params: ParamSet, batch: LabeledDataset, activation: str = "relu"):
    """Mean cross-entropy over the batch plus gradients for backbone and head.

    The head's output dimension must equal the number of classes declared by
    the batch; columns are ordered by ascending class id.
    """
    arrays, n_layers = _split_params(params)
    if arrays["head.w"].shape[1] != len(batch.classes):
        raise ShapeMismatchError(
            f"head has {arrays['head.w'].shape[1]} outputs "
            f"but the batch declares {len(batch.classes)} classes"
        )
    if arrays["layer0.w"].shape[0] != batch.input_dim:
        raise ShapeMismatchError("batch feature dim does not match layer0")
    y_idx = _class_indices(batch.labels, batch.classes)
    loss, grads = _forward_backward(arrays, n_layers, batch.features, y_idx, activation)
    grad_set = ParamSet((name, DenseTensor.from_array(grads[name])) for name in params.names())
    return loss, grad_set


def _init_head(embed_dim: int, n_classes: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "head.w": _glorot(rng, embed_dim, n_classes),
        "head.b": np.zeros(n_classes),
    }


def train(init: ParamSet, data: LabeledDataset, hyper: Hyper, activation: str = "relu") -> TrainResult:
    """Fine-tune backbone plus a fresh head on one task with plain SGD.

    Deterministic for a given seed: the head init and the per-epoch shuffle
    each draw from a stream derived from ``hyper.seed``. The returned
    backbone is what downstream stages consume; the head is discardable.
    """
    layers = _layer_arrays(init)
    if data.input_dim != layers[0][0].shape[0]:
        raise ShapeMismatchError("dataset feature dim does not match the model")
    if hyper.batch_size > data.n:
        raise ValueError("batch_size must not exceed the dataset size")

    head_seed, shuffle_seed = np.random.SeedSequence(hyper.seed).spawn(2)
    head = _init_head(layers[-1][0].shape[1], len(data.classes), np.random.default_rng(head_seed))
    if hyper.epochs == 0:
        head_set = ParamSet.from_arrays(head)
        return TrainResult(init, head_set, ())

    params = {name: t.array.copy() for name, t in init.items()}
    params.update(head)
    n_layers = len(layers)
    y_idx = _class_indices(data.labels, data.classes)
    x = data.features
    shuffle_rng = np.random.default_rng(shuffle_seed)

    losses = []
    for _ in range(hyper.epochs):
        order = shuffle_rng.permutation(data.n)
        for start in range(0, data.n, hyper.batch_size):
            rows = order[start : start + hyper.batch_size]
            _, grads = _forward_backward(params, n_layers, x[rows], y_idx[rows], activation)
            for name, g in grads.items():
                params[name] -= hyper.learning_rate * g
        epoch_loss, _ = _forward_backward(params, n_layers, x, y_idx, activation)
        losses.append(epoch_loss)

    backbone = ParamSet((name, DenseTensor.from_array(params[name])) for name in init.names())
    head_set = ParamSet.from_arrays({k: params[k] for k in ("head.w", "head.b")})
    return TrainResult(backbone, head_set, tuple(losses))


def embedding_dim(backbone: ParamSet) -> int:
    """Output width of the backbone's final layer."""
    return _layer_arrays(backbone)[-1][0].shape[1]


def predict_labels(backbone: ParamSet, head: ParamSet, x: np.ndarray,
                   classes: tuple[int, ...], activation: str = "relu") -> np.ndarray:
    """Argmax over head logits; ties resolve to the lowest column index."""
    emb = embed_batch(backbone, x, activation)
    logits = emb @ head["head.w"].array + head["head.b"].array
    lookup = np.asarray(sorted(classes), dtype=np.int64)
    if logits.shape[1] != lookup.size:
        raise ShapeMismatchError("head output dim does not match the class set")
    return lookup[np.argmax(logits, axis=1)]


def concat_datasets(datasets) -> LabeledDataset:
    """Pool several datasets; the class set is the sorted union."""
    datasets = list(datasets)
    if not datasets:
        raise EmptyBatchError("no datasets to concatenate")
    features = np.concatenate([d.features for d in datasets], axis=0)
    labels = np.concatenate([d.labels for d in datasets])
    classes = sorted({c for d in datasets for c in d.classes})
    return LabeledDataset(features, labels, classes)


def load_labeled_csv(path) -> LabeledDataset:
    """Read a dataset from CSV with header ``f0,...,f{d-1},label``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        d = len(header) - 1
        if d < 1 or header != [f"f{i}" for i in range(d)] + ["label"]:
            raise FormatError(f"{path}: header must be f0..f{{d-1}},label")
        features, labels = [], []
        for row in reader:
            if len(row) != d + 1:
                raise FormatError(f"{path}: row with {len(row)} fields, expected {d + 1}")
            try:
                features.append([float(v) for v in row[:d]])
                labels.append(int(row[d]))
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}") from exc
    if not features:
        raise EmptyBatchError(f"{path}: no data rows")
    return LabeledDataset(np.asarray(features), np.asarray(labels))


def save_labeled_csv(data: LabeledDataset, path) -> None:
    """Write a dataset as CSV; floats use shortest round-trip formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(data.input_dim)] + ["label"])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
