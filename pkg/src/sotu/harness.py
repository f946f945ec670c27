"""Class-incremental orchestration: fine-tune, mask, merge, evaluate, sweep.

For every task in a class-disjoint stream the pipeline fine-tunes the shared
base checkpoint, masks the resulting delta, merges all masked deltas seen so
far back onto the base, builds prototypes for the new classes with the
merged backbone, and scores the cumulative test pool. All randomness derives
from the stream seed through fixed (domain, index) splits, so adding tasks
never perturbs earlier tasks and re-running a config reproduces every output
byte for byte.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import fingerprint, load_sparse_delta, save_paramset, save_prototypes, save_sparse_delta
from .config import RunConfig, config_text
from .deltas import SparseDelta, collision_report, compute_delta, mask_delta, merge_deltas
from .errors import (
    EmptyListError,
    InvalidProbabilityError,
    PipelineStageError,
    TooFewClassesError,
    UnknownClassError,
)
from .prototypes import Projection, build_prototypes, feature_batch, ncm_predict_batch
from .report import (
    render_matrix_svg,
    render_sweep_svg,
    write_collision_csv,
    write_matrix_csv,
    write_metrics_csv,
    write_summary_csv,
    write_sweep_csv,
)
from .tensors import ParamSet
from .training import (
    Hyper,
    LabeledDataset,
    ModelSpec,
    concat_datasets,
    init_model,
    load_labeled_csv,
    save_labeled_csv,
    train,
)

__all__ = [
    "SyntheticSpec",
    "Task",
    "TaskStream",
    "MetricsRecord",
    "SweepRow",
    "derived_seed",
    "make_blob_dataset",
    "make_task_stream",
    "make_stream",
    "pretrain_backbone",
    "evaluate_accuracy",
    "compute_metrics",
    "run_sotu",
    "sweep_mask_rate",
    "mean_abs_offdiagonal",
]

_DOMAINS = {
    "model_init": 0,
    "pretrain_train": 1,
    "task_train": 2,
    "task_mask": 3,
    "class_data": 4,
    "class_split": 5,
    "class_shuffle": 6,
}


def derived_seed(root: int, domain: str, index: int = 0) -> int:
    """Fixed splitting function from the stream seed to per-stage seeds."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(_DOMAINS[domain], int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-blob class generator: one unit-variance blob per class."""

    num_classes: int
    samples_per_class: int
    input_dim: int
    separation: float
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 2 or self.input_dim < 1:
            raise ValueError("invalid synthetic data spec")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


def _class_rows(class_id: int, count: int, input_dim: int, separation: float,
                seed: int) -> np.ndarray:
    rng = np.random.default_rng(derived_seed(seed, "class_data", class_id))
    mean = rng.standard_normal(input_dim) * separation
    return mean + rng.standard_normal((count, input_dim))


def make_blob_dataset(class_ids, samples_per_class: int, input_dim: int,
                      separation: float, seed: int) -> LabeledDataset:
    """Blob samples for the given class ids; depends only on (seed, class id)."""
    class_ids = sorted(int(c) for c in class_ids)
    features = np.concatenate([
        _class_rows(c, samples_per_class, input_dim, separation, seed) for c in class_ids
    ])
    labels = np.repeat(class_ids, samples_per_class)
    return LabeledDataset(features, labels, class_ids)


@dataclass(frozen=True)
class Task:
    train: LabeledDataset
    test: LabeledDataset
    class_ids: tuple[int, ...]


@dataclass(frozen=True)
class TaskStream:
    """Ordered class-disjoint tasks, each with its own train/test split."""

    tasks: tuple[Task, ...]
    seed: int

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            ids = set(task.class_ids)
            if ids & seen:
                raise ValueError("task class sets must be pairwise disjoint")
            seen |= ids


def _split_counts(total: int, test_fraction: float) -> tuple[int, int]:
    n_test = min(max(1, round(total * test_fraction)), total - 1)
    return total - n_test, n_test


def _partition_classes(class_ids, num_tasks: int, seed: int) -> list[list[int]]:
    class_ids = sorted(int(c) for c in class_ids)
    if len(class_ids) < num_tasks:
        raise TooFewClassesError(
            f"{len(class_ids)} classes cannot fill {num_tasks} tasks"
        )
    rng = np.random.default_rng(derived_seed(seed, "class_shuffle"))
    order = [class_ids[i] for i in rng.permutation(len(class_ids))]
    base, extra = divmod(len(order), num_tasks)
    groups, start = [], 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        groups.append(order[start : start + size])
        start += size
    return groups


def make_task_stream(source, num_tasks: int, seed: int,
                     test_fraction: float | None = None) -> TaskStream:
    """Split classes into a deterministic class-incremental stream.

    ``source`` is either a SyntheticSpec (blobs are generated on the fly) or
    a LabeledDataset whose classes are partitioned. Classes are shuffled
    once with the stream seed and dealt into ``num_tasks`` groups as evenly
    as possible (earlier groups take the remainder).
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be at least 1")
    tasks = []
    if isinstance(source, SyntheticSpec):
        fraction = source.test_fraction if test_fraction is None else test_fraction
        groups = _partition_classes(range(source.num_classes), num_tasks, seed)
        for group in groups:
            n_train, n_test = _split_counts(source.samples_per_class, fraction)
            train_rows, test_rows, train_labels, test_labels = [], [], [], []
            for c in sorted(group):
                block = _class_rows(c, source.samples_per_class, source.input_dim,
                                    source.separation, seed)
                train_rows.append(block[:n_train])
                test_rows.append(block[n_train:])
                train_labels.append(np.full(n_train, c))
                test_labels.append(np.full(n_test, c))
            classes = tuple(sorted(group))
            tasks.append(Task(
                LabeledDataset(np.concatenate(train_rows), np.concatenate(train_labels), classes),
                LabeledDataset(np.concatenate(test_rows), np.concatenate(test_labels), classes),
                classes,
            ))
    elif isinstance(source, LabeledDataset):
        fraction = 0.25 if test_fraction is None else test_fraction
        groups = _partition_classes(source.classes, num_tasks, seed)
        for group in groups:
            train_rows, test_rows = [], []
            for c in sorted(group):
                rows = np.flatnonzero(source.labels == c)
                if rows.size < 2:
                    raise ValueError(f"class {c} needs at least 2 examples to split")
                rng = np.random.default_rng(derived_seed(seed, "class_split", c))
                rows = rows[rng.permutation(rows.size)]
                n_train, _ = _split_counts(rows.size, fraction)
                train_rows.append(rows[:n_train])
                test_rows.append(rows[n_train:])
            classes = tuple(sorted(group))
            train_idx = np.concatenate(train_rows)
            test_idx = np.concatenate(test_rows)
            tasks.append(Task(
                LabeledDataset(source.features[train_idx], source.labels[train_idx], classes),
                LabeledDataset(source.features[test_idx], source.labels[test_idx], classes),
                classes,
            ))
    else:
        raise TypeError("source must be a SyntheticSpec or a LabeledDataset")
    return TaskStream(tuple(tasks), int(seed))


@dataclass(frozen=True)
class MetricsRecord:
    """Cumulative accuracies R_1..R_T plus their mean and final value."""

    accuracies: tuple[float, ...]
    average: float
    final: float

    @classmethod
    def from_accuracies(cls, accuracies) -> MetricsRecord:
        avg, final = compute_metrics(accuracies)
        return cls(tuple(float(a) for a in accuracies), avg, final)


def compute_metrics(accuracies) -> tuple[float, float]:
    """Exactly rounded mean of the accuracy list, and its last entry."""
    values = [float(a) for a in accuracies]
    if not values:
        raise EmptyListError("accuracy list is empty")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("accuracies must lie in [0, 1]")
    return float(statistics.mean(values)), values[-1]


def evaluate_accuracy(backbone: ParamSet, protos, datasets, proj: Projection | None,
                      activation: str) -> float:
    """Example-weighted prototype accuracy over the pooled datasets."""
    data = concat_datasets(datasets)
    feats = feature_batch(backbone, data.features, proj, activation)
    predictions = ncm_predict_batch(protos, feats)
    return float(np.count_nonzero(predictions == data.labels) / data.n)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def _flatten_delta(delta: SparseDelta) -> np.ndarray:
    return np.concatenate([t.values for _, t in delta.to_dense().items()])


def _lenient_cosine_matrix(deltas) -> np.ndarray:
    """Pairwise delta cosines with NaN (not an error) where a delta is zero."""
    vectors = np.stack([_flatten_delta(d) for d in deltas])
    norms = np.linalg.norm(vectors, axis=1)
    t = len(deltas)
    matrix = np.full((t, t), np.nan)
    nonzero = norms > 0.0
    if np.any(nonzero):
        unit = vectors[nonzero] / norms[nonzero, None]
        sub = unit @ unit.T
        matrix[np.ix_(nonzero, nonzero)] = sub
        matrix[np.diag_indices(t)] = np.where(nonzero, 1.0, np.nan)
    return matrix


def mean_abs_offdiagonal(matrix: np.ndarray) -> float:
    """Mean |entry| off the diagonal; NaN for 1x1 or undefined matrices."""
    matrix = np.asarray(matrix, dtype=np.float64)
    t = matrix.shape[0]
    if t < 2:
        return float("nan")
    mask = ~np.eye(t, dtype=bool)
    return float(np.abs(matrix[mask]).mean())


def _stream_source(cfg: RunConfig):
    if cfg.data_csv:
        return load_labeled_csv(cfg.data_csv)
    return SyntheticSpec(cfg.num_classes, cfg.samples_per_class, cfg.input_dim,
                         cfg.separation, cfg.test_fraction)


def _pretrain_data(cfg: RunConfig, stream_classes: set[int]) -> LabeledDataset:
    if cfg.pretrain_csv:
        data = load_labeled_csv(cfg.pretrain_csv)
    else:
        base_ids = range(cfg.num_classes, cfg.num_classes + cfg.base_classes)
        data = make_blob_dataset(base_ids, cfg.samples_per_class, cfg.input_dim,
                                 cfg.separation, cfg.stream_seed)
    overlap = set(data.classes) & stream_classes
    if overlap:
        raise UnknownClassError(f"pretraining classes overlap the stream: {sorted(overlap)}")
    return data


def make_stream(cfg: RunConfig) -> TaskStream:
    """The config's task stream (synthetic blobs unless a CSV is configured)."""
    return _stage("task_stream", make_task_stream, _stream_source(cfg),
                  cfg.num_tasks, cfg.stream_seed, cfg.test_fraction)


def pretrain_backbone(cfg: RunConfig) -> ParamSet:
    """Train the shared base checkpoint on classes disjoint from the stream."""
    stream = make_stream(cfg)
    stream_classes = {c for task in stream.tasks for c in task.class_ids}
    base_data = _stage("pretrain_data", _pretrain_data, cfg, stream_classes)
    if base_data.input_dim != cfg.input_dim:
        raise PipelineStageError(
            "pretrain_data",
            ValueError(f"pretraining data has dim {base_data.input_dim}, config says {cfg.input_dim}"),
        )
    spec = ModelSpec(cfg.input_dim, cfg.hidden_dims, cfg.embed_dim, cfg.activation)
    init = init_model(spec, derived_seed(cfg.stream_seed, "model_init"))
    hyper = Hyper(cfg.learning_rate, cfg.epochs, cfg.batch_size,
                  derived_seed(cfg.stream_seed, "pretrain_train"))
    return _stage("pretrain", train, init, base_data, hyper, cfg.activation).backbone


def run_sotu(cfg: RunConfig) -> MetricsRecord:
    """Run the full pipeline described in the module docstring.

    Persists per-stage artifacts (pretrained/merged checkpoints, one
    ``.sdelta`` per task, prototypes, per-task data CSVs) plus metrics,
    similarity and collision reports under ``cfg.output_dir``.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    act = cfg.activation

    stream = make_stream(cfg)
    theta_pre = pretrain_backbone(cfg)
    save_paramset(theta_pre, out / "pretrained.sotu")
    base_fp = fingerprint(theta_pre)

    proj_spec = cfg.projection_spec()
    proj = Projection.from_spec(proj_spec, cfg.embed_dim) if proj_spec else None

    protos = None
    deltas: list[SparseDelta] = []
    merged = theta_pre
    accuracies: list[float] = []
    for k, task in enumerate(stream.tasks, 1):
        save_labeled_csv(task.train, out / "data" / f"task{k}_train.csv")
        save_labeled_csv(task.test, out / "data" / f"task{k}_test.csv")

        task_hyper = Hyper(cfg.learning_rate, cfg.epochs, cfg.batch_size,
                           derived_seed(cfg.stream_seed, "task_train", k))
        result = _stage("finetune", train, theta_pre, task.train, task_hyper, act)
        delta = _stage("delta", compute_delta, result.backbone, theta_pre)
        sparse = _stage("mask", mask_delta, delta, cfg.mask_rate,
                        derived_seed(cfg.stream_seed, "task_mask", k), base_fp)
        save_sparse_delta(sparse, out / f"delta_{k}.sdelta")
        deltas.append(sparse)
        merged = _stage("merge", merge_deltas, theta_pre, deltas)

        if cfg.recompute_prototypes:
            protos = None
            for earlier in stream.tasks[:k]:
                protos = _stage("prototypes", build_prototypes, merged, earlier.train,
                                cfg.buffer_per_class, proj, protos, act)
        else:
            protos = _stage("prototypes", build_prototypes, merged, task.train,
                            cfg.buffer_per_class, proj, protos, act)

        seen = [t.test for t in stream.tasks[:k]]
        allowed = {c for t in stream.tasks[:k] for c in t.class_ids}
        if any(set(d.classes) - allowed for d in seen):
            raise PipelineStageError(
                "evaluate", UnknownClassError("test pool contains classes from future tasks"))
        accuracies.append(_stage("evaluate", evaluate_accuracy, merged, protos, seen, proj, act))

    record = MetricsRecord.from_accuracies(accuracies)
    save_paramset(merged, out / "merged.sotu")
    save_prototypes(protos, out / "prototypes.protos")
    write_metrics_csv(out / "metrics.csv", record.accuracies)
    write_summary_csv(out / "summary.csv", record.average, record.final)

    labels = list(range(1, len(deltas) + 1))
    similarity = _lenient_cosine_matrix(deltas)
    write_matrix_csv(out / "similarity.csv", similarity, labels)
    render_matrix_svg(out / "similarity.svg", similarity, labels,
                      "masked-delta cosine similarity")
    write_collision_csv(out / "collisions.csv", collision_report(deltas), labels)

    notes = ("accuracy is example-weighted over the pooled test sets of tasks seen so far",)
    (out / "resolved.cfg").write_text(config_text(cfg, notes))
    return record


@dataclass(frozen=True)
class SweepRow:
    mask_rate: float
    average: float
    final: float
    mean_abs_offdiag_cosine: float
    multi_collision_rate: float
    status: str


def sweep_mask_rate(cfg: RunConfig, rates) -> list[SweepRow]:
    """One full run per masking rate with identical seeds; emits CSV and SVG.

    A failing rate contributes a row with a ``failed:<stage>`` marker instead
    of aborting the whole sweep.
    """
    rates = [float(r) for r in rates]
    for rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise InvalidProbabilityError(f"mask rate {rate} outside [0, 1]")
    out = Path(cfg.output_dir)
    rows = []
    nan = float("nan")
    for rate in rates:
        sub = replace(cfg, mask_rate=rate, output_dir=str(out / f"rate_{rate:g}"))
        try:
            record = run_sotu(sub)
            delta_paths = sorted(Path(sub.output_dir).glob("delta_*.sdelta"),
                                 key=lambda p: int(p.stem.split("_")[1]))
            deltas = [load_sparse_delta(p) for p in delta_paths]
            cosine = mean_abs_offdiagonal(_lenient_cosine_matrix(deltas))
            collisions = collision_report(deltas).multi_collision_rate
            rows.append(SweepRow(rate, record.average, record.final, cosine,
                                 collisions, "ok"))
        except PipelineStageError as exc:
            rows.append(SweepRow(rate, nan, nan, nan, nan, f"failed:{exc.stage}"))
    write_sweep_csv(out / "sweep.csv", rows)
    render_sweep_svg(out / "sweep.svg", rows)
    return rows
