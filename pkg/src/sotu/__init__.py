"""Sparse-delta fine-tuning, masking and merging for class-incremental learning."""

from .attention import (
    AttentionInstance,
    attention_map,
    mask_stability_report,
    perturbation_bound_check,
    random_attention_instance,
)
from .checkpoint import (
    Fingerprint,
    fingerprint,
    load_paramset,
    load_prototypes,
    load_sparse_delta,
    save_paramset,
    save_prototypes,
    save_sparse_delta,
)
from .config import RunConfig, build_run_config, load_config_file
from .deltas import (
    CollisionReport,
    SparseDelta,
    SparseEntry,
    collision_report,
    compute_delta,
    delta_cosine_matrix,
    expected_multi_collision_rate,
    mask_delta,
    merge_deltas,
)
from .errors import SotuError
from .harness import (
    MetricsRecord,
    SyntheticSpec,
    TaskStream,
    compute_metrics,
    derived_seed,
    make_blob_dataset,
    make_task_stream,
    run_sotu,
    sweep_mask_rate,
)
from .prototypes import (
    Projection,
    ProjectionSpec,
    PrototypeSet,
    build_prototypes,
    feature,
    make_projection,
    ncm_predict,
)
from .tensors import DenseTensor, ParamSet, dot, ew_combine, l2_norm, scale
from .training import (
    Hyper,
    LabeledDataset,
    ModelSpec,
    embed_forward,
    init_model,
    load_labeled_csv,
    loss_and_grad,
    save_labeled_csv,
    train,
)

__version__ = "0.1.0"
