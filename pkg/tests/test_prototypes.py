import math

import numpy as np
import pytest

from sotu.errors import (
    EmptyPrototypeSetError,
    ShapeMismatchError,
    UnknownClassError,
    ZeroFeatureError,
)
from sotu.prototypes import (
    Projection,
    ProjectionSpec,
    PrototypeSet,
    build_prototypes,
    feature,
    feature_batch,
    make_projection,
    ncm_predict,
    ncm_predict_batch,
)
from sotu.tensors import ParamSet
from sotu.training import LabeledDataset, ModelSpec, embed_forward, init_model


def identity_backbone(dim=2):
    return ParamSet.from_arrays({
        "layer0.w": np.eye(dim), "layer0.b": np.zeros(dim),
    })


def test_make_projection_is_deterministic_with_expected_shape():
    spec = ProjectionSpec(out_dim=8, seed=3)
    a = make_projection(spec, 4)
    b = make_projection(spec, 4)
    assert a.shape == (8, 4)
    assert np.array_equal(a, b)


def test_projection_entries_are_standard_normal_on_average():
    spec = ProjectionSpec(out_dim=500, seed=1)
    matrix = make_projection(spec, 200)
    n = matrix.size
    assert n == 100_000
    assert abs(matrix.mean()) < 4 / math.sqrt(n)


def test_feature_without_projection_equals_embedding():
    backbone = init_model(ModelSpec(4, (6,), 3), 0)
    x = np.array([0.5, -1.0, 2.0, 0.0])
    assert np.array_equal(feature(backbone, x, None, "tanh"),
                          embed_forward(backbone, x, "tanh"))


def test_relu_projection_kills_nonnegative_embeddings():
    backbone = identity_backbone(2)
    proj = Projection(ProjectionSpec(2, 0, "relu"), -np.eye(2))
    out = feature(backbone, [3.0, 4.0], proj, "relu")
    assert np.array_equal(out, [0.0, 0.0])


def test_feature_matches_straight_line_oracle():
    rng = np.random.default_rng(2)
    backbone = init_model(ModelSpec(4, (5,), 3), 1)
    proj = Projection.from_spec(ProjectionSpec(7, 9, "relu"), 3)
    for _ in range(10):
        x = rng.standard_normal(4)
        emb = embed_forward(backbone, x, "tanh")
        want = np.empty(7)
        for i in range(7):
            acc = 0.0
            for j in range(3):
                acc += proj.matrix[i, j] * emb[j]
            want[i] = max(acc, 0.0)
        got = feature(backbone, x, proj, "tanh")
        assert np.max(np.abs(got - want)) < 1e-12


def dataset(features, labels):
    return LabeledDataset(np.asarray(features, dtype=float), labels)


def test_prototype_of_single_example_is_its_feature():
    backbone = identity_backbone(2)
    data = dataset([[1.0, 2.0], [5.0, 0.5]], [0, 1])
    protos = build_prototypes(backbone, data, 10, None, None, "relu")
    assert np.array_equal(protos.prototype(0), [1.0, 2.0])
    assert np.array_equal(protos.prototype(1), [5.0, 0.5])


def test_prototype_mean_is_idempotent_for_duplicates():
    backbone = identity_backbone(2)
    data = dataset([[1.0, 2.0], [1.0, 2.0]], [0, 0])
    protos = build_prototypes(backbone, data, 10, None, None, "relu")
    assert np.array_equal(protos.prototype(0), [1.0, 2.0])


def test_prototype_hand_mean():
    backbone = identity_backbone(2)
    data = dataset([[1.0, 0.0], [0.0, 1.0]], [3, 3])
    protos = build_prototypes(backbone, data, 10, None, None, "relu")
    assert np.array_equal(protos.prototype(3), [0.5, 0.5])


def test_buffer_limits_examples_per_class():
    backbone = identity_backbone(2)
    data = dataset([[1.0, 0.0], [1.0, 0.0], [99.0, 99.0]], [0, 0, 0])
    protos = build_prototypes(backbone, data, 2, None, None, "relu")
    assert np.array_equal(protos.prototype(0), [1.0, 0.0])


def test_accumulation_adds_classes_without_touching_old_ones():
    backbone = identity_backbone(2)
    first = dataset([[1.0, 0.0]], [0])
    second = dataset([[0.0, 1.0]], [1])
    protos = build_prototypes(backbone, first, 5, None, None, "relu")
    snapshot = protos.prototype(0).copy()
    out = build_prototypes(backbone, second, 5, None, protos, "relu")
    assert out is protos
    assert protos.class_ids() == (0, 1)
    assert np.array_equal(protos.prototype(0), snapshot)


def test_recurring_class_id_is_an_error():
    backbone = identity_backbone(2)
    data = dataset([[1.0, 0.0]], [0])
    protos = build_prototypes(backbone, data, 5, None, None, "relu")
    with pytest.raises(UnknownClassError):
        build_prototypes(backbone, data, 5, None, protos, "relu")


def test_ncm_predicts_matching_prototype():
    protos = PrototypeSet(2)
    protos.add(0, [1.0, 0.0])
    protos.add(1, [0.0, 1.0])
    assert ncm_predict(protos, [1.0, 0.0]) == 0
    assert ncm_predict(protos, [0.9, 0.1]) == 0
    assert ncm_predict(protos, [0.1, 0.9]) == 1


def test_ncm_is_invariant_to_positive_rescaling():
    rng = np.random.default_rng(3)
    protos = PrototypeSet(4)
    for cid in range(5):
        protos.add(cid, rng.standard_normal(4))
    for _ in range(50):
        f = rng.standard_normal(4)
        assert ncm_predict(protos, f) == ncm_predict(protos, 3.7 * f)


def test_ncm_ties_break_to_lowest_class_id():
    protos = PrototypeSet(2)
    protos.add(7, [1.0, 1.0])
    protos.add(2, [1.0, 1.0])
    protos.add(9, [2.0, 2.0])  # same direction, same cosine
    assert ncm_predict(protos, [3.0, 3.0]) == 2


def brute_force_predict(protos, f):
    f = np.asarray(f, dtype=np.float64)
    f_norm = math.sqrt(float(np.dot(f, f)))
    pairs = []
    for cid in protos.class_ids():
        proto = protos.prototype(cid)
        p_norm = math.sqrt(float(np.dot(proto, proto)))
        sim = float("-inf") if p_norm == 0.0 else float(np.dot(f, proto)) / (f_norm * p_norm)
        pairs.append((cid, sim))
    best_sim = max(sim for _, sim in pairs)
    return min(cid for cid, sim in pairs if sim == best_sim)


def test_ncm_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(100):
        dim = int(rng.integers(2, 6))
        protos = PrototypeSet(dim)
        ids = rng.choice(50, size=int(rng.integers(2, 8)), replace=False)
        for cid in ids:
            protos.add(int(cid), rng.standard_normal(dim))
        f = rng.standard_normal(dim)
        assert ncm_predict(protos, f) == brute_force_predict(protos, f)


def test_ncm_error_cases():
    empty = PrototypeSet(3)
    with pytest.raises(EmptyPrototypeSetError):
        ncm_predict(empty, [1.0, 0.0, 0.0])
    protos = PrototypeSet(3)
    protos.add(0, [1.0, 0.0, 0.0])
    with pytest.raises(ZeroFeatureError):
        ncm_predict(protos, [0.0, 0.0, 0.0])
    with pytest.raises(ShapeMismatchError):
        ncm_predict(protos, [1.0, 0.0])


def test_ncm_batch_agrees_with_scalar():
    rng = np.random.default_rng(5)
    protos = PrototypeSet(3)
    for cid in (4, 1, 6):
        protos.add(cid, rng.standard_normal(3))
    batch = rng.standard_normal((20, 3))
    got = ncm_predict_batch(protos, batch)
    assert got.tolist() == [ncm_predict(protos, row) for row in batch]


def test_projection_mismatch_between_calls_is_rejected():
    backbone = identity_backbone(2)
    data = dataset([[1.0, 0.0]], [0])
    proj = Projection.from_spec(ProjectionSpec(4, 0, "relu"), 2)
    protos = build_prototypes(backbone, data, 5, proj, None, "relu")
    other = dataset([[0.0, 1.0]], [1])
    with pytest.raises(ValueError):
        build_prototypes(backbone, other, 5, None, protos, "relu")


def test_feature_batch_matches_feature():
    backbone = init_model(ModelSpec(3, (4,), 3), 7)
    proj = Projection.from_spec(ProjectionSpec(5, 2, "relu"), 3)
    rng = np.random.default_rng(6)
    batch = rng.standard_normal((8, 3))
    rows = feature_batch(backbone, batch, proj, "tanh")
    for i, x in enumerate(batch):
        assert np.allclose(rows[i], feature(backbone, x, proj, "tanh"), atol=1e-12)
