import math

import numpy as np
import pytest

from sotu.errors import NonFiniteError, ShapeMismatchError
from sotu.tensors import DenseTensor, ParamSet, dot, ew_combine, l2_norm, scale


def t(values, shape=None):
    arr = np.asarray(values, dtype=np.float64)
    return DenseTensor(shape or arr.shape, arr)


def test_ew_combine_sub_self_is_zero():
    a = t([1.0, 2.0, 3.0])
    out = ew_combine(a, a, "sub")
    assert np.array_equal(out.values, [0.0, 0.0, 0.0])


def test_ew_combine_add_basis():
    out = ew_combine(t([1.0, 0.0]), t([0.0, 1.0]), "add")
    assert np.array_equal(out.values, [1.0, 1.0])


def test_ew_combine_add_hand_values():
    out = ew_combine(t([0.5, -0.25, 2.0]), t([0.25, 0.25, -1.0]), "add")
    assert np.array_equal(out.values, [0.75, 0.0, 1.0])


def test_ew_combine_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        ew_combine(t([1.0, 2.0]), t([1.0, 2.0, 3.0]), "add")


def test_ew_combine_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ew_combine(t([1.0]), t([1.0]), "mul")


def test_scale_annihilator_and_identity():
    a = t([1.0, 2.0])
    assert np.array_equal(scale(a, 0.0).values, [0.0, 0.0])
    assert np.array_equal(scale(a, 1.0).values, [1.0, 2.0])


def test_scale_hand_values():
    assert np.array_equal(scale(t([3.0, -4.0]), 0.5).values, [1.5, -2.0])


def test_scale_rejects_non_finite_factor():
    with pytest.raises(NonFiniteError):
        scale(t([1.0]), float("nan"))
    with pytest.raises(NonFiniteError):
        scale(t([1.0]), float("inf"))


def test_scale_overflow_is_an_error():
    with pytest.raises(NonFiniteError):
        scale(t([1e308]), 10.0)


def test_dot_orthogonal_and_hand_values():
    assert dot(t([1.0, 0.0]), t([0.0, 1.0])) == 0.0
    assert dot(t([1.0, 2.0, 3.0]), t([1.0, 2.0, 3.0])) == 14.0
    assert dot(t([2.0]), t([-3.0])) == -6.0


def test_dot_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        dot(t([1.0]), t([1.0, 2.0]))


def test_l2_norm_values():
    assert l2_norm(t([0.0, 0.0, 0.0])) == 0.0
    assert l2_norm(t([3.0, 4.0])) == 5.0
    assert l2_norm(t([1.0])) == 1.0


def test_add_then_sub_roundtrip_is_exact():
    # Exact-identity regime: dyadic values whose sums incur no rounding.
    rng = np.random.default_rng(0)
    for _ in range(100):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        a = t(rng.integers(-(2**20), 2**20, size=shape) / 2.0**10, shape)
        b = t(rng.integers(-(2**20), 2**20, size=shape) / 2.0**10, shape)
        back = ew_combine(ew_combine(a, b, "add"), b, "sub")
        assert back == a


def test_dot_is_bit_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        a = t(rng.standard_normal(n))
        b = t(rng.standard_normal(n))
        assert dot(a, b) == dot(b, a)


def test_cauchy_schwarz_with_rounding_slack():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        a = t(rng.standard_normal(n) * 10)
        b = t(rng.standard_normal(n) * 10)
        assert abs(dot(a, b)) <= l2_norm(a) * l2_norm(b) + 1e-9


def test_tensor_rejects_non_finite_and_bad_shape():
    with pytest.raises(NonFiniteError):
        t([1.0, float("nan")])
    with pytest.raises(ShapeMismatchError):
        DenseTensor((2, 2), np.zeros(3))
    with pytest.raises(ShapeMismatchError):
        DenseTensor((0,), np.zeros(0))


def test_tensor_is_immutable():
    a = t([1.0, 2.0])
    with pytest.raises(ValueError):
        a.values[0] = 5.0
    with pytest.raises(AttributeError):
        a.shape = (1,)


def test_paramset_preserves_insertion_order():
    ps = ParamSet([("z", t([1.0])), ("a", t([2.0]))])
    assert ps.names() == ("z", "a")
    assert ps["a"].values[0] == 2.0


def test_paramset_rejects_duplicates_and_empty_names():
    with pytest.raises(ValueError):
        ParamSet([("w", t([1.0])), ("w", t([2.0]))])
    with pytest.raises(ValueError):
        ParamSet([("", t([1.0]))])


def test_paramset_equality_is_bit_exact():
    a = ParamSet.from_arrays({"w": [1.0, 2.0], "b": [0.5]})
    b = ParamSet.from_arrays({"w": [1.0, 2.0], "b": [0.5]})
    c = ParamSet.from_arrays({"b": [0.5], "w": [1.0, 2.0]})  # different order
    assert a == b
    assert a != c
    d = ParamSet.from_arrays({"w": [1.0, 2.0 + 1e-16], "b": [0.5]})
    assert a == d or not np.array_equal(a["w"].values, d["w"].values)


def test_tensor_array_view_matches_shape():
    a = t([[1.0, 2.0], [3.0, 4.0]])
    assert a.shape == (2, 2)
    assert a.array[1, 0] == 3.0
    assert math.prod(a.shape) == a.size
