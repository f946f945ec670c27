import numpy as np
import pytest

from sotu.checkpoint import (
    Fingerprint,
    fingerprint,
    load_paramset,
    load_prototypes,
    load_sparse_delta,
    save_paramset,
    save_prototypes,
    save_sparse_delta,
)
from sotu.deltas import mask_delta
from sotu.errors import FormatError
from sotu.prototypes import ProjectionSpec, PrototypeSet
from sotu.tensors import ParamSet


def random_paramset(rng, max_tensors=4):
    names = ["w", "bias", "layer0.w", "émb", "x" * 10]
    rng.shuffle(names)
    entries = {}
    for name in names[: int(rng.integers(1, max_tensors + 1))]:
        shape = tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        entries[name] = rng.standard_normal(shape)
    return ParamSet.from_arrays(entries)


def random_sparse_delta(rng, ps):
    return mask_delta(ps, float(rng.uniform(0, 1)), int(rng.integers(0, 2**32)),
                      fingerprint(ps))


def test_single_tensor_roundtrip(tmp_path):
    ps = ParamSet.from_arrays({"w": [1.5]})
    save_paramset(ps, tmp_path / "a.sotu")
    assert load_paramset(tmp_path / "a.sotu") == ps


def test_three_tensor_roundtrip_preserves_order(tmp_path):
    rng = np.random.default_rng(0)
    ps = ParamSet.from_arrays({
        "m": rng.standard_normal((2, 3)),
        "v": rng.standard_normal(4),
        "s": rng.standard_normal((1, 1, 1)),
    })
    save_paramset(ps, tmp_path / "a.sotu")
    loaded = load_paramset(tmp_path / "a.sotu")
    assert loaded == ps
    assert loaded.names() == ("m", "v", "s")


def test_wrong_magic_is_format_error(tmp_path):
    path = tmp_path / "bad.sotu"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(FormatError):
        load_paramset(path)


def test_truncated_file_is_format_error(tmp_path):
    ps = ParamSet.from_arrays({"w": np.arange(10.0)})
    path = tmp_path / "a.sotu"
    save_paramset(ps, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 9])
    with pytest.raises(FormatError):
        load_paramset(path)


def test_trailing_bytes_are_format_error(tmp_path):
    ps = ParamSet.from_arrays({"w": [1.0]})
    path = tmp_path / "a.sotu"
    save_paramset(ps, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_paramset(path)


def test_record_kind_is_checked(tmp_path):
    ps = ParamSet.from_arrays({"w": [1.0, 2.0]})
    save_paramset(ps, tmp_path / "a.sotu")
    with pytest.raises(FormatError):
        load_sparse_delta(tmp_path / "a.sotu")
    delta = mask_delta(ps, 0.5, 3, fingerprint(ps))
    save_sparse_delta(delta, tmp_path / "d.sdelta")
    with pytest.raises(FormatError):
        load_paramset(tmp_path / "d.sdelta")


def test_paramset_roundtrip_property(tmp_path):
    rng = np.random.default_rng(7)
    for i in range(100):
        ps = random_paramset(rng)
        path = tmp_path / f"p{i}.sotu"
        save_paramset(ps, path)
        assert load_paramset(path) == ps


def test_saves_are_byte_identical(tmp_path):
    rng = np.random.default_rng(8)
    ps = random_paramset(rng)
    save_paramset(ps, tmp_path / "a.sotu")
    save_paramset(ps, tmp_path / "b.sotu")
    assert (tmp_path / "a.sotu").read_bytes() == (tmp_path / "b.sotu").read_bytes()


def test_fingerprint_stable_over_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    ps = random_paramset(rng)
    save_paramset(ps, tmp_path / "a.sotu")
    assert fingerprint(load_paramset(tmp_path / "a.sotu")) == fingerprint(ps)


def test_fingerprint_detects_sign_flip():
    ps = ParamSet.from_arrays({"w": [1.0, -2.0], "b": [0.25]})
    flipped = ParamSet.from_arrays({"w": [1.0, 2.0], "b": [0.25]})
    assert fingerprint(ps) != fingerprint(flipped)


def test_fingerprint_detects_name_reordering():
    a = ParamSet.from_arrays({"w": [1.0], "b": [2.0]})
    b = ParamSet.from_arrays({"b": [2.0], "w": [1.0]})
    assert fingerprint(a) != fingerprint(b)


def test_fingerprint_requires_32_bytes():
    with pytest.raises(ValueError):
        Fingerprint(b"short")


def test_empty_sparse_delta_roundtrip(tmp_path):
    ps = ParamSet.from_arrays({"w": [1.0, 2.0], "b": [3.0]})
    delta = mask_delta(ps, 1.0, 0, fingerprint(ps))
    assert delta.kept_count() == 0
    save_sparse_delta(delta, tmp_path / "d.sdelta")
    assert load_sparse_delta(tmp_path / "d.sdelta") == delta


def test_sparse_delta_roundtrip_property(tmp_path):
    rng = np.random.default_rng(10)
    for i in range(100):
        ps = random_paramset(rng)
        delta = random_sparse_delta(rng, ps)
        path = tmp_path / f"d{i}.sdelta"
        save_sparse_delta(delta, path)
        loaded = load_sparse_delta(path)
        assert loaded == delta
        assert loaded.base == delta.base
        assert loaded.seed == delta.seed
        assert loaded.keep_prob == delta.keep_prob


def test_truncated_sparse_delta_is_format_error(tmp_path):
    ps = ParamSet.from_arrays({"w": np.arange(20.0)})
    delta = mask_delta(ps, 0.3, 5, fingerprint(ps))
    path = tmp_path / "d.sdelta"
    save_sparse_delta(delta, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_sparse_delta(path)


def test_prototype_roundtrip_with_and_without_projection(tmp_path):
    rng = np.random.default_rng(11)
    plain = PrototypeSet(5)
    projected = PrototypeSet(8, projection=ProjectionSpec(8, 42, "relu"))
    for cid in (3, 1, 7):
        plain.add(cid, rng.standard_normal(5))
        projected.add(cid, rng.standard_normal(8))
    for name, protos in (("plain", plain), ("proj", projected)):
        path = tmp_path / f"{name}.protos"
        save_prototypes(protos, path)
        loaded = load_prototypes(path)
        assert loaded == protos
        assert loaded.class_ids() == protos.class_ids()
