import pytest

from sotu.config import RunConfig, build_run_config, config_text, load_config_file, parse_config_text
from sotu.prototypes import ProjectionSpec


def test_parse_skips_comments_and_blanks():
    values = parse_config_text("# comment\n\nmask_rate = 0.8\n stream_seed=3 \n")
    assert values == {"mask_rate": "0.8", "stream_seed": "3"}


def test_parse_rejects_lines_without_equals():
    with pytest.raises(ValueError):
        parse_config_text("mask_rate 0.8")


def test_build_applies_file_then_overrides():
    cfg = build_run_config({"mask_rate": "0.8", "num_tasks": "4", "num_classes": "8"},
                           {"mask_rate": "0.7"})
    assert cfg.mask_rate == 0.7
    assert cfg.num_tasks == 4


def test_build_rejects_unknown_keys():
    with pytest.raises(ValueError):
        build_run_config({"masking": "0.8"}, None)


def test_hidden_dims_and_bool_coercion():
    cfg = build_run_config({"hidden_dims": "64,32", "recompute_prototypes": "true"}, None)
    assert cfg.hidden_dims == (64, 32)
    assert cfg.recompute_prototypes is True


def test_validation_errors():
    with pytest.raises(ValueError):
        RunConfig(mask_rate=1.5)
    with pytest.raises(ValueError):
        RunConfig(num_tasks=0)
    with pytest.raises(ValueError):
        RunConfig(num_classes=2, num_tasks=3)
    with pytest.raises(ValueError):
        RunConfig(activation="gelu")


def test_projection_spec_from_config():
    assert RunConfig(projection_dim=0).projection_spec() is None
    spec = RunConfig(projection_dim=64, projection_seed=9).projection_spec()
    assert spec == ProjectionSpec(64, 9, "relu")
    auto = RunConfig(projection_dim=-1, embed_dim=16).projection_spec()
    assert auto.out_dim == 64
    with pytest.raises(ValueError):
        RunConfig(projection_dim=-2)


def test_config_text_roundtrips(tmp_path):
    cfg = RunConfig(hidden_dims=(8, 4), mask_rate=0.35, recompute_prototypes=True)
    path = tmp_path / "resolved.cfg"
    path.write_text(config_text(cfg, notes=("a note",)))
    again = build_run_config(load_config_file(path), None)
    assert again == cfg
