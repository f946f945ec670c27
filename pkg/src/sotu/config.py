"""Run configuration: a flat key=value file with CLI overrides on top."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .prototypes import NONLINEARITIES, ProjectionSpec
from .training import ACTIVATIONS

__all__ = ["RunConfig", "parse_config_text", "load_config_file", "build_run_config", "config_text"]


@dataclass(frozen=True)
class RunConfig:
    # model
    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (32,)
    embed_dim: int = 16
    activation: str = "tanh"
    # optimization (shared by pretraining and per-task fine-tuning)
    learning_rate: float = 0.2
    epochs: int = 40
    batch_size: int = 16
    # masking
    mask_rate: float = 0.9
    # classifier
    projection_dim: int = 0  # 0 disables the projection, -1 means 4 * embed_dim
    projection_seed: int = 0
    projection_nonlinearity: str = "relu"
    buffer_per_class: int = 10
    recompute_prototypes: bool = False
    # data / stream
    stream_seed: int = 7
    num_classes: int = 12
    num_tasks: int = 3
    samples_per_class: int = 80
    test_fraction: float = 0.25
    separation: float = 4.0
    base_classes: int = 4
    data_csv: str = ""
    pretrain_csv: str = ""
    # output
    output_dir: str = "out"

    def __post_init__(self):
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be at least 1")
        if self.num_classes < self.num_tasks:
            raise ValueError("num_classes must be at least num_tasks")
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be at least 2")
        if not self.pretrain_csv and self.base_classes < 2:
            raise ValueError("base_classes must be at least 2")
        if self.buffer_per_class < 1:
            raise ValueError("buffer_per_class must be at least 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.projection_nonlinearity not in NONLINEARITIES:
            raise ValueError(f"projection_nonlinearity must be one of {NONLINEARITIES}")
        if self.projection_dim < -1:
            raise ValueError("projection_dim must be -1 (auto), 0 (off) or positive")

    def projection_spec(self) -> ProjectionSpec | None:
        if self.projection_dim == 0:
            return None
        out_dim = 4 * self.embed_dim if self.projection_dim == -1 else self.projection_dim
        return ProjectionSpec(out_dim, self.projection_seed,
                              self.projection_nonlinearity)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(name: str, kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    # tuple[int, ...] (hidden_dims): comma-separated widths
    return tuple(int(part) for part in raw.split(",") if part.strip())


def build_run_config(file_values: Mapping[str, str] | None = None,
                     overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, then file values, then overrides; every key must be known."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    type_map = {
        "int": int, "float": float, "str": str, "bool": bool,
        "tuple[int, ...]": tuple,
    }
    merged: dict[str, object] = {}
    for source in (file_values or {}), (overrides or {}):
        for key, raw in source.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, type_map[kinds[key]], raw)
    return RunConfig(**merged)


def config_text(cfg: RunConfig, notes: tuple[str, ...] = ()) -> str:
    """Render a config back to the flat file format (reloadable verbatim)."""
    lines = [f"# {note}" for note in notes]
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
