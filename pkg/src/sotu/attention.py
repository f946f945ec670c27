"""Single softmax attention block and multiplicative-perturbation analysis.

The probe checks an interval bound on how much a perturbation of the
query/key weights can move each attention entry. Writing the perturbed
score as s + log r (so r is the per-entry multiplicative factor on the
exponentiated score), every perturbed attention entry lies within
[A * (1+d_min)/(1+d_max), A * (1+d_max)/(1+d_min)] where 1+d_min and
1+d_max are the extreme factors. With this factor definition the bound is
an algebraic identity of row softmax, so any excursion beyond rounding
indicates a broken implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidProbabilityError, NonFiniteError, ShapeMismatchError

__all__ = [
    "AttentionInstance",
    "BoundCheckReport",
    "StabilityReport",
    "attention_map",
    "perturbation_bound_check",
    "mask_stability_report",
    "random_attention_instance",
    "scale_perturbation",
]


def _as_matrix(name: str, value, shape=None) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be a 2-D matrix")
    if shape is not None and arr.shape != shape:
        raise ShapeMismatchError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class AttentionInstance:
    """Inputs, query/key/value weights, and a perturbation of those weights.

    For mask-stability runs the perturbation fields hold the fine-tuning
    delta (current weights minus the base checkpoint's weights).
    """

    x: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    dw_q: np.ndarray
    dw_k: np.ndarray
    dw_v: np.ndarray

    def __post_init__(self):
        x = _as_matrix("x", self.x)
        if x.shape[0] < 2:
            raise ShapeMismatchError("need at least two input rows")
        w_q = _as_matrix("w_q", self.w_q)
        if w_q.shape[0] != x.shape[1]:
            raise ShapeMismatchError("w_q rows must match input columns")
        shape = w_q.shape
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w_q", w_q)
        object.__setattr__(self, "w_k", _as_matrix("w_k", self.w_k, shape))
        object.__setattr__(self, "w_v", _as_matrix("w_v", self.w_v, shape))
        object.__setattr__(self, "dw_q", _as_matrix("dw_q", self.dw_q, shape))
        object.__setattr__(self, "dw_k", _as_matrix("dw_k", self.dw_k, shape))
        object.__setattr__(self, "dw_v", _as_matrix("dw_v", self.dw_v, shape))

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]


def _scores(x: np.ndarray, w_q: np.ndarray, w_k: np.ndarray) -> np.ndarray:
    return (x @ w_q) @ (x @ w_k).T / math.sqrt(w_q.shape[1])


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def attention_map(inst: AttentionInstance) -> np.ndarray:
    """Row-stochastic attention matrix of the (unperturbed) instance."""
    return _row_softmax(_scores(inst.x, inst.w_q, inst.w_k))


@dataclass(frozen=True)
class BoundCheckReport:
    delta_min: float
    delta_max: float
    max_violation: float


def perturbation_bound_check(inst: AttentionInstance) -> BoundCheckReport:
    """Verify the multiplicative interval bound on every perturbed entry.

    ``max_violation`` is the largest relative excursion beyond the interval,
    measured against the unperturbed entry; it should be at most rounding
    noise (~1e-9) for any perturbation.
    """
    s = _scores(inst.x, inst.w_q, inst.w_k)
    s_hat = _scores(inst.x, inst.w_q + inst.dw_q, inst.w_k + inst.dw_k)
    with np.errstate(over="ignore"):
        ratios = np.exp(s_hat - s)
    if not np.all(np.isfinite(ratios)):
        raise NonFiniteError("perturbed score ratios overflow; perturbation too large")
    delta_min = float(ratios.min()) - 1.0
    delta_max = float(ratios.max()) - 1.0
    a = _row_softmax(s)
    a_hat = _row_softmax(s_hat)
    lower = (1.0 + delta_min) / (1.0 + delta_max) * a
    upper = (1.0 + delta_max) / (1.0 + delta_min) * a
    excursion = np.maximum(lower - a_hat, a_hat - upper) / a
    return BoundCheckReport(delta_min, delta_max, float(max(excursion.max(), 0.0)))


@dataclass(frozen=True)
class StabilityReport:
    """Per-trial maxima of |perturbed/original - 1| over attention entries."""

    mask_rate: float
    seed: int
    per_trial: np.ndarray
    mean: float
    max: float


def mask_stability_report(inst: AttentionInstance, mask_rate: float, seed: int,
                          trials: int) -> StabilityReport:
    """How much attention moves when the fine-tuning delta is randomly masked.

    Each trial independently drops every delta coordinate with probability
    ``mask_rate`` (the perturbed weights are base + kept delta) and records
    the worst relative change of any attention entry.
    """
    mask_rate = float(mask_rate)
    if not 0.0 <= mask_rate <= 1.0:
        raise InvalidProbabilityError(f"mask_rate {mask_rate} outside [0, 1]")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    a = attention_map(inst)
    results = np.empty(trials)
    for trial in range(trials):
        gen = np.random.Generator(np.random.Philox(key=int(seed), counter=trial << 128))
        perturbed = []
        for w, dw in ((inst.w_q, inst.dw_q), (inst.w_k, inst.dw_k), (inst.w_v, inst.dw_v)):
            keep = gen.random(w.shape) >= mask_rate
            # Subtract only the dropped part: mask_rate=0 leaves w bit-identical.
            perturbed.append(w - np.where(keep, 0.0, dw))
        w_q, w_k, _ = perturbed
        a_hat = _row_softmax(_scores(inst.x, w_q, w_k))
        results[trial] = float(np.abs(a_hat / a - 1.0).max())
    return StabilityReport(mask_rate, int(seed), results, float(results.mean()),
                           float(results.max()))


def random_attention_instance(seed: int, n: int = 6, d: int = 8, d_k: int = 4,
                              delta_scale: float = 0.05) -> AttentionInstance:
    """Seeded random instance; perturbations scale with ``delta_scale``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    scale = 1.0 / math.sqrt(d)
    mats = [rng.standard_normal((d, d_k)) * scale for _ in range(3)]
    dmats = [rng.standard_normal((d, d_k)) * (scale * delta_scale) for _ in range(3)]
    return AttentionInstance(x, *mats, *dmats)


def scale_perturbation(inst: AttentionInstance, max_score_shift: float) -> AttentionInstance:
    """Shrink the perturbation until no score moves by more than the target."""
    if max_score_shift <= 0:
        raise ValueError("max_score_shift must be positive")
    dw_q, dw_k, dw_v = inst.dw_q, inst.dw_k, inst.dw_v
    s = _scores(inst.x, inst.w_q, inst.w_k)
    for _ in range(16):
        s_hat = _scores(inst.x, inst.w_q + dw_q, inst.w_k + dw_k)
        shift = float(np.abs(s_hat - s).max())
        if shift <= max_score_shift:
            break
        factor = max_score_shift / shift
        dw_q, dw_k, dw_v = dw_q * factor, dw_k * factor, dw_v * factor
    return AttentionInstance(inst.x, inst.w_q, inst.w_k, inst.w_v, dw_q, dw_k, dw_v)
