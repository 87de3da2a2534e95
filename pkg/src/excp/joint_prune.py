"""Joint weight/momentum pruning masks.

The weight mask keeps a residual entry when its magnitude clears a per-element
threshold: (alpha / sqrt(v2 + eps)) * median(|delta| over the layer), where v2
is the Adam second raw moment.  The momentum mask keeps a moment entry when its
indicator clears beta * layer-mean AND the weight survived, and it zeroes both
moment tensors.  Thresholds are strict: ties are pruned.  All threshold math
runs in f64 for cross-platform determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .residual import ResidualBundle
from .tensor_store import TensorRecord

INDICATOR_MODES = ("second_moment", "first_moment")


@dataclass(frozen=True)
class PruneConfig:
    """Threshold scales for the two masks.

    ``alpha`` = 0 disables weight pruning (thresholds collapse to zero and
    every nonzero residual survives); ``beta`` = 0 keeps every moment whose
    weight survived.  ``momentum_indicator`` selects which moment drives the
    momentum mask; the default follows the convergence argument (pruned
    entries should have small second moment), ``first_moment`` uses |m1|.
    """

    alpha: float = 5e-5
    beta: float = 2.0
    epsilon: float = 1e-12
    momentum_indicator: str = "second_moment"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValidationError(f"beta must be >= 0, got {self.beta}")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.momentum_indicator not in INDICATOR_MODES:
            raise ValidationError(f"unknown momentum indicator {self.momentum_indicator!r}")


@dataclass(frozen=True)
class MaskStats:
    weight_kept: int
    momentum_kept: int
    total: int


@dataclass(frozen=True)
class PruneMasks:
    """Per-tensor boolean keep masks; momentum is subordinate to weights."""

    weight_masks: dict[str, np.ndarray]
    momentum_masks: dict[str, np.ndarray]
    stats: dict[str, MaskStats] = field(default_factory=dict)


def weight_mask(delta: TensorRecord, second_moment: TensorRecord, cfg: PruneConfig) -> np.ndarray:
    """Keep mask for one layer's residual deltas (True = survives)."""
    if delta.shape != second_moment.shape:
        raise ValidationError(
            f"{delta.name}: delta shape {delta.shape} vs moment shape {second_moment.shape}"
        )
    v2 = second_moment.as_f32().astype(np.float64)
    if v2.size and v2.min() < 0.0:
        raise ValidationError(f"{second_moment.name}: negative second moment")
    magnitude = np.abs(delta.as_f32().astype(np.float64))
    if magnitude.size == 0:
        return np.zeros(0, dtype=bool)
    med = float(np.median(magnitude))
    thresholds = cfg.alpha / np.sqrt(v2 + cfg.epsilon) * med
    return magnitude > thresholds


def momentum_mask(second_moment: TensorRecord, weight_keep: np.ndarray, cfg: PruneConfig) -> np.ndarray:
    """Keep mask for one layer's moments: above beta * layer mean AND weight kept."""
    indicator = second_moment.as_f32().astype(np.float64)
    if indicator.size != weight_keep.size:
        raise ValidationError(
            f"{second_moment.name}: indicator numel {indicator.size} vs weight mask {weight_keep.size}"
        )
    if indicator.size == 0:
        return np.zeros(0, dtype=bool)
    r_o = cfg.beta * float(np.mean(indicator))
    return (indicator > r_o) & weight_keep


def compute_masks(residual: ResidualBundle, cfg: PruneConfig) -> PruneMasks:
    """Masks for every layer of a residual bundle.

    Requires optimizer moments; weights-only bundles cannot be pruned because
    both thresholds are driven by the moment statistics.
    """
    if not residual.second_moments:
        raise ValidationError("cannot prune a weights-only bundle (no moment indicators)")
    weight_masks: dict[str, np.ndarray] = {}
    momentum_masks: dict[str, np.ndarray] = {}
    stats: dict[str, MaskStats] = {}
    for name, delta in residual.weight_deltas.items():
        v2 = residual.second_moments[name]
        w_keep = weight_mask(delta, v2, cfg)
        if cfg.momentum_indicator == "first_moment":
            m1 = residual.first_moments[name]
            indicator = TensorRecord(
                name=name, dtype="f32", shape=m1.shape, data=np.abs(m1.as_f32())
            )
        else:
            indicator = v2
        o_keep = momentum_mask(indicator, w_keep, cfg)
        weight_masks[name] = w_keep
        momentum_masks[name] = o_keep
        stats[name] = MaskStats(
            weight_kept=int(w_keep.sum()), momentum_kept=int(o_keep.sum()), total=w_keep.size
        )
    return PruneMasks(weight_masks=weight_masks, momentum_masks=momentum_masks, stats=stats)


def _masked(record: TensorRecord, keep: np.ndarray) -> TensorRecord:
    if record.numel != keep.size:
        raise ValidationError(f"{record.name}: mask size {keep.size} vs tensor {record.numel}")
    return record.with_data(np.where(keep, record.as_f32(), np.float32(0.0)))


def apply_masks(residual: ResidualBundle, masks: PruneMasks) -> ResidualBundle:
    """Zero pruned residual entries and both moment tensors at pruned positions.

    Surviving entries are copied bit-exactly.
    """
    deltas = {
        name: _masked(record, masks.weight_masks[name])
        for name, record in residual.weight_deltas.items()
    }
    m1 = {
        name: _masked(record, masks.momentum_masks[name])
        for name, record in residual.first_moments.items()
    }
    m2 = {
        name: _masked(record, masks.momentum_masks[name])
        for name, record in residual.second_moments.items()
    }
    return ResidualBundle(
        weight_deltas=deltas,
        first_moments=m1,
        second_moments=m2,
        step=residual.step,
        scalars=dict(residual.scalars),
    )
