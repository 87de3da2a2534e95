"""Residuals between the current weights and the previous reconstructed weights.

Only weights are residualized; Adam moments are moving averages that decay any
link to earlier checkpoints within a few hundred steps, so they pass through
untouched.  All arithmetic runs in f32 regardless of the stored dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor_store import CheckpointBundle, TensorMap, TensorRecord


@dataclass(frozen=True)
class ResidualBundle:
    """Weight deltas plus the untouched optimizer moment maps for one step."""

    weight_deltas: dict[str, TensorRecord]
    first_moments: dict[str, TensorRecord]
    second_moments: dict[str, TensorRecord]
    step: int
    scalars: dict[str, float]


def _check_aligned(prev: TensorMap, current: TensorMap) -> None:
    if set(prev) != set(current):
        missing = set(current) ^ set(prev)
        raise ValidationError(f"weight key sets differ (offending: {sorted(missing)[:4]})")
    for name in current:
        if prev[name].shape != current[name].shape:
            raise ValidationError(
                f"{name}: shape {current[name].shape} does not match previous {prev[name].shape}"
            )


def compute_residual(prev_weights: TensorMap, current: CheckpointBundle) -> ResidualBundle:
    """delta = current - prev elementwise in f32; moments are passed through."""
    _check_aligned(prev_weights, current.weights)
    deltas = {
        name: record.with_data(record.as_f32() - prev_weights[name].as_f32())
        for name, record in current.weights.items()
    }
    return ResidualBundle(
        weight_deltas=deltas,
        first_moments=current.first_moments,
        second_moments=current.second_moments,
        step=current.step,
        scalars=dict(current.scalars),
    )


def apply_residual(prev_weights: TensorMap, deltas: TensorMap) -> dict[str, TensorRecord]:
    """out = prev + delta elementwise in f32; rejects non-finite results."""
    _check_aligned(prev_weights, deltas)
    out: dict[str, TensorRecord] = {}
    for name, delta in deltas.items():
        with np.errstate(over="ignore"):
            summed = prev_weights[name].as_f32() + delta.as_f32()
        if summed.size and not np.isfinite(summed).all():
            raise ValidationError(f"{name}: non-finite value after applying residual")
        out[name] = delta.with_data(summed)
    return out
