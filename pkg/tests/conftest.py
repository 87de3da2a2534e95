from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from excp import CheckpointBundle, TensorRecord

TOY_SHAPES = {
    "fc1.weight": (24, 32),
    "fc1.bias": (32,),
    "fc2.weight": (32, 8),
    "scalar.gain": (),
}


def random_weights(rng: np.random.Generator, shapes=None) -> dict[str, TensorRecord]:
    """Adjacent-checkpoint-like base weights: magnitudes bounded away from zero
    so that small relative deltas subtract exactly in f32."""
    shapes = shapes or TOY_SHAPES
    out = {}
    for name, shape in shapes.items():
        magnitude = np.exp(rng.uniform(np.log(0.05), np.log(1.0), size=shape))
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        out[name] = TensorRecord.from_array(name, (sign * magnitude).astype(np.float32))
    return out


def perturbed_bundle(
    rng: np.random.Generator, base: dict[str, TensorRecord], step: int, rel: float = 0.03
) -> CheckpointBundle:
    """A bundle one training interval after `base`: each weight moves by at
    most `rel` of its own magnitude (how adjacent checkpoints actually look)."""
    weights, m1, m2 = {}, {}, {}
    for name, record in base.items():
        prev = record.as_f32().reshape(record.shape)
        move = (prev * rng.uniform(-rel, rel, size=prev.shape)).astype(np.float32)
        weights[name] = TensorRecord.from_array(name, prev + move)
        m1[name] = TensorRecord.from_array(
            name, rng.normal(0.0, 1e-3, size=prev.shape).astype(np.float32)
        )
        m2[name] = TensorRecord.from_array(
            name, (rng.normal(0.0, 1e-3, size=prev.shape) ** 2).astype(np.float32)
        )
    return CheckpointBundle(
        weights=weights,
        first_moments=m1,
        second_moments=m2,
        step=step,
        scalars={"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "weight_decay": 0.0},
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(20240611))
