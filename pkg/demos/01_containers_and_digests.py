#!/usr/bin/env python3
"""Checkpoint containers: build a bundle, round-trip it through disk, and see
how the canonical digest reacts to content changes."""

import tempfile
from pathlib import Path

import numpy as np

from excp import CheckpointBundle, TensorRecord, bundle_hash, read_bundle, write_bundle

rng = np.random.default_rng(0)

# a checkpoint bundle holds weights plus the two Adam moment maps
shapes = {"fc1.weight": (8, 16), "fc1.bias": (16,), "fc2.weight": (16, 4)}
weights = {n: TensorRecord.from_array(n, rng.normal(0, 0.1, s).astype(np.float32))
           for n, s in shapes.items()}
m1 = {n: TensorRecord.from_array(n, rng.normal(0, 1e-3, s).astype(np.float32))
      for n, s in shapes.items()}
m2 = {n: TensorRecord.from_array(n, (rng.normal(0, 1e-3, s) ** 2).astype(np.float32))
      for n, s in shapes.items()}
bundle = CheckpointBundle(weights=weights, first_moments=m1, second_moments=m2,
                          step=1000, scalars={"lr": 1e-3, "beta1": 0.9, "beta2": 0.999})

workdir = Path(tempfile.mkdtemp())
path = workdir / "checkpoint.exts"
write_bundle(bundle, path)
loaded = read_bundle(path)

print(f"wrote {path.stat().st_size} bytes for "
      f"{sum(r.numel for r in weights.values())} weights + 2x moments")
print(f"round trip bit-exact: {bundle_hash(loaded) == bundle_hash(bundle)}")

# the digest is order-independent but value-sensitive down to the last ULP
reordered = CheckpointBundle(
    weights=dict(reversed(list(weights.items()))),
    first_moments=m1, second_moments=m2, step=1000, scalars=bundle.scalars,
)
print(f"insertion order irrelevant:  {bundle_hash(reordered) == bundle_hash(bundle)}")

bumped = {n: rec for n, rec in weights.items()}
values = bumped["fc1.bias"].as_f32().copy()
values[0] = np.nextafter(values[0], np.float32(np.inf))
bumped["fc1.bias"] = TensorRecord.from_array("fc1.bias", values)
one_ulp = CheckpointBundle(weights=bumped, first_moments=m1, second_moments=m2,
                           step=1000, scalars=bundle.scalars)
print(f"one ULP changes the digest:  {bundle_hash(one_ulp) != bundle_hash(bundle)}")

# corruption is detected, never silently read
blob = bytearray(path.read_bytes())
blob[60] ^= 0xFF
path.write_bytes(bytes(blob))
try:
    read_bundle(path)
except Exception as exc:
    print(f"flipped byte detected: {type(exc).__name__}: {exc}")
