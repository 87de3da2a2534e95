#!/usr/bin/env python3
"""The three lossy stages, one at a time: residuals against the previous
reconstruction, joint weight/momentum masks, and codebook quantization."""

import numpy as np

from excp import (
    CheckpointBundle,
    PruneConfig,
    QuantConfig,
    TensorRecord,
    apply_masks,
    compute_masks,
    compute_residual,
    dequantize,
    quantize,
)

rng = np.random.default_rng(7)
n = 4000

# adjacent checkpoints: the new weights moved a little from the old ones
prev = rng.normal(0, 0.2, n).astype(np.float32)
cur = prev + rng.normal(0, 2e-3, n).astype(np.float32)
grads_scale = np.abs(rng.normal(0, 3e-3, n)) + 1e-4
bundle = CheckpointBundle(
    weights={"layer": TensorRecord.from_array("layer", cur)},
    first_moments={"layer": TensorRecord.from_array("layer", rng.normal(0, 1e-3, n).astype(np.float32))},
    second_moments={"layer": TensorRecord.from_array("layer", (grads_scale ** 2).astype(np.float32))},
    step=1,
)

# stage 1: residual -- small, zero-centred, much more compressible than weights
residual = compute_residual({"layer": TensorRecord.from_array("layer", prev)}, bundle)
delta = residual.weight_deltas["layer"].as_f32()
print(f"weights std {cur.std():.4f} -> residual std {delta.std():.5f}")

# stage 2: joint pruning -- the weight mask thresholds |delta| by
# alpha/sqrt(v2)*median, the momentum mask needs v2 above beta*mean AND a
# surviving weight
cfg = PruneConfig(alpha=5e-4, beta=2.0)
masks = compute_masks(residual, cfg)
stats = masks.stats["layer"]
print(f"weight entries kept   {stats.weight_kept}/{stats.total} "
      f"({100 * stats.weight_kept / stats.total:.1f}%)")
print(f"momentum entries kept {stats.momentum_kept}/{stats.total} "
      f"({100 * stats.momentum_kept / stats.total:.1f}%)")
pruned = apply_masks(residual, masks)

# stage 3: non-uniform quantization -- k-means codebook over the survivors,
# code 0 reserved for exact zero
q = quantize(pruned.weight_deltas["layer"], QuantConfig(bits=4, rng_seed=1))
print(f"codebook ({q.codebook.size} centers): {np.array2string(q.codebook, precision=5)}")
decoded = dequantize(q).as_f32()
survivors = masks.weight_masks["layer"]
err = np.abs(decoded - pruned.weight_deltas["layer"].as_f32())
print(f"zero codes decode to exactly 0.0: {(decoded[~survivors] == 0).all()}")
print(f"max quantization error on survivors: {err[survivors].max():.2e} "
      f"(vs delta std {delta.std():.2e})")

# packed size: 4 bits per element instead of 32
from excp import pack_codes

packed = pack_codes(q.codes, q.bits)
print(f"packed codes: {len(packed)} bytes for {n} elements "
      f"({8 * len(packed) / n:.1f} bits/element)")
