#!/usr/bin/env python3
"""Kill-and-resume training through compressed checkpoints, side by side with
an unbroken uncompressed run.  A desk-scale stand-in for resuming a large
training job from archives."""

import tempfile

from excp import AdamHyper, PipelineConfig, TrainConfig, run_training
from excp.train_harness import DataSpec, ModelSpec

cfg = TrainConfig(
    model=ModelSpec(layer_sizes=(100, 500, 100)),  # ~100k parameters
    data=DataSpec(noise=0.15),
    adam=AdamHyper(lr=5e-4),
    total_steps=4000,
    save_every=500,      # compress a checkpoint every 500 steps
    break_every=1000,    # kill the trainer and replay the chain every 1000
    eval_every=100,
    compression=PipelineConfig(),  # alpha=5e-5, beta=2.0, 4-bit, LZMA
    workdir=tempfile.mkdtemp() + "/chain",
    compare_uncompressed=True,
)
report = run_training(cfg)
base = report.baseline

print(f"{'step':>6} {'compressed':>12} {'uncompressed':>13} {'rel diff':>9}")
for i in range(0, len(report.eval_steps), 5):
    c, u = report.loss_curve[i], base.loss_curve[i]
    print(f"{report.eval_steps[i]:>6} {c:>12.6f} {u:>13.6f} {100 * abs(c - u) / u:>8.2f}%")

final_dev = abs(report.final_eval_loss - base.final_eval_loss) / base.final_eval_loss
print(f"\nfinal eval loss: {report.final_eval_loss:.6f} vs {base.final_eval_loss:.6f} "
      f"({100 * final_dev:.2f}% apart)")
print(f"R^2 on held-out data: {report.final_metric:.4f} vs baseline {base.final_metric:.4f}")
print(f"{len(report.archive_steps)} archives, aggregate compression "
      f"{report.aggregate_ratio:.1f}x over raw f32 (weights + both moments)")
