#!/usr/bin/env python3
"""Two analysis runs: the convergence (regret) check for moment pruning on a
convex problem, and the stage-ablation grid with a bit-width sweep."""

import tempfile

from excp import PruneConfig, RegretConfig, TrainConfig, regret_experiment
from excp.train_harness import DataSpec, ModelSpec, ablation_suite, ablation_table

# --- regret: does zeroing small-v moments at one iteration hurt convergence?
cfg = RegretConfig()  # 10-dim online logistic, alpha/sqrt(t) schedule
unpruned = regret_experiment(cfg, prune_at=500, mask_rule="none")
pruned = regret_experiment(cfg, prune_at=500, mask_rule="below_mean_v")
nuked = regret_experiment(cfg, prune_at=500, mask_rule="all")

print("average regret R(T)/T (lower is better, should decrease in T):")
print(f"{'T':>6} {'no prune':>10} {'prune v<mean':>13} {'prune all':>10}")
for i, horizon in enumerate(unpruned.checkpoints):
    print(f"{horizon:>6} {unpruned.avg_regret[i]:>10.4f} "
          f"{pruned.avg_regret[i]:>13.4f} {nuked.avg_regret[i]:>10.4f}")
print(f"(the below-mean mask kept {100 * pruned.kept_fraction:.0f}% of the moments)\n")

# --- ablation: which stages buy what, and what does the bit width cost?
train_cfg = TrainConfig(
    model=ModelSpec(layer_sizes=(30, 64, 16)),
    data=DataSpec(seed=3, n_train=512, n_eval=128, batch=16),
    total_steps=2400,
    save_every=400,
    break_every=400,
    eval_every=400,
)
rows = ablation_suite(train_cfg, tempfile.mkdtemp(),
                      prune_cfg=PruneConfig(alpha=2e-2, beta=2.0))
print("stage ablation (R=residual, P=prune, Q=quantize):")
print(ablation_table(rows))
