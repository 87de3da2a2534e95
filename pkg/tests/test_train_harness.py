from __future__ import annotations

import math

import numpy as np
import pytest

from excp import (
    AdamHyper,
    AdamState,
    CheckpointChain,
    PipelineConfig,
    PruneConfig,
    RegretConfig,
    TrainConfig,
    ValidationError,
    adam_step,
    regret_experiment,
    run_training,
)
from excp.train_harness import (
    AblationRow,
    DataSpec,
    ModelSpec,
    _loss_and_grads,
    _make_dataset,
    _shaped,
    ablation_table,
    mlp_init,
)
from oracles import adam_step_oracle

SMALL_MODEL = ModelSpec(layer_sizes=(30, 64, 16))
SMALL_DATA = DataSpec(seed=3, n_train=512, n_eval=128, batch=16)


def _small_cfg(**kwargs) -> TrainConfig:
    base = dict(
        model=SMALL_MODEL,
        data=SMALL_DATA,
        total_steps=400,
        save_every=100,
        break_every=200,
        eval_every=50,
    )
    base.update(kwargs)
    return TrainConfig(**base)


class TestAdamStep:
    def test_zero_gradients_from_zero_state_is_fixed_point(self):
        state = AdamState.fresh({"w": np.array([1.0, -2.0], np.float32)})
        out = adam_step(state, {"w": np.zeros(2, np.float32)}, AdamHyper())
        np.testing.assert_array_equal(out.params["w"], state.params["w"])
        assert not out.m["w"].any() and not out.v["w"].any()
        assert out.t == 1

    def test_hand_computed_single_step(self):
        hyper = AdamHyper(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        state = AdamState.fresh({"w": np.array([0.0], np.float32)})
        out = adam_step(state, {"w": np.array([1.0], np.float32)}, hyper)
        assert out.m["w"][0] == pytest.approx(0.1, rel=1e-6)
        assert out.v["w"][0] == pytest.approx(0.001, rel=1e-6)
        # m_hat = 1, v_hat = 1, so the update is -0.1 / (1 + eps)
        assert out.params["w"][0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-6)

    def test_sequence_matches_scalar_oracle(self):
        rng = np.random.Generator(np.random.PCG64(60))
        hyper = AdamHyper(lr=0.01)
        state = AdamState.fresh({"w": np.array([0.5], np.float32)})
        theta, m, v = 0.5, 0.0, 0.0
        for t in range(1, 51):
            grad = float(rng.normal())
            state = adam_step(state, {"w": np.array([grad], np.float32)}, hyper)
            theta, m, v = adam_step_oracle(
                theta, m, v, grad, t, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps
            )
            assert state.params["w"][0] == pytest.approx(theta, rel=1e-4, abs=1e-6)

    def test_quadratic_objective_converges(self):
        hyper = AdamHyper(lr=0.05)
        state = AdamState.fresh({"w": np.array([5.0], np.float32)})
        for _ in range(2000):
            grad = 2.0 * state.params["w"]
            state = adam_step(state, {"w": grad}, hyper)
        assert abs(float(state.params["w"][0])) < 1e-3

    def test_second_moments_stay_nonnegative(self):
        rng = np.random.Generator(np.random.PCG64(61))
        state = AdamState.fresh({"w": np.zeros(32, np.float32)})
        for _ in range(100):
            grads = {"w": rng.normal(0, 10, 32).astype(np.float32)}
            state = adam_step(state, grads, AdamHyper())
            assert (state.v["w"] >= 0).all()

    def test_non_finite_gradient_rejected(self):
        state = AdamState.fresh({"w": np.zeros(1, np.float32)})
        with pytest.raises(ValidationError, match="non-finite"):
            adam_step(state, {"w": np.array([np.nan], np.float32)}, AdamHyper())

    def test_gradient_key_and_shape_checks(self):
        state = AdamState.fresh({"w": np.zeros(2, np.float32)})
        with pytest.raises(ValidationError):
            adam_step(state, {"other": np.zeros(2, np.float32)}, AdamHyper())
        with pytest.raises(ValidationError):
            adam_step(state, {"w": np.zeros(3, np.float32)}, AdamHyper())


class TestConfigValidation:
    def test_save_every_must_divide_break_every(self):
        with pytest.raises(ValidationError, match="divide"):
            _small_cfg(save_every=128, break_every=200)

    def test_theorem_precondition_on_betas(self):
        with pytest.raises(ValidationError, match="sqrt"):
            AdamHyper(beta1=0.9999, beta2=0.5)
        AdamHyper(beta1=0.9, beta2=0.999)  # fine

    def test_compression_requires_workdir(self):
        with pytest.raises(ValidationError, match="workdir"):
            _small_cfg(compression=PipelineConfig())


class TestRunTraining:
    def test_deterministic_loss_curves(self):
        a = run_training(_small_cfg())
        b = run_training(_small_cfg())
        assert a.loss_curve == b.loss_curve
        assert a.final_eval_loss == b.final_eval_loss

    def test_loss_actually_decreases(self):
        report = run_training(_small_cfg(total_steps=600))
        assert report.loss_curve[-1] < 0.25 * report.loss_curve[0]

    def test_lossless_resumption_is_exact(self, tmp_path):
        plain = run_training(_small_cfg())
        lossless = run_training(
            _small_cfg(
                compression=PipelineConfig(residual=True, prune=None, quant=None),
                workdir=str(tmp_path / "chain"),
            )
        )
        assert plain.loss_curve == lossless.loss_curve  # bit-for-bit
        assert plain.final_eval_loss == lossless.final_eval_loss

    def test_compressed_run_reports_sizes_and_ratio(self, tmp_path):
        report = run_training(
            _small_cfg(compression=PipelineConfig(), workdir=str(tmp_path / "chain"))
        )
        assert len(report.archive_steps) == 4
        assert report.aggregate_ratio > 4.0
        assert all(raw > comp for raw, comp in zip(report.archive_raw_bytes,
                                                   report.archive_compressed_bytes))

    def test_paired_baseline_attached(self, tmp_path):
        report = run_training(
            _small_cfg(
                compression=PipelineConfig(),
                workdir=str(tmp_path / "chain"),
                compare_uncompressed=True,
            )
        )
        assert report.baseline is not None
        assert report.baseline.archive_steps == []

    def test_resumed_state_carries_pruned_zeros(self, tmp_path):
        # after a break, the live Adam state must equal the reconstruction:
        # v >= 0 everywhere and both moments exactly zero where pruned
        cfg = _small_cfg(
            compression=PipelineConfig(prune=PruneConfig(alpha=1e-2, beta=1.0)),
            workdir=str(tmp_path / "chain"),
            total_steps=200,
            save_every=100,
            break_every=100,
        )
        run_training(cfg)
        chain = CheckpointChain.open(tmp_path / "chain")
        bundle = chain.replay(100)
        for name in bundle.first_moments:
            m1 = bundle.first_moments[name].as_f32()
            m2 = bundle.second_moments[name].as_f32()
            assert (m2 >= 0).all()
            np.testing.assert_array_equal(m1 == 0.0, m2 == 0.0)
            assert (m1 == 0.0).any()  # pruning actually bit at this alpha


class TestLearningRateCoupling:
    def test_decayed_lr_run_shrinks_late_archives(self, tmp_path):
        cfg = _small_cfg(
            total_steps=1200,
            save_every=100,
            break_every=1200,
            lr_schedule="cosine",
            compression=PipelineConfig(),
            workdir=str(tmp_path / "chain"),
        )
        report = run_training(cfg)
        sizes = report.archive_compressed_bytes
        early = float(np.median(sizes[: len(sizes) // 3]))
        late = float(np.median(sizes[-len(sizes) // 3 :]))
        assert late <= early


class TestWeightDistribution:
    def test_pruned_residual_updates_preserve_distribution(self, tmp_path):
        # mirror of the histogram check: after a run that trains through pruned
        # residual checkpoints (resuming from reconstructions), the final
        # reconstructed weights stay distribution-close to an uncompressed
        # run's weights, while directly pruning those weights at matched
        # sparsity visibly shifts the spread
        total, save = 2400, 600
        cfg = _small_cfg(
            total_steps=total,
            save_every=save,
            break_every=save,
            eval_every=total,
            compression=PipelineConfig(prune=PruneConfig(alpha=2e-3, beta=1.0), quant=None),
            workdir=str(tmp_path / "chain"),
        )
        run_training(cfg)
        chain = CheckpointChain.open(tmp_path / "chain")
        recon = chain.replay(total).weights

        # paired uncompressed trajectory (same seeds, same batches)
        dataset = _make_dataset(cfg.model, cfg.data)
        init = mlp_init(cfg.init_seed, cfg.model.layer_sizes)
        state = AdamState.fresh({k: _shaped(rec) for k, rec in init.items()})
        from excp.train_harness import _batch_indices

        for step in range(1, total + 1):
            idx = _batch_indices(cfg.data, step)
            _, grads = _loss_and_grads(state.params, dataset.x_train[idx], dataset.y_train[idx])
            state = adam_step(state, grads, cfg.adam)

        # matched sparsity: zero fraction of the final archive's delta entries
        from excp import decode_archive
        from excp.quantizer import decode_entry

        archive = decode_archive(chain.archive_paths()[-1])
        deltas = np.concatenate([decode_entry(e).as_f32() for e in archive.weight_deltas])
        sparsity = float(np.mean(deltas == 0.0))
        assert sparsity > 0.5, "alpha too weak for a meaningful check"
        assert sparsity < 0.99, "alpha strong enough to freeze training"

        for name in ("fc1.weight", "fc2.weight"):
            true_w = state.params[name].reshape(-1)
            recon_w = recon[name].as_f32()
            scale = float(np.std(true_w))
            assert abs(float(np.mean(recon_w)) - float(np.mean(true_w))) < 0.05 * scale
            recon_shift = abs(float(np.std(recon_w)) - scale)
            assert recon_shift < 0.05 * scale
            # direct magnitude pruning of the true weights at matched sparsity
            cut = np.quantile(np.abs(true_w), sparsity)
            direct = np.where(np.abs(true_w) > cut, true_w, 0.0)
            direct_shift = abs(float(np.std(direct)) - scale)
            assert direct_shift > recon_shift
            assert direct_shift > 0.05 * scale


class TestRegret:
    def test_average_regret_decreases(self):
        report = regret_experiment(RegretConfig(), prune_at=500, mask_rule="none")
        assert report.avg_regret == sorted(report.avg_regret, reverse=True)

    def test_pruned_run_stays_close(self):
        cfg = RegretConfig()
        unpruned = regret_experiment(cfg, prune_at=500, mask_rule="none")
        pruned = regret_experiment(cfg, prune_at=500, mask_rule="below_mean_v")
        assert pruned.avg_regret == sorted(pruned.avg_regret, reverse=True)
        final_gap = abs(pruned.avg_regret[-1] - unpruned.avg_regret[-1])
        assert final_gap <= 0.10 * unpruned.avg_regret[-1]

    def test_full_moment_prune_stays_bounded(self):
        report = regret_experiment(RegretConfig(), prune_at=500, mask_rule="all")
        assert all(math.isfinite(r) for r in report.avg_regret)
        assert report.avg_regret[-1] < report.avg_regret[0]

    def test_non_convex_task_rejected(self):
        with pytest.raises(ValidationError, match="convex"):
            RegretConfig(task="mlp")

    def test_unknown_mask_rule_rejected(self):
        with pytest.raises(ValidationError, match="mask rule"):
            regret_experiment(RegretConfig(), prune_at=500, mask_rule="everything")

    def test_checkpoints_must_fit_horizon(self):
        with pytest.raises(ValidationError):
            RegretConfig(total_rounds=100, checkpoints=(200,))


class TestReporting:
    def test_ablation_table_format(self):
        rows = [
            AblationRow(
                residual=True, prune=True, quant=True, bits=4,
                raw_bytes=1000, compressed_bytes=100, ratio=10.0,
                final_metric=0.9, final_eval_loss=0.01,
            )
        ]
        table = ablation_table(rows)
        lines = table.splitlines()
        assert lines[0].startswith("cell\tresidual")
        assert lines[1].split("\t")[0] == "RPQ@4b"
        assert lines[1].split("\t")[7] == "10.000"
