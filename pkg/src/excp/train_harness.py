"""Desk-scale validation rig: a deterministic Adam trainer over toy problems.

Two tasks stand in for large-scale training runs:

* a two-layer tanh MLP (~100k parameters) fitting a noisy random teacher,
  used for resumption, compression-ratio and ablation measurements;
* a 10-dim online logistic problem, used to measure average regret against
  the best fixed parameter in hindsight before and after moment pruning.

Training is single-threaded and fully seeded; batches are derived from the
step number alone, so a run resumed from a reconstructed checkpoint sees
exactly the data an unbroken run would have seen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import measure_sizes
from .errors import ValidationError
from .pipeline import CheckpointChain, PipelineConfig, SeedBase, register_initializer
from .joint_prune import PruneConfig
from .quantizer import QuantConfig
from .tensor_store import CheckpointBundle, TensorRecord

DEFAULT_LAYERS = (100, 500, 100)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sqrt_t_schedule: bool = False  # lr_t = lr / sqrt(t), used by the regret runs

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("beta1 and beta2 must lie in [0, 1)")
        if self.beta1**2 / math.sqrt(self.beta2) >= 1.0:
            raise ValidationError("beta1^2 / sqrt(beta2) must be < 1")
        if self.lr <= 0 or self.eps <= 0:
            raise ValidationError("lr and eps must be positive")


@dataclass
class AdamState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            params={k: p.astype(np.float32, copy=True) for k, p in params.items()},
            m={k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()},
            t=0,
        )


def adam_step(
    state: AdamState, grads: dict[str, np.ndarray], hyper: AdamHyper, lr_scale: float = 1.0
) -> AdamState:
    """One bias-corrected Adam update; returns a new state (inputs untouched)."""
    if set(grads) != set(state.params):
        raise ValidationError("gradient keys do not match parameters")
    t = state.t + 1
    b1 = np.float32(hyper.beta1)
    b2 = np.float32(hyper.beta2)
    c1 = np.float32(1.0 - hyper.beta1)
    c2 = np.float32(1.0 - hyper.beta2)
    bias1 = np.float32(1.0 - hyper.beta1**t)
    bias2 = np.float32(1.0 - hyper.beta2**t)
    lr = hyper.lr * lr_scale
    if hyper.sqrt_t_schedule:
        lr = lr / math.sqrt(t)
    lr = np.float32(lr)
    eps = np.float32(hyper.eps)
    new_params, new_m, new_v = {}, {}, {}
    for key, grad in grads.items():
        grad = np.asarray(grad, dtype=np.float32)
        if grad.shape != state.params[key].shape:
            raise ValidationError(f"{key}: gradient shape mismatch")
        if not np.isfinite(grad).all():
            raise ValidationError(f"{key}: non-finite gradient")
        m = b1 * state.m[key] + c1 * grad
        v = b2 * state.v[key] + c2 * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[key] = state.params[key] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key] = m
        new_v[key] = v
    return AdamState(params=new_params, m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# MLP task


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, int, int] = DEFAULT_LAYERS

    @property
    def init_args(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes)}


def mlp_init(seed: int, layer_sizes) -> dict[str, TensorRecord]:
    n_in, n_hidden, n_out = (int(d) for d in layer_sizes)
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {
        "fc1.weight": rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_hidden)),
        "fc1.bias": np.zeros(n_hidden),
        "fc2.weight": rng.normal(0.0, 1.0 / math.sqrt(n_hidden), size=(n_hidden, n_out)),
        "fc2.bias": np.zeros(n_out),
    }
    return {
        name: TensorRecord.from_array(name, arr.astype(np.float32)) for name, arr in arrays.items()
    }


register_initializer("mlp_tanh", mlp_init)


@dataclass(frozen=True)
class DataSpec:
    seed: int = 7
    n_train: int = 4096
    n_eval: int = 512
    noise: float = 0.05
    batch: int = 32


@dataclass(frozen=True)
class _Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray


def _shaped(rec: TensorRecord) -> np.ndarray:
    return rec.as_f32().reshape(rec.shape)


def _mlp_forward(params: dict[str, np.ndarray], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.tanh(x @ params["fc1.weight"] + params["fc1.bias"])
    return hidden @ params["fc2.weight"] + params["fc2.bias"], hidden


def _make_dataset(model: ModelSpec, data: DataSpec) -> _Dataset:
    teacher_rng = np.random.Generator(np.random.PCG64([data.seed, 0]))
    teacher = {
        name: _shaped(rec)
        for name, rec in mlp_init(int(teacher_rng.integers(2**63)), model.layer_sizes).items()
    }
    gen = np.random.Generator(np.random.PCG64([data.seed, 1]))
    n_in = model.layer_sizes[0]
    x_train = gen.normal(size=(data.n_train, n_in)).astype(np.float32)
    x_eval = gen.normal(size=(data.n_eval, n_in)).astype(np.float32)
    y_train, _ = _mlp_forward(teacher, x_train)
    y_eval, _ = _mlp_forward(teacher, x_eval)
    y_train = (y_train + data.noise * gen.normal(size=y_train.shape)).astype(np.float32)
    y_eval = (y_eval + data.noise * gen.normal(size=y_eval.shape)).astype(np.float32)
    return _Dataset(x_train=x_train, y_train=y_train, x_eval=x_eval, y_eval=y_eval)


def _batch_indices(data: DataSpec, step: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64([data.seed, 2, step]))
    return rng.integers(0, data.n_train, size=data.batch)


def _loss_and_grads(
    params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    out, hidden = _mlp_forward(params, x)
    err = out - y
    loss = float(np.mean(err * err))
    d_out = (np.float32(2.0) / np.float32(err.size)) * err
    g_w2 = hidden.T @ d_out
    g_b2 = d_out.sum(axis=0)
    d_hidden = (d_out @ params["fc2.weight"].T) * (np.float32(1.0) - hidden * hidden)
    g_w1 = x.T @ d_hidden
    g_b1 = d_hidden.sum(axis=0)
    return loss, {"fc1.weight": g_w1, "fc1.bias": g_b1, "fc2.weight": g_w2, "fc2.bias": g_b2}


def _eval_loss(params: dict[str, np.ndarray], data: _Dataset) -> float:
    out, _ = _mlp_forward(params, data.x_eval)
    err = out - data.y_eval
    return float(np.mean(err * err))


# ---------------------------------------------------------------------------
# Training runs


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    adam: AdamHyper = field(default_factory=AdamHyper)
    init_seed: int = 1
    total_steps: int = 2000
    save_every: int = 500
    break_every: int = 1000
    eval_every: int = 100
    lr_schedule: str = "constant"  # or "cosine"
    compression: PipelineConfig | None = None
    workdir: str | None = None
    compare_uncompressed: bool = False

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if self.save_every < 1 or self.break_every < 1:
            raise ValidationError("save_every and break_every must be >= 1")
        if self.break_every % self.save_every:
            raise ValidationError("save_every must divide break_every")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.compression is not None and self.workdir is None:
            raise ValidationError("compression requires a workdir for the chain")


@dataclass
class RunReport:
    eval_steps: list[int]
    loss_curve: list[float]
    final_eval_loss: float
    final_metric: float  # R^2 on the held-out set
    archive_steps: list[int] = field(default_factory=list)
    archive_raw_bytes: list[int] = field(default_factory=list)
    archive_compressed_bytes: list[int] = field(default_factory=list)
    chain_dir: str | None = None
    baseline: "RunReport | None" = None

    @property
    def aggregate_ratio(self) -> float:
        total = sum(self.archive_compressed_bytes)
        return sum(self.archive_raw_bytes) / total if total else float("nan")

    def summary(self) -> dict:
        out = {
            "final_eval_loss": self.final_eval_loss,
            "final_metric": self.final_metric,
            "archives": len(self.archive_steps),
            "raw_bytes": sum(self.archive_raw_bytes),
            "compressed_bytes": sum(self.archive_compressed_bytes),
            "ratio": self.aggregate_ratio if self.archive_steps else None,
        }
        if self.baseline is not None:
            out["baseline_final_eval_loss"] = self.baseline.final_eval_loss
            out["baseline_final_metric"] = self.baseline.final_metric
        return out


def _lr_scale(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        # decay to 10% of the base rate by the end of the run
        progress = step / cfg.total_steps
        return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress))
    return 1.0


def _state_to_bundle(state: AdamState, cfg: TrainConfig) -> CheckpointBundle:
    weights = {k: TensorRecord.from_array(k, p) for k, p in state.params.items()}
    m1 = {k: TensorRecord.from_array(k, m) for k, m in state.m.items()}
    m2 = {k: TensorRecord.from_array(k, v) for k, v in state.v.items()}
    scalars = {
        "lr": cfg.adam.lr,
        "beta1": cfg.adam.beta1,
        "beta2": cfg.adam.beta2,
        "eps_adam": cfg.adam.eps,
    }
    return CheckpointBundle(
        weights=weights, first_moments=m1, second_moments=m2, step=state.t, scalars=scalars
    )


def _bundle_to_state(bundle: CheckpointBundle) -> AdamState:
    return AdamState(
        params={k: _shaped(rec).copy() for k, rec in bundle.weights.items()},
        m={k: _shaped(rec).copy() for k, rec in bundle.first_moments.items()},
        v={k: _shaped(rec).copy() for k, rec in bundle.second_moments.items()},
        t=bundle.step,
    )


def run_training(cfg: TrainConfig) -> RunReport:
    """Deterministic training run, optionally with compression and kill/resume.

    When compression is on, every ``save_every`` step appends to the chain and
    every ``break_every`` step the live state is thrown away and rebuilt by
    replaying the chain, exactly as a crashed-and-resumed run would.
    """
    baseline = None
    if cfg.compare_uncompressed:
        baseline = run_training(
            replace(cfg, compression=None, workdir=None, compare_uncompressed=False)
        )
    dataset = _make_dataset(cfg.model, cfg.data)
    init = mlp_init(cfg.init_seed, cfg.model.layer_sizes)
    state = AdamState.fresh({k: _shaped(rec) for k, rec in init.items()})
    chain = None
    if cfg.compression is not None:
        base = SeedBase(seed=cfg.init_seed, init_id="mlp_tanh", init_args=cfg.model.init_args)
        chain = CheckpointChain.create(cfg.workdir, base, cfg.compression)
    eval_steps: list[int] = []
    losses: list[float] = []
    for step in range(1, cfg.total_steps + 1):
        idx = _batch_indices(cfg.data, step)
        _, grads = _loss_and_grads(state.params, dataset.x_train[idx], dataset.y_train[idx])
        state = adam_step(state, grads, cfg.adam, lr_scale=_lr_scale(cfg, step))
        if step % cfg.eval_every == 0:
            eval_steps.append(step)
            losses.append(_eval_loss(state.params, dataset))
        if chain is not None and step % cfg.save_every == 0:
            chain.append(_state_to_bundle(state, cfg))
        if chain is not None and step % cfg.break_every == 0 and step < cfg.total_steps:
            state = _bundle_to_state(chain.replay(step))
    final_loss = _eval_loss(state.params, dataset)
    metric = 1.0 - final_loss / float(np.var(dataset.y_eval))
    report = RunReport(
        eval_steps=eval_steps,
        loss_curve=losses,
        final_eval_loss=final_loss,
        final_metric=metric,
        chain_dir=None if chain is None else str(chain.directory),
        baseline=baseline,
    )
    if chain is not None:
        sizes = measure_sizes(chain.archive_paths())
        report.archive_steps = [e.step for e in sizes.entries]
        report.archive_raw_bytes = [e.raw_bytes for e in sizes.entries]
        report.archive_compressed_bytes = [e.compressed_bytes for e in sizes.entries]
    return report


# ---------------------------------------------------------------------------
# Regret experiment (convex online logistic)


@dataclass(frozen=True)
class RegretConfig:
    task: str = "logistic"
    dim: int = 10
    total_rounds: int = 2000
    checkpoints: tuple[int, ...] = (200, 500, 1000, 2000)
    seed: int = 11
    adam: AdamHyper = field(default_factory=lambda: AdamHyper(lr=0.05, sqrt_t_schedule=True))
    l2: float = 1e-2
    label_flip: float = 0.05

    def __post_init__(self) -> None:
        if self.task != "logistic":
            raise ValidationError(f"regret experiment requires a convex task, got {self.task!r}")
        if max(self.checkpoints) > self.total_rounds:
            raise ValidationError("checkpoints must lie within total_rounds")


@dataclass
class RegretReport:
    checkpoints: list[int]
    avg_regret: list[float]
    mask_rule: str
    prune_at: int
    kept_fraction: float | None = None


def _logistic_stream(cfg: RegretConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 0]))
    x = rng.normal(size=(cfg.total_rounds, cfg.dim))
    w_true = rng.normal(size=cfg.dim)
    w_true /= np.linalg.norm(w_true)
    y = np.sign(x @ w_true + 0.1 * rng.normal(size=cfg.total_rounds))
    y[y == 0] = 1.0
    flips = rng.random(cfg.total_rounds) < cfg.label_flip
    y[flips] *= -1.0
    return x, y


def _logistic_loss(theta: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    margins = y * (x @ theta)
    return np.logaddexp(0.0, -margins) + 0.5 * l2 * float(theta @ theta)


def _logistic_grad(theta: np.ndarray, x_t: np.ndarray, y_t: float, l2: float) -> np.ndarray:
    margin = y_t * (x_t @ theta)
    sig = 1.0 / (1.0 + math.exp(margin))
    return -y_t * sig * x_t + l2 * theta


def best_fixed_point(
    x: np.ndarray, y: np.ndarray, l2: float, tol: float = 1e-10, max_iters: int = 500_000,
    warm_start: np.ndarray | None = None,
) -> np.ndarray:
    """Fixed-step gradient descent on the summed objective, to gradient tolerance.

    The aggregated logistic objective with an L2 term is strongly convex, so
    the minimizer is unique; this is the hindsight comparator of the regret.
    The step size comes from an exact curvature bound (the logistic Hessian is
    dominated by X^T X / 4 plus the regularizer), which converges linearly and
    avoids the f64 cancellation that defeats objective-based line searches at
    this tolerance.
    """
    theta = np.zeros(x.shape[1]) if warm_start is None else warm_start.copy()
    n = len(x)
    lipschitz = 0.25 * float(np.linalg.eigvalsh(x.T @ x)[-1]) + l2 * n
    eta = 1.0 / lipschitz
    for _ in range(max_iters):
        sig = 1.0 / (1.0 + np.exp(y * (x @ theta)))
        grad = -(x.T @ (y * sig)) + l2 * n * theta
        norm = float(np.linalg.norm(grad))
        if norm <= tol:
            return theta
        theta = theta - eta * grad
    raise ValidationError(f"best_fixed_point did not reach tolerance {tol} (|grad|={norm:.3g})")


def regret_experiment(cfg: RegretConfig, prune_at: int, mask_rule: str) -> RegretReport:
    """Average regret R(T)/T at checkpoints, with moments pruned at one round.

    ``mask_rule``: "none" leaves the moments alone, "below_mean_v" zeroes both
    moments where the second moment is at or below its mean, "all" zeroes every
    moment.
    """
    if mask_rule not in ("none", "below_mean_v", "all"):
        raise ValidationError(f"unknown mask rule {mask_rule!r}")
    x, y = _logistic_stream(cfg)
    theta = np.zeros(cfg.dim, dtype=np.float64)
    m = np.zeros(cfg.dim, dtype=np.float64)
    v = np.zeros(cfg.dim, dtype=np.float64)
    per_round_loss = np.zeros(cfg.total_rounds)
    kept_fraction = None
    for t in range(1, cfg.total_rounds + 1):
        x_t, y_t = x[t - 1], y[t - 1]
        per_round_loss[t - 1] = _logistic_loss(theta, x_t[None, :], np.array([y_t]), cfg.l2)[0]
        grad = _logistic_grad(theta, x_t, y_t, cfg.l2)
        m = cfg.adam.beta1 * m + (1.0 - cfg.adam.beta1) * grad
        v = cfg.adam.beta2 * v + (1.0 - cfg.adam.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.adam.beta1**t)
        v_hat = v / (1.0 - cfg.adam.beta2**t)
        lr = cfg.adam.lr / math.sqrt(t) if cfg.adam.sqrt_t_schedule else cfg.adam.lr
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.adam.eps)
        if t == prune_at and mask_rule != "none":
            keep = v > np.mean(v) if mask_rule == "below_mean_v" else np.zeros(cfg.dim, dtype=bool)
            m = np.where(keep, m, 0.0)
            v = np.where(keep, v, 0.0)
            kept_fraction = float(np.mean(keep))
    checkpoints = sorted(cfg.checkpoints)
    avg_regret = []
    warm = None
    for horizon in checkpoints:
        warm = best_fixed_point(x[:horizon], y[:horizon], cfg.l2, warm_start=warm)
        optimum = float(np.sum(_logistic_loss(warm, x[:horizon], y[:horizon], cfg.l2)))
        regret = float(np.sum(per_round_loss[:horizon])) - optimum
        avg_regret.append(regret / horizon)
    return RegretReport(
        checkpoints=checkpoints,
        avg_regret=avg_regret,
        mask_rule=mask_rule,
        prune_at=prune_at,
        kept_fraction=kept_fraction,
    )


# ---------------------------------------------------------------------------
# Ablation suite


@dataclass(frozen=True)
class AblationRow:
    residual: bool
    prune: bool
    quant: bool
    bits: int  # 0 when quantization is off
    raw_bytes: int
    compressed_bytes: int
    ratio: float
    final_metric: float
    final_eval_loss: float

    def label(self) -> str:
        flags = "".join(
            tag if on else "-"
            for tag, on in (("R", self.residual), ("P", self.prune), ("Q", self.quant))
        )
        return f"{flags}@{self.bits}b" if self.quant else flags


def ablation_suite(
    cfg: TrainConfig,
    workdir: str | Path,
    prune_cfg: PruneConfig | None = None,
    quant_cfg: QuantConfig | None = None,
    bits_sweep: tuple[int, ...] = (2, 8),
) -> list[AblationRow]:
    """Run the 2^3 {residual, prune, quant} grid plus a bit-width sweep.

    Desk-scale pruning needs a stronger weight threshold than the production
    default to show its effect on runs this small, so the suite defaults to
    alpha=2e-2 unless an explicit PruneConfig is given.
    """
    workdir = Path(workdir)
    prune_cfg = prune_cfg if prune_cfg is not None else PruneConfig(alpha=2e-2, beta=2.0)
    quant_cfg = quant_cfg if quant_cfg is not None else QuantConfig(bits=4)
    cells: list[tuple[bool, bool, bool, int]] = []
    for residual in (False, True):
        for prune in (False, True):
            for quant in (False, True):
                cells.append((residual, prune, quant, quant_cfg.bits if quant else 0))
    for bits in bits_sweep:
        cells.append((True, True, True, bits))
    rows = []
    for residual, prune, quant, bits in cells:
        cell_dir = workdir / f"cell_r{int(residual)}p{int(prune)}q{int(quant)}b{bits}"
        compression = PipelineConfig(
            residual=residual,
            prune=prune_cfg if prune else None,
            quant=replace(quant_cfg, bits=bits) if quant else None,
        )
        report = run_training(replace(cfg, compression=compression, workdir=str(cell_dir)))
        rows.append(
            AblationRow(
                residual=residual,
                prune=prune,
                quant=quant,
                bits=bits,
                raw_bytes=sum(report.archive_raw_bytes),
                compressed_bytes=sum(report.archive_compressed_bytes),
                ratio=report.aggregate_ratio,
                final_metric=report.final_metric,
                final_eval_loss=report.final_eval_loss,
            )
        )
    return rows


def ablation_table(rows: list[AblationRow], delimiter: str = "\t") -> str:
    header = delimiter.join(
        ["cell", "residual", "prune", "quant", "bits", "raw_bytes", "compressed_bytes", "ratio", "final_metric"]
    )
    lines = [header]
    for row in rows:
        lines.append(
            delimiter.join(
                [
                    row.label(),
                    str(int(row.residual)),
                    str(int(row.prune)),
                    str(int(row.quant)),
                    str(row.bits),
                    str(row.raw_bytes),
                    str(row.compressed_bytes),
                    f"{row.ratio:.3f}",
                    f"{row.final_metric:.6f}",
                ]
            )
        )
    return "\n".join(lines)


def report_json(report: RunReport) -> str:
    return json.dumps(report.summary(), indent=2, sort_keys=True)
