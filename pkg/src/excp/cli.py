"""Command-line entry point for compressing, reconstructing and replaying
checkpoint chains, plus the desk-scale training demos.

Exit codes: 0 success, 1 invalid flags/configuration, 2 I/O or corrupted
files, 3 digest/base mismatch.  stdout carries machine-readable results only;
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from .codec import LZMA_ID, decode_archive, encode_archive, measure_sizes
from .errors import ContainerError, MismatchError, ValidationError
from .joint_prune import PruneConfig
from .pipeline import (
    ChainEntry,
    ChainManifest,
    PipelineConfig,
    compress_step,
    reconstruct_step,
    replay_chain,
)
from .quantizer import QuantConfig, RawTensor
from .tensor_store import (
    CheckpointBundle,
    read_bundle,
    tensor_map_digest,
    write_bundle,
)
from .train_harness import (
    AdamHyper,
    DataSpec,
    ModelSpec,
    TrainConfig,
    ablation_suite,
    ablation_table,
    regret_experiment,
    run_training,
)
from .train_harness import RegretConfig, report_json

CONFIG_ENV = "EXCP_CONFIG"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits with its own code
        raise ValidationError(message)


def _err(message: str) -> None:
    print(f"excp: {message}", file=sys.stderr)


def _emit(args, payload: dict, plain: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(plain)


@contextmanager
def _manifest_lock(manifest_path: Path):
    lock_path = manifest_path.with_suffix(manifest_path.suffix + ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"manifest {manifest_path} is locked by another invocation ({lock_path})"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _load_config_overlay(args) -> dict:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        overlay = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ContainerError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(overlay, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return overlay


def _resolve(args, overlay: dict, key: str, default):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in overlay:
        return overlay[key]
    return default


def _pipeline_config(args, overlay: dict) -> PipelineConfig:
    alpha = float(_resolve(args, overlay, "alpha", 5e-5))
    beta = float(_resolve(args, overlay, "beta", 2.0))
    epsilon = float(_resolve(args, overlay, "epsilon", 1e-12))
    bits = int(_resolve(args, overlay, "bits", 4))
    seed = int(_resolve(args, overlay, "seed", 0))
    prune = None if args.no_prune else PruneConfig(alpha=alpha, beta=beta, epsilon=epsilon)
    quant = None if args.no_quant else QuantConfig(bits=bits, rng_seed=seed)
    return PipelineConfig(
        residual=not args.no_residual, prune=prune, quant=quant, compressor_id=LZMA_ID
    )


def _read_current_bundle(args) -> CheckpointBundle:
    bundle = read_bundle(args.weights)
    optimizer = getattr(args, "optimizer", None)
    if optimizer and Path(optimizer) != Path(args.weights):
        opt = read_bundle(optimizer)
        bundle = CheckpointBundle(
            weights=bundle.weights,
            first_moments=opt.first_moments,
            second_moments=opt.second_moments,
            step=bundle.step or opt.step,
            scalars={**opt.scalars, **bundle.scalars},
        )
    return bundle


def _is_manifest(path: Path) -> bool:
    if not path.exists():
        return False
    with open(path, "rb") as handle:
        head = handle.read(4)
    return head != b"EXTS"


def _chain_tail_weights(manifest: ChainManifest, root: Path):
    from .pipeline import resolve_base
    from .tensor_store import read_bundle as _read

    if not manifest.entries:
        return resolve_base(manifest.base, root)
    tail = manifest.entries[-1]
    if tail.recon is not None and (root / tail.recon).exists():
        candidate = _read(root / tail.recon).weights
        if tensor_map_digest(candidate) == tail.post_digest:
            return dict(candidate)
    return dict(replay_chain(manifest, tail.step, root).weights)


def cmd_compress(args) -> int:
    overlay = _load_config_overlay(args)
    current = _read_current_bundle(args)
    out_path = Path(args.out)
    prev_path = Path(args.prev)
    if _is_manifest(prev_path):
        with _manifest_lock(prev_path):
            chain_dir = prev_path.parent
            manifest = ChainManifest.load(prev_path)
            for flag in ("alpha", "beta", "epsilon", "bits", "seed"):
                if getattr(args, flag, None) is not None:
                    raise ValidationError(
                        f"--{flag} cannot override the chain configuration in {prev_path}"
                    )
            if manifest.entries and current.step <= manifest.entries[-1].step:
                raise ValidationError(f"step {current.step} does not advance the chain")
            prev_weights = _chain_tail_weights(manifest, chain_dir)
            archive, reconstructed, _ = compress_step(prev_weights, current, manifest.config)
            encode_archive(archive, out_path)
            entry = ChainEntry(
                step=current.step,
                archive=os.path.relpath(out_path, chain_dir),
                post_digest=tensor_map_digest(reconstructed),
            )
            manifest.entries.append(entry)
            manifest.save(prev_path)
    else:
        prev = read_bundle(prev_path)
        cfg = _pipeline_config(args, overlay)
        archive, _, _ = compress_step(prev.weights, current, cfg)
        encode_archive(archive, out_path)
    report = measure_sizes([out_path])
    entry_sz = report.entries[0]
    _emit(
        args,
        {
            "archive": str(out_path),
            "raw": entry_sz.raw_bytes,
            "compressed": entry_sz.compressed_bytes,
            "ratio": entry_sz.ratio,
        },
        f"raw={entry_sz.raw_bytes} compressed={entry_sz.compressed_bytes} ratio={entry_sz.ratio:.2f}",
    )
    return 0


def cmd_reconstruct(args) -> int:
    prev = read_bundle(args.prev)
    archive = decode_archive(args.archive)
    bundle = reconstruct_step(prev.weights, archive)
    write_bundle(bundle, args.out)
    _emit(
        args,
        {"out": str(args.out), "step": bundle.step},
        f"out={args.out} step={bundle.step}",
    )
    return 0


def cmd_replay(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = ChainManifest.load(manifest_path)
    bundle = replay_chain(manifest, args.step, manifest_path.parent)
    write_bundle(bundle, args.out)
    _emit(
        args,
        {"out": str(args.out), "step": bundle.step},
        f"out={args.out} step={bundle.step}",
    )
    return 0


def cmd_inspect(args) -> int:
    archive = decode_archive(args.archive)
    sections = {}
    for section_name, entries in archive.sections():
        tensors = []
        for entry in entries:
            if isinstance(entry, RawTensor):
                zero = int((entry.values == 0).sum())
                tensors.append(
                    {
                        "name": entry.name,
                        "shape": list(entry.shape),
                        "bits": 32,
                        "codebook": 0,
                        "sparsity": zero / entry.numel if entry.numel else 0.0,
                    }
                )
            else:
                zero = int((entry.codes == 0).sum())
                tensors.append(
                    {
                        "name": entry.name,
                        "shape": list(entry.shape),
                        "bits": entry.bits,
                        "codebook": int(entry.codebook.size),
                        "sparsity": zero / entry.numel if entry.numel else 0.0,
                        "center_min": float(entry.codebook.min()) if entry.codebook.size else None,
                        "center_max": float(entry.codebook.max()) if entry.codebook.size else None,
                    }
                )
        sections[section_name] = tensors
    doc = {
        "step": archive.step,
        "base_ref": archive.base_ref.hex(),
        "compressor_id": archive.compressor_id,
        "scalars": archive.scalars,
        "sections": sections,
    }
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(f"step={archive.step} base_ref={archive.base_ref.hex()[:16]}… "
              f"compressor={archive.compressor_id}")
        for section_name, tensors in sections.items():
            for t in tensors:
                print(
                    f"{section_name}\t{t['name']}\tshape={t['shape']}\tbits={t['bits']}\t"
                    f"codebook={t['codebook']}\tsparsity={t['sparsity']:.4f}"
                )
    return 0


def _train_config(args, overlay: dict) -> TrainConfig:
    layer_sizes = tuple(_resolve(args, overlay, "layers", [100, 500, 100]))
    return TrainConfig(
        model=ModelSpec(layer_sizes=layer_sizes),
        data=DataSpec(seed=int(_resolve(args, overlay, "data_seed", 7))),
        adam=AdamHyper(lr=float(_resolve(args, overlay, "lr", 1e-3))),
        init_seed=int(_resolve(args, overlay, "init_seed", 1)),
        total_steps=int(_resolve(args, overlay, "steps", 4000)),
        save_every=int(_resolve(args, overlay, "save_every", 1000)),
        break_every=int(_resolve(args, overlay, "break_every", 2000)),
        eval_every=int(_resolve(args, overlay, "eval_every", 100)),
    )


def cmd_train_demo(args) -> int:
    overlay = _load_config_overlay(args)
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if args.mode == "run":
        cfg = _train_config(args, overlay)
        compression = _pipeline_config(args, overlay)
        cfg = replace(
            cfg,
            compression=compression,
            workdir=str(workdir / "chain"),
            compare_uncompressed=bool(args.baseline),
        )
        report = run_training(cfg)
        (workdir / "loss_curve.tsv").write_text(
            "step\tloss\n"
            + "\n".join(f"{s}\t{l:.8f}" for s, l in zip(report.eval_steps, report.loss_curve)),
            encoding="utf-8",
        )
        (workdir / "summary.json").write_text(report_json(report), encoding="utf-8")
        print(report_json(report))
    elif args.mode == "regret":
        cfg = RegretConfig(total_rounds=int(_resolve(args, overlay, "rounds", 2000)))
        report = regret_experiment(cfg, prune_at=args.prune_at, mask_rule=args.mask_rule)
        lines = ["T\tavg_regret"]
        lines += [f"{t}\t{r:.8f}" for t, r in zip(report.checkpoints, report.avg_regret)]
        table = "\n".join(lines)
        (workdir / "regret.tsv").write_text(table + "\n", encoding="utf-8")
        print(table)
    elif args.mode == "ablation":
        cfg = _train_config(args, overlay)
        rows = ablation_suite(cfg, workdir / "cells")
        table = ablation_table(rows)
        (workdir / "ablation.tsv").write_text(table + "\n", encoding="utf-8")
        print(table)
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown train-demo mode {args.mode!r}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="excp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        p.add_argument("--config", help=f"JSON config overlay (or ${CONFIG_ENV})")

    p_compress = sub.add_parser("compress", help="compress a checkpoint against a base or chain")
    p_compress.add_argument("--prev", required=True, help="previous bundle or chain manifest")
    p_compress.add_argument("--weights", required=True, help="current checkpoint bundle")
    p_compress.add_argument("--optimizer", help="bundle holding the moments (defaults to --weights)")
    p_compress.add_argument("--out", required=True, help="archive output path")
    p_compress.add_argument("--alpha", type=float, help="weight prune threshold scale (default 5e-5)")
    p_compress.add_argument("--beta", type=float, help="momentum prune threshold scale (default 2.0)")
    p_compress.add_argument("--epsilon", type=float,
                            help="guard added to the second moment inside the sqrt (default 1e-12)")
    p_compress.add_argument("--bits", type=int, help="quantization bit width (default 4)")
    p_compress.add_argument("--seed", type=int, help="codebook RNG seed (default 0)")
    p_compress.add_argument("--no-residual", action="store_true")
    p_compress.add_argument("--no-prune", action="store_true")
    p_compress.add_argument("--no-quant", action="store_true")
    add_common(p_compress)
    p_compress.set_defaults(func=cmd_compress)

    p_recon = sub.add_parser("reconstruct", help="apply one archive to a previous bundle")
    p_recon.add_argument("--prev", required=True)
    p_recon.add_argument("--archive", required=True)
    p_recon.add_argument("--out", required=True)
    add_common(p_recon)
    p_recon.set_defaults(func=cmd_reconstruct)

    p_replay = sub.add_parser("replay", help="rebuild an arbitrary step from the chain base")
    p_replay.add_argument("--manifest", required=True)
    p_replay.add_argument("--step", type=int, required=True)
    p_replay.add_argument("--out", required=True)
    add_common(p_replay)
    p_replay.set_defaults(func=cmd_replay)

    p_inspect = sub.add_parser("inspect", help="print archive header and per-section stats")
    p_inspect.add_argument("--archive", required=True)
    add_common(p_inspect)
    p_inspect.set_defaults(func=cmd_inspect)

    p_demo = sub.add_parser("train-demo", help="desk-scale training, regret and ablation runs")
    p_demo.add_argument("mode", choices=("run", "regret", "ablation"))
    p_demo.add_argument("--workdir", required=True)
    p_demo.add_argument("--steps", type=int)
    p_demo.add_argument("--save-every", dest="save_every", type=int)
    p_demo.add_argument("--break-every", dest="break_every", type=int)
    p_demo.add_argument("--lr", type=float)
    p_demo.add_argument("--alpha", type=float)
    p_demo.add_argument("--beta", type=float)
    p_demo.add_argument("--epsilon", type=float)
    p_demo.add_argument("--bits", type=int)
    p_demo.add_argument("--seed", type=int)
    p_demo.add_argument("--baseline", action="store_true", help="also run uncompressed twin")
    p_demo.add_argument("--no-residual", action="store_true")
    p_demo.add_argument("--no-prune", action="store_true")
    p_demo.add_argument("--no-quant", action="store_true")
    p_demo.add_argument("--prune-at", dest="prune_at", type=int, default=500)
    p_demo.add_argument("--mask-rule", dest="mask_rule", default="below_mean_v",
                        choices=("none", "below_mean_v", "all"))
    add_common(p_demo)
    p_demo.set_defaults(func=cmd_train_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        _err(str(exc))
        return 1
    except MismatchError as exc:
        _err(str(exc))
        return 3
    except ContainerError as exc:
        _err(str(exc))
        return 2
    except OSError as exc:
        _err(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
