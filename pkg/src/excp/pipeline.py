"""Chain orchestration: compress a checkpoint against the previous reconstruction,
reconstruct the next checkpoint from an archive, replay any step from the base
state, and apply the retention policy.

Every hop is digest-guarded: an archive records the digest of the weights it
was diffed against, and the manifest records the digest each archive must
reproduce.  A mismatch anywhere is fatal before any arithmetic happens, so a
corrupted or reordered chain can never silently poison later steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .codec import (
    LZMA_ID,
    CompressedArchive,
    decode_archive,
    encode_archive,
)
from .errors import ContainerError, MismatchError, ValidationError
from .joint_prune import PruneConfig, PruneMasks, apply_masks, compute_masks
from .quantizer import QuantConfig, RawTensor, SectionEntry, decode_entry, quantize
from .residual import ResidualBundle, apply_residual, compute_residual
from .tensor_store import (
    CheckpointBundle,
    TensorMap,
    TensorRecord,
    read_bundle,
    tensor_map_digest,
    write_bundle,
)

_RESIDUAL_FLAG = "_excp_residual"


@dataclass(frozen=True)
class PipelineConfig:
    """Which lossy stages run and how; None disables a stage."""

    residual: bool = True
    prune: PruneConfig | None = field(default_factory=PruneConfig)
    quant: QuantConfig | None = field(default_factory=QuantConfig)
    compressor_id: int = LZMA_ID

    def to_dict(self) -> dict:
        out: dict = {"residual": self.residual, "compressor_id": self.compressor_id}
        if self.prune is not None:
            out["prune"] = {
                "alpha": self.prune.alpha,
                "beta": self.prune.beta,
                "epsilon": self.prune.epsilon,
                "momentum_indicator": self.prune.momentum_indicator,
            }
        if self.quant is not None:
            out["quant"] = {
                "bits": self.quant.bits,
                "max_kmeans_iters": self.quant.max_kmeans_iters,
                "sample_cap": self.quant.sample_cap,
                "rng_seed": self.quant.rng_seed,
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        prune = PruneConfig(**data["prune"]) if "prune" in data else None
        quant = QuantConfig(**data["quant"]) if "quant" in data else None
        return cls(
            residual=bool(data.get("residual", True)),
            prune=prune,
            quant=quant,
            compressor_id=int(data.get("compressor_id", LZMA_ID)),
        )


@dataclass(frozen=True)
class SeedBase:
    """Replay base: deterministic initializer identified by name, plus its seed."""

    seed: int
    init_id: str
    init_args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BundleBase:
    """Replay base: a stored full bundle, pinned by its weight digest."""

    path: str
    digest: bytes


BaseSpec = SeedBase | BundleBase

Initializer = Callable[..., dict[str, TensorRecord]]
_INITIALIZERS: dict[str, Initializer] = {}


def register_initializer(init_id: str, fn: Initializer) -> None:
    _INITIALIZERS[init_id] = fn


def resolve_base(base: BaseSpec, root: Path) -> dict[str, TensorRecord]:
    """Materialize the step-0 weights a chain replays from."""
    if isinstance(base, SeedBase):
        if base.init_id not in _INITIALIZERS:
            raise ValidationError(f"unknown initializer {base.init_id!r}")
        return _INITIALIZERS[base.init_id](seed=base.seed, **base.init_args)
    bundle = read_bundle(root / base.path)
    digest = tensor_map_digest(bundle.weights)
    if digest != base.digest:
        raise MismatchError(f"base bundle {base.path} digest mismatch")
    return dict(bundle.weights)


def _normal_init(seed: int, shapes: dict[str, Sequence[int]], scale: float = 0.02) -> dict[str, TensorRecord]:
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {}
    for name in sorted(shapes):
        shape = tuple(int(d) for d in shapes[name])
        values = rng.normal(0.0, scale, size=shape).astype(np.float32)
        out[name] = TensorRecord.from_array(name, values)
    return out


register_initializer("normal", _normal_init)


def _widen(tensors: TensorMap) -> dict[str, TensorRecord]:
    return {name: rec.with_data(rec.as_f32()) for name, rec in tensors.items()}


def _encode_section(tensors: TensorMap, quant: QuantConfig | None) -> list[SectionEntry]:
    entries: list[SectionEntry] = []
    for name in sorted(tensors):
        record = tensors[name]
        if quant is None:
            entries.append(RawTensor(name=name, shape=record.shape, values=record.as_f32()))
        else:
            entries.append(quantize(record, quant))
    return entries


def compress_step(
    prev_reconstructed: TensorMap,
    current: CheckpointBundle,
    cfg: PipelineConfig,
    *,
    base_ref: bytes | None = None,
) -> tuple[CompressedArchive, dict[str, TensorRecord], PruneMasks | None]:
    """Encode one checkpoint against the previous reconstruction.

    Returns the archive, the new reconstructed weights (bit-identical to what
    reconstruct_step would later produce from the archive), and the masks that
    were applied (None when pruning was skipped).
    """
    if base_ref is None:
        base_ref = tensor_map_digest(prev_reconstructed)
    # With both lossy stages off the archive must reconstruct bit-exactly.
    # f32 delta arithmetic cannot guarantee that for coordinates whose move
    # exceeds their magnitude (the subtraction rounds), so the fully lossless
    # mode stores the weights themselves; digest chaining is unchanged.
    lossless = cfg.prune is None and cfg.quant is None
    if cfg.residual and not lossless:
        staged = compute_residual(prev_reconstructed, current)
    else:
        staged = ResidualBundle(
            weight_deltas=_widen(current.weights),
            first_moments=current.first_moments,
            second_moments=current.second_moments,
            step=current.step,
            scalars=dict(current.scalars),
        )
    masks: PruneMasks | None = None
    if cfg.prune is not None and not current.weights_only:
        masks = compute_masks(staged, cfg.prune)
        staged = apply_masks(staged, masks)
    scalars = dict(current.scalars)
    scalars[_RESIDUAL_FLAG] = 1.0 if (cfg.residual and not lossless) else 0.0
    archive = CompressedArchive(
        step=current.step,
        base_ref=base_ref,
        weight_deltas=_encode_section(staged.weight_deltas, cfg.quant),
        first_moments=_encode_section(_widen(staged.first_moments), cfg.quant),
        second_moments=_encode_section(_widen(staged.second_moments), cfg.quant),
        scalars=scalars,
        compressor_id=cfg.compressor_id,
    )
    decoded = {entry.name: decode_entry(entry) for entry in archive.weight_deltas}
    if scalars[_RESIDUAL_FLAG] != 0.0:
        reconstructed = apply_residual(prev_reconstructed, decoded)
    else:
        reconstructed = decoded
    return archive, reconstructed, masks


def reconstruct_step(prev_reconstructed: TensorMap, archive: CompressedArchive) -> CheckpointBundle:
    """Invert one archive on top of the previous reconstructed weights."""
    digest = tensor_map_digest(prev_reconstructed)
    if digest != archive.base_ref:
        raise MismatchError(
            f"archive for step {archive.step} was built against a different base checkpoint"
        )
    decoded = {entry.name: decode_entry(entry) for entry in archive.weight_deltas}
    if archive.scalars.get(_RESIDUAL_FLAG, 1.0) != 0.0:
        weights = apply_residual(prev_reconstructed, decoded)
    else:
        weights = decoded
    m1 = {entry.name: decode_entry(entry) for entry in archive.first_moments}
    m2 = {}
    for entry in archive.second_moments:
        record = decode_entry(entry)
        # negative centers cannot arise from non-negative data, but hardware /
        # library drift must never produce an invalid Adam state
        m2[entry.name] = record.with_data(np.maximum(record.as_f32(), np.float32(0.0)))
    scalars = {k: v for k, v in archive.scalars.items() if not k.startswith("_excp_")}
    return CheckpointBundle(
        weights=weights,
        first_moments=m1,
        second_moments=m2,
        step=archive.step,
        scalars=scalars,
    )


@dataclass(frozen=True)
class ChainEntry:
    step: int
    archive: str
    post_digest: bytes
    recon: str | None = None


@dataclass
class ChainManifest:
    """Ordered archive list plus the base state everything replays from."""

    base: BaseSpec
    config: PipelineConfig
    entries: list[ChainEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        steps = [e.step for e in self.entries]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValidationError("manifest steps must strictly increase")

    def entry_for(self, step: int) -> ChainEntry:
        for entry in self.entries:
            if entry.step == step:
                return entry
        raise ValidationError(f"step {step} not in manifest ({[e.step for e in self.entries]})")

    def to_json(self) -> str:
        if isinstance(self.base, SeedBase):
            base = {
                "kind": "seed",
                "seed": self.base.seed,
                "init_id": self.base.init_id,
                "init_args": self.base.init_args,
            }
        else:
            base = {"kind": "bundle", "path": self.base.path, "digest": self.base.digest.hex()}
        doc = {
            "version": 1,
            "base": base,
            "config": self.config.to_dict(),
            "entries": [
                {
                    "step": e.step,
                    "archive": e.archive,
                    "post_digest": e.post_digest.hex(),
                    "recon": e.recon,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChainManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ContainerError(f"unparseable manifest: {exc}") from exc
        raw_base = doc["base"]
        base: BaseSpec
        if raw_base["kind"] == "seed":
            base = SeedBase(
                seed=int(raw_base["seed"]),
                init_id=raw_base["init_id"],
                init_args=raw_base.get("init_args", {}),
            )
        elif raw_base["kind"] == "bundle":
            base = BundleBase(path=raw_base["path"], digest=bytes.fromhex(raw_base["digest"]))
        else:
            raise ContainerError(f"unknown base kind {raw_base['kind']!r}")
        entries = [
            ChainEntry(
                step=int(e["step"]),
                archive=e["archive"],
                post_digest=bytes.fromhex(e["post_digest"]),
                recon=e.get("recon"),
            )
            for e in doc.get("entries", [])
        ]
        return cls(base=base, config=PipelineConfig.from_dict(doc["config"]), entries=entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ChainManifest":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ContainerError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_json(text)


def replay_chain(manifest: ChainManifest, target_step: int, root: str | Path) -> CheckpointBundle:
    """Rebuild the checkpoint at target_step from the base state and archives."""
    root = Path(root)
    target = manifest.entry_for(target_step)
    weights = resolve_base(manifest.base, root)
    bundle: CheckpointBundle | None = None
    for entry in manifest.entries:
        archive = decode_archive(root / entry.archive)
        bundle = reconstruct_step(weights, archive)
        digest = tensor_map_digest(bundle.weights)
        if digest != entry.post_digest:
            raise MismatchError(f"replay digest mismatch at step {entry.step}")
        weights = bundle.weights
        if entry.step == target.step:
            return bundle
    raise ValidationError(f"step {target_step} not reached")  # pragma: no cover


def retention_apply(
    manifest: ChainManifest, root: str | Path, *, dry_run: bool = False
) -> list[Path]:
    """List (and unless dry_run, delete) reconstructed bundles older than the
    latest; archives are never touched."""
    root = Path(root)
    recon_entries = [e for e in manifest.entries if e.recon is not None]
    deletions = [root / e.recon for e in recon_entries[:-1] if (root / e.recon).exists()]
    if not dry_run:
        for path in deletions:
            path.unlink()
    return deletions


class CheckpointChain:
    """Single-writer view of a chain directory (manifest + archives + recon)."""

    MANIFEST_NAME = "manifest.json"

    def __init__(self, directory: str | Path, manifest: ChainManifest, recon: dict[str, TensorRecord]):
        self.directory = Path(directory)
        self.manifest = manifest
        self.recon = recon

    @classmethod
    def create(cls, directory: str | Path, base: BaseSpec, config: PipelineConfig) -> "CheckpointChain":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest_path = directory / cls.MANIFEST_NAME
        if manifest_path.exists():
            raise ValidationError(f"chain already exists at {manifest_path}")
        manifest = ChainManifest(base=base, config=config)
        recon = resolve_base(base, directory)
        manifest.save(manifest_path)
        return cls(directory, manifest, recon)

    @classmethod
    def open(cls, directory: str | Path) -> "CheckpointChain":
        directory = Path(directory)
        manifest = ChainManifest.load(directory / cls.MANIFEST_NAME)
        if not manifest.entries:
            recon = resolve_base(manifest.base, directory)
        else:
            tail = manifest.entries[-1]
            recon = None
            if tail.recon is not None and (directory / tail.recon).exists():
                candidate = read_bundle(directory / tail.recon).weights
                if tensor_map_digest(candidate) == tail.post_digest:
                    recon = dict(candidate)
            if recon is None:
                recon = dict(replay_chain(manifest, tail.step, directory).weights)
        return cls(directory, manifest, recon)

    @property
    def last_step(self) -> int:
        return self.manifest.entries[-1].step if self.manifest.entries else 0

    def append(self, current: CheckpointBundle) -> Path:
        """Compress one checkpoint, persist the archive, advance the chain."""
        if self.manifest.entries and current.step <= self.last_step:
            raise ValidationError(
                f"step {current.step} does not advance the chain (last {self.last_step})"
            )
        archive, reconstructed, _ = compress_step(self.recon, current, self.manifest.config)
        archive_name = f"step_{current.step:09d}.excp"
        recon_name = f"recon_{current.step:09d}.exts"
        encode_archive(archive, self.directory / archive_name)
        write_bundle(
            CheckpointBundle(weights=dict(reconstructed), step=current.step),
            self.directory / recon_name,
        )
        entry = ChainEntry(
            step=current.step,
            archive=archive_name,
            post_digest=tensor_map_digest(reconstructed),
            recon=recon_name,
        )
        self.manifest = replace(
            self.manifest, entries=[*self.manifest.entries, entry]
        )
        self.manifest.save(self.directory / self.MANIFEST_NAME)
        self.recon = dict(reconstructed)
        return self.directory / archive_name

    def replay(self, step: int) -> CheckpointBundle:
        return replay_chain(self.manifest, step, self.directory)

    def reconstruct_latest(self) -> CheckpointBundle:
        return self.replay(self.last_step)

    def retention(self, *, dry_run: bool = False) -> list[Path]:
        return retention_apply(self.manifest, self.directory, dry_run=dry_run)

    def archive_paths(self) -> list[Path]:
        return [self.directory / e.archive for e in self.manifest.entries]
