"""Convert between PyTorch checkpoints and EXTS checkpoint containers.

Import maps a model state dict plus a ``torch.optim.Adam`` state dict into
the container's {weights, m1, m2} sections; export rebuilds framework files
that ``load_state_dict`` accepts.  A NameMap sidecar records the pairing of
framework parameter names with container tensor names and each parameter's
optimizer state index, so the association survives the round trip instead of
relying on enumeration order twice.

Supported element types are float32 and float16 (preserved exactly).  Other
floating dtypes are a hard error; integer/bool entries (counters and similar
buffers) are not convertible state and are reported as skipped, never
silently dropped.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import ContainerBundle, read_container, write_container


class ConvertError(Exception):
    """Unconvertible checkpoint: bad structure, shape mismatch, bad dtype."""


@dataclass
class NameMap:
    """Pairing of framework names with container names plus Adam state indices."""

    tensors: dict[str, str] = field(default_factory=dict)  # framework -> container
    optimizer_index: dict[str, int] = field(default_factory=dict)  # framework -> index
    skipped: list[str] = field(default_factory=list)
    hyper: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = list(self.tensors.values())
        if len(set(values)) != len(values):
            raise ConvertError("name map is not bijective: duplicate container names")

    def container_to_framework(self) -> dict[str, str]:
        return {container: framework for framework, container in self.tensors.items()}

    def save(self, path: str | Path) -> None:
        doc = {
            "version": 1,
            "tensors": self.tensors,
            "optimizer_index": self.optimizer_index,
            "skipped": self.skipped,
            "hyper": self.hyper,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NameMap":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            tensors=dict(doc["tensors"]),
            optimizer_index={k: int(v) for k, v in doc.get("optimizer_index", {}).items()},
            skipped=list(doc.get("skipped", [])),
            hyper={k: float(v) for k, v in doc.get("hyper", {}).items()},
        )

    @classmethod
    def identity(cls, names: list[str]) -> "NameMap":
        return cls(
            tensors={n: n for n in names},
            optimizer_index={n: i for i, n in enumerate(names)},
        )


def _load_torch(path: str | Path):
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConvertError(f"cannot parse {path} as a framework checkpoint: {exc}") from exc


def _to_numpy(name: str, tensor: torch.Tensor) -> np.ndarray:
    if tensor.dtype == torch.float32:
        return tensor.detach().cpu().numpy()
    if tensor.dtype == torch.float16:
        return tensor.detach().cpu().numpy()
    raise ConvertError(f"{name}: unsupported element type {tensor.dtype}")


def _split_checkpoint(obj) -> tuple[dict, dict | None]:
    """Accept either a bare state dict or {'model': ..., 'optimizer': ...}."""
    if not isinstance(obj, dict):
        raise ConvertError("framework checkpoint is not a dict")
    if "model" in obj and isinstance(obj["model"], dict):
        return obj["model"], obj.get("optimizer")
    if "state_dict" in obj and isinstance(obj["state_dict"], dict):
        return obj["state_dict"], obj.get("optimizer")
    return obj, None


def _fold_steps(steps: list[int]) -> int:
    if not steps:
        return 0
    folded = max(steps)
    if len(set(steps)) > 1:
        print(
            f"excp-convert: warning: per-parameter step counters differ "
            f"({sorted(set(steps))}); folding to max {folded}",
            file=sys.stderr,
        )
    return folded


def import_checkpoint(
    framework_file: str | Path,
    optimizer_file: str | Path | None = None,
) -> tuple[ContainerBundle, NameMap]:
    """Framework checkpoint(s) -> container bundle + the NameMap that made it.

    ``optimizer_file`` may be omitted when the framework file holds both parts
    (a {'model', 'optimizer'} dict) or when the checkpoint is weights-only.
    """
    state, optimizer = _split_checkpoint(_load_torch(framework_file))
    if optimizer_file is not None and Path(optimizer_file) != Path(framework_file):
        opt_obj = _load_torch(optimizer_file)
        if isinstance(opt_obj, dict) and "state" in opt_obj:
            optimizer = opt_obj
        else:
            _, optimizer = _split_checkpoint(opt_obj)

    name_map = NameMap()
    bundle = ContainerBundle()
    param_names: list[str] = []
    for name, value in state.items():
        if not isinstance(value, torch.Tensor):
            name_map.skipped.append(name)
            continue
        if value.dtype in (torch.float32, torch.float16):
            bundle.weights[name] = _to_numpy(name, value)
            name_map.tensors[name] = name
            param_names.append(name)
        elif value.is_floating_point():
            raise ConvertError(f"{name}: unsupported element type {value.dtype}")
        else:
            name_map.skipped.append(name)  # counters and integer buffers
    if name_map.skipped:
        print(
            f"excp-convert: warning: {len(name_map.skipped)} non-convertible "
            f"entries skipped: {name_map.skipped}",
            file=sys.stderr,
        )

    if optimizer is not None:
        opt_state = optimizer.get("state", {})
        groups = optimizer.get("param_groups", [])
        indices = [idx for group in groups for idx in group.get("params", [])]
        if len(indices) != len(param_names):
            raise ConvertError(
                f"optimizer covers {len(indices)} parameters but the model has "
                f"{len(param_names)} convertible tensors"
            )
        steps: list[int] = []
        for name, idx in zip(param_names, indices):
            name_map.optimizer_index[name] = int(idx)
            entry = opt_state.get(idx, opt_state.get(str(idx)))
            if entry is None:
                raise ConvertError(f"optimizer state missing for {name} (index {idx})")
            exp_avg = _to_numpy(f"{name}/exp_avg", entry["exp_avg"])
            exp_avg_sq = _to_numpy(f"{name}/exp_avg_sq", entry["exp_avg_sq"])
            if exp_avg.shape != bundle.weights[name].shape:
                raise ConvertError(
                    f"{name}: moment shape {exp_avg.shape} does not match "
                    f"weight shape {bundle.weights[name].shape}"
                )
            if exp_avg_sq.shape != bundle.weights[name].shape:
                raise ConvertError(f"{name}: second-moment shape mismatch")
            bundle.m1[name] = exp_avg
            bundle.m2[name] = exp_avg_sq
            step = entry.get("step", 0)
            steps.append(int(step.item() if isinstance(step, torch.Tensor) else step))
        bundle.step = _fold_steps(steps)
        if groups:
            group = groups[0]
            betas = group.get("betas", (0.9, 0.999))
            name_map.hyper = {
                "lr": float(group.get("lr", 1e-3)),
                "beta1": float(betas[0]),
                "beta2": float(betas[1]),
                "eps_adam": float(group.get("eps", 1e-8)),
                "weight_decay": float(group.get("weight_decay", 0.0)),
            }
            bundle.scalars.update(name_map.hyper)
    return bundle, name_map


def export_checkpoint(bundle: ContainerBundle, name_map: NameMap | None = None) -> dict:
    """Container bundle -> {'model': state_dict, 'optimizer': adam_state_dict}.

    The name map must cover every container tensor; orphans are an error, not
    a silent drop.  Without a map, identity names with container (sorted)
    ordering are used.
    """
    if name_map is None:
        name_map = NameMap.identity(sorted(bundle.weights))
    reverse = name_map.container_to_framework()
    orphans = sorted(set(bundle.weights) - set(reverse))
    if orphans:
        raise ConvertError(f"name map does not cover container tensors: {orphans}")
    state = {}
    ordered: list[tuple[str, str]] = []  # (framework name, container name)
    for container_name in sorted(bundle.weights):
        framework_name = reverse[container_name]
        state[framework_name] = torch.from_numpy(np.array(bundle.weights[container_name]))
        ordered.append((framework_name, container_name))
    out: dict = {"model": state}
    if bundle.m1:
        indices = {}
        for framework_name, container_name in ordered:
            idx = name_map.optimizer_index.get(framework_name)
            if idx is None:
                raise ConvertError(f"name map has no optimizer index for {framework_name}")
            indices[(framework_name, container_name)] = idx
        hyper = name_map.hyper or {
            key: bundle.scalars[key]
            for key in ("lr", "beta1", "beta2", "eps_adam", "weight_decay")
            if key in bundle.scalars
        }
        opt_state = {}
        for (framework_name, container_name), idx in indices.items():
            opt_state[idx] = {
                "step": torch.tensor(float(bundle.step)),
                "exp_avg": torch.from_numpy(np.array(bundle.m1[container_name])),
                "exp_avg_sq": torch.from_numpy(np.array(bundle.m2[container_name])),
            }
        out["optimizer"] = {
            "state": opt_state,
            "param_groups": [
                {
                    "params": sorted(indices.values()),
                    "lr": float(hyper.get("lr", 1e-3)),
                    "betas": (float(hyper.get("beta1", 0.9)), float(hyper.get("beta2", 0.999))),
                    "eps": float(hyper.get("eps_adam", 1e-8)),
                    "weight_decay": float(hyper.get("weight_decay", 0.0)),
                    "amsgrad": False,
                    "maximize": False,
                    "foreach": None,
                    "capturable": False,
                    "differentiable": False,
                    "fused": None,
                }
            ],
        }
    return out


def import_to_file(
    framework_file: str | Path,
    out_path: str | Path,
    optimizer_file: str | Path | None = None,
    name_map_path: str | Path | None = None,
) -> NameMap:
    bundle, name_map = import_checkpoint(framework_file, optimizer_file)
    write_container(bundle, out_path)
    if name_map_path is not None:
        name_map.save(name_map_path)
    return name_map


def export_to_file(
    bundle_path: str | Path,
    out_path: str | Path,
    name_map_path: str | Path | None = None,
) -> None:
    bundle = read_container(bundle_path)
    name_map = NameMap.load(name_map_path) if name_map_path else None
    torch.save(export_checkpoint(bundle, name_map), out_path)
