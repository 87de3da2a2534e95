"""In-memory checkpoint model and the deterministic ``EXTS`` container format.

A checkpoint bundle holds model weights plus the Adam moment tensors and a
handful of scalar hyperparameters.  Everything downstream (residuals, pruning,
quantization, archives) operates on these records, so this module pins the one
canonical representation: flat row-major arrays, little-endian bytes, f16
payloads widened to f32 for arithmetic.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContainerError, ValidationError

MAGIC = b"EXTS"
VERSION = 1
DIGEST_SIZE = 32

DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
SECTIONS = ("weights", "m1", "m2")


def _numel(shape: tuple[int, ...]) -> int:
    n = 1
    for extent in shape:
        n *= extent
    return n


@dataclass(frozen=True)
class TensorRecord:
    """A named, typed, shaped flat numeric array.

    ``data`` is one-dimensional in row-major element order and is frozen
    (read-only) after construction.  Elements must be finite.
    """

    name: str
    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("tensor name must be non-empty")
        if self.dtype not in DTYPES:
            raise ValidationError(f"{self.name}: unsupported dtype {self.dtype!r}")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise ValidationError(f"{self.name}: negative extent in shape {self.shape}")
        data = np.asarray(self.data)
        if data.ndim != 1:
            data = data.reshape(-1)
        if data.dtype != DTYPES[self.dtype]:
            raise ValidationError(
                f"{self.name}: data dtype {data.dtype} does not match {self.dtype}"
            )
        if data.size != _numel(self.shape):
            raise ValidationError(
                f"{self.name}: {data.size} elements but shape {self.shape} "
                f"implies {_numel(self.shape)}"
            )
        if data.size and not np.isfinite(data).all():
            raise ValidationError(f"{self.name}: non-finite element")
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, name: str, array: np.ndarray, dtype: str | None = None) -> "TensorRecord":
        """Build a record from any array-like; f64 input is narrowed to f32."""
        array = np.asarray(array)
        if dtype is None:
            if array.dtype == np.float16:
                dtype = "f16"
            else:
                dtype = "f32"
        flat = np.ascontiguousarray(array, dtype=DTYPES[dtype]).reshape(-1)
        return cls(name=name, dtype=dtype, shape=tuple(array.shape), data=flat)

    @property
    def numel(self) -> int:
        return self.data.size

    def as_f32(self) -> np.ndarray:
        """Flat float32 view used for all arithmetic (f16 is widened)."""
        if self.dtype == "f32":
            return self.data
        return self.data.astype(np.float32)

    def as_array(self) -> np.ndarray:
        """Shaped read-only array in the native dtype."""
        return self.data.reshape(self.shape)

    def canonical_bytes(self) -> bytes:
        """Little-endian raw payload, independent of platform byte order."""
        return self.data.astype(DTYPES[self.dtype], copy=False).tobytes()

    def with_data(self, data: np.ndarray) -> "TensorRecord":
        """Same name/shape, new f32 payload (used by lossy stages)."""
        return TensorRecord(
            name=self.name,
            dtype="f32",
            shape=self.shape,
            data=np.ascontiguousarray(data, dtype=np.float32).reshape(-1),
        )


TensorMap = Mapping[str, TensorRecord]


def _check_tensor_map(tensors: TensorMap, section: str) -> None:
    for name, record in tensors.items():
        if name != record.name:
            raise ValidationError(f"{section}: key {name!r} does not match record name {record.name!r}")


@dataclass(frozen=True)
class CheckpointBundle:
    """Model weights plus Adam first/second moments and scalar metadata.

    Moment maps either mirror the weight map exactly (keys and shapes) or are
    both empty for a weights-only bundle.  Second moments are elementwise
    non-negative.
    """

    weights: dict[str, TensorRecord]
    first_moments: dict[str, TensorRecord] = field(default_factory=dict)
    second_moments: dict[str, TensorRecord] = field(default_factory=dict)
    step: int = 0
    scalars: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ValidationError(f"step must be >= 0, got {self.step}")
        _check_tensor_map(self.weights, "weights")
        _check_tensor_map(self.first_moments, "m1")
        _check_tensor_map(self.second_moments, "m2")
        if bool(self.first_moments) != bool(self.second_moments):
            raise ValidationError("first and second moments must both be present or both empty")
        if self.first_moments:
            wkeys = set(self.weights)
            if set(self.first_moments) != wkeys or set(self.second_moments) != wkeys:
                raise ValidationError("moment maps must have exactly the weight key set")
            for name in wkeys:
                wshape = self.weights[name].shape
                if self.first_moments[name].shape != wshape or self.second_moments[name].shape != wshape:
                    raise ValidationError(f"{name}: moment shape does not match weight shape")
        for name, record in self.second_moments.items():
            if record.numel and float(record.as_f32().min()) < 0.0:
                raise ValidationError(f"{name}: negative second-moment element")
        for key, value in self.scalars.items():
            if not math.isfinite(value):
                raise ValidationError(f"scalar {key!r} is non-finite")

    @property
    def weights_only(self) -> bool:
        return not self.first_moments

    def sections(self) -> tuple[tuple[str, dict[str, TensorRecord]], ...]:
        return (
            ("weights", self.weights),
            ("m1", self.first_moments),
            ("m2", self.second_moments),
        )


def _hash_tensor(h, record: TensorRecord) -> None:
    name_b = record.name.encode("utf-8")
    h.update(struct.pack("<I", len(name_b)))
    h.update(name_b)
    h.update(record.dtype.encode("ascii"))
    h.update(struct.pack("<I", len(record.shape)))
    for extent in record.shape:
        h.update(struct.pack("<Q", extent))
    h.update(record.canonical_bytes())


def tensor_map_digest(tensors: TensorMap) -> bytes:
    """32-byte digest of a tensor map; insertion order does not matter."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        _hash_tensor(h, tensors[name])
    return h.digest()


def bundle_hash(bundle: CheckpointBundle) -> bytes:
    """Deterministic 32-byte digest over the canonical bundle serialization."""
    h = hashlib.sha256()
    for tag, tensors in bundle.sections():
        h.update(tag.encode("ascii"))
        h.update(tensor_map_digest(tensors))
    h.update(struct.pack("<Q", bundle.step))
    for key in sorted(bundle.scalars):
        key_b = key.encode("utf-8")
        h.update(struct.pack("<I", len(key_b)))
        h.update(key_b)
        h.update(struct.pack("<d", bundle.scalars[key]))
    return h.digest()


def write_bundle(bundle: CheckpointBundle, path: str | Path) -> None:
    """Serialize a bundle to the EXTS container format.

    Layout: magic ``EXTS`` | u16 version | u32 header length | UTF-8 JSON
    header (tensor index, step, scalars) | concatenated raw tensor payloads |
    trailing 32-byte SHA-256 over everything before it.
    """
    index = []
    payload_parts: list[bytes] = []
    offset = 0
    for section, tensors in bundle.sections():
        for name in sorted(tensors):
            record = tensors[name]
            raw = record.canonical_bytes()
            index.append(
                {
                    "name": name,
                    "section": section,
                    "dtype": record.dtype,
                    "shape": list(record.shape),
                    "offset": offset,
                    "length": len(raw),
                }
            )
            payload_parts.append(raw)
            offset += len(raw)
    header = {
        "version": VERSION,
        "step": bundle.step,
        "scalars": {k: float(v) for k, v in sorted(bundle.scalars.items())},
        "tensors": index,
    }
    header_b = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header_b)), header_b]
        + payload_parts
    )
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def read_bundle(path: str | Path) -> CheckpointBundle:
    """Parse an EXTS container, verifying magic, structure and trailing digest."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 6 + DIGEST_SIZE:
        raise ContainerError(f"{path}: truncated container")
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack_from("<I", body, 6)
    header_start = 10
    payload_start = header_start + header_len
    if payload_start > len(body):
        raise ContainerError(f"{path}: header extends past end of file")
    try:
        header = json.loads(body[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unparseable header: {exc}") from exc
    payload = body[payload_start:]

    sections: dict[str, dict[str, TensorRecord]] = {s: {} for s in SECTIONS}
    for entry in header.get("tensors", []):
        name = entry["name"]
        section = entry["section"]
        if section not in SECTIONS:
            raise ContainerError(f"{path}: {name}: unknown section {section!r}")
        if entry["dtype"] not in DTYPES:
            raise ContainerError(f"{path}: {name}: unknown dtype {entry['dtype']!r}")
        dtype = DTYPES[entry["dtype"]]
        shape = tuple(int(d) for d in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["length"])
        if length != _numel(shape) * dtype.itemsize:
            raise ContainerError(
                f"{path}: {name}: payload length {length} inconsistent with shape {shape}"
            )
        if offset < 0 or offset + length > len(payload):
            raise ContainerError(f"{path}: {name}: payload range out of bounds")
        if name in sections[section]:
            raise ContainerError(f"{path}: duplicate tensor {name!r} in section {section}")
        data = np.frombuffer(payload, dtype=dtype, count=_numel(shape), offset=offset)
        try:
            sections[section][name] = TensorRecord(
                name=name, dtype=entry["dtype"], shape=shape, data=data
            )
        except ValidationError as exc:
            raise ContainerError(f"{path}: {exc}") from exc
    try:
        return CheckpointBundle(
            weights=sections["weights"],
            first_moments=sections["m1"],
            second_moments=sections["m2"],
            step=int(header.get("step", 0)),
            scalars={k: float(v) for k, v in header.get("scalars", {}).items()},
        )
    except ValidationError as exc:
        raise ContainerError(f"{path}: {exc}") from exc


def map_from_arrays(arrays: Mapping[str, np.ndarray], dtype: str | None = None) -> dict[str, TensorRecord]:
    """Convenience: build a tensor map from plain numpy arrays."""
    return {name: TensorRecord.from_array(name, arr, dtype=dtype) for name, arr in arrays.items()}


def maps_equal(a: TensorMap, b: TensorMap) -> bool:
    """Bit-exact equality of two tensor maps (names, shapes, dtypes, payloads)."""
    if set(a) != set(b):
        return False
    return all(
        a[n].dtype == b[n].dtype
        and a[n].shape == b[n].shape
        and a[n].canonical_bytes() == b[n].canonical_bytes()
        for n in a
    )
