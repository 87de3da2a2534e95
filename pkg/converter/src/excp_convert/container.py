"""Minimal reader/writer for the EXTS checkpoint container format.

This package talks to the compression toolkit purely through files on disk,
so it carries its own implementation of the documented container layout:

    magic "EXTS" | u16 version = 1 | u32 header length | UTF-8 JSON header
    | concatenated raw little-endian tensor payloads
    | trailing 32-byte SHA-256 over everything before it

The header holds the tensor index (name, section in {weights, m1, m2}, dtype
in {f32, f16}, shape, payload offset and length), the step counter and a flat
scalar map.  Tensor payloads are row-major.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EXTS"
VERSION = 1
DIGEST_SIZE = 32
DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
SECTIONS = ("weights", "m1", "m2")


class ContainerFormatError(Exception):
    """Malformed, truncated or corrupted container file."""


@dataclass
class ContainerBundle:
    """One checkpoint: three name->array sections plus step and scalars."""

    weights: dict[str, np.ndarray] = field(default_factory=dict)
    m1: dict[str, np.ndarray] = field(default_factory=dict)
    m2: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    scalars: dict[str, float] = field(default_factory=dict)

    def sections(self):
        return (("weights", self.weights), ("m1", self.m1), ("m2", self.m2))


def _dtype_tag(array: np.ndarray) -> str:
    if array.dtype == np.float32:
        return "f32"
    if array.dtype == np.float16:
        return "f16"
    raise ContainerFormatError(f"unsupported container dtype {array.dtype}")


def write_container(bundle: ContainerBundle, path: str | Path) -> None:
    index = []
    payloads: list[bytes] = []
    offset = 0
    for section, tensors in bundle.sections():
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name])
            tag = _dtype_tag(array)
            raw = array.astype(DTYPES[tag], copy=False).tobytes()
            index.append(
                {
                    "name": name,
                    "section": section,
                    "dtype": tag,
                    "shape": list(array.shape),
                    "offset": offset,
                    "length": len(raw),
                }
            )
            payloads.append(raw)
            offset += len(raw)
    header = {
        "version": VERSION,
        "step": int(bundle.step),
        "scalars": {k: float(v) for k, v in sorted(bundle.scalars.items())},
        "tensors": index,
    }
    header_b = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header_b)), header_b]
        + payloads
    )
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_container(path: str | Path) -> ContainerBundle:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 10 + DIGEST_SIZE or blob[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: not an EXTS container")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerFormatError(f"{path}: checksum mismatch")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", body, 6)
    try:
        header = json.loads(body[10 : 10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: bad header: {exc}") from exc
    payload = body[10 + header_len :]
    bundle = ContainerBundle(
        step=int(header.get("step", 0)),
        scalars={k: float(v) for k, v in header.get("scalars", {}).items()},
    )
    section_maps = dict(bundle.sections())
    for entry in header.get("tensors", []):
        if entry["section"] not in SECTIONS or entry["dtype"] not in DTYPES:
            raise ContainerFormatError(f"{path}: bad index entry for {entry.get('name')}")
        dtype = DTYPES[entry["dtype"]]
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        offset, length = int(entry["offset"]), int(entry["length"])
        if length != count * dtype.itemsize or offset + length > len(payload):
            raise ContainerFormatError(f"{path}: {entry['name']}: inconsistent payload range")
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape)
        section_maps[entry["section"]][entry["name"]] = array
    return bundle
