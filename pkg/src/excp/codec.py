"""Bit-exact compressed archive format for quantized checkpoint sections.

Outer file layout:

    magic "EXCP" | u16 version = 1 | u8 compressor_id | u8 reserved
    | 32-byte SHA-256 of the uncompressed payload | compressed stream

Payload layout (before compression), all integers little-endian:

    u64 step | 32-byte base_ref
    | scalars block: u32 count, then per entry {u16 key length, key UTF-8, f64}
    | 3 sections (weight deltas, first moments, second moments), each:
        u32 tensor count,
        per tensor {u16 name length, name UTF-8, u8 rank, u64 extents...,
                    u8 bits, u16 codebook length, codebook f32 LE,
                    u64 code offset, u64 code length},
        u64 blob length, concatenated packed code bytes.

``bits`` is 2/4/8 for packed codebook indices and 32 for raw f32 passthrough
entries (quantization disabled).  Code blobs of a section are concatenated so
zero runs compress across tensor boundaries; offsets are relative to the
section blob.  The final stream is produced single-threaded with fixed
settings, so identical archives encode to identical bytes.
"""

from __future__ import annotations

import bz2
import hashlib
import lzma
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContainerError, ValidationError
from .quantizer import QuantizedTensor, RawTensor, SectionEntry, pack_codes, unpack_codes
from .tensor_store import _numel

MAGIC = b"EXCP"
VERSION = 1
DIGEST_SIZE = 32

LZMA_ID = 1
DEFLATE_ID = 2
BZIP2_ID = 3
COMPRESSOR_NAMES = {LZMA_ID: "lzma", DEFLATE_ID: "deflate", BZIP2_ID: "bzip2"}
_RAW_BITS = 32


# lc=0/pb=0 disable byte-context and position modelling, which mismatch packed
# sub-byte code streams; measurably smaller than the generic preset on archives
_LZMA_FILTERS = [{"id": lzma.FILTER_LZMA2, "preset": 9, "lc": 0, "pb": 0}]


def _compress(data: bytes, compressor_id: int) -> bytes:
    if compressor_id == LZMA_ID:
        return lzma.compress(data, format=lzma.FORMAT_XZ, filters=_LZMA_FILTERS)
    if compressor_id == DEFLATE_ID:
        return zlib.compress(data, 9)
    if compressor_id == BZIP2_ID:
        return bz2.compress(data, 9)
    raise ValidationError(f"unknown compressor id {compressor_id}")


def _decompress(data: bytes, compressor_id: int) -> bytes:
    try:
        if compressor_id == LZMA_ID:
            return lzma.decompress(data)
        if compressor_id == DEFLATE_ID:
            return zlib.decompress(data)
        if compressor_id == BZIP2_ID:
            return bz2.decompress(data)
    except Exception as exc:
        raise ContainerError(f"decompression failed: {exc}") from exc
    raise ContainerError(f"unsupported compressor id {compressor_id}")


@dataclass(frozen=True)
class CompressedArchive:
    """One chain link: quantized sections plus metadata for integrity checks."""

    step: int
    base_ref: bytes
    weight_deltas: Sequence[SectionEntry]
    first_moments: Sequence[SectionEntry]
    second_moments: Sequence[SectionEntry]
    scalars: dict[str, float] = field(default_factory=dict)
    compressor_id: int = LZMA_ID

    def __post_init__(self) -> None:
        if len(self.base_ref) != DIGEST_SIZE:
            raise ValidationError(f"base_ref must be {DIGEST_SIZE} bytes")
        if self.compressor_id not in COMPRESSOR_NAMES:
            raise ValidationError(f"unknown compressor id {self.compressor_id}")

    def sections(self) -> tuple[tuple[str, Sequence[SectionEntry]], ...]:
        return (
            ("weight_deltas", self.weight_deltas),
            ("first_moments", self.first_moments),
            ("second_moments", self.second_moments),
        )

    @property
    def total_elements(self) -> int:
        return sum(entry.numel for _, entries in self.sections() for entry in entries)


def _entry_code_bytes(entry: SectionEntry) -> bytes:
    if isinstance(entry, RawTensor):
        return entry.values.astype("<f4", copy=False).tobytes()
    return pack_codes(entry.codes, entry.bits)


def _build_section(entries: Sequence[SectionEntry]) -> bytes:
    headers: list[bytes] = [struct.pack("<I", len(entries))]
    blobs: list[bytes] = []
    offset = 0
    for entry in entries:
        raw = _entry_code_bytes(entry)
        name_b = entry.name.encode("utf-8")
        if isinstance(entry, RawTensor):
            bits, codebook = _RAW_BITS, np.zeros(0, dtype=np.float32)
        else:
            bits, codebook = entry.bits, entry.codebook
        headers.append(struct.pack("<H", len(name_b)))
        headers.append(name_b)
        headers.append(struct.pack("<B", len(entry.shape)))
        headers.append(struct.pack(f"<{len(entry.shape)}Q", *entry.shape))
        headers.append(struct.pack("<BH", bits, len(codebook)))
        headers.append(codebook.astype("<f4", copy=False).tobytes())
        headers.append(struct.pack("<QQ", offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)
    headers.append(struct.pack("<Q", offset))
    return b"".join(headers) + b"".join(blobs)


def build_payload(archive: CompressedArchive) -> bytes:
    parts = [struct.pack("<Q", archive.step), archive.base_ref]
    scalars = sorted(archive.scalars.items())
    parts.append(struct.pack("<I", len(scalars)))
    for key, value in scalars:
        key_b = key.encode("utf-8")
        parts.append(struct.pack("<H", len(key_b)))
        parts.append(key_b)
        parts.append(struct.pack("<d", float(value)))
    for _, entries in archive.sections():
        parts.append(_build_section(entries))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise ContainerError("payload truncated")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_section(reader: _Reader) -> list[SectionEntry]:
    (count,) = reader.unpack("<I")
    metas = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        bits, cb_len = reader.unpack("<BH")
        codebook = np.frombuffer(reader.take(cb_len * 4), dtype="<f4").astype(np.float32)
        offset, length = reader.unpack("<QQ")
        metas.append((name, tuple(int(d) for d in shape), bits, codebook, offset, length))
    (blob_len,) = reader.unpack("<Q")
    blob = reader.take(blob_len)
    entries: list[SectionEntry] = []
    for name, shape, bits, codebook, offset, length in metas:
        if offset + length > len(blob):
            raise ContainerError(f"{name}: code range out of bounds")
        raw = blob[offset : offset + length]
        numel = _numel(shape)
        if bits == _RAW_BITS:
            if length != numel * 4:
                raise ContainerError(f"{name}: raw payload length mismatch")
            values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            entries.append(RawTensor(name=name, shape=shape, values=values))
        else:
            try:
                codes = unpack_codes(raw, bits, numel)
                entries.append(
                    QuantizedTensor(name=name, shape=shape, codebook=codebook, codes=codes, bits=bits)
                )
            except ValidationError as exc:
                raise ContainerError(str(exc)) from exc
    return entries


def parse_payload(payload: bytes, compressor_id: int = LZMA_ID) -> CompressedArchive:
    reader = _Reader(payload)
    (step,) = reader.unpack("<Q")
    base_ref = reader.take(DIGEST_SIZE)
    (n_scalars,) = reader.unpack("<I")
    scalars: dict[str, float] = {}
    for _ in range(n_scalars):
        (key_len,) = reader.unpack("<H")
        key = reader.take(key_len).decode("utf-8")
        (value,) = reader.unpack("<d")
        scalars[key] = value
    sections = [_parse_section(reader) for _ in range(3)]
    if reader.pos != len(payload):
        raise ContainerError("trailing bytes after payload")
    return CompressedArchive(
        step=step,
        base_ref=base_ref,
        weight_deltas=sections[0],
        first_moments=sections[1],
        second_moments=sections[2],
        scalars=scalars,
        compressor_id=compressor_id,
    )


def encode_archive_bytes(archive: CompressedArchive) -> bytes:
    payload = build_payload(archive)
    checksum = hashlib.sha256(payload).digest()
    stream = _compress(payload, archive.compressor_id)
    head = MAGIC + struct.pack("<HBB", VERSION, archive.compressor_id, 0)
    return head + checksum + stream


def encode_archive(archive: CompressedArchive, path: str | Path) -> None:
    Path(path).write_bytes(encode_archive_bytes(archive))


def decode_archive_bytes(blob: bytes) -> CompressedArchive:
    head_len = len(MAGIC) + 4 + DIGEST_SIZE
    if len(blob) < head_len:
        raise ContainerError("truncated archive")
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"bad archive magic {blob[:4]!r}")
    version, compressor_id, _reserved = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported archive version {version}")
    checksum = blob[8 : 8 + DIGEST_SIZE]
    payload = _decompress(blob[head_len:], compressor_id)
    if hashlib.sha256(payload).digest() != checksum:
        raise ContainerError("payload checksum mismatch")
    return parse_payload(payload, compressor_id)


def decode_archive(path: str | Path) -> CompressedArchive:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_archive_bytes(blob)
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ArchiveSize:
    label: str
    step: int
    raw_bytes: int
    compressed_bytes: int

    @property
    def ratio(self) -> float:
        return self.raw_bytes / self.compressed_bytes if self.compressed_bytes else float("inf")


@dataclass(frozen=True)
class SizeReport:
    entries: list[ArchiveSize]

    @property
    def raw_bytes(self) -> int:
        return sum(e.raw_bytes for e in self.entries)

    @property
    def compressed_bytes(self) -> int:
        return sum(e.compressed_bytes for e in self.entries)

    @property
    def ratio(self) -> float:
        return self.raw_bytes / self.compressed_bytes if self.compressed_bytes else float("inf")


def measure_sizes(
    items: Iterable[str | Path | CompressedArchive], bytes_per_element: int = 4
) -> SizeReport:
    """Raw-equivalent vs compressed sizes, per archive and aggregated.

    Raw-equivalent counts every element of every section at the uncompressed
    element width (f32 by default), which is what the archive replaces.
    """
    entries = []
    for item in items:
        if isinstance(item, CompressedArchive):
            compressed = len(encode_archive_bytes(item))
            archive = item
            label = f"step_{item.step}"
        else:
            archive = decode_archive(item)
            compressed = Path(item).stat().st_size
            label = str(item)
        entries.append(
            ArchiveSize(
                label=label,
                step=archive.step,
                raw_bytes=archive.total_elements * bytes_per_element,
                compressed_bytes=compressed,
            )
        )
    return SizeReport(entries=entries)
