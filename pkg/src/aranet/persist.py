"""Byte-exact file formats.

``.dvol`` / ``.dmask``
    One LF-terminated UTF-8 header line ``DVOL1 {json}`` with keys
    ``shape`` [D,H,W], ``spacing_mm`` [sz,sy,sx], ``dtype`` ("f32le" or
    "u8") and optional ``label``; followed by exactly prod(shape) row-major
    little-endian values.

``.ackpt``
    ``ARACKPT1`` magic, u32 version, u32 tensor count, then per tensor a
    u16 name length, UTF-8 name, u8 ndim, u32 dims and f32le payload;
    closed by a u32 CRC32 of every preceding byte.  All integers are
    little-endian.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dosimetry import MaskVolume, Volume

VOLUME_MAGIC = b"DVOL1"
CHECKPOINT_MAGIC = b"ARACKPT1"
CHECKPOINT_VERSION = 1
MAX_HEADER_BYTES = 4096
MAX_NDIM = 8

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class HeaderError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


class DtypeShapeError(FormatError):
    pass


class CrcMismatchError(FormatError):
    pass


class DuplicateNameError(FormatError):
    pass


# ---------------------------------------------------------------- volumes


def encode_volume(values: np.ndarray, spacing_mm, dtype: str, label: str | None = None) -> bytes:
    if dtype not in _DTYPES:
        raise DtypeShapeError(f"unknown dtype tag {dtype!r}")
    arr = np.asarray(values)
    if arr.ndim != 3:
        raise DtypeShapeError(f"volumes are 3D, got shape {arr.shape}")
    header = {
        "shape": [int(s) for s in arr.shape],
        "spacing_mm": [float(s) for s in spacing_mm],
        "dtype": dtype,
    }
    if label is not None:
        header["label"] = label
    line = VOLUME_MAGIC + b" " + json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    body = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    return line + body


def decode_volume(blob: bytes) -> tuple[np.ndarray, tuple[float, ...], str, str | None]:
    """Parse a volume container; returns (values, spacing, dtype tag, label)."""
    if not blob.startswith(VOLUME_MAGIC + b" "):
        raise BadMagicError("bad magic: not a DVOL1 file")
    end = blob.find(b"\n", 0, MAX_HEADER_BYTES)
    if end < 0:
        raise HeaderError("header line missing or longer than 4096 bytes")
    try:
        header = json.loads(blob[len(VOLUME_MAGIC) + 1:end].decode("utf-8"))
    except (ValueError, RecursionError) as exc:
        raise HeaderError(f"unparseable header: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderError("header is not an object")
    shape = header.get("shape")
    spacing = header.get("spacing_mm")
    dtype = header.get("dtype")
    label = header.get("label")
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)):
        raise HeaderError(f"invalid shape {shape!r}")
    if (not isinstance(spacing, list) or len(spacing) != 3
            or not all(isinstance(s, (int, float)) and not isinstance(s, bool)
                    and math.isfinite(s) and s > 0 for s in spacing)):
        raise HeaderError(f"invalid spacing {spacing!r}")
    if dtype not in _DTYPES:
        raise DtypeShapeError(f"unknown dtype tag {dtype!r}")
    if label is not None and not isinstance(label, str):
        raise HeaderError(f"invalid label {label!r}")
    count = shape[0] * shape[1] * shape[2]
    expected = count * _DTYPES[dtype].itemsize
    body = memoryview(blob)[end + 1:]
    if len(body) < expected:
        raise TruncatedError(f"truncated body: {len(body)} of {expected} bytes")
    if len(body) > expected:
        raise TrailingDataError(f"body has {len(body) - expected} bytes beyond declared {dtype} {shape}")
    values = np.frombuffer(body, dtype=_DTYPES[dtype]).reshape(shape).copy()
    return values, tuple(float(s) for s in spacing), dtype, label


def write_volume(path, volume: Volume) -> None:
    Path(path).write_bytes(encode_volume(volume.values, volume.spacing_mm, "f32le"))


def read_volume(path) -> Volume:
    values, spacing, dtype, _ = decode_volume(Path(path).read_bytes())
    if dtype != "f32le":
        raise DtypeShapeError(f"{path}: expected f32le volume, found {dtype}")
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: volume contains non-finite values")
    return Volume(values, spacing)


def write_mask(path, mask: MaskVolume) -> None:
    Path(path).write_bytes(encode_volume(mask.values, mask.spacing_mm, "u8", label=mask.label))


def read_mask(path) -> MaskVolume:
    values, spacing, dtype, label = decode_volume(Path(path).read_bytes())
    if dtype != "u8":
        raise DtypeShapeError(f"{path}: expected u8 mask, found {dtype}")
    if values.max(initial=0) > 1:
        raise FormatError(f"{path}: mask is not binary")
    return MaskVolume(values, label=label or Path(path).stem, spacing_mm=spacing)


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items() if isinstance(tensors, Mapping) else tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise DuplicateNameError(f"duplicate tensor name {dup!r}")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(items))]
    for name, value in items:
        arr = np.asarray(value)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > MAX_NDIM:
            raise DtypeShapeError(f"{name}: {arr.ndim} dims exceeds {MAX_NDIM}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError("bad magic: not an ARACKPT1 checkpoint")
    if len(blob) < len(CHECKPOINT_MAGIC) + 12:
        raise TruncatedError("truncated checkpoint header")
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    payload = memoryview(blob)[:-4]
    if zlib.crc32(payload) != stored:
        raise CrcMismatchError("CRC mismatch: checkpoint is corrupt")

    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", payload, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise HeaderError(f"unsupported checkpoint version {version}")

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(payload):
            raise TruncatedError(f"truncated checkpoint at byte {pos}")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise HeaderError("tensor name is not UTF-8") from None
        (ndim,) = struct.unpack("<B", take(1))
        if ndim > MAX_NDIM:
            raise DtypeShapeError(f"{name}: {ndim} dims exceeds {MAX_NDIM}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = 1
        for d in dims:
            n *= d
        data = take(4 * n)
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(payload):
        raise TrailingDataError(f"{len(payload) - pos} unexpected bytes after last tensor")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
