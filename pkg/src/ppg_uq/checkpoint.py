"""Binary container for named float32 arrays (checkpoints and dataset splits).

Layout, all integers little-endian uint32::

    magic (8 bytes) | version | entry count
    per entry: name length | utf-8 name | rank | dims... | float32 payload
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"PPGUQBIN"
VERSION = 1


class CheckpointError(Exception):
    """Base class for container read/write failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or malformed header."""


class CheckpointVersionError(CheckpointError):
    """Container written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared content."""


class ParamNameMismatchError(CheckpointError):
    """Stored names/shapes do not match the receiving model."""


def encode(entries: Iterable[tuple[str, np.ndarray]]) -> bytes:
    entries = list(entries)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d entries 0-d
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a ppg_uq container (bad magic bytes)")
    pos = len(MAGIC)

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(blob):
            raise CheckpointTruncatedError(f"container truncated at byte {len(blob)} (needed {pos + nbytes})")
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointVersionError(f"container version {version} is not supported (expected {VERSION})")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"entry name is not valid utf-8: {exc}") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        nelem = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * nelem), dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise CheckpointFormatError(f"duplicate entry name {name!r}")
        out[name] = arr
    if pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def write_container(path, entries: Iterable[tuple[str, np.ndarray]] | Mapping[str, np.ndarray]) -> None:
    if isinstance(entries, Mapping):
        entries = entries.items()
    Path(path).write_bytes(encode(entries))


def read_container(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())


def save_checkpoint(params, path) -> None:
    """Write a :class:`~ppg_uq.nn.ParamSet` (or name->array mapping) to ``path``."""
    items = params.items() if hasattr(params, "items") else params
    write_container(path, ((name, getattr(t, "data", t)) for name, t in items))


def load_checkpoint(path):
    from .nn import ParamSet
    from .tensor import Tensor

    return ParamSet((name, Tensor(arr)) for name, arr in read_container(path).items())
