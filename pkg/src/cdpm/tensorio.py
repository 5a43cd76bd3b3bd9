"""Binary serialization for named tensors and descriptor dumps.

Tensor container layout (little-endian):
  magic "CDPM", format version u16, tensor count u32, then per tensor:
  name length u16 + UTF-8 name, rank u8, extents u32 each, payload f64
  row-major.

Descriptor dump layout: a sequence of records, each
  image id length u16 + UTF-8 id, vector length u32, payload f64.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CDPM"
FORMAT_VERSION = 1
MAX_RANK = 4


class FormatError(ValueError):
    """Raised when a binary file does not match the expected layout."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors to `path` in a fixed iteration order."""
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise FormatError(f"tensor {name!r} has rank {arr.ndim} > {MAX_RANK}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a tensor container written by `save_tensors`."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    offset = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        if rank > MAX_RANK:
            raise FormatError(f"{path}: tensor {name!r} has rank {rank}")
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        out[name] = arr.copy()
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return out


def write_descriptors(path: str | Path, descriptors: dict[str, np.ndarray]) -> None:
    """Write image descriptors as length-prefixed binary records."""
    chunks = []
    for image_id, vec in descriptors.items():
        vec = np.ascontiguousarray(vec, dtype=np.float64).ravel()
        encoded = image_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", vec.size))
        chunks.append(vec.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_descriptors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a descriptor dump written by `write_descriptors`, in file order."""
    blob = Path(path).read_bytes()
    offset = 0
    out: dict[str, np.ndarray] = {}
    while offset < len(blob):
        if offset + 2 > len(blob):
            raise FormatError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        image_id = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (dim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 8 * dim > len(blob):
            raise FormatError(f"{path}: truncated payload for {image_id!r}")
        out[image_id] = np.frombuffer(blob, dtype="<f8", count=dim, offset=offset).copy()
        offset += 8 * dim
    return out
