"""Self-contained writer and reader for the TNC1 tensor container.

Layout (little-endian): magic "TNC1", u32 version (1), u32 entry count,
then per entry: u32 name length, UTF-8 name, u32 rows, u32 cols, and
rows*cols float32 values in row-major order.

This module deliberately re-implements the format from its byte layout
instead of importing the consuming toolkit, so the two codebases can
cross-check each other's files.
"""

from __future__ import annotations

import struct

import numpy as np

CONTAINER_MAGIC = b"TNC1"
CONTAINER_VERSION = 1


class ContainerFormatError(ValueError):
    """Malformed TNC1 container."""


def write_tensor_container(path, entries: dict[str, np.ndarray]) -> int:
    """Serialize named float32 matrices; returns bytes written."""
    parts = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(entries))]
    for name, matrix in entries.items():
        m = np.ascontiguousarray(matrix, dtype="<f4")
        if m.ndim != 2:
            raise ContainerFormatError(f"{name}: entries must be 2-D, got {m.shape}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<II", m.shape[0], m.shape[1]))
        parts.append(m.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_tensor_container(path) -> dict[str, np.ndarray]:
    """Parse a TNC1 file into an ordered name -> float32 matrix dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CONTAINER_MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {blob[:4]!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ContainerFormatError(f"{path}: truncated at offset {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        if name in entries:
            raise ContainerFormatError(f"{path}: duplicate entry {name!r}")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(4 * rows * cols), dtype="<f4")
        entries[name] = data.reshape(rows, cols).copy()
    if off != len(blob):
        raise ContainerFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return entries
