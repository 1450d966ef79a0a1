"""Dense FP32 matrices, binary16 helpers, the TNC1 tensor container, and a
seeded RNG.

Everything downstream works on plain 2-D float32 numpy arrays ("matrices").
The matmul here fixes the accumulation order (sequential over the shared
axis) so that losses computed on top of it are bit-reproducible run to run.
"""

from __future__ import annotations

import struct

import numpy as np

CONTAINER_MAGIC = b"TNC1"
CONTAINER_VERSION = 1

# Largest finite binary16 value; conversions saturate here instead of Inf.
HALF_MAX = np.float32(65504.0)


class DimensionError(ValueError):
    """Shapes do not line up."""


class ContainerError(ValueError):
    """Malformed tensor container file."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a C-contiguous 2-D float32 array."""
    m = np.ascontiguousarray(a, dtype=np.float32)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: contains non-finite values")
    return m


def matmul(a: np.ndarray, bt: np.ndarray) -> np.ndarray:
    """Compute a @ bt.T with a fixed sequential FP32 accumulation order.

    `bt` is given transposed: result[i, j] = sum_k a[i, k] * bt[j, k],
    accumulated in k order. Matches a naive triple loop bit for bit.
    """
    if a.ndim != 2 or bt.ndim != 2 or a.shape[1] != bt.shape[1]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} x {bt.shape} (shared axis must match)"
        )
    a = np.asarray(a, dtype=np.float32)
    bt = np.asarray(bt, dtype=np.float32)
    out = np.zeros((a.shape[0], bt.shape[0]), dtype=np.float32)
    for k in range(a.shape[1]):
        # One rank-1 update per k keeps the per-element accumulation sequential.
        out += a[:, k, None] * bt[None, :, k]
    return out


def to_half_round(x) -> np.float16:
    """Round a finite FP32 scalar to binary16 (round-to-nearest-even).

    Values beyond the binary16 range saturate to +/-HALF_MAX, never Inf.
    """
    x32 = np.float32(x)
    if np.isnan(x32):
        raise ValueError("to_half_round: NaN input")
    return np.float16(np.clip(x32, -HALF_MAX, HALF_MAX))


def to_half_array(x: np.ndarray) -> np.ndarray:
    """Vectorized to_half_round for float32 arrays."""
    x32 = np.asarray(x, dtype=np.float32)
    if np.any(np.isnan(x32)):
        raise ValueError("to_half_array: NaN input")
    return np.clip(x32, -HALF_MAX, HALF_MAX).astype(np.float16)


def half_bits(h) -> int:
    """Raw binary16 bit pattern as an int."""
    return int(np.float16(h).view(np.uint16))


def write_container(path, entries: dict[str, np.ndarray]) -> int:
    """Write named matrices to `path` in the TNC1 format. Returns bytes written.

    Layout: magic "TNC1", u32 version, u32 entry count, then per entry
    (u32 name length, UTF-8 name, u32 rows, u32 cols, rows*cols LE float32).
    """
    names = list(entries)
    if len(set(names)) != len(names):
        raise ContainerError("duplicate entry names")
    parts = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(names))]
    for name in names:
        m = as_matrix(entries[name], name)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<II", m.shape[0], m.shape[1]))
        parts.append(m.astype("<f4").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_container(path) -> dict[str, np.ndarray]:
    """Read a TNC1 container; inverse of write_container, byte-exact on payloads."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CONTAINER_MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ContainerError(f"{path}: truncated at offset {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(4 * rows * cols), dtype="<f4")
        if name in entries:
            raise ContainerError(f"{path}: duplicate entry name {name!r}")
        entries[name] = data.reshape(rows, cols).astype(np.float32)
    return entries


class Rng:
    """Deterministic RNG: PCG64 uniforms; normals via Box-Muller on uniform pairs.

    Identical seeds give identical streams on every platform, and the
    normal transform is pinned here rather than delegated to numpy's
    (version-dependent) ziggurat sampler.
    """

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.PCG64(int(seed)))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._gen.random(shape, dtype=np.float64)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape)) if shape != () else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs, dtype=np.float64)  # (0, 1], log-safe
        u2 = self._gen.random(pairs, dtype=np.float64)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        out = z[:n]
        return out.reshape(shape) if shape != () else out[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape, dtype=np.int64)


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)
