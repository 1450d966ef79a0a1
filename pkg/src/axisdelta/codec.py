"""1-bit sign masks packed along the input axis, per-axis FP16 scale vectors,
and reconstruction of patched weights via broadcast.

Bit conventions (pinned for the artifact format):
  - bit 1 encodes +1, bit 0 encodes -1; sign(0) := +1
  - within each packed row, bit k of byte m encodes column 8m+k (LSB-first)
  - padding bits in the last byte of each row are 0
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, matmul, to_half_array


@dataclass
class PackedSignMask:
    d_out: int
    d_in: int
    bits: np.ndarray  # uint8, shape (d_out, ceil(d_in/8))

    def __post_init__(self):
        expected = (self.d_out, (self.d_in + 7) // 8)
        if self.bits.dtype != np.uint8 or self.bits.shape != expected:
            raise DimensionError(
                f"packed mask bytes must be uint8 {expected}, got "
                f"{self.bits.dtype} {self.bits.shape}"
            )

    def tobytes(self) -> bytes:
        return self.bits.tobytes()

    @classmethod
    def frombytes(cls, d_out: int, d_in: int, raw: bytes) -> "PackedSignMask":
        row_bytes = (d_in + 7) // 8
        bits = np.frombuffer(raw, dtype=np.uint8).reshape(d_out, row_bytes).copy()
        return cls(d_out, d_in, bits)


@dataclass
class AxisScaleVector:
    axis: str  # "row" | "col"
    values: np.ndarray  # float16

    def __post_init__(self):
        if self.axis not in ("row", "col"):
            raise ValueError(f"axis must be row|col, got {self.axis!r}")
        self.values = np.asarray(self.values, dtype=np.float16).reshape(-1)
        if not np.all(np.isfinite(self.values.astype(np.float32))):
            raise ValueError("scale vector contains non-finite values")

    def expected_len(self, d_out: int, d_in: int) -> int:
        return d_out if self.axis == "row" else d_in


def pack_signs(signs01: np.ndarray) -> np.ndarray:
    """Pack a (d_out, d_in) 0/1 array into LSB-first bytes along d_in."""
    return np.packbits(signs01.astype(np.uint8), axis=1, bitorder="little")


def sign_mask(delta: np.ndarray) -> PackedSignMask:
    """Packed sign of a delta matrix; sign(0) is +1."""
    d = np.asarray(delta, dtype=np.float32)
    if d.ndim != 2:
        raise DimensionError(f"delta must be 2-D, got shape {d.shape}")
    bits = pack_signs(d >= 0)
    return PackedSignMask(d.shape[0], d.shape[1], bits)


def unpack_signs(mask: PackedSignMask) -> np.ndarray:
    """Unpack to a float32 matrix of +/-1."""
    raw = np.unpackbits(mask.bits, axis=1, count=mask.d_in, bitorder="little")
    signs = raw.astype(np.float32)
    signs *= np.float32(2.0)
    signs -= np.float32(1.0)
    return signs


def _check_shapes(base: np.ndarray, mask: PackedSignMask, scale: AxisScaleVector):
    if base.shape != (mask.d_out, mask.d_in):
        raise DimensionError(
            f"base shape {base.shape} != mask shape {(mask.d_out, mask.d_in)}"
        )
    want = scale.expected_len(mask.d_out, mask.d_in)
    if scale.values.shape[0] != want:
        raise DimensionError(
            f"{scale.axis}-mode vector length {scale.values.shape[0]} != {want}"
        )


def broadcast_delta(signs: np.ndarray, axis: str, v32: np.ndarray) -> np.ndarray:
    """v (x) B as a dense float32 matrix; v given in FP32."""
    if axis == "row":
        return (v32[:, None] * signs).astype(np.float32)
    return (v32[None, :] * signs).astype(np.float32)


def reconstruct(
    base: np.ndarray, mask: PackedSignMask, scale: AxisScaleVector
) -> np.ndarray:
    """Patched weight: base + broadcast(v) * B. Scales upcast to FP32 once."""
    _check_shapes(base, mask, scale)
    v32 = scale.values.astype(np.float32)
    # in-place on the unpacked signs: one pass each for scale and base add
    out = unpack_signs(mask)
    out *= v32[:, None] if scale.axis == "row" else v32[None, :]
    out += base
    return out


def patched_forward(
    x: np.ndarray, base: np.ndarray, mask: PackedSignMask, scale: AxisScaleVector
) -> np.ndarray:
    """x @ reconstruct(base, mask, scale).T without materializing the dense W."""
    _check_shapes(base, mask, scale)
    if x.shape[1] != mask.d_in:
        raise DimensionError(f"input cols {x.shape[1]} != d_in {mask.d_in}")
    signs = unpack_signs(mask)
    v32 = scale.values.astype(np.float32)
    return scaled_sign_forward(x, base, signs, scale.axis, v32)


def scaled_sign_forward(
    x: np.ndarray, base: np.ndarray, signs: np.ndarray, axis: str, v32: np.ndarray
) -> np.ndarray:
    """FP32-scale variant used during fitting (avoids repeated unpacking)."""
    y = matmul(x, base)
    if axis == "row":
        return y + matmul(x, signs) * v32[None, :]
    return y + matmul(x * v32[None, :], signs)


def scalar_reconstruct(base: np.ndarray, mask: PackedSignMask, alpha: float) -> np.ndarray:
    """Single-scalar baseline: base + alpha * B."""
    signs = unpack_signs(mask)
    if base.shape != signs.shape:
        raise DimensionError(f"base shape {base.shape} != mask {signs.shape}")
    return (base + np.float32(alpha) * signs).astype(np.float32)


def constant_vector(axis: str, length: int, alpha: float) -> AxisScaleVector:
    """The scalar baseline expressed as a constant axis vector."""
    return AxisScaleVector(axis, to_half_array(np.full(length, alpha, np.float32)))
