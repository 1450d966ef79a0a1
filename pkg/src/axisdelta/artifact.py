"""The delta artifact: a compact binary bundle of packed sign masks and FP16
scale vectors, applied onto a base model in one bulk read.

File layout (little-endian):
  magic "DLT1"
  u32 version
  32-byte base fingerprint (SHA-256 of the base container file)
  u32 record count
  per record: u32 name length, UTF-8 name, u8 axis (0=row, 1=col),
              u32 d_out, u32 d_in, packed mask bytes, vector as binary16
  32-byte SHA-256 checksum over everything after the magic

Also provides size accounting against FP16 checkpoints and a load-time
benchmark comparing the delta-apply path with a full-checkpoint load.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass

import numpy as np

from .codec import AxisScaleVector, PackedSignMask, reconstruct
from .model import SPEC_ENTRY, ToyModel, entries_to_model, model_to_entries
from .tensor import ContainerError

ARTIFACT_MAGIC = b"DLT1"
ARTIFACT_VERSION = 1
FP16_MAGIC = b"TNH1"

AXIS_CODE = {"row": 0, "col": 1}
AXIS_NAME = {0: "row", 1: "col"}

# Fixed size of an empty artifact: magic + version + fingerprint + count + checksum.
EMPTY_ARTIFACT_BYTES = 4 + 4 + 32 + 4 + 32


class ArtifactError(ValueError):
    """Malformed delta artifact."""


class FingerprintMismatch(ArtifactError):
    """Artifact was built against a different base."""


@dataclass
class DeltaLayerRecord:
    name: str
    axis: str
    d_out: int
    d_in: int
    mask_bytes: bytes
    vector: np.ndarray  # float16

    def __post_init__(self):
        if self.axis not in AXIS_CODE:
            raise ArtifactError(f"bad axis {self.axis!r}")
        expect_mask = self.d_out * ((self.d_in + 7) // 8)
        if len(self.mask_bytes) != expect_mask:
            raise ArtifactError(
                f"{self.name}: mask is {len(self.mask_bytes)} bytes, want {expect_mask}"
            )
        self.vector = np.asarray(self.vector, dtype=np.float16).reshape(-1)
        want = self.d_out if self.axis == "row" else self.d_in
        if self.vector.shape[0] != want:
            raise ArtifactError(
                f"{self.name}: vector length {self.vector.shape[0]}, want {want}"
            )

    def payload_bytes(self) -> int:
        """Mask + vector payload (the compressed representation proper)."""
        return len(self.mask_bytes) + 2 * self.vector.shape[0]

    def encoded_bytes(self) -> int:
        return 4 + len(self.name.encode()) + 1 + 8 + self.payload_bytes()


def records_from_state(state) -> list[DeltaLayerRecord]:
    """Build artifact records from a compressed student (fitting.StudentState)."""
    recs = []
    for name in sorted(state.layers):
        cl = state.layers[name]
        vec = np.asarray(cl.v32, dtype=np.float16)
        recs.append(
            DeltaLayerRecord(
                name, cl.axis, cl.mask.d_out, cl.mask.d_in, cl.mask.tobytes(), vec
            )
        )
    return recs


def fingerprint_file(path) -> bytes:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).digest()


def save_artifact(path, records: list[DeltaLayerRecord], base_fingerprint: bytes) -> int:
    """Serialize records; returns total bytes written."""
    if len(base_fingerprint) != 32:
        raise ArtifactError("base fingerprint must be 32 bytes")
    names = [r.name for r in records]
    if len(set(names)) != len(names):
        raise ArtifactError("duplicate record names")
    body = [struct.pack("<I", ARTIFACT_VERSION), base_fingerprint,
            struct.pack("<I", len(records))]
    for r in records:
        nb = r.name.encode("utf-8")
        body.append(struct.pack("<I", len(nb)))
        body.append(nb)
        body.append(struct.pack("<BII", AXIS_CODE[r.axis], r.d_out, r.d_in))
        body.append(r.mask_bytes)
        body.append(r.vector.astype("<f2").tobytes())
    blob = b"".join(body)
    out = ARTIFACT_MAGIC + blob + hashlib.sha256(blob).digest()
    with open(path, "wb") as f:
        f.write(out)
    return len(out)


def expected_artifact_bytes(records: list[DeltaLayerRecord]) -> int:
    """Closed-form size of the serialized artifact."""
    return EMPTY_ARTIFACT_BYTES + sum(r.encoded_bytes() for r in records)


def _parse_artifact(blob: bytes, path="artifact") -> tuple[bytes, list[DeltaLayerRecord]]:
    if blob[:4] != ARTIFACT_MAGIC:
        raise ArtifactError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < EMPTY_ARTIFACT_BYTES:
        raise ArtifactError(f"{path}: truncated header")
    body, checksum = blob[4:-32], blob[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise ArtifactError(f"{path}: checksum mismatch")
    try:
        (version,) = struct.unpack_from("<I", body, 0)
        if version != ARTIFACT_VERSION:
            raise ArtifactError(f"{path}: unsupported version {version}")
        fingerprint = body[4:36]
        (count,) = struct.unpack_from("<I", body, 36)
        off = 40
        records = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            axis_code, d_out, d_in = struct.unpack_from("<BII", body, off)
            off += 9
            if axis_code not in AXIS_NAME:
                raise ArtifactError(f"{path}: bad axis byte {axis_code}")
            mask_len = d_out * ((d_in + 7) // 8)
            mask = body[off : off + mask_len]
            off += mask_len
            vlen = d_out if axis_code == 0 else d_in
            vec = np.frombuffer(body, dtype="<f2", count=vlen, offset=off)
            off += 2 * vlen
            if off > len(body):
                raise ArtifactError(f"{path}: truncated at offset {off}")
            records.append(
                DeltaLayerRecord(name, AXIS_NAME[axis_code], d_out, d_in, mask, vec)
            )
    except (struct.error, ValueError) as e:
        if isinstance(e, ArtifactError):
            raise
        raise ArtifactError(f"{path}: truncated or malformed body: {e}")
    return fingerprint, records


def load_artifact(path) -> tuple[bytes, list[DeltaLayerRecord]]:
    with open(path, "rb") as f:
        blob = f.read()
    return _parse_artifact(blob, str(path))


@dataclass
class TimingReport:
    read_s: float
    decode_s: float
    install_s: float
    bytes_read: int
    runs: int

    def lines(self) -> list[str]:
        return [
            f"phase=read mean_s={self.read_s:.6f}",
            f"phase=decode mean_s={self.decode_s:.6f}",
            f"phase=install mean_s={self.install_s:.6f}",
            f"bytes_read={self.bytes_read} runs={self.runs}",
        ]


def load_and_apply(
    base_model: ToyModel,
    artifact_path,
    expected_fingerprint: bytes | None = None,
    skip_fingerprint: bool = False,
    runs: int = 1,
) -> tuple[ToyModel, TimingReport]:
    """One bulk read, then decode + install every record over the base model.

    Patched layers get freshly reconstructed arrays; tensors the artifact
    does not touch are shared with `base_model` without copying, so the
    returned model's parameters must be treated as read-only.

    The fingerprint guard refuses to apply an artifact built against a
    different base container unless explicitly skipped. Timing is averaged
    over `runs` repetitions of the full read/decode/install cycle.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    t_read = t_decode = t_install = 0.0
    patched = None
    nbytes = 0
    for _ in range(runs):
        t0 = time.perf_counter()
        with open(artifact_path, "rb") as f:
            blob = f.read()
        t1 = time.perf_counter()
        fingerprint, records = _parse_artifact(blob, str(artifact_path))
        t2 = time.perf_counter()
        if not skip_fingerprint and expected_fingerprint is not None:
            if fingerprint != expected_fingerprint:
                raise FingerprintMismatch(
                    f"{artifact_path}: artifact base fingerprint "
                    f"{fingerprint.hex()[:16]}... does not match expected "
                    f"{expected_fingerprint.hex()[:16]}..."
                )
        patched_names = {r.name for r in records}
        # patched layers get fresh arrays below; unpatched tensors are shared
        # with the base model (zero-copy), so treat loaded params as read-only
        params = {
            name: w
            for name, w in base_model.params.items()
            if name not in patched_names
        }
        for r in records:
            if r.name not in base_model.params:
                raise ArtifactError(f"unknown layer name {r.name!r} in artifact")
            base_w = base_model.params[r.name]
            if base_w.shape != (r.d_out, r.d_in):
                raise ArtifactError(
                    f"{r.name}: artifact dims {(r.d_out, r.d_in)} != model {base_w.shape}"
                )
            # same arithmetic as codec.reconstruct, minus the per-record
            # wrapper objects: records were already validated during parsing.
            # bit b and scale v contribute (2b-1)*v, computed as b*(2v) - v,
            # exact either way since b is 0 or 1
            bits = np.frombuffer(r.mask_bytes, np.uint8).reshape(r.d_out, -1)
            out = np.unpackbits(
                bits, axis=1, count=r.d_in, bitorder="little"
            ).astype(np.float32)
            v32 = r.vector.astype(np.float32)
            bv = v32[:, None] if r.axis == "row" else v32[None, :]
            out *= bv + bv
            out -= bv
            out += base_w
            params[r.name] = out
        patched = ToyModel(base_model.spec, params)
        t3 = time.perf_counter()
        t_read += t1 - t0
        t_decode += t2 - t1
        t_install += t3 - t2
        nbytes = len(blob)
    report = TimingReport(t_read / runs, t_decode / runs, t_install / runs, nbytes, runs)
    return patched, report


# --- FP16 full-checkpoint format (comparison target) -------------------------


def write_fp16_checkpoint(path, model: ToyModel) -> int:
    """Serialize the full model at FP16 (same layout as TNC1, FP16 payload)."""
    entries = model_to_entries(model)
    parts = [FP16_MAGIC, struct.pack("<II", 1, len(entries))]
    for name, m in entries.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<II", m.shape[0], m.shape[1]))
        parts.append(np.clip(m, -65504, 65504).astype("<f2").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_fp16_checkpoint(path) -> ToyModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FP16_MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ContainerError(f"{path}: truncated at offset {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    _, count = struct.unpack("<II", take(8))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(2 * rows * cols), dtype="<f2")
        entries[name] = data.reshape(rows, cols).astype(np.float32)
    return entries_to_model(entries)


# --- size accounting ---------------------------------------------------------


@dataclass
class SizeReport:
    artifact_bytes: int
    fp16_checkpoint_bytes: int
    whole_model_ratio: float
    patched_payload_bytes: int
    patched_fp16_bytes: int
    patched_layers_ratio: float

    def lines(self) -> list[str]:
        return [
            f"artifact_bytes={self.artifact_bytes}",
            f"fp16_checkpoint_bytes={self.fp16_checkpoint_bytes}",
            f"whole_model_ratio={self.whole_model_ratio:.2f}",
            f"patched_payload_bytes={self.patched_payload_bytes}",
            f"patched_fp16_bytes={self.patched_fp16_bytes}",
            f"patched_layers_ratio={self.patched_layers_ratio:.2f}",
        ]


def size_report(artifact_path, base_container_entries: dict) -> SizeReport:
    """Compare artifact size against an FP16 serialization of the full model.

    FP16 checkpoint bytes are 2 bytes per parameter over all tensors
    (spec metadata entries excluded). The patched-layers ratio compares
    only the tensors the artifact replaces, payload to payload.
    """
    import os

    _, records = load_artifact(artifact_path)
    artifact_bytes = os.stat(artifact_path).st_size
    total_params = sum(
        int(np.prod(m.shape))
        for name, m in base_container_entries.items()
        if name != SPEC_ENTRY
    )
    fp16_bytes = 2 * total_params
    patched_payload = sum(r.payload_bytes() for r in records)
    patched_fp16 = sum(2 * r.d_out * r.d_in for r in records)
    return SizeReport(
        artifact_bytes,
        fp16_bytes,
        fp16_bytes / artifact_bytes if artifact_bytes else float("inf"),
        patched_payload,
        patched_fp16,
        patched_fp16 / patched_payload if patched_payload else float("inf"),
    )


# --- load benchmark ----------------------------------------------------------


@dataclass
class BenchRow:
    path: str  # "delta" | "full"
    run: int
    seconds: float
    bytes_read: int


@dataclass
class BenchResult:
    rows: list[BenchRow]

    def _times(self, which):
        return sorted(r.seconds for r in self.rows if r.path == which)

    def median(self, which) -> float:
        t = self._times(which)
        n = len(t)
        return t[n // 2] if n % 2 else 0.5 * (t[n // 2 - 1] + t[n // 2])

    def mean(self, which) -> float:
        t = self._times(which)
        return sum(t) / len(t)

    def bytes_read(self, which) -> int:
        return next(r.bytes_read for r in self.rows if r.path == which)

    def lines(self) -> list[str]:
        out = [f"path={r.path} run={r.run} seconds={r.seconds:.6f} bytes={r.bytes_read}"
               for r in self.rows]
        for which in ("delta", "full"):
            out.append(
                f"path={which} mean_s={self.mean(which):.6f} "
                f"median_s={self.median(which):.6f} bytes={self.bytes_read(which)}"
            )
        return out


def bench_load(
    base_model: ToyModel, artifact_path, full_ckpt_path, runs: int = 10
) -> BenchResult:
    """Warm-cache wall-clock comparison: delta apply vs full FP16 load."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    import os

    rows = []
    delta_bytes = os.stat(artifact_path).st_size
    full_bytes = os.stat(full_ckpt_path).st_size
    for run in range(runs):
        t0 = time.perf_counter()
        load_and_apply(base_model, artifact_path, skip_fingerprint=True)
        rows.append(BenchRow("delta", run, time.perf_counter() - t0, delta_bytes))
        t0 = time.perf_counter()
        read_fp16_checkpoint(full_ckpt_path)
        rows.append(BenchRow("full", run, time.perf_counter() - t0, full_bytes))
    return BenchResult(rows)
