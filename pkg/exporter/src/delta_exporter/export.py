"""Export: read a source checkpoint, apply the manifest, write a container."""

from __future__ import annotations

import numpy as np

from .container import write_tensor_container
from .manifest import Manifest, ManifestError
from .readers import read_checkpoint

# float32 upcast is exact for these source dtypes
_EXACT_UPCASTS = (np.float16, np.float32)


class ExportError(ValueError):
    """Source checkpoint incompatible with the manifest."""


def convert_dtype(name: str, array: np.ndarray) -> np.ndarray:
    """Apply the fp32 policy: exact upcast from 16/32-bit floats,
    value-preserving downcast from float64 (with a finiteness check)."""
    if not np.issubdtype(array.dtype, np.floating):
        raise ExportError(f"{name}: non-float dtype {array.dtype} cannot be exported")
    out = array.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise ExportError(f"{name}: values overflow or are non-finite in float32")
    return out


def export_entries(
    source_entries: dict[str, np.ndarray], manifest: Manifest
) -> dict[str, np.ndarray]:
    """Map, filter, and convert a loaded checkpoint to canonical entries."""
    selected = {
        name: arr for name, arr in source_entries.items() if manifest.selects(name)
    }
    missing = [s for s in manifest.mappings if s not in source_entries]
    if missing:
        raise ExportError(f"mapped source tensors missing from checkpoint: {missing}")
    out: dict[str, np.ndarray] = {}
    for name, arr in selected.items():
        target = manifest.target_name(name)
        if target in out:
            raise ExportError(f"duplicate exported name {target!r}")
        if arr.ndim != 2:
            raise ExportError(
                f"{name}: mapped to {target!r} but has shape {arr.shape}; "
                "only 2-D tensors can be exported"
            )
        out[target] = convert_dtype(name, arr)
    if not out:
        raise ExportError("manifest selected no tensors to export")
    return out


def export_checkpoint(source_path, out_path, manifest: Manifest) -> int:
    """Full pipeline: read source, transform, write TNC1. Returns bytes."""
    entries = export_entries(read_checkpoint(source_path), manifest)
    return write_tensor_container(out_path, entries)
