"""Source checkpoint readers, selected by file extension.

Supported: .tnc (TNC1 container), .npz (numpy archive), .safetensors, and
.pt/.pth/.bin (torch pickled state dicts). torch and safetensors are
imported lazily so the exporter works without them for the other formats.

Readers return name -> array mappings in the source's own dtypes; dtype
conversion happens at export time under the manifest's policy.
"""

from __future__ import annotations

import numpy as np

from .container import read_tensor_container


class SourceFormatError(ValueError):
    """Unreadable or unsupported source checkpoint."""


def _read_npz(path) -> dict[str, np.ndarray]:
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}


def _read_safetensors(path) -> dict[str, np.ndarray]:
    try:
        from safetensors.numpy import load_file
    except ImportError:
        raise SourceFormatError(
            f"{path}: reading .safetensors requires the safetensors package"
        )
    return load_file(path)


def _read_torch(path) -> dict[str, np.ndarray]:
    try:
        import torch
    except ImportError:
        raise SourceFormatError(f"{path}: reading {path} requires the torch package")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(state, dict):
        raise SourceFormatError(f"{path}: expected a state dict, got {type(state)}")
    out = {}
    for name, tensor in state.items():
        if not torch.is_tensor(tensor):
            raise SourceFormatError(f"{path}: entry {name!r} is not a tensor")
        # bfloat16 has no numpy equivalent; upcast through float32 (exact)
        if tensor.dtype == torch.bfloat16:
            tensor = tensor.float()
        out[name] = tensor.numpy()
    return out


_READERS = {
    ".tnc": read_tensor_container,
    ".npz": _read_npz,
    ".safetensors": _read_safetensors,
    ".pt": _read_torch,
    ".pth": _read_torch,
    ".bin": _read_torch,
}


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Load any supported checkpoint into a name -> array dict."""
    from os.path import splitext

    ext = splitext(str(path))[1].lower()
    reader = _READERS.get(ext)
    if reader is None:
        raise SourceFormatError(
            f"{path}: unsupported checkpoint format {ext!r}; "
            f"supported: {', '.join(sorted(_READERS))}"
        )
    return reader(path)
