"""delta-exporter: convert ecosystem checkpoint formats into the TNC1
tensor container consumed by the delta-compression toolkit."""

from .container import (
    ContainerFormatError,
    read_tensor_container,
    write_tensor_container,
)
from .export import ExportError, export_checkpoint, export_entries
from .manifest import Manifest, ManifestError
from .readers import SourceFormatError, read_checkpoint

__all__ = [
    "ContainerFormatError",
    "read_tensor_container",
    "write_tensor_container",
    "ExportError",
    "export_checkpoint",
    "export_entries",
    "Manifest",
    "ManifestError",
    "SourceFormatError",
    "read_checkpoint",
]

__version__ = "0.1.0"
