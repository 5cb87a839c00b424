"""Bridge between ecosystem checkpoint containers and TSA1 archives."""

from .containers import (ContainerError, read_safetensors, read_torch_checkpoint,
                         sniff_format, write_safetensors)
from .convert import ConversionManifest, ManifestError, from_tsa, to_tsa
from .tsa import TsaError, read_tsa, write_tsa

__version__ = "0.1.0"

__all__ = [
    "ContainerError", "read_safetensors", "read_torch_checkpoint",
    "sniff_format", "write_safetensors",
    "ConversionManifest", "ManifestError", "from_tsa", "to_tsa",
    "TsaError", "read_tsa", "write_tsa",
]
