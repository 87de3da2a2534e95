"""Bridge between PyTorch checkpoints and EXTS checkpoint containers."""

from .container import ContainerBundle, ContainerFormatError, read_container, write_container
from .convert import (
    ConvertError,
    NameMap,
    export_checkpoint,
    export_to_file,
    import_checkpoint,
    import_to_file,
)

__all__ = [
    "ContainerBundle",
    "ContainerFormatError",
    "ConvertError",
    "NameMap",
    "export_checkpoint",
    "export_to_file",
    "import_checkpoint",
    "import_to_file",
    "read_container",
    "write_container",
]
