"""Function-level debloating toolchain for a toy module format.

Pipeline: IR (`ir`) → dependency graphs (`depgraph`, `pta`) → module
containers (`pwof`) → loading and removal (`loader`) → execution oracle
(`vm`) → measurement (`gadgets`, `study`).  `cli` exposes the command-line
tools.
"""

__version__ = "0.1.0"

__all__ = [
    "ir", "depgraph", "pta", "pwof", "loader", "vm", "gadgets", "study",
    "cli", "errors", "__version__",
]
