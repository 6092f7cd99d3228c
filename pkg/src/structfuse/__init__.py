"""Structure fusion for oriented-bounding-box part assemblies.

Merges noisy, misaligned, redundant or incomplete groups of oriented boxes by
iterating hierarchy inference and prior-guided local adjustment over a learned
discrete codebook of valid substructures.
"""

__version__ = "0.1.0"

from .geometry import OBB, SymmetryParams, obb_to_params, params_to_obb
from .structure import Hierarchy, Node

__all__ = [
    "OBB",
    "SymmetryParams",
    "Hierarchy",
    "Node",
    "obb_to_params",
    "params_to_obb",
    "__version__",
]
