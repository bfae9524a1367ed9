"""Mask source initialization."""
from .base import MaskSource
from .directory import DirectoryMaskSource
from .procedural import MaskGenParams, ProceduralMaskSource, generate_irregular_mask

__all__ = [
    "MaskSource",
    "DirectoryMaskSource",
    "MaskGenParams",
    "ProceduralMaskSource",
    "generate_irregular_mask",
]
