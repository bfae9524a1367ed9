from __future__ import annotations

from typing import Optional, Protocol, Tuple

import numpy as np


class MaskSource(Protocol):
    """Interface for raw mask producers."""

    @property
    def shape(self) -> Tuple[int, int]:
        """(H, W) of every mask this source yields."""
        ...

    def draw(self, index: int) -> Optional[np.ndarray]:
        """Return raw mask ``index`` as float64 in [0, 1], or None once exhausted."""
        ...

    def describe(self) -> str:
        """Short human-readable description for logs."""
        ...
