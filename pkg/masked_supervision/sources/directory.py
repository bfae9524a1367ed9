from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import cv2
import numpy as np

from .base import MaskSource

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DirectoryMaskSource(MaskSource):
    """External masks (e.g. an irregular-mask dataset) read as 8-bit grayscale.

    Files are taken in sorted path order and nearest-neighbour resized to the
    training resolution, so thresholding afterwards still yields strict {0, 1}.
    """

    def __init__(
        self,
        root: Union[str, Path],
        height: int = 64,
        width: int = 64,
        invert: bool = False,
    ) -> None:
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"mask directory not found: {self.root}")
        self._shape = (int(height), int(width))
        # Some public mask sets mark holes as white; invert=True maps them to 0
        self.invert = invert
        self._files: List[Path] = sorted(
            p for p in self.root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES
        )
        logger.info(f"Found {len(self._files)} mask images under {self.root}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self._shape

    def __len__(self) -> int:
        return len(self._files)

    def draw(self, index: int) -> Optional[np.ndarray]:
        if index >= len(self._files):
            return None
        path = self._files[index]
        img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise OSError(f"cannot decode mask image {path}")
        h, w = self._shape
        if img.shape != (h, w):
            img = cv2.resize(img, (w, h), interpolation=cv2.INTER_NEAREST)
        raw = img.astype(np.float64) / 255.0
        return 1.0 - raw if self.invert else raw

    def describe(self) -> str:
        return f"directory {self.root} ({len(self._files)} files)"
