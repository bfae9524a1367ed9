from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .base import MaskSource

Range = Tuple[int, int]
Seed = Union[int, Sequence[int]]


@dataclass(frozen=True)
class MaskGenParams:
    """Ranges (inclusive) for the random streaks-and-holes generator, in pixels."""

    n_strokes: Range = (1, 10)
    n_vertices: Range = (4, 10)
    step_length: Range = (4, 16)
    brush_width: Range = (2, 8)
    n_holes: Range = (0, 5)
    hole_radius: Range = (3, 14)
    max_turn_degrees: float = 90.0
    # Gray level of untouched pixels in the raw mask; binarization maps it to 1
    soft_keep: float = 0.884

    def __post_init__(self) -> None:
        for name in ("n_strokes", "n_vertices", "step_length", "brush_width", "n_holes", "hole_radius"):
            value = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != 2:
                raise ValueError(f"{name} must be a (low, high) pair, got {value}")
            lo, hi = value
            if lo < 0 or lo > hi:
                raise ValueError(f"degenerate range {name}={value}: need 0 <= low <= high")
        if self.n_strokes[1] > 0:
            if self.n_vertices[0] < 1:
                raise ValueError(f"n_vertices must start at >= 1, got {self.n_vertices}")
            if self.brush_width[0] < 1:
                raise ValueError(f"brush_width must start at >= 1, got {self.brush_width}")
        if self.n_holes[1] > 0 and self.hole_radius[0] < 1:
            raise ValueError(f"hole_radius must start at >= 1, got {self.hole_radius}")
        if not 0.0 <= self.max_turn_degrees <= 180.0:
            raise ValueError(f"max_turn_degrees must be in [0, 180], got {self.max_turn_degrees}")
        if not 0.0 < self.soft_keep <= 1.0:
            raise ValueError(f"soft_keep must be in (0, 1], got {self.soft_keep}")


def generate_irregular_mask(
    height: int, width: int, params: Optional[MaskGenParams] = None, seed: Seed = 0
) -> np.ndarray:
    """Raw gray mask in [0, 1]: ``soft_keep`` = kept, 0 = removed, anti-aliased edges in between.

    Starts untouched, then removes random-walk streaks and filled elliptical holes.
    Deterministic given ``seed``.
    """
    if height < 8 or width < 8:
        raise ValueError(f"mask canvas must be at least 8x8, got {height}x{width}")
    params = params or MaskGenParams()
    rng = np.random.default_rng(seed)
    canvas = np.full((height, width), 255, dtype=np.uint8)

    max_turn = math.radians(params.max_turn_degrees)
    for _ in range(int(rng.integers(params.n_strokes[0], params.n_strokes[1] + 1))):
        x = rng.uniform(0, width - 1)
        y = rng.uniform(0, height - 1)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        brush = int(rng.integers(params.brush_width[0], params.brush_width[1] + 1))
        for _ in range(int(rng.integers(params.n_vertices[0], params.n_vertices[1] + 1))):
            angle += rng.uniform(-max_turn, max_turn)
            length = rng.uniform(params.step_length[0], params.step_length[1])
            nx_ = float(np.clip(x + length * math.cos(angle), 0, width - 1))
            ny_ = float(np.clip(y + length * math.sin(angle), 0, height - 1))
            cv2.line(
                canvas,
                (int(round(x)), int(round(y))),
                (int(round(nx_)), int(round(ny_))),
                0,
                brush,
                cv2.LINE_AA,
            )
            x, y = nx_, ny_

    for _ in range(int(rng.integers(params.n_holes[0], params.n_holes[1] + 1))):
        center = (int(rng.integers(0, width)), int(rng.integers(0, height)))
        axes = (
            int(rng.integers(params.hole_radius[0], params.hole_radius[1] + 1)),
            int(rng.integers(params.hole_radius[0], params.hole_radius[1] + 1)),
        )
        rotation = float(rng.uniform(0.0, 180.0))
        cv2.ellipse(canvas, center, axes, rotation, 0, 360, 0, -1, cv2.LINE_AA)

    return canvas.astype(np.float64) / 255.0 * params.soft_keep


class ProceduralMaskSource(MaskSource):
    """Endless seeded stream: mask ``i`` is generated from seed ``(seed, i)``."""

    def __init__(
        self,
        height: int = 64,
        width: int = 64,
        params: Optional[MaskGenParams] = None,
        seed: int = 0,
    ) -> None:
        self._shape = (int(height), int(width))
        self.params = params or MaskGenParams()
        self.seed = int(seed)
        # Fail fast on an unusable canvas
        if min(self._shape) < 8:
            raise ValueError(f"mask canvas must be at least 8x8, got {height}x{width}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self._shape

    def draw(self, index: int) -> Optional[np.ndarray]:
        return generate_irregular_mask(self._shape[0], self._shape[1], self.params, (self.seed, index))

    def describe(self) -> str:
        return f"procedural {self._shape[0]}x{self._shape[1]} seed={self.seed}"
