from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Dict, Sequence

from .loss import LossBreakdown


@dataclass
class EpochStats:
    """Thread-safe running totals for one training epoch.

    Loss components are averaged per sample, so a short last batch weighs less.
    """

    steps: int = 0
    samples: int = 0
    aborted_steps: int = 0
    rcg_sum: float = 0.0
    mabr_sum: float = 0.0
    laco_sum: float = 0.0
    total_sum: float = 0.0
    masked_pixels_sum: float = 0.0
    masked_images: int = 0
    start_time: float = field(default_factory=time.time)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_step(self, breakdown: LossBreakdown, batch_size: int) -> None:
        with self._lock:
            self.steps += 1
            self.samples += batch_size
            self.rcg_sum += breakdown.rcg * batch_size
            self.mabr_sum += breakdown.mabr * batch_size
            self.laco_sum += breakdown.laco * batch_size
            self.total_sum += breakdown.total * batch_size

    def record_masks(self, zero_percentages: Sequence[float]) -> None:
        """Track the share of removed pixels (0-100) over the masks applied this epoch."""
        with self._lock:
            self.masked_pixels_sum += float(sum(zero_percentages))
            self.masked_images += len(zero_percentages)

    def record_abort(self) -> None:
        with self._lock:
            self.aborted_steps += 1

    def _mean(self, total: float) -> float:
        return total / self.samples if self.samples > 0 else 0.0

    @property
    def mean_total(self) -> float:
        with self._lock:
            return self._mean(self.total_sum)

    def means(self) -> Dict[str, float]:
        with self._lock:
            return {
                "rcg": self._mean(self.rcg_sum),
                "mabr": self._mean(self.mabr_sum),
                "laco": self._mean(self.laco_sum),
                "total": self._mean(self.total_sum),
            }

    @property
    def elapsed_seconds(self) -> float:
        return time.time() - self.start_time

    def reset(self) -> None:
        with self._lock:
            self.steps = 0
            self.samples = 0
            self.aborted_steps = 0
            self.rcg_sum = self.mabr_sum = self.laco_sum = self.total_sum = 0.0
            self.masked_pixels_sum = 0.0
            self.masked_images = 0
            self.start_time = time.time()

    def to_dict(self) -> dict:
        """Export as a plain dict (wall-clock time included, so not for reproducible logs)."""
        means = self.means()
        with self._lock:
            return {
                "steps": self.steps,
                "samples": self.samples,
                "aborted_steps": self.aborted_steps,
                **means,
                "mean_masked_percent": (
                    self.masked_pixels_sum / self.masked_images if self.masked_images else 0.0
                ),
                "elapsed_seconds": self.elapsed_seconds,
            }
