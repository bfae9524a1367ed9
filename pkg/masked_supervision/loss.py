from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union, overload

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .numerics import Tensor

PRESETS: Dict[str, Tuple[float, float, float]] = {
    "vanilla": (1.0, 0.0, 0.0),
    "mabr": (1.0, 1.0, 0.0),
    "laco": (1.0, 0.0, 1.0),
    "msl": (0.3, 0.2, 0.5),
}

# Trade-off grid swept by the hyperparameter sensitivity ablation
SENSITIVITY_GRID: List[Tuple[float, float, float]] = [
    (1.0, 1.0, 1.0),
    (0.2, 0.2, 0.6),
    (0.3, 0.3, 0.4),
    (0.4, 0.4, 0.2),
    (0.3, 0.2, 0.5),
]


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights of the recognition, masked-branch and consistency terms."""

    alpha1: float = 0.3
    alpha2: float = 0.2
    alpha3: float = 0.5

    def __post_init__(self) -> None:
        for name in ("alpha1", "alpha2", "alpha3"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite value >= 0, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name not in PRESETS:
            raise ValueError(f"unknown loss preset {name!r}, expected one of {sorted(PRESETS)}")
        return cls(*PRESETS[name])

    @classmethod
    def parse(cls, value: Union[str, "LossWeights", Tuple[float, float, float], List[float]]) -> "LossWeights":
        """Accept a preset name, ``"a1,a2,a3"`` or a 3-sequence."""
        if isinstance(value, LossWeights):
            return value
        if isinstance(value, str):
            if value in PRESETS:
                return cls.preset(value)
            parts = [p for p in value.replace(" ", "").split(",") if p]
            if len(parts) != 3:
                raise ValueError(f"loss weights must be a preset or 'a1,a2,a3', got {value!r}")
            return cls(*(float(p) for p in parts))
        if len(value) != 3:
            raise ValueError(f"loss weights need three values, got {value!r}")
        return cls(*(float(v) for v in value))

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.alpha1, self.alpha2, self.alpha3)

    @property
    def uses_masked_branch(self) -> bool:
        return self.alpha2 > 0 or self.alpha3 > 0

    @overload
    def combine(self, rcg: float, mabr: float, laco: float) -> float: ...

    @overload
    def combine(self, rcg: Tensor, mabr: Tensor, laco: Tensor) -> Tensor: ...

    def combine(self, rcg, mabr, laco):  # type: ignore[no-untyped-def]
        """alpha1 * rcg + alpha2 * mabr + alpha3 * laco, for floats or scalar tensors."""
        if isinstance(rcg, Tensor):
            return nx.add(
                nx.add(nx.scale(rcg, self.alpha1), nx.scale(mabr, self.alpha2)),
                nx.scale(laco, self.alpha3),
            )
        return self.alpha1 * rcg + self.alpha2 * mabr + self.alpha3 * laco


@dataclass(frozen=True)
class LossBreakdown:
    rcg: float
    mabr: float
    laco: float
    total: float
    tensor: Optional[Tensor] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> Dict[str, float]:
        return {"rcg": self.rcg, "mabr": self.mabr, "laco": self.laco, "total": self.total}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.rcg, self.mabr, self.laco, self.total))


def _check_targets(target: np.ndarray) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce targets must be 0 or 1")
    return t


def bce(pred: Tensor, target: Union[np.ndarray, Tensor]) -> Tensor:
    """Mean binary cross-entropy over all N x K entries.

    Predictions produced by :func:`numerics.sigmoid` are scored through their
    logits in the fused stable form; any other tensor is clamped to
    [1e-12, 1 - 1e-12].
    """
    t = _check_targets(target.data if isinstance(target, Tensor) else target)
    logits = getattr(pred, "_logits", None)
    if logits is not None:
        return nx.binary_cross_entropy_with_logits(logits, t)
    return nx.binary_cross_entropy(pred, t)


def laco(y_p: Tensor, y_mp: Tensor) -> Tensor:
    """Label consistency: per-sample squared L2 distance summed over classes, batch mean."""
    if y_p.shape != y_mp.shape:
        raise ShapeError(f"laco: shapes {y_p.shape} and {y_mp.shape} differ")
    n = y_p.shape[0] if y_p.ndim > 1 else 1
    return nx.scale(nx.sum(nx.square(nx.sub(y_p, y_mp))), 1.0 / n)


def total_loss(
    y_p: Tensor,
    y_mp: Optional[Tensor],
    y_gt: Union[np.ndarray, Tensor],
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of the three terms.

    ``y_mp=None`` means the masked branch was not run; its two terms are 0.
    """
    if not isinstance(weights, LossWeights):
        raise TypeError(f"weights must be LossWeights, got {type(weights).__name__}")
    rcg_t = bce(y_p, y_gt)
    if y_mp is None:
        mabr_t = Tensor(0.0)
        laco_t = Tensor(0.0)
    else:
        if y_mp.shape != y_p.shape:
            raise ShapeError(f"total_loss: y_p {y_p.shape} and y_mp {y_mp.shape} differ")
        mabr_t = bce(y_mp, y_gt)
        laco_t = laco(y_p, y_mp)
    total_t = weights.combine(rcg_t, mabr_t, laco_t)
    return LossBreakdown(
        rcg=rcg_t.item(),
        mabr=mabr_t.item(),
        laco=laco_t.item(),
        total=total_t.item(),
        tensor=total_t,
    )
