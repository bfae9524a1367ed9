from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import cv2
import numpy as np

from . import numerics as nx
from .errors import DatasetError, EmptySubsetError, MaskBudgetError, MaskError, ShapeError
from .numerics import Tensor
from .sources import MaskGenParams, MaskSource, ProceduralMaskSource, generate_irregular_mask

logger = logging.getLogger(__name__)

HIGH = "high"
LOW = "low"
SUBSETS = (HIGH, LOW)
HIGH_THRESHOLD_PERCENT = 50.0
MANIFEST_NAME = "manifest.jsonl"
BUNDLE_NAME = "masks.bundle"

__all__ = [
    "Mask",
    "MaskSubsets",
    "MaskGenParams",
    "generate_irregular_mask",
    "binarize",
    "build_subsets",
    "apply_mask",
    "apply_masks",
    "sample_mask",
    "save_subsets",
    "load_subsets",
]


def zero_percentage(grid: np.ndarray) -> float:
    return 100.0 * float(np.count_nonzero(grid == 0)) / float(grid.size)


def subset_for(p: float) -> str:
    # Strictly greater than 50%: p == 50.0 is a low mask
    return HIGH if p > HIGH_THRESHOLD_PERCENT else LOW


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary H x W grid (0 = removed, 1 = kept) with its zero-pixel percentage.

    ``soft`` keeps the pre-threshold gray values when known; it is only used by
    the no-binarization ablation.
    """

    grid: np.ndarray
    p: float
    subset: str
    soft: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise ShapeError(f"mask grid must be 2-D, got shape {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise ValueError("mask grid must contain only 0 and 1")
        grid = grid.astype(np.uint8)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        expected_p = zero_percentage(grid)
        if self.p != expected_p:
            raise ValueError(f"mask p={self.p} does not match its grid ({expected_p})")
        if self.subset != subset_for(self.p):
            raise ValueError(f"mask with p={self.p} cannot belong to subset {self.subset!r}")
        if self.soft is not None:
            soft = np.asarray(self.soft, dtype=np.float64)
            if soft.shape != grid.shape:
                raise ShapeError(f"soft grid shape {soft.shape} != mask shape {grid.shape}")
            soft.setflags(write=False)
            object.__setattr__(self, "soft", soft)

    @classmethod
    def from_grid(cls, grid: np.ndarray, soft: Optional[np.ndarray] = None) -> "Mask":
        grid = np.asarray(grid).astype(np.uint8)
        p = zero_percentage(grid)
        return cls(grid, p, subset_for(p), soft)

    @classmethod
    def ones(cls, height: int, width: int) -> "Mask":
        return cls.from_grid(np.ones((height, width), dtype=np.uint8))

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.grid.shape)  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.subset == other.subset and self.p == other.p and np.array_equal(self.grid, other.grid)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class MaskSubsets:
    """The high (p > 50) and low (p <= 50) mask pools. Immutable once built."""

    high: Tuple[Mask, ...] = ()
    low: Tuple[Mask, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "high", tuple(self.high))
        object.__setattr__(self, "low", tuple(self.low))
        for name in SUBSETS:
            for i, mask in enumerate(getattr(self, name)):
                if mask.subset != name:
                    raise ValueError(f"{name}[{i}] has p={mask.p:.3f} and belongs to {mask.subset!r}")
        shapes = {m.shape for m in self.high + self.low}
        if len(shapes) > 1:
            raise ShapeError(f"all masks must share one shape, found {sorted(shapes)}")

    def get(self, which: str) -> Tuple[Mask, ...]:
        if which not in SUBSETS:
            raise ValueError(f"unknown mask subset {which!r}, expected one of {SUBSETS}")
        return getattr(self, which)

    @property
    def shape(self) -> Optional[Tuple[int, int]]:
        masks = self.high + self.low
        return masks[0].shape if masks else None

    def counts(self) -> Dict[str, int]:
        return {HIGH: len(self.high), LOW: len(self.low)}


def binarize(raw: np.ndarray, threshold: float = 0.5) -> Mask:
    """Threshold a gray mask: values >= threshold are kept (1), the rest removed (0)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ShapeError(f"raw mask must be 2-D, got shape {raw.shape}")
    if raw.size and (raw.min() < 0.0 or raw.max() > 1.0 or not np.isfinite(raw).all()):
        raise ValueError(f"raw mask values must lie in [0, 1], got [{raw.min()}, {raw.max()}]")
    grid = (raw >= threshold).astype(np.uint8)
    return Mask.from_grid(grid, soft=raw)


def build_subsets(
    count: int = 1000,
    params: Optional[MaskGenParams] = None,
    seed: int = 0,
    height: int = 64,
    width: int = 64,
    source: Optional[MaskSource] = None,
    budget_factor: int = 100,
    threshold: float = 0.5,
) -> MaskSubsets:
    """Draw masks until both subsets hold exactly ``count`` members.

    Masks landing in an already full subset are discarded. Raises
    MaskBudgetError when ``budget_factor * 2 * count`` draws (or the source)
    run out first.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if budget_factor < 1:
        raise ValueError(f"budget_factor must be >= 1, got {budget_factor}")
    source = source or ProceduralMaskSource(height, width, params, seed)
    pools: Dict[str, List[Mask]] = {HIGH: [], LOW: []}
    budget = budget_factor * 2 * count
    attempts = 0
    while any(len(pool) < count for pool in pools.values()):
        if attempts >= budget:
            break
        raw = source.draw(attempts)
        attempts += 1
        if raw is None:
            break
        mask = binarize(raw, threshold)
        pool = pools[mask.subset]
        if len(pool) < count:
            pool.append(mask)

    short = [name for name in SUBSETS if len(pools[name]) < count]
    if short:
        detail = ", ".join(f"{name} {len(pools[name])}/{count}" for name in short)
        raise MaskBudgetError(
            f"could not fill mask subset(s) after {attempts} draws from {source.describe()}: {detail}"
        )
    logger.info(
        f"Built mask subsets ({count} high, {count} low) in {attempts} draws",
        extra={"event": "subsets_built", "count": count, "attempts": attempts},
    )
    return MaskSubsets(tuple(pools[HIGH]), tuple(pools[LOW]))


ImageT = TypeVar("ImageT", np.ndarray, Tensor)


def apply_mask(image: ImageT, mask: Mask, soft: bool = False) -> ImageT:
    """I_masked = I * M: the same H x W mask multiplies every channel.

    With ``soft=True`` the pre-threshold gray mask is used instead (ablation);
    a mask without gray values raises MaskError. The input is never modified.
    """
    shape = image.shape
    if len(shape) != 3 or tuple(shape[1:]) != mask.shape:
        raise ShapeError(f"apply_mask: image {tuple(shape)} does not match mask {mask.shape}")
    if soft:
        if mask.soft is None:
            raise MaskError(
                f"soft masking needs gray mask values but this {mask.subset} mask (p={mask.p:.2f}) "
                "only has its binary grid; load masks from the bundle or a mask source"
            )
        weights = mask.soft
    else:
        weights = mask.grid.astype(np.float64)
    if isinstance(image, Tensor):
        return nx.mul(image, Tensor(np.broadcast_to(weights, shape)))
    return np.asarray(image, dtype=np.float64) * weights[None, :, :]


def apply_masks(images: np.ndarray, masks: Sequence[Mask], soft: bool = False) -> np.ndarray:
    """Mask an N x C x H x W batch, one mask per image."""
    if images.ndim != 4 or len(masks) != images.shape[0]:
        raise ShapeError(f"apply_masks: {len(masks)} masks for batch of shape {images.shape}")
    return np.stack([apply_mask(img, m, soft) for img, m in zip(images, masks)])


def sample_mask(subsets: MaskSubsets, which: str, rng: np.random.Generator) -> Mask:
    pool = subsets.get(which)
    if not pool:
        raise EmptySubsetError(f"cannot sample from empty {which!r} mask subset")
    return pool[int(rng.integers(len(pool)))]


# ==================== Mask directories ====================

def save_subsets(
    subsets: MaskSubsets,
    root: Union[str, Path],
    compression: str = "gzip",
    write_bundle: bool = True,
) -> Path:
    """Write ``high/`` and ``low/`` PNGs (0 / 255), ``manifest.jsonl`` and a bundle."""
    from .serializers import pack_subsets

    root = Path(root)
    lines = []
    for name in SUBSETS:
        (root / name).mkdir(parents=True, exist_ok=True)
        for i, mask in enumerate(subsets.get(name)):
            rel = f"{name}/mask_{i:05d}.png"
            if not cv2.imwrite(str(root / rel), mask.grid * np.uint8(255)):
                raise OSError(f"failed to write {root / rel}")
            lines.append(json.dumps({"filename": rel, "p": mask.p, "subset": mask.subset}, sort_keys=True))
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if write_bundle:
        (root / BUNDLE_NAME).write_bytes(pack_subsets(subsets, compression=compression))
    logger.info(f"Saved {len(lines)} masks to {root}")
    return root


def load_subsets(
    root: Union[str, Path],
    expected_count: Optional[int] = None,
    prefer_bundle: bool = True,
) -> MaskSubsets:
    """Load a directory written by :func:`save_subsets` and re-check every invariant."""
    from .serializers import unpack_subsets

    root = Path(root)
    bundle = root / BUNDLE_NAME
    if prefer_bundle and bundle.is_file():
        subsets = unpack_subsets(bundle.read_bytes())
    else:
        manifest = root / MANIFEST_NAME
        if not manifest.is_file():
            raise DatasetError(f"mask manifest not found: {manifest}")
        pools: Dict[str, List[Mask]] = {HIGH: [], LOW: []}
        for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            img = cv2.imread(str(root / record["filename"]), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise DatasetError(f"{manifest}:{lineno}: cannot read {record['filename']}")
            mask = Mask.from_grid((img >= 128).astype(np.uint8))
            if mask.p != float(record["p"]) or mask.subset != record["subset"]:
                raise DatasetError(
                    f"{manifest}:{lineno}: manifest says p={record['p']} ({record['subset']}), "
                    f"image has p={mask.p} ({mask.subset})"
                )
            pools[mask.subset].append(mask)
        subsets = MaskSubsets(tuple(pools[HIGH]), tuple(pools[LOW]))
    if expected_count is not None:
        counts = subsets.counts()
        if any(n != expected_count for n in counts.values()):
            raise DatasetError(f"expected {expected_count} masks per subset, found {counts}")
    return subsets
