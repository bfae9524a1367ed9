from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image, ImageDraw

from .errors import DatasetError

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (225, 45, 45),
    "blue": (45, 95, 235),
}
MAX_CLASSES = len(SHAPES) * len(COLORS)
OVERLAP_POLICIES = ("none", "random", "controlled")
SPLITS = ("train", "test")
MANIFEST_FORMAT = "msl-dataset"
MANIFEST_VERSION = 1
STRATA = ("small", "non_small", "occluded", "non_occluded")


def class_vocabulary(num_classes: int) -> List[Tuple[str, str]]:
    """First ``num_classes`` (shape, color) pairs, color-major."""
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}], got {num_classes}")
    pairs = [(shape, color) for color in COLORS for shape in SHAPES]
    return pairs[:num_classes]


def class_names(num_classes: int) -> List[str]:
    return [f"{color}_{shape}" for shape, color in class_vocabulary(num_classes)]


def default_small_threshold(width: int) -> int:
    """12 px on a 64 px wide canvas, scaled linearly."""
    return int(round(12 * width / 64))


@dataclass
class DatasetConfig:
    """Synthetic occluded-shapes dataset parameters.

    ``size_range`` is the bounding-box side in pixels. ``small_threshold``
    defaults to 12 px scaled to the canvas width (12 at 64 x 64).
    """

    n: int = 400
    n_test: int = 100
    num_classes: int = 8
    height: int = 64
    width: int = 64
    size_range: Tuple[int, int] = (6, 24)
    objects_range: Tuple[int, int] = (1, 4)
    overlap: str = "controlled"
    occlusion_target: float = 0.25
    occlusion_threshold: float = 0.3
    max_occlusion: float = 0.8
    small_threshold: Optional[int] = None
    small_fraction: Optional[float] = None
    background_noise: float = 0.03
    placement_attempts: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        self.size_range = tuple(int(v) for v in self.size_range)  # type: ignore[assignment]
        self.objects_range = tuple(int(v) for v in self.objects_range)  # type: ignore[assignment]
        if self.small_threshold is None:
            self.small_threshold = default_small_threshold(self.width)

        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.n_test < 0:
            raise ValueError(f"n_test must be >= 0, got {self.n_test}")
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}], got {self.num_classes}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"canvas must be at least 8x8, got {self.height}x{self.width}")
        s_min, s_max = self.size_range
        if s_min < 3:
            raise ValueError(f"size_range minimum must be >= 3 px, got {s_min}")
        if s_min > s_max:
            raise ValueError(f"size_range must be (min, max) with min <= max, got {self.size_range}")
        if s_max > min(self.height, self.width):
            raise ValueError(
                f"size_range maximum {s_max} does not fit a {self.height}x{self.width} canvas"
            )
        lo, hi = self.objects_range
        if lo < 1 or lo > hi:
            raise ValueError(f"objects_range must satisfy 1 <= min <= max, got {self.objects_range}")
        if self.overlap not in OVERLAP_POLICIES:
            raise ValueError(f"overlap must be one of {OVERLAP_POLICIES}, got {self.overlap!r}")
        if not 0.0 <= self.occlusion_target <= 1.0:
            raise ValueError(f"occlusion_target must be in [0, 1], got {self.occlusion_target}")
        if not 0.0 < self.occlusion_threshold < self.max_occlusion <= 1.0:
            raise ValueError(
                "need 0 < occlusion_threshold < max_occlusion <= 1, got "
                f"{self.occlusion_threshold} and {self.max_occlusion}"
            )
        if self.small_fraction is not None:
            if not 0.0 <= self.small_fraction <= 1.0:
                raise ValueError(f"small_fraction must be in [0, 1], got {self.small_fraction}")
            if not s_min <= self.small_threshold < s_max:
                raise ValueError(
                    f"small_fraction needs small_threshold ({self.small_threshold}) inside size_range"
                )
        if self.background_noise < 0:
            raise ValueError(f"background_noise must be >= 0, got {self.background_noise}")
        if self.placement_attempts < 1:
            raise ValueError(f"placement_attempts must be >= 1, got {self.placement_attempts}")

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["size_range"] = list(self.size_range)
        out["objects_range"] = list(self.objects_range)
        return out


@dataclass(frozen=True)
class ObjectMeta:
    class_id: int
    size: int
    x: int
    y: int
    occlusion_fraction: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Sample:
    """One image (3 x H x W, values in [0, 1]) with its multi-hot labels."""

    id: str
    image: np.ndarray
    labels: np.ndarray
    objects: Optional[Tuple[ObjectMeta, ...]] = None


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    labels: Tuple[int, ...]
    objects: Optional[Tuple[ObjectMeta, ...]] = None

    def to_json(self) -> str:
        payload: Dict[str, Any] = {"kind": "record", "id": self.id, "path": self.path, "labels": list(self.labels)}
        if self.objects is not None:
            payload["objects"] = [o.to_dict() for o in self.objects]
        return json.dumps(payload, sort_keys=True)


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: List[str]
    split: str
    records: List[ManifestRecord]
    seed: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)
    height: int = 64
    width: int = 64
    small_threshold: int = 12
    occlusion_threshold: float = 0.3
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.records)

    def strata_counts(self) -> Dict[str, int]:
        flags = strata_flags([r.objects for r in self.records], self.small_threshold, self.occlusion_threshold)
        return {name: int(v.sum()) for name, v in flags.items()}

    def header(self) -> Dict[str, Any]:
        return {
            "kind": "header",
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "split": self.split,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "seed": self.seed,
            "params": self.params,
            "height": self.height,
            "width": self.width,
            "small_threshold": self.small_threshold,
            "occlusion_threshold": self.occlusion_threshold,
        }

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines.extend(r.to_json() for r in self.records)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"manifest not found: {path}")
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise DatasetError(f"manifest is empty: {path}")
        try:
            header = json.loads(lines[0])
            records_raw = [json.loads(ln) for ln in lines[1:]]
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: invalid JSON ({e})") from e
        if header.get("format") != MANIFEST_FORMAT or header.get("kind") != "header":
            raise DatasetError(f"{path}: missing dataset manifest header")
        k = int(header["num_classes"])
        records = []
        for lineno, raw in enumerate(records_raw, start=2):
            labels = tuple(int(v) for v in raw["labels"])
            if len(labels) != k or any(v not in (0, 1) for v in labels):
                raise DatasetError(f"{path}:{lineno}: labels must be {k} values in {{0, 1}}")
            if not any(labels):
                raise DatasetError(f"{path}:{lineno}: label vector has no positive class")
            objects = None
            if "objects" in raw:
                objects = tuple(ObjectMeta(**o) for o in raw["objects"])
            records.append(ManifestRecord(raw["id"], raw["path"], labels, objects))
        return cls(
            num_classes=k,
            class_names=list(header["class_names"]),
            split=header["split"],
            records=records,
            seed=header.get("seed"),
            params=header.get("params", {}),
            height=int(header["height"]),
            width=int(header["width"]),
            small_threshold=int(header.get("small_threshold", 12)),
            occlusion_threshold=float(header.get("occlusion_threshold", 0.3)),
            root=path.parent,
        )


# ==================== Rasterization ====================

def _footprint(shape: str, x: int, y: int, s: int, height: int, width: int) -> np.ndarray:
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    x1, y1 = x + s - 1, y + s - 1
    if shape == "circle":
        draw.ellipse([x, y, x1, y1], fill=255)
    elif shape == "square":
        draw.rectangle([x, y, x1, y1], fill=255)
    elif shape == "triangle":
        draw.polygon([(x + (s - 1) / 2.0, y), (x1, y1), (x, y1)], fill=255)
    elif shape == "cross":
        t = max(1, s // 3)
        lo = (s - t) // 2
        draw.rectangle([x + lo, y, x + lo + t - 1, y1], fill=255)
        draw.rectangle([x, y + lo, x1, y + lo + t - 1], fill=255)
    elif shape == "ring":
        draw.ellipse([x, y, x1, y1], outline=255, width=max(1, s // 4))
    elif shape == "bar":
        t = max(2, s // 3)
        lo = (s - t) // 2
        draw.rectangle([x, y + lo, x1, y + lo + t - 1], fill=255)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mask = np.asarray(canvas) > 0
    if not mask.any():
        mask = mask.copy()
        mask[y, x] = True
    return mask


def _occlusions(footprints: Sequence[np.ndarray]) -> List[float]:
    """Fraction of each footprint overdrawn by footprints that come later in z-order."""
    out = [0.0] * len(footprints)
    covered = np.zeros_like(footprints[0]) if footprints else None
    for i in range(len(footprints) - 1, -1, -1):
        fp = footprints[i]
        out[i] = float(np.count_nonzero(fp & covered)) / float(np.count_nonzero(fp))
        covered = covered | fp
    return out


class _ImageComposer:
    """Places the objects of one image under an overlap policy."""

    def __init__(self, config: DatasetConfig, rng: np.random.Generator) -> None:
        self.cfg = config
        self.rng = rng
        self.vocab = class_vocabulary(config.num_classes)

    def _size(self, lo: Optional[int] = None) -> int:
        s_min, s_max = self.cfg.size_range
        lo = s_min if lo is None else max(s_min, min(lo, s_max))
        frac = self.cfg.small_fraction
        thr = int(self.cfg.small_threshold)  # type: ignore[arg-type]
        if frac is not None and lo <= thr:
            if self.rng.random() < frac:
                return int(self.rng.integers(lo, thr + 1))
            return int(self.rng.integers(thr + 1, s_max + 1))
        return int(self.rng.integers(lo, s_max + 1))

    def _position(self, s: int, near: Optional[Tuple[int, int, int]] = None) -> Tuple[int, int]:
        h, w = self.cfg.height, self.cfg.width
        if near is None:
            return int(self.rng.integers(0, w - s + 1)), int(self.rng.integers(0, h - s + 1))
        px, py, ps = near
        spread = 0.6 * ps
        cx = px + ps / 2.0 + self.rng.uniform(-spread, spread)
        cy = py + ps / 2.0 + self.rng.uniform(-spread, spread)
        x = int(np.clip(round(cx - s / 2.0), 0, w - s))
        y = int(np.clip(round(cy - s / 2.0), 0, h - s))
        return x, y

    def _penalty(self, occ: List[float], j: int, flagged: int) -> float:
        # Constraint violation of previous objects 0..j-1 after placing object j
        cfg = self.cfg
        total = 0.0
        for i in range(j):
            if cfg.overlap == "none":
                total += occ[i]
            elif i < flagged:
                if i == j - 1 and occ[i] <= cfg.occlusion_threshold:
                    total += cfg.occlusion_threshold - occ[i] + 1e-6
                total += max(0.0, occ[i] - cfg.max_occlusion)
            else:
                total += max(0.0, occ[i] - cfg.occlusion_threshold)
        return total

    def compose(self, n_objects: int, flagged: int = 0) -> Tuple[List[ObjectMeta], List[np.ndarray], List[str]]:
        """Place ``n_objects``; objects ``0..flagged-1`` get occluded by their successor."""
        cfg = self.cfg
        metas: List[Tuple[int, int, int, int]] = []
        footprints: List[np.ndarray] = []
        shapes: List[str] = []
        for j in range(n_objects):
            class_id = int(self.rng.integers(cfg.num_classes))
            shape = self.vocab[class_id][0]
            occluder = cfg.overlap == "controlled" and 0 < j <= flagged
            if occluder:
                prev_size = metas[j - 1][1]
                s = self._size(int(math.ceil(0.8 * prev_size)))
            else:
                s = self._size()
            if cfg.overlap == "random" or j == 0:
                x, y = self._position(s)
                fp = _footprint(shape, x, y, s, cfg.height, cfg.width)
            else:
                best: Optional[Tuple[float, int, int, np.ndarray]] = None
                near = (metas[j - 1][2], metas[j - 1][3], metas[j - 1][1]) if occluder else None
                for _ in range(cfg.placement_attempts):
                    cx, cy = self._position(s, near)
                    cand = _footprint(shape, cx, cy, s, cfg.height, cfg.width)
                    penalty = self._penalty(_occlusions(footprints + [cand]), j, flagged)
                    if best is None or penalty < best[0]:
                        best = (penalty, cx, cy, cand)
                    if penalty == 0.0:
                        break
                assert best is not None
                if best[0] > 0.0 and cfg.overlap == "none":
                    # Could not place without overlap: the image keeps fewer objects
                    continue
                _, x, y, fp = best
            metas.append((class_id, s, x, y))
            footprints.append(fp)
            shapes.append(shape)

        occ = _occlusions(footprints)
        objects = [
            ObjectMeta(class_id=c, size=s, x=x, y=y, occlusion_fraction=occ[i])
            for i, (c, s, x, y) in enumerate(metas)
        ]
        return objects, footprints, shapes

    def render(self, objects: Sequence[ObjectMeta], footprints: Sequence[np.ndarray]) -> np.ndarray:
        """Composite objects in z-order over a noisy flat background; returns H x W x 3 uint8."""
        cfg = self.cfg
        level = self.rng.uniform(0.05, 0.3)
        canvas = level + cfg.background_noise * self.rng.standard_normal((cfg.height, cfg.width, 3))
        for obj, fp in zip(objects, footprints):
            color = np.asarray(COLORS[self.vocab[obj.class_id][1]], dtype=np.float64) / 255.0
            canvas[fp] = color
        return np.rint(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)


def _labels_for(objects: Sequence[ObjectMeta], num_classes: int) -> np.ndarray:
    labels = np.zeros(num_classes, dtype=np.uint8)
    for obj in objects:
        labels[obj.class_id] = 1
    return labels


def generate_split(config: DatasetConfig, split: str, n: Optional[int] = None) -> List[Tuple[Sample, np.ndarray]]:
    """Generate one split in memory: ``(sample, uint8 H x W x 3 pixels)`` pairs.

    Image ``i`` of a split uses generator ``(seed, split, i)``. The controlled
    overlap policy carries an error-diffusion quota across images so the share
    of objects with occlusion above ``occlusion_threshold`` tracks
    ``occlusion_target``.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    n = config.n if n is None and split == "train" else (config.n_test if n is None else n)
    split_code = SPLITS.index(split)
    lo, hi = config.objects_range
    realized = 0
    placed = 0
    out: List[Tuple[Sample, np.ndarray]] = []
    for i in range(n):
        rng = np.random.default_rng([config.seed, split_code, i])
        composer = _ImageComposer(config, rng)
        n_objects = int(rng.integers(lo, hi + 1))
        flagged = 0
        if config.overlap == "controlled":
            owed = config.occlusion_target * (placed + n_objects) - realized
            flagged = int(np.clip(math.floor(owed + 0.5), 0, n_objects - 1))
        objects, footprints, _ = composer.compose(n_objects, flagged)
        pixels = composer.render(objects, footprints)
        placed += len(objects)
        realized += sum(o.occlusion_fraction > config.occlusion_threshold for o in objects)
        sample = Sample(
            id=f"{split}_{i:05d}",
            image=pixels.transpose(2, 0, 1).astype(np.float64) / 255.0,
            labels=_labels_for(objects, config.num_classes),
            objects=tuple(objects),
        )
        out.append((sample, pixels))
    return out


def generate_dataset(config: DatasetConfig, root: Union[str, Path]) -> Dict[str, DatasetManifest]:
    """Write ``images/``, ``train.jsonl`` and ``test.jsonl`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = class_names(config.num_classes)
    manifests: Dict[str, DatasetManifest] = {}
    for split in SPLITS:
        records = []
        for sample, pixels in generate_split(config, split):
            rel = f"images/{sample.id}.png"
            Image.fromarray(pixels).save(root / rel, format="PNG")
            records.append(
                ManifestRecord(sample.id, rel, tuple(int(v) for v in sample.labels), sample.objects)
            )
        manifest = DatasetManifest(
            num_classes=config.num_classes,
            class_names=names,
            split=split,
            records=records,
            seed=config.seed,
            params=config.to_dict(),
            height=config.height,
            width=config.width,
            small_threshold=int(config.small_threshold),  # type: ignore[arg-type]
            occlusion_threshold=config.occlusion_threshold,
            root=root,
        )
        manifest.write(root / f"{split}.jsonl")
        manifests[split] = manifest
        logger.info(
            f"Generated {split} split: {len(records)} images, K={config.num_classes}",
            extra={"event": "dataset_generated", "split": split, "count": len(records)},
        )
    return manifests


def import_external(
    records: Iterable[Mapping[str, Any]],
    class_names_: Sequence[str],
    split: str,
    root: Union[str, Path],
    height: int = 64,
    width: int = 64,
) -> DatasetManifest:
    """Write a manifest for images prepared elsewhere (e.g. a converted VOC split).

    Each record needs ``path`` (relative to ``root``) and ``labels``, either a
    multi-hot vector or a list of class names. No object metadata is recorded,
    so stratified reports are unavailable for such datasets.
    """
    root = Path(root)
    k = len(class_names_)
    index = {name: i for i, name in enumerate(class_names_)}
    out: List[ManifestRecord] = []
    for i, rec in enumerate(records):
        path = str(rec["path"])
        if not (root / path).is_file():
            raise DatasetError(f"record {i}: image not found: {root / path}")
        raw = list(rec["labels"])
        if raw and all(isinstance(v, str) for v in raw):
            unknown = [v for v in raw if v not in index]
            if unknown:
                raise DatasetError(f"record {i}: unknown class names {unknown}")
            labels = [0] * k
            for v in raw:
                labels[index[v]] = 1
        else:
            labels = [int(v) for v in raw]
        if len(labels) != k or any(v not in (0, 1) for v in labels) or not any(labels):
            raise DatasetError(f"record {i}: labels must be a non-empty multi-hot vector of length {k}")
        out.append(ManifestRecord(str(rec.get("id", f"{split}_{i:05d}")), path, tuple(labels)))
    manifest = DatasetManifest(
        num_classes=k, class_names=list(class_names_), split=split, records=out,
        height=height, width=width, root=root,
    )
    manifest.write(root / f"{split}.jsonl")
    return manifest


# ==================== Loading ====================

def strata_flags(
    objects: Sequence[Optional[Tuple[ObjectMeta, ...]]],
    small_threshold: int,
    occlusion_threshold: float,
) -> Dict[str, np.ndarray]:
    """Per-image stratum membership; an image is small/occluded if any of its objects is."""
    if any(objs is None for objs in objects):
        return {}
    small = np.array(
        [any(o.size <= small_threshold for o in objs) for objs in objects],  # type: ignore[union-attr]
        dtype=bool,
    )
    occluded = np.array(
        [any(o.occlusion_fraction > occlusion_threshold for o in objs) for objs in objects],  # type: ignore[union-attr]
        dtype=bool,
    )
    return {"small": small, "non_small": ~small, "occluded": occluded, "non_occluded": ~occluded}


@dataclass
class LoadedDataset:
    """A split held in memory: images N x 3 x H x W float64, labels N x K uint8."""

    ids: List[str]
    images: np.ndarray
    labels: np.ndarray
    objects: List[Optional[Tuple[ObjectMeta, ...]]]
    class_names: List[str]
    small_threshold: int = 12
    occlusion_threshold: float = 0.3

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.shape[1])

    def sample(self, index: int) -> Sample:
        return Sample(self.ids[index], self.images[index], self.labels[index], self.objects[index])

    def subset(self, indices: Sequence[int]) -> "LoadedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            ids=[self.ids[i] for i in idx],
            images=self.images[idx],
            labels=self.labels[idx],
            objects=[self.objects[i] for i in idx],
        )

    def strata(self) -> Dict[str, np.ndarray]:
        """Boolean image masks for small / non_small / occluded / non_occluded.

        Empty dict when any image lacks object metadata.
        """
        return strata_flags(self.objects, self.small_threshold, self.occlusion_threshold)

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[Sample],
        class_names_: Sequence[str],
        small_threshold: int = 12,
        occlusion_threshold: float = 0.3,
    ) -> "LoadedDataset":
        if not samples:
            raise DatasetError("cannot build a dataset from zero samples")
        return cls(
            ids=[s.id for s in samples],
            images=np.stack([np.asarray(s.image, dtype=np.float64) for s in samples]),
            labels=np.stack([np.asarray(s.labels, dtype=np.uint8) for s in samples]),
            objects=[s.objects for s in samples],
            class_names=list(class_names_),
            small_threshold=small_threshold,
            occlusion_threshold=occlusion_threshold,
        )


def load_dataset(manifest: Union[str, Path, DatasetManifest]) -> LoadedDataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    if not manifest.records:
        raise DatasetError(f"{manifest.split} manifest has no records")
    root = manifest.root or Path(".")
    images = np.empty((len(manifest), 3, manifest.height, manifest.width), dtype=np.float64)
    for i, rec in enumerate(manifest.records):
        path = root / rec.path
        if not path.is_file():
            raise DatasetError(f"image listed in manifest does not exist: {path}")
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
        if arr.shape[:2] != (manifest.height, manifest.width):
            raise DatasetError(
                f"{path}: size {arr.shape[1]}x{arr.shape[0]} != {manifest.width}x{manifest.height}"
            )
        images[i] = arr.transpose(2, 0, 1) / 255.0
    return LoadedDataset(
        ids=[r.id for r in manifest.records],
        images=images,
        labels=np.array([r.labels for r in manifest.records], dtype=np.uint8),
        objects=[r.objects for r in manifest.records],
        class_names=list(manifest.class_names),
        small_threshold=manifest.small_threshold,
        occlusion_threshold=manifest.occlusion_threshold,
    )


# ==================== Augmentation ====================

@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    top: int
    left: int
    crop_height: int
    crop_width: int


def sample_augmentation(
    rng: np.random.Generator,
    height: int,
    width: int,
    scale: Tuple[float, float] = (0.7, 1.0),
    flip_prob: float = 0.5,
) -> AugmentParams:
    """Horizontal flip with ``flip_prob``; square-aspect crop covering ``scale`` of the area."""
    flip = bool(rng.random() < flip_prob)
    area = rng.uniform(scale[0], scale[1])
    side = math.sqrt(area)
    ch = int(np.clip(round(side * height), 1, height))
    cw = int(np.clip(round(side * width), 1, width))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    return AugmentParams(flip, top, left, ch, cw)


def apply_augmentation(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Crop, resize back bilinearly, then flip. Returns a new C x H x W array."""
    _, h, w = image.shape
    out = image[:, params.top:params.top + params.crop_height, params.left:params.left + params.crop_width]
    if (params.crop_height, params.crop_width) != (h, w):
        hwc = np.ascontiguousarray(out.transpose(1, 2, 0))
        out = cv2.resize(hwc, (w, h), interpolation=cv2.INTER_LINEAR)
        if out.ndim == 2:
            out = out[:, :, None]
        out = out.transpose(2, 0, 1)
    if params.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out, dtype=np.float64)


def augment_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return apply_augmentation(image, sample_augmentation(rng, image.shape[1], image.shape[2]))


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Augmented copy of a training sample; labels are left untouched."""
    return replace(sample, image=augment_image(sample.image, rng))


# ==================== Batching ====================

@dataclass(frozen=True)
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def batch_iter(
    dataset: LoadedDataset,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield every sample exactly once; order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise DatasetError("cannot iterate over an empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, dataset.images[idx], dataset.labels[idx].astype(np.float64))
