"""Multi-label evaluation metrics.

AP is the all-points average: the mean, over positive items, of the precision
at that item's rank. Items are ranked by descending score with ties broken by
ascending original index, so results never depend on sort stability.
Classes without positives are excluded from mAP and from the per-class
precision and recall means.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ScoredPredictions:
    """N x K scores in [0, 1] with N x K binary targets."""

    scores: np.ndarray
    targets: np.ndarray
    ids: Optional[Sequence[str]] = None

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        targets = np.asarray(self.targets)
        if scores.ndim != 2 or scores.shape != targets.shape:
            raise ShapeError(f"scores {scores.shape} and targets {targets.shape} must be equal N x K")
        if not np.isin(targets, (0, 1)).all():
            raise ValueError("targets must contain only 0 and 1")
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        if self.ids is not None and len(self.ids) != scores.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for {scores.shape[0]} rows")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "targets", targets.astype(np.int64))

    @property
    def num_images(self) -> int:
        return int(self.scores.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.scores.shape[1])

    def select(self, rows: np.ndarray) -> "ScoredPredictions":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        ids = [self.ids[i] for i in rows] if self.ids is not None else None
        return ScoredPredictions(self.scores[rows], self.targets[rows], ids)


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    targets = np.asarray(targets).ravel()
    if scores.shape != targets.shape:
        raise ShapeError(f"scores {scores.shape} and targets {targets.shape} differ")
    if not np.any(targets == 1):
        raise ValueError("average precision is undefined without positive targets")
    n = scores.size
    order = np.lexsort((np.arange(n), -scores))
    hits = targets[order] == 1
    precision_at_rank = np.cumsum(hits) / np.arange(1, n + 1)
    return float(precision_at_rank[hits].mean())


def per_class_average_precision(sp: ScoredPredictions) -> List[Optional[float]]:
    """AP per class; None for classes without a positive target."""
    return [
        average_precision(sp.scores[:, k], sp.targets[:, k]) if sp.targets[:, k].any() else None
        for k in range(sp.num_classes)
    ]


def mean_average_precision(sp: ScoredPredictions) -> float:
    aps = [ap for ap in per_class_average_precision(sp) if ap is not None]
    if not aps:
        raise ValueError("mAP is undefined: no class has a positive target")
    return float(np.mean(aps))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


def confusion_counts(sp: ScoredPredictions, threshold: float = 0.5) -> ConfusionCounts:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    predicted = sp.scores >= threshold
    actual = sp.targets == 1
    return ConfusionCounts(
        tp=np.sum(predicted & actual, axis=0),
        fp=np.sum(predicted & ~actual, axis=0),
        fn=np.sum(~predicted & actual, axis=0),
    )


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass(frozen=True)
class PRF:
    cp: float
    cr: float
    cf1: float
    op: float
    or_: float
    of1: float

    def as_tuple(self) -> tuple:
        return (self.cp, self.cr, self.cf1, self.op, self.or_, self.of1)


def _per_class_ratio(num: np.ndarray, den: np.ndarray) -> List[Optional[float]]:
    return [float(n) / float(d) if d > 0 else None for n, d in zip(num, den)]


def _defined_mean(values: Sequence[Optional[float]]) -> float:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else 0.0


def prf_suite(sp: ScoredPredictions, threshold: float = 0.5) -> PRF:
    """CP, CR, CF1 (per-class means) and OP, OR, OF1 (pooled counts); positive iff score >= threshold."""
    c = confusion_counts(sp, threshold)
    cp = _defined_mean(_per_class_ratio(c.tp, c.tp + c.fp))
    cr = _defined_mean(_per_class_ratio(c.tp, c.tp + c.fn))
    tp, fp, fn = int(c.tp.sum()), int(c.fp.sum()), int(c.fn.sum())
    op = tp / (tp + fp) if tp + fp > 0 else 0.0
    or_ = tp / (tp + fn) if tp + fn > 0 else 0.0
    return PRF(cp, cr, _f1(cp, cr), op, or_, _f1(op, or_))


@dataclass
class MetricsReport:
    per_class_ap: List[Optional[float]]
    mean_ap: float
    cp: float
    cr: float
    cf1: float
    op: float
    or_: float
    of1: float
    threshold: float = 0.5
    num_images: int = 0
    per_class_precision: List[Optional[float]] = field(default_factory=list)
    per_class_recall: List[Optional[float]] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)
    strata: Dict[str, "MetricsReport"] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    SCALARS = ("mean_ap", "cp", "cr", "cf1", "op", "or", "of1")

    def scalar(self, name: str) -> float:
        return float(getattr(self, "or_" if name == "or" else name))

    def scalars(self) -> Dict[str, float]:
        return {name: self.scalar(name) for name in self.SCALARS}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_class_ap": list(self.per_class_ap),
            **self.scalars(),
            "threshold": self.threshold,
            "num_images": self.num_images,
            "per_class_precision": list(self.per_class_precision),
            "per_class_recall": list(self.per_class_recall),
            "counts": dict(self.counts),
            "strata": {name: r.to_dict() for name, r in self.strata.items()},
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        return cls(
            per_class_ap=list(data["per_class_ap"]),
            mean_ap=float(data["mean_ap"]),
            cp=float(data["cp"]),
            cr=float(data["cr"]),
            cf1=float(data["cf1"]),
            op=float(data["op"]),
            or_=float(data["or"]),
            of1=float(data["of1"]),
            threshold=float(data.get("threshold", 0.5)),
            num_images=int(data.get("num_images", 0)),
            per_class_precision=list(data.get("per_class_precision", [])),
            per_class_recall=list(data.get("per_class_recall", [])),
            counts=dict(data.get("counts", {})),
            strata={k: cls.from_dict(v) for k, v in data.get("strata", {}).items()},
            notes=list(data.get("notes", [])),
        )


def compute_report(
    sp: ScoredPredictions,
    threshold: float = 0.5,
    class_names: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """mAP plus the six thresholded aggregates and their per-class ingredients."""
    aps = per_class_average_precision(sp)
    defined = [ap for ap in aps if ap is not None]
    if not defined:
        raise ValueError("cannot report on predictions without any positive target")
    c = confusion_counts(sp, threshold)
    prf = prf_suite(sp, threshold)
    notes = []
    for k, ap in enumerate(aps):
        if ap is None:
            name = f" ({class_names[k]})" if class_names is not None else ""
            notes.append(f"class {k}{name} has no positives; excluded from mAP and CR")
    return MetricsReport(
        per_class_ap=aps,
        mean_ap=float(np.mean(defined)),
        cp=prf.cp,
        cr=prf.cr,
        cf1=prf.cf1,
        op=prf.op,
        or_=prf.or_,
        of1=prf.of1,
        threshold=threshold,
        num_images=sp.num_images,
        per_class_precision=_per_class_ratio(c.tp, c.tp + c.fp),
        per_class_recall=_per_class_ratio(c.tp, c.tp + c.fn),
        counts={"tp": int(c.tp.sum()), "fp": int(c.fp.sum()), "fn": int(c.fn.sum())},
        notes=notes,
    )


def stratified_report(
    sp: ScoredPredictions,
    strata: Mapping[str, np.ndarray],
    threshold: float = 0.5,
    class_names: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Global report with one sub-report per non-empty image stratum."""
    report = compute_report(sp, threshold, class_names)
    if not strata:
        report.notes.append("no object metadata; strata not reported")
    for name, rows in strata.items():
        rows = np.asarray(rows, dtype=bool)
        if rows.shape != (sp.num_images,):
            raise ShapeError(f"stratum {name!r} flags {rows.shape} for {sp.num_images} images")
        if not rows.any():
            report.notes.append(f"stratum {name!r} is empty; omitted")
            continue
        report.strata[name] = compute_report(sp.select(rows), threshold, class_names)
    return report


def write_per_class_csv(
    report: MetricsReport,
    path: Union[str, Path],
    class_names: Optional[Sequence[str]] = None,
) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "name", "ap", "precision", "recall"])
        for k, ap in enumerate(report.per_class_ap):
            name = class_names[k] if class_names is not None else f"class_{k}"
            prec = report.per_class_precision[k] if k < len(report.per_class_precision) else None
            rec = report.per_class_recall[k] if k < len(report.per_class_recall) else None
            writer.writerow([k, name, "" if ap is None else ap, "" if prec is None else prec, "" if rec is None else rec])
    return path
