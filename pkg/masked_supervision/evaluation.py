from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import check_arch, load_checkpoint
from .data import LoadedDataset
from .errors import ShapeError
from .masking import HIGH, SUBSETS, Mask, MaskSubsets, apply_masks, sample_mask
from .metrics import MetricsReport, ScoredPredictions, stratified_report
from .model import Architecture, ModelParams, predict
from .numerics import no_grad

logger = logging.getLogger(__name__)

ModelRef = Union[ModelParams, str, Path]
MODES = ("clean", "masked")
CSV_COLUMNS = ("model", "mode", "metric", "value", "delta")


@dataclass
class EvalConfig:
    batch_size: int = 64
    workers: int = int(os.environ.get("MSL_WORKERS", "1"))
    threshold: float = 0.5
    mask_subset: str = HIGH
    seeds: Tuple[int, ...] = (0, 1, 2)
    binarize_masks: bool = True

    def __post_init__(self) -> None:
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.mask_subset not in SUBSETS:
            raise ValueError(f"mask_subset must be one of {SUBSETS}, got {self.mask_subset!r}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")


def _resolve(model: ModelRef, expected_arch: Optional[Architecture] = None) -> ModelParams:
    if isinstance(model, ModelParams):
        if expected_arch is not None and model.arch != expected_arch:
            check_arch(expected_arch, model.arch)
        return model
    return load_checkpoint(model, expected_arch)


def _check_fits(params: ModelParams, dataset: LoadedDataset) -> None:
    arch = params.arch
    expected = (arch.in_channels,) + tuple(arch.input_size)
    if tuple(dataset.images.shape[1:]) != expected or dataset.num_classes != arch.num_classes:
        raise ShapeError(
            f"dataset {dataset.images.shape[1:]} x K={dataset.num_classes} does not fit "
            f"model {expected} x K={arch.num_classes}"
        )


def score_dataset(
    params: ModelParams,
    images: np.ndarray,
    batch_size: int = 64,
    workers: int = 1,
) -> np.ndarray:
    """Sigmoid scores for every image, N x K, in input order.

    Batches are scored on a thread pool without recording a graph.
    """
    starts = list(range(0, images.shape[0], batch_size))

    def score(start: int) -> np.ndarray:
        with no_grad():
            return predict(params, images[start:start + batch_size]).data

    if workers <= 1 or len(starts) <= 1:
        parts = [score(s) for s in starts]
    else:
        results: Dict[int, np.ndarray] = {}
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(score, s): s for s in starts}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
        parts = [results[s] for s in starts]
    return np.concatenate(parts, axis=0)


def sample_eval_masks(subsets: MaskSubsets, which: str, count: int, seed: int) -> List[Mask]:
    """One mask per test image, drawn from a generator seeded only by ``seed``."""
    rng = np.random.default_rng(seed)
    return [sample_mask(subsets, which, rng) for _ in range(count)]


def evaluate(
    model: ModelRef,
    dataset: LoadedDataset,
    config: Optional[EvalConfig] = None,
    expected_arch: Optional[Architecture] = None,
) -> MetricsReport:
    """Score raw test images (no augmentation, no masking) and report with strata."""
    config = config or EvalConfig()
    params = _resolve(model, expected_arch)
    _check_fits(params, dataset)
    scores = score_dataset(params, dataset.images, config.batch_size, config.workers)
    report = stratified_report(
        ScoredPredictions(scores, dataset.labels, dataset.ids),
        dataset.strata(),
        config.threshold,
        dataset.class_names,
    )
    logger.info(
        f"Clean evaluation on {len(dataset)} images: mAP={report.mean_ap:.4f}",
        extra={"event": "evaluation_done", "mode": "clean", "mean_ap": report.mean_ap},
    )
    return report


def evaluate_masked(
    model: ModelRef,
    dataset: LoadedDataset,
    subsets: MaskSubsets,
    subset: str = HIGH,
    seed: int = 0,
    config: Optional[EvalConfig] = None,
    expected_arch: Optional[Architecture] = None,
) -> MetricsReport:
    """Mask every test image with one sampled mask, then score. The dataset is not modified."""
    config = config or EvalConfig()
    params = _resolve(model, expected_arch)
    _check_fits(params, dataset)
    masks = sample_eval_masks(subsets, subset, len(dataset), seed)
    masked = apply_masks(dataset.images, masks, soft=not config.binarize_masks)
    scores = score_dataset(params, masked, config.batch_size, config.workers)
    report = stratified_report(
        ScoredPredictions(scores, dataset.labels, dataset.ids),
        dataset.strata(),
        config.threshold,
        dataset.class_names,
    )
    report.notes.append(f"masked with the {subset!r} subset, seed {seed}")
    logger.info(
        f"Masked evaluation ({subset}, seed {seed}) on {len(dataset)} images: mAP={report.mean_ap:.4f}",
        extra={"event": "evaluation_done", "mode": "masked", "seed": seed, "mean_ap": report.mean_ap},
    )
    return report


def _mean_optional(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Field-wise mean of several reports (e.g. one per evaluation seed).

    Counts are summed. Strata are averaged when every report has them.
    """
    if not reports:
        raise ValueError("average_reports needs at least one report")
    k = len(reports[0].per_class_ap)
    if any(len(r.per_class_ap) != k for r in reports):
        raise ShapeError("reports disagree on the number of classes")

    def column(attr: str) -> List[Optional[float]]:
        rows = [getattr(r, attr) for r in reports]
        if any(len(row) != k for row in rows):
            return []
        return [_mean_optional([row[i] for row in rows]) for i in range(k)]

    counts: Dict[str, int] = {}
    for r in reports:
        for key, value in r.counts.items():
            counts[key] = counts.get(key, 0) + int(value)
    shared = [name for name in reports[0].strata if all(name in r.strata for r in reports)]
    notes = [f"mean of {len(reports)} reports; counts summed"]
    for r in reports:
        notes.extend(n for n in r.notes if n not in notes)
    return MetricsReport(
        per_class_ap=column("per_class_ap"),
        mean_ap=float(np.mean([r.mean_ap for r in reports])),
        cp=float(np.mean([r.cp for r in reports])),
        cr=float(np.mean([r.cr for r in reports])),
        cf1=float(np.mean([r.cf1 for r in reports])),
        op=float(np.mean([r.op for r in reports])),
        or_=float(np.mean([r.or_ for r in reports])),
        of1=float(np.mean([r.of1 for r in reports])),
        threshold=reports[0].threshold,
        num_images=reports[0].num_images,
        per_class_precision=column("per_class_precision"),
        per_class_recall=column("per_class_recall"),
        counts=counts,
        strata={name: average_reports([r.strata[name] for r in reports]) for name in shared},
        notes=notes,
    )


# ==================== Comparison ====================

@dataclass
class ModelComparison:
    name: str
    clean: Optional[MetricsReport] = None
    masked: Optional[MetricsReport] = None
    masked_per_seed: Dict[int, MetricsReport] = field(default_factory=dict)

    @property
    def deltas(self) -> Dict[str, float]:
        """masked - clean for every scalar metric (empty unless both modes ran)."""
        if self.clean is None or self.masked is None:
            return {}
        clean, masked = self.clean.scalars(), self.masked.scalars()
        return {name: masked[name] - clean[name] for name in clean}


@dataclass
class RobustnessReport:
    models: List[ModelComparison]
    modes: Tuple[str, ...]
    subset: str
    seeds: Tuple[int, ...]

    def rows(self) -> List[Tuple[str, str, str, float, Optional[float]]]:
        """(model, mode, metric, value, delta) for every model x mode x metric."""
        out = []
        for m in self.models:
            deltas = m.deltas
            for mode in self.modes:
                report = m.clean if mode == "clean" else m.masked
                assert report is not None
                for metric, value in report.scalars().items():
                    delta = deltas.get(metric) if mode == "masked" else None
                    out.append((m.name, mode, metric, value, delta))
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "modes": list(self.modes),
            "subset": self.subset,
            "seeds": list(self.seeds),
            "models": [
                {
                    "name": m.name,
                    "clean": m.clean.to_dict() if m.clean else None,
                    "masked": m.masked.to_dict() if m.masked else None,
                    "deltas": m.deltas,
                }
                for m in self.models
            ],
        }


def compare(
    models: Mapping[str, ModelRef],
    dataset: LoadedDataset,
    modes: Sequence[str] = MODES,
    subsets: Optional[MaskSubsets] = None,
    config: Optional[EvalConfig] = None,
) -> RobustnessReport:
    """Clean and/or masked reports for each named model; masked results average over seeds."""
    config = config or EvalConfig()
    if not models:
        raise ValueError("compare needs at least one model")
    modes = tuple(modes)
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise ValueError(f"modes must be a non-empty subset of {MODES}, got {list(modes)}")
    if "masked" in modes and subsets is None:
        raise ValueError("masked mode needs mask subsets")

    comparisons = []
    for name, ref in models.items():
        params = _resolve(ref)
        cmp = ModelComparison(name)
        if "clean" in modes:
            cmp.clean = evaluate(params, dataset, config)
        if "masked" in modes:
            assert subsets is not None
            for seed in config.seeds:
                cmp.masked_per_seed[seed] = evaluate_masked(
                    params, dataset, subsets, config.mask_subset, seed, config
                )
            cmp.masked = average_reports(list(cmp.masked_per_seed.values()))
        comparisons.append(cmp)
    return RobustnessReport(comparisons, modes, config.mask_subset, config.seeds)


def write_comparison(report: RobustnessReport, out_dir: Union[str, Path]) -> Path:
    """Write ``robustness.csv`` (plot data), ``robustness.json`` and one JSON per report.

    Per-report files are ``{model}_clean.json`` and ``{model}_masked_seed{seed}.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "robustness.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for model, mode, metric, value, delta in report.rows():
            writer.writerow([model, mode, metric, value, "" if delta is None else delta])
    (out / "robustness.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    for m in report.models:
        if m.clean is not None:
            (out / f"{m.name}_clean.json").write_text(m.clean.to_json(), encoding="utf-8")
        for seed, r in m.masked_per_seed.items():
            (out / f"{m.name}_masked_seed{seed}.json").write_text(r.to_json(), encoding="utf-8")
    return out


# ==================== Prediction dumps ====================

def topk_predictions(
    scores: np.ndarray,
    ids: Sequence[str],
    class_names: Sequence[str],
    k: int = 3,
) -> List[Dict[str, Any]]:
    """Top-``k`` classes per image, highest score first (ties to the lower class index)."""
    if scores.ndim != 2 or scores.shape[0] != len(ids) or scores.shape[1] != len(class_names):
        raise ShapeError(f"scores {scores.shape} do not match {len(ids)} ids x {len(class_names)} classes")
    k = min(k, scores.shape[1])
    out = []
    for image_id, row in zip(ids, scores):
        order = np.lexsort((np.arange(row.size), -row))[:k]
        out.append({
            "id": image_id,
            "top": [{"class": int(c), "name": class_names[c], "score": float(row[c])} for c in order],
        })
    return out


def write_predictions(sp: ScoredPredictions, path: Union[str, Path]) -> Path:
    """JSON lines: ``{"id", "scores", "targets"}`` per image."""
    path = Path(path)
    ids = sp.ids if sp.ids is not None else [str(i) for i in range(sp.num_images)]
    lines = [
        json.dumps(
            {"id": image_id, "scores": [float(v) for v in s], "targets": [int(v) for v in t]},
            sort_keys=True,
        )
        for image_id, s, t in zip(ids, sp.scores, sp.targets)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_predictions(path: Union[str, Path]) -> ScoredPredictions:
    ids, scores, targets = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        ids.append(str(record["id"]))
        scores.append(record["scores"])
        targets.append(record["targets"])
    if not ids:
        raise ValueError(f"no predictions in {path}")
    return ScoredPredictions(np.array(scores, dtype=np.float64), np.array(targets), ids)
