"""Single-stage masked supervised training.

Each step runs the backbone twice with one parameter set: once on the
(augmented) images and once on the same images with a sampled mask applied.
Both predictions are supervised by the ground truth and pulled toward each
other; the weighted loss is backpropagated into the shared parameters and
one SGD step is taken.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .data import LoadedDataset, augment_image, batch_iter
from .errors import DivergenceError, NonFiniteError, ShapeError, WeightSharingError
from .evaluation import score_dataset
from .loss import LossBreakdown, LossWeights, bce, total_loss
from .masking import MaskSubsets, apply_masks, sample_mask
from .metrics import ScoredPredictions, mean_average_precision
from .model import Architecture, ModelParams, init_params, predict
from .numerics import Tensor
from .stats import EpochStats
from .telemetry import TrainingMetrics

logger = logging.getLogger(__name__)

MASKING_MODES = ("high", "low", "none")
LOG_COLUMNS = ("epoch", "rcg", "mabr", "laco", "total", "test_map")

# Stream tags for np.random.default_rng([seed, epoch, k, tag])
_MASK_STREAM = 1
_AUGMENT_STREAM = 2


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 60
    batch_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    masking: str = "high"
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only best and final
    augment: bool = True
    binarize_masks: bool = True
    eval_batch_size: int = 64
    eval_workers: int = int(os.environ.get("MSL_WORKERS", "1"))
    enable_logging: bool = os.environ.get("MSL_STEP_LOGGING", "false").lower() == "true"
    run_name: str = "default"

    def __post_init__(self) -> None:
        self.weights = LossWeights.parse(self.weights)
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_batch_size < 1:
            raise ValueError(f"eval_batch_size must be >= 1, got {self.eval_batch_size}")
        if self.eval_workers < 1:
            raise ValueError(f"eval_workers must be >= 1, got {self.eval_workers}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.masking not in MASKING_MODES:
            raise ValueError(f"masking must be one of {MASKING_MODES}, got {self.masking!r}")
        if self.masking == "none" and self.weights != LossWeights.preset("vanilla"):
            logger.warning(
                f"masking='none' forces vanilla loss weights (1, 0, 0); ignoring {self.weights.as_tuple()}"
            )
            self.weights = LossWeights.preset("vanilla")

    @property
    def uses_masked_branch(self) -> bool:
        return self.masking != "none" and self.weights.uses_masked_branch

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["weights"] = list(self.weights.as_tuple())
        return out


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers, zero at start."""

    velocity: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(OrderedDict((name, np.zeros_like(t.data)) for name, t in params.items()))


def sgd_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> Tuple[ModelParams, OptimizerState]:
    """g' = g + wd * theta; v = momentum * v + g'; theta = theta - lr * v.

    Every gradient is checked before anything is written, so a failing step
    leaves both ``params`` and ``state`` untouched.
    """
    for name, t in params.items():
        if name not in grads:
            raise ShapeError(f"sgd_step: missing gradient for {name}")
        g = grads[name]
        if g.shape != t.data.shape:
            raise ShapeError(f"sgd_step: gradient for {name} has shape {g.shape}, expected {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"sgd_step: non-finite gradient for {name}; step aborted")
        v = state.velocity.get(name)
        if v is not None and v.shape != t.data.shape:
            raise ShapeError(f"sgd_step: velocity for {name} has shape {v.shape}, expected {t.shape}")

    for name, t in params.items():
        g = grads[name] + weight_decay * t.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + g
        state.velocity[name] = v
        # Rebind rather than write in place: arrays handed out earlier stay valid
        t.data = t.data - lr * v
    return params, state


@dataclass(frozen=True)
class StepResult:
    breakdown: LossBreakdown
    fingerprint: str
    mask_percentages: Tuple[float, ...] = ()


def _finish_step(
    params: ModelParams,
    state: OptimizerState,
    breakdown: LossBreakdown,
    config: TrainConfig,
) -> None:
    if not breakdown.is_finite():
        raise DivergenceError(f"non-finite loss {breakdown.to_dict()}; step aborted")
    assert breakdown.tensor is not None
    breakdown.tensor.backward()
    sgd_step(params, params.grads(), state, config.lr, config.momentum, config.weight_decay)


def _check_shared(params: ModelParams, y_p: Tensor, y_mp: Tensor) -> None:
    # Both branch graphs must read exactly the tensors held by params
    expected = {id(t) for t in params.values()}
    for branch, out in (("clean", y_p), ("masked", y_mp)):
        read = {id(t) for t in nx.leaves(out)}
        if read != expected:
            raise WeightSharingError(
                f"{branch} branch read {len(read - expected)} foreign and missed "
                f"{len(expected - read)} shared parameter tensors"
            )


def msl_step(
    params: ModelParams,
    state: OptimizerState,
    images: np.ndarray,
    labels: np.ndarray,
    subsets: Optional[MaskSubsets],
    config: TrainConfig,
    rng: np.random.Generator,
) -> StepResult:
    """One dual-branch step on an already augmented batch."""
    if images.shape[0] == 0:
        raise ValueError("msl_step needs a non-empty batch")
    fingerprint = params.fingerprint()
    params.zero_grad()

    y_p = predict(params, Tensor(images))
    y_mp = None
    percentages: Tuple[float, ...] = ()
    if config.uses_masked_branch:
        if subsets is None:
            raise ValueError(f"masking={config.masking!r} needs mask subsets")
        masks = [sample_mask(subsets, config.masking, rng) for _ in range(images.shape[0])]
        masked = apply_masks(images, masks, soft=not config.binarize_masks)
        y_mp = predict(params, Tensor(masked))
        _check_shared(params, y_p, y_mp)
        percentages = tuple(m.p for m in masks)

    breakdown = total_loss(y_p, y_mp, labels, config.weights)
    _finish_step(params, state, breakdown, config)
    return StepResult(breakdown, fingerprint, percentages)


def vanilla_step(
    params: ModelParams,
    state: OptimizerState,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> StepResult:
    """Plain supervised step: recognition BCE only, no masked branch."""
    if images.shape[0] == 0:
        raise ValueError("vanilla_step needs a non-empty batch")
    fingerprint = params.fingerprint()
    params.zero_grad()
    loss = bce(predict(params, Tensor(images)), labels)
    value = loss.item()
    breakdown = LossBreakdown(rcg=value, mabr=0.0, laco=0.0, total=value, tensor=loss)
    _finish_step(params, state, breakdown, config)
    return StepResult(breakdown, fingerprint)


# ==================== Training loop ====================

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    rcg: float
    mabr: float
    laco: float
    total: float
    test_map: float

    def to_row(self) -> List[Any]:
        return [self.epoch, self.rcg, self.mabr, self.laco, self.total, self.test_map]


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_epoch: int
    best_map: Optional[float]
    log: List[EpochLog]


def write_train_log(log: List[EpochLog], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow(row.to_row())
    return path


def read_train_log(path: Union[str, Path]) -> List[EpochLog]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return [
            EpochLog(
                int(r["epoch"]), float(r["rcg"]), float(r["mabr"]), float(r["laco"]),
                float(r["total"]), float(r["test_map"]),
            )
            for r in csv.DictReader(f)
        ]


def _augmented(images: np.ndarray, indices: np.ndarray, seed: int, epoch: int) -> np.ndarray:
    return np.stack([
        augment_image(img, np.random.default_rng([seed, epoch, int(i), _AUGMENT_STREAM]))
        for img, i in zip(images, indices)
    ])


def train(
    config: TrainConfig,
    train_data: LoadedDataset,
    test_data: LoadedDataset,
    subsets: Optional[MaskSubsets] = None,
    arch: Optional[Architecture] = None,
    out_dir: Optional[Union[str, Path]] = None,
    vanilla: bool = False,
    metrics: Optional[TrainingMetrics] = None,
) -> TrainResult:
    """Train from ``init_params(arch, config.seed)`` and track the best test mAP.

    With ``out_dir`` set, writes ``train_log.csv``, ``best.ckpt``,
    ``final.ckpt`` and ``epoch_XXX.ckpt`` every ``checkpoint_every`` epochs.
    ``vanilla=True`` routes every step through :func:`vanilla_step`.
    On a non-finite loss or gradient the untouched parameters are saved as
    ``last_good.ckpt`` and DivergenceError is raised.
    """
    if arch is None:
        arch = Architecture(
            num_classes=train_data.num_classes, input_size=tuple(train_data.images.shape[2:])
        )
    expected_input = (arch.in_channels,) + tuple(arch.input_size)
    for split, data in (("train", train_data), ("test", test_data)):
        if tuple(data.images.shape[1:]) != expected_input or data.num_classes != arch.num_classes:
            raise ShapeError(
                f"{split} data {data.images.shape[1:]} x K={data.num_classes} does not fit "
                f"architecture {expected_input} x K={arch.num_classes}"
            )
    if config.uses_masked_branch and not vanilla:
        if subsets is None:
            raise ValueError(f"masking={config.masking!r} needs mask subsets")
        if subsets.shape is not None and subsets.shape != tuple(arch.input_size):
            raise ShapeError(f"mask shape {subsets.shape} != input size {arch.input_size}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics = metrics or TrainingMetrics(config.run_name)

    params = init_params(arch, config.seed)
    state = OptimizerState.for_params(params)
    best_params = params.copy()
    best_map: Optional[float] = None
    best_epoch = 0
    log: List[EpochLog] = []

    for epoch in range(1, config.epochs + 1):
        stats = EpochStats()
        for step, batch in enumerate(batch_iter(train_data, config.batch_size, config.seed, epoch)):
            images = batch.images
            if config.augment:
                images = _augmented(images, batch.indices, config.seed, epoch)
            started = time.perf_counter()
            try:
                if vanilla:
                    result = vanilla_step(params, state, images, batch.labels, config)
                else:
                    rng = np.random.default_rng([config.seed, epoch, step, _MASK_STREAM])
                    result = msl_step(params, state, images, batch.labels, subsets, config, rng)
            except (NonFiniteError, DivergenceError) as e:
                stats.record_abort()
                metrics.record_abort(type(e).__name__)
                logger.error(
                    f"Training diverged at epoch {epoch} step {step}: {e}",
                    extra={
                        "event": "step_aborted", "epoch": epoch, "step": step, "stats": stats.to_dict(),
                    },
                )
                if out is not None:
                    save_checkpoint(params, out / "last_good.ckpt")
                    write_train_log(log, out / "train_log.csv")
                raise DivergenceError(f"epoch {epoch} step {step}: {e}") from e

            stats.record_step(result.breakdown, len(batch))
            stats.record_masks(result.mask_percentages)
            metrics.record_step(len(batch), time.perf_counter() - started)
            if config.enable_logging:
                logger.debug(
                    f"epoch {epoch} step {step}: {result.breakdown.to_dict()}",
                    extra={"event": "train_step", "epoch": epoch, "step": step},
                )

        scores = score_dataset(
            params, test_data.images, config.eval_batch_size, config.eval_workers
        )
        test_map = mean_average_precision(ScoredPredictions(scores, test_data.labels))
        means = stats.means()
        entry = EpochLog(epoch, means["rcg"], means["mabr"], means["laco"], means["total"], test_map)
        log.append(entry)
        metrics.record_epoch(means, test_map)
        logger.info(
            f"Epoch {epoch}/{config.epochs}: total={entry.total:.5f} test mAP={test_map:.4f}",
            extra={
                "event": "epoch_end", "epoch": epoch, **means, "test_map": test_map,
                "stats": stats.to_dict(),
            },
        )

        if best_map is None or test_map > best_map:
            best_map, best_epoch = test_map, epoch
            best_params = params.copy()
            if out is not None:
                save_checkpoint(best_params, out / "best.ckpt")
                logger.info(
                    f"New best test mAP {test_map:.4f} at epoch {epoch}",
                    extra={"event": "checkpoint_saved", "kind": "best", "epoch": epoch},
                )
        if out is not None:
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(params, out / f"epoch_{epoch:03d}.ckpt")
            write_train_log(log, out / "train_log.csv")

    if out is not None:
        write_train_log(log, out / "train_log.csv")
        save_checkpoint(params, out / "final.ckpt")
        if best_map is None:
            save_checkpoint(best_params, out / "best.ckpt")
        logger.info(
            f"Saved final checkpoint to {out}",
            extra={"event": "checkpoint_saved", "kind": "final", "epoch": config.epochs},
        )
    return TrainResult(params, best_params, best_epoch, best_map, log)
