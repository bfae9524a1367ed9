from __future__ import annotations

from collections import OrderedDict
from dataclasses import replace
from pathlib import Path
from typing import Tuple

import numpy as np
import pytest

from masked_supervision import numerics as nx
from masked_supervision import training
from masked_supervision.checkpoint import load_checkpoint
from masked_supervision.data import DatasetConfig, LoadedDataset, class_names, generate_split
from masked_supervision.errors import (
    DivergenceError,
    EmptySubsetError,
    NonFiniteError,
    ShapeError,
    WeightSharingError,
)
from masked_supervision.loss import LossWeights, total_loss
from masked_supervision.masking import Mask, MaskSubsets, apply_masks
from masked_supervision.model import Architecture, ModelParams, init_params, predict
from masked_supervision.numerics import Tensor, grad_check
from masked_supervision.stats import EpochStats
from masked_supervision.training import (
    OptimizerState,
    TrainConfig,
    msl_step,
    read_train_log,
    sgd_step,
    train,
    vanilla_step,
)

SCALAR_ARCH = Architecture(
    num_classes=1, in_channels=1, input_size=(1, 1), widths=(1,), kernel_size=1, strides=(1,), padding=0
)


def scalar_params(value: float = 1.0) -> ModelParams:
    return ModelParams(
        SCALAR_ARCH,
        OrderedDict(
            (name, Tensor(np.full(shape, value), requires_grad=True))
            for name, shape in SCALAR_ARCH.parameter_shapes().items()
        ),
    )


def constant_grads(params: ModelParams, value: float) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((name, np.full(t.shape, value)) for name, t in params.items())


def quick_config(**kwargs) -> TrainConfig:
    base = dict(epochs=2, batch_size=8, lr=0.05, augment=False, eval_workers=1)
    base.update(kwargs)
    return TrainConfig(**base)


# ==================== TrainConfig ====================

def test_train_config_defaults() -> None:
    cfg = TrainConfig()
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs) == (0.01, 0.9, 0.0001, 60)
    assert cfg.weights == LossWeights(0.3, 0.2, 0.5)
    assert cfg.uses_masked_branch


@pytest.mark.parametrize(
    "kwargs",
    [{"lr": 0.0}, {"momentum": 1.0}, {"batch_size": 0}, {"masking": "medium"}, {"weights": "0,1"}],
)
def test_train_config_validation(kwargs: dict) -> None:
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_masking_none_forces_vanilla_weights() -> None:
    cfg = TrainConfig(masking="none", weights="msl")
    assert cfg.weights == LossWeights.preset("vanilla")
    assert not cfg.uses_masked_branch
    assert cfg.to_dict()["weights"] == [1.0, 0.0, 0.0]


# ==================== sgd_step ====================

def test_sgd_zero_lr_leaves_params() -> None:
    params = scalar_params()
    before = params.fingerprint()
    sgd_step(params, constant_grads(params, 0.5), OptimizerState.for_params(params), 0.0, 0.9, 0.1)
    assert params.fingerprint() == before


def test_sgd_plain_step() -> None:
    params = scalar_params()
    sgd_step(params, constant_grads(params, 0.5), OptimizerState.for_params(params), 0.1, 0.0, 0.0)
    for _, t in params.items():
        assert t.data.ravel()[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_weight_decay_trace() -> None:
    params = scalar_params()
    state = OptimizerState.for_params(params)
    lr, momentum, wd, g = 0.1, 0.9, 0.1, 0.5

    sgd_step(params, constant_grads(params, g), state, lr, momentum, wd)
    theta1 = params["head.bias"].data[0]
    assert state.velocity["head.bias"][0] == pytest.approx(0.6, abs=1e-15)
    assert theta1 == pytest.approx(0.94, abs=1e-15)

    sgd_step(params, constant_grads(params, g), state, lr, momentum, wd)
    g2 = g + wd * theta1
    v2 = momentum * 0.6 + g2
    assert state.velocity["head.bias"][0] == pytest.approx(v2, abs=1e-15)
    assert params["head.bias"].data[0] == pytest.approx(theta1 - lr * v2, abs=1e-15)


def test_sgd_non_finite_gradient_aborts_without_update() -> None:
    params = scalar_params()
    state = OptimizerState.for_params(params)
    grads = constant_grads(params, 0.5)
    grads["head.bias"] = np.array([np.inf])
    before = params.fingerprint()
    with pytest.raises(NonFiniteError, match="head.bias"):
        sgd_step(params, grads, state, 0.1, 0.9, 0.0)
    assert params.fingerprint() == before
    assert all(not v.any() for v in state.velocity.values())


def test_sgd_missing_gradient() -> None:
    params = scalar_params()
    grads = constant_grads(params, 0.5)
    del grads["conv1.bias"]
    with pytest.raises(ShapeError, match="conv1.bias"):
        sgd_step(params, grads, OptimizerState.for_params(params), 0.1, 0.0, 0.0)


# ==================== Steps ====================

def test_all_ones_masks_reduce_to_scaled_vanilla_step(
    tiny_arch: Architecture, tiny_train: LoadedDataset
) -> None:
    images = tiny_train.images[:4]
    labels = tiny_train.labels[:4].astype(np.float64)
    ones = MaskSubsets(low=(Mask.ones(16, 16),))
    weights = LossWeights(0.3, 0.2, 0.5)

    msl_params = init_params(tiny_arch, seed=1)
    cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0, weights=weights, masking="low")
    result = msl_step(msl_params, OptimizerState(), images, labels, ones, cfg, np.random.default_rng(0))
    assert result.breakdown.laco == 0.0
    assert result.breakdown.rcg == result.breakdown.mabr
    assert result.mask_percentages == (0.0,) * 4

    plain_params = init_params(tiny_arch, seed=1)
    plain_cfg = TrainConfig(lr=0.1 * (0.3 + 0.2), momentum=0.0, weight_decay=0.0, masking="none")
    vanilla_step(plain_params, OptimizerState(), images, labels, plain_cfg)
    for name, t in msl_params.items():
        np.testing.assert_allclose(t.data, plain_params[name].data, rtol=1e-12, atol=1e-14)


def test_vanilla_weights_without_masking_match_vanilla_step_bitwise(
    tiny_arch: Architecture, tiny_train: LoadedDataset
) -> None:
    images = tiny_train.images[:6]
    labels = tiny_train.labels[:6].astype(np.float64)
    cfg = TrainConfig(masking="none")

    a = init_params(tiny_arch, seed=2)
    b = init_params(tiny_arch, seed=2)
    sa, sb = OptimizerState(), OptimizerState()
    for _ in range(3):
        ra = msl_step(a, sa, images, labels, None, cfg, np.random.default_rng(0))
        rb = vanilla_step(b, sb, images, labels, cfg)
        assert ra.breakdown.total == rb.breakdown.total
    assert a.fingerprint() == b.fingerprint()


def test_step_reports_pre_step_fingerprint(
    tiny_arch: Architecture, tiny_train: LoadedDataset, tiny_masks: MaskSubsets
) -> None:
    params = init_params(tiny_arch, seed=3)
    before = params.fingerprint()
    result = msl_step(
        params, OptimizerState(), tiny_train.images[:4], tiny_train.labels[:4].astype(np.float64),
        tiny_masks, TrainConfig(), np.random.default_rng(1),
    )
    assert result.fingerprint == before
    assert params.fingerprint() != before
    assert len(result.mask_percentages) == 4
    assert all(p > 50.0 for p in result.mask_percentages)


def test_both_branches_read_the_shared_parameters(
    tiny_arch: Architecture, tiny_train: LoadedDataset
) -> None:
    params = init_params(tiny_arch, seed=3)
    out = predict(params, tiny_train.images[:2])
    assert {id(t) for t in nx.leaves(out)} == {id(t) for t in params.values()}


def test_masked_branch_on_a_parameter_copy_is_rejected(
    tiny_arch: Architecture,
    tiny_train: LoadedDataset,
    tiny_masks: MaskSubsets,
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    calls = []

    def forked_predict(p: ModelParams, batch: Tensor) -> Tensor:
        calls.append(p)
        return predict(p.copy() if len(calls) == 2 else p, batch)

    monkeypatch.setattr(training, "predict", forked_predict)
    params = init_params(tiny_arch, seed=3)
    before = params.fingerprint()
    with pytest.raises(WeightSharingError, match="masked branch"):
        msl_step(
            params, OptimizerState(), tiny_train.images[:4], tiny_train.labels[:4].astype(np.float64),
            tiny_masks, TrainConfig(), np.random.default_rng(1),
        )
    assert len(calls) == 2
    assert params.fingerprint() == before


def test_step_with_empty_subset(tiny_arch: Architecture, tiny_train: LoadedDataset) -> None:
    only_low = MaskSubsets(low=(Mask.ones(16, 16),))
    params = init_params(tiny_arch, seed=0)
    with pytest.raises(EmptySubsetError):
        msl_step(
            params, OptimizerState(), tiny_train.images[:2], tiny_train.labels[:2].astype(np.float64),
            only_low, TrainConfig(masking="high"), np.random.default_rng(0),
        )


def test_non_finite_loss_leaves_params_untouched(tiny_arch: Architecture) -> None:
    params = init_params(tiny_arch, seed=0)
    before = params.fingerprint()
    images = np.full((2, 3, 16, 16), np.nan)
    labels = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    with pytest.raises(DivergenceError):
        vanilla_step(params, OptimizerState(), images, labels, TrainConfig(masking="none"))
    assert params.fingerprint() == before


def test_dual_branch_gradient_check() -> None:
    arch = Architecture(
        num_classes=2, input_size=(4, 4), widths=(2,), kernel_size=3, strides=(1,), padding=1
    )
    params = init_params(arch, seed=5)
    names = list(params)
    rng = np.random.default_rng(8)
    images = rng.uniform(size=(2, 3, 4, 4))
    labels = np.array([[1.0, 0.0], [1.0, 1.0]])
    grid = np.ones((4, 4), dtype=np.uint8)
    grid[1:3, :] = 0
    masked = apply_masks(images, [Mask.from_grid(grid)] * 2)

    def fn(*tensors: Tensor) -> Tensor:
        p = ModelParams(arch, OrderedDict(zip(names, tensors)))
        return total_loss(predict(p, images), predict(p, masked), labels, LossWeights()).tensor

    report = grad_check(fn, params.values())
    assert report.passed(1e-4)


# ==================== train ====================

def test_zero_epochs_returns_initial_params(
    tiny_arch: Architecture, tiny_train: LoadedDataset, tiny_test: LoadedDataset, tiny_masks: MaskSubsets
) -> None:
    result = train(quick_config(epochs=0), tiny_train, tiny_test, tiny_masks, tiny_arch)
    assert result.log == []
    assert result.params.equals(init_params(tiny_arch, 0))


def test_train_is_deterministic(
    tiny_arch: Architecture, tiny_train: LoadedDataset, tiny_test: LoadedDataset, tiny_masks: MaskSubsets
) -> None:
    cfg = quick_config(augment=True)
    a = train(cfg, tiny_train, tiny_test, tiny_masks, tiny_arch)
    b = train(cfg, tiny_train, tiny_test, tiny_masks, tiny_arch)
    assert a.log == b.log
    assert a.params.equals(b.params)


@pytest.fixture(scope="module")
def four_class() -> Tuple[LoadedDataset, LoadedDataset]:
    config = DatasetConfig(
        n=200, n_test=40, num_classes=4, height=16, width=16, size_range=(4, 8), objects_range=(1, 3)
    )
    splits = []
    for split in ("train", "test"):
        samples = [s for s, _ in generate_split(config, split)]
        splits.append(LoadedDataset.from_samples(
            samples, class_names(4), config.small_threshold, config.occlusion_threshold
        ))
    return splits[0], splits[1]


def test_train_loss_goes_down(
    four_class: Tuple[LoadedDataset, LoadedDataset], tiny_masks: MaskSubsets
) -> None:
    arch = Architecture(num_classes=4, input_size=(16, 16), widths=(4, 8), strides=(1, 2))
    cfg = quick_config(epochs=5, lr=0.01)
    result = train(cfg, *four_class, tiny_masks, arch)
    totals = [e.total for e in result.log]
    assert len(totals) == 5
    for epoch, (prev, cur) in enumerate(zip(totals, totals[1:]), start=2):
        assert cur <= prev + 1e-3, f"epoch {epoch}: {cur:.6f} > {prev:.6f}"
    assert totals[-1] < totals[0]
    assert all(0.0 <= e.test_map <= 1.0 for e in result.log)
    assert result.best_map == max(e.test_map for e in result.log)


def test_vanilla_flag_matches_masking_none(
    tiny_arch: Architecture, tiny_train: LoadedDataset, tiny_test: LoadedDataset
) -> None:
    a = train(quick_config(masking="none"), tiny_train, tiny_test, None, tiny_arch)
    b = train(quick_config(), tiny_train, tiny_test, None, tiny_arch, vanilla=True)
    assert a.log == b.log
    assert a.params.equals(b.params)
    assert all(e.mabr == 0.0 and e.laco == 0.0 for e in a.log)


def test_train_writes_artifacts(
    tiny_arch: Architecture,
    tiny_train: LoadedDataset,
    tiny_test: LoadedDataset,
    tiny_masks: MaskSubsets,
    tmp_path: Path,
) -> None:
    result = train(
        quick_config(checkpoint_every=1), tiny_train, tiny_test, tiny_masks, tiny_arch, tmp_path
    )
    for name in ("best.ckpt", "final.ckpt", "epoch_001.ckpt", "epoch_002.ckpt", "train_log.csv"):
        assert (tmp_path / name).is_file(), name
    assert load_checkpoint(tmp_path / "final.ckpt").equals(result.params)
    assert load_checkpoint(tmp_path / "best.ckpt").equals(result.best_params)
    assert read_train_log(tmp_path / "train_log.csv") == result.log


def test_train_requires_masks_for_masked_branch(
    tiny_arch: Architecture, tiny_train: LoadedDataset, tiny_test: LoadedDataset
) -> None:
    with pytest.raises(ValueError, match="needs mask subsets"):
        train(quick_config(), tiny_train, tiny_test, None, tiny_arch)


def test_train_rejects_mismatched_architecture(
    tiny_train: LoadedDataset, tiny_test: LoadedDataset, tiny_masks: MaskSubsets
) -> None:
    wrong = Architecture(num_classes=5, input_size=(16, 16), widths=(4,), strides=(1,))
    with pytest.raises(ShapeError, match="K=5"):
        train(quick_config(), tiny_train, tiny_test, tiny_masks, wrong)


def test_divergence_keeps_last_good_checkpoint(
    tiny_arch: Architecture, tiny_train: LoadedDataset, tiny_test: LoadedDataset, tmp_path: Path
) -> None:
    images = tiny_train.images.copy()
    images[:] = np.nan
    poisoned = replace(tiny_train, images=images)
    with pytest.raises(DivergenceError):
        train(quick_config(masking="none"), poisoned, tiny_test, None, tiny_arch, tmp_path)
    assert load_checkpoint(tmp_path / "last_good.ckpt").equals(init_params(tiny_arch, 0))


# ==================== EpochStats ====================

def test_epoch_stats_weight_by_batch_size() -> None:
    from masked_supervision.loss import LossBreakdown

    stats = EpochStats()
    stats.record_step(LossBreakdown(1.0, 0.0, 0.0, 1.0), 3)
    stats.record_step(LossBreakdown(3.0, 0.0, 0.0, 3.0), 1)
    stats.record_masks([60.0, 80.0])
    assert stats.mean_total == pytest.approx(1.5)
    snapshot = stats.to_dict()
    assert snapshot["steps"] == 2
    assert snapshot["mean_masked_percent"] == pytest.approx(70.0)
    stats.reset()
    assert stats.means()["total"] == 0.0


def test_epoch_end_log_carries_epoch_stats(
    tiny_arch: Architecture,
    tiny_train: LoadedDataset,
    tiny_test: LoadedDataset,
    tiny_masks: MaskSubsets,
    caplog: pytest.LogCaptureFixture,
) -> None:
    with caplog.at_level("INFO", logger="masked_supervision.training"):
        train(quick_config(), tiny_train, tiny_test, tiny_masks, tiny_arch)
    ends = [r for r in caplog.records if getattr(r, "event", None) == "epoch_end"]
    assert [r.epoch for r in ends] == [1, 2]
    snapshot = ends[-1].stats
    assert snapshot["steps"] == 3
    assert snapshot["samples"] == len(tiny_train)
    assert snapshot["aborted_steps"] == 0
    assert snapshot["mean_masked_percent"] > 50.0
    assert snapshot["total"] == pytest.approx(ends[-1].total)


def test_step_aborted_log_counts_the_abort(
    tiny_arch: Architecture,
    tiny_train: LoadedDataset,
    tiny_test: LoadedDataset,
    caplog: pytest.LogCaptureFixture,
) -> None:
    images = tiny_train.images.copy()
    images[:] = np.nan
    poisoned = replace(tiny_train, images=images)
    with pytest.raises(DivergenceError):
        train(quick_config(masking="none"), poisoned, tiny_test, None, tiny_arch)
    aborted = [r for r in caplog.records if getattr(r, "event", None) == "step_aborted"]
    assert len(aborted) == 1
    assert aborted[0].stats["aborted_steps"] == 1
    assert aborted[0].stats["steps"] == 0
