from __future__ import annotations

from unittest.mock import MagicMock, patch

from masked_supervision import telemetry
from masked_supervision.data import LoadedDataset
from masked_supervision.masking import MaskSubsets
from masked_supervision.model import Architecture
from masked_supervision.telemetry import DummyMetric, TrainingMetrics
from masked_supervision.training import TrainConfig, train


def test_metrics_calls(
    tiny_arch: Architecture, tiny_train: LoadedDataset, tiny_test: LoadedDataset, tiny_masks: MaskSubsets
) -> None:
    """Every step and every epoch is reported."""
    metrics = MagicMock()
    config = TrainConfig(epochs=2, batch_size=8, augment=False, eval_workers=1)
    train(config, tiny_train, tiny_test, tiny_masks, tiny_arch, metrics=metrics)

    steps_per_epoch = -(-len(tiny_train) // config.batch_size)
    assert metrics.record_step.call_count == 2 * steps_per_epoch
    assert metrics.record_epoch.call_count == 2
    losses, test_map = metrics.record_epoch.call_args.args
    assert set(losses) >= {"rcg", "mabr", "laco", "total"}
    assert 0.0 < test_map <= 1.0
    metrics.record_abort.assert_not_called()


def test_instances_share_registered_metrics() -> None:
    a = TrainingMetrics("a")
    b = TrainingMetrics("b")
    assert a.steps is b.steps
    assert a.run != b.run
    a.record_step(4, 0.01)
    a.record_epoch({"total": 0.5}, 0.7)
    a.record_abort("NonFiniteError")


def test_without_prometheus_calls_are_noops() -> None:
    with patch.object(telemetry, "HAS_PROMETHEUS", False):
        m = TrainingMetrics("offline")
        m.steps = DummyMetric()
        m.record_step(4, 0.01)
        m.record_epoch({"total": 0.5}, 0.7)


def test_dummy_metric_chains() -> None:
    metric = DummyMetric("name", "doc", ["run"])
    assert metric.labels(run="x") is metric
    metric.labels(run="x").inc()
    metric.set(1.0)
    metric.observe(0.1)
