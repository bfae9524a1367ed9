from __future__ import annotations

import logging
from typing import Any, Dict

logger = logging.getLogger(__name__)


# Dummy metric class for fallback
class DummyMetric:
    def __init__(self, *args, **kwargs): pass
    def inc(self, *args, **kwargs): pass
    def set(self, *args, **kwargs): pass
    def observe(self, *args, **kwargs): pass
    def labels(self, *args, **kwargs): return self


try:
    from prometheus_client import Counter, Gauge, Histogram
    HAS_PROMETHEUS = True
except ImportError:
    HAS_PROMETHEUS = False
    Counter = Gauge = Histogram = DummyMetric  # type: ignore

_METRIC_NAMES = ("steps", "samples", "aborted", "loss", "test_map", "step_latency")


class TrainingMetrics:
    """Prometheus metrics for training runs, labelled by run name.

    Metric objects are registered once per process and shared by every
    instance; without prometheus_client all calls are no-ops.
    """

    _metrics_cache: Dict[str, Any] = {}

    def __init__(self, run: str = "default") -> None:
        self.run = run
        if "metrics" in self._metrics_cache:
            cached = self._metrics_cache["metrics"]
            for name in _METRIC_NAMES:
                setattr(self, name, cached[name])
            return
        try:
            self.steps = Counter("msl_train_steps_total", "Optimizer steps taken", ["run"])
            self.samples = Counter("msl_train_samples_total", "Training samples seen", ["run"])
            self.aborted = Counter(
                "msl_train_aborted_steps_total", "Steps aborted on non-finite values", ["run", "reason"]
            )
            self.loss = Gauge("msl_train_loss", "Last epoch mean loss per term", ["run", "term"])
            self.test_map = Gauge("msl_test_map", "Test mAP after the last epoch", ["run"])
            self.step_latency = Histogram("msl_step_latency_seconds", "Wall time per training step", ["run"])
            self._metrics_cache["metrics"] = {name: getattr(self, name) for name in _METRIC_NAMES}
        except Exception as e:
            logger.warning(f"Failed to create prometheus metrics: {e}. Using dummy metrics.")
            for name in _METRIC_NAMES:
                setattr(self, name, DummyMetric())

    def record_step(self, batch_size: int, seconds: float) -> None:
        if not HAS_PROMETHEUS: return
        self.steps.labels(run=self.run).inc()
        self.samples.labels(run=self.run).inc(batch_size)
        self.step_latency.labels(run=self.run).observe(seconds)

    def record_abort(self, reason: str) -> None:
        if not HAS_PROMETHEUS: return
        self.aborted.labels(run=self.run, reason=reason).inc()

    def record_epoch(self, losses: Dict[str, float], test_map: float) -> None:
        if not HAS_PROMETHEUS: return
        for term, value in losses.items():
            self.loss.labels(run=self.run, term=term).set(value)
        self.test_map.labels(run=self.run).set(test_map)
