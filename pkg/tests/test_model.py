from __future__ import annotations

from collections import OrderedDict

import numpy as np
import pytest

from masked_supervision import numerics as nx
from masked_supervision.errors import ShapeError
from masked_supervision.model import Architecture, ModelParams, forward_logits, init_params, predict
from masked_supervision.numerics import Tensor, grad_check


@pytest.fixture
def tiny_arch() -> Architecture:
    return Architecture(num_classes=2, input_size=(6, 6), widths=(3, 4), strides=(1, 2))


@pytest.fixture
def batch() -> np.ndarray:
    return np.random.default_rng(7).uniform(size=(3, 3, 6, 6))


def zeroed(arch: Architecture) -> ModelParams:
    return ModelParams(
        arch,
        OrderedDict((name, Tensor(np.zeros(shape))) for name, shape in arch.parameter_shapes().items()),
    )


# ==================== Architecture ====================

def test_default_architecture_parameter_layout() -> None:
    shapes = Architecture().parameter_shapes()
    assert list(shapes) == [
        "conv1.weight", "conv1.bias",
        "conv2.weight", "conv2.bias",
        "conv3.weight", "conv3.bias",
        "head.weight", "head.bias",
    ]
    assert shapes["conv1.weight"] == (16, 3, 3, 3)
    assert shapes["conv3.weight"] == (64, 32, 3, 3)
    assert shapes["head.weight"] == (8, 64)


def test_default_blocks_all_downsample() -> None:
    arch = Architecture()
    assert arch.widths == (16, 32, 64)
    assert arch.strides == (2, 2, 2)
    logits = forward_logits(init_params(arch, seed=0), np.zeros((2, 3, 64, 64)))
    assert logits.shape == (2, 8)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_classes": 0},
        {"widths": ()},
        {"widths": (4, 4), "strides": (1,)},
        {"strides": (0, 2, 2)},
        {"input_size": (2, 2), "kernel_size": 7, "padding": 0},
    ],
)
def test_invalid_architecture(kwargs: dict) -> None:
    with pytest.raises(ValueError):
        Architecture(**kwargs)


def test_architecture_dict_round_trip() -> None:
    arch = Architecture(num_classes=5, widths=(8, 8), strides=(1, 2))
    assert Architecture.from_dict(arch.to_dict()) == arch


# ==================== init_params ====================

def test_init_is_deterministic(tiny_arch: Architecture) -> None:
    a = init_params(tiny_arch, seed=3)
    b = init_params(tiny_arch, seed=3)
    assert a.equals(b)
    assert a.fingerprint() == b.fingerprint()
    assert not a.equals(init_params(tiny_arch, seed=4))


def test_init_biases_are_zero(tiny_arch: Architecture) -> None:
    params = init_params(tiny_arch, seed=0)
    for name, t in params.items():
        if name.endswith(".bias"):
            assert np.array_equal(t.data, np.zeros(t.shape))


def test_init_weight_std_matches_fan_in() -> None:
    arch = Architecture(in_channels=16, input_size=(8, 8), widths=(128,), strides=(1,))
    weights = init_params(arch, seed=11)["conv1.weight"].data
    assert weights.size >= 10_000
    target = np.sqrt(2.0 / (16 * 3 * 3))
    assert abs(weights.std() - target) <= 0.2 * target


# ==================== Forward ====================

def test_zero_model_predicts_one_half(tiny_arch: Architecture, batch: np.ndarray) -> None:
    params = zeroed(tiny_arch)
    assert np.array_equal(forward_logits(params, batch).data, np.zeros((3, 2)))
    assert np.array_equal(predict(params, batch).data, np.full((3, 2), 0.5))


def test_duplicated_image_gives_identical_rows(tiny_arch: Architecture, batch: np.ndarray) -> None:
    params = init_params(tiny_arch, seed=1)
    doubled = np.stack([batch[0], batch[0]])
    logits = forward_logits(params, doubled).data
    assert np.array_equal(logits[0], logits[1])


def test_predict_in_open_unit_interval(tiny_arch: Architecture, batch: np.ndarray) -> None:
    out = predict(init_params(tiny_arch, seed=2), batch).data
    assert out.shape == (3, 2)
    assert np.all((out > 0.0) & (out < 1.0))


def test_forward_is_pure(tiny_arch: Architecture, batch: np.ndarray) -> None:
    params = init_params(tiny_arch, seed=5)
    before = params.fingerprint()
    first = predict(params, batch).data
    second = predict(params, batch.copy()).data
    assert params.fingerprint() == before
    assert first.tobytes() == second.tobytes()


def test_forward_rejects_wrong_input_size(tiny_arch: Architecture) -> None:
    with pytest.raises(ShapeError, match="expected batch"):
        forward_logits(init_params(tiny_arch, seed=0), np.zeros((1, 3, 8, 8)))


def test_gradient_reaches_every_parameter(tiny_arch: Architecture, batch: np.ndarray) -> None:
    params = init_params(tiny_arch, seed=9)
    nx.sum(predict(params, batch)).backward()
    for name, grad in params.grads().items():
        assert grad.shape == params[name].shape
        assert np.any(grad != 0.0), name


def test_logits_gradient_check(tiny_arch: Architecture, batch: np.ndarray) -> None:
    params = init_params(tiny_arch, seed=13)
    names = list(params)
    probe = np.random.default_rng(0).normal(size=(3, 2))

    def fn(*tensors: Tensor) -> Tensor:
        p = ModelParams(tiny_arch, OrderedDict(zip(names, tensors)))
        return nx.sum(nx.mul(forward_logits(p, batch), Tensor(probe)))

    report = grad_check(fn, params.values())
    assert report.passed(1e-4)


# ==================== ModelParams ====================

def test_params_reject_wrong_shapes(tiny_arch: Architecture) -> None:
    tensors = OrderedDict(
        (name, Tensor(np.zeros(shape))) for name, shape in tiny_arch.parameter_shapes().items()
    )
    tensors["head.bias"] = Tensor(np.zeros(3))
    with pytest.raises(ShapeError, match="head.bias"):
        ModelParams(tiny_arch, tensors)


def test_copy_is_independent(tiny_arch: Architecture) -> None:
    params = init_params(tiny_arch, seed=0)
    clone = params.copy()
    assert clone.equals(params)
    clone["head.bias"].data[0] = 1.0
    assert not clone.equals(params)
