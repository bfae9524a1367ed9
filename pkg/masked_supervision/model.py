from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Mapping, Tuple, Union

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .numerics import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Architecture:
    """Backbone descriptor: conv blocks -> global average pool -> linear(K).

    Block ``i`` is conv(widths[i], kernel_size, strides[i], padding) followed by
    relu. The default strides halve the resolution in every block, stem included.
    """

    num_classes: int = 8
    in_channels: int = 3
    input_size: Tuple[int, int] = (64, 64)
    widths: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    strides: Tuple[int, ...] = (2, 2, 2)
    padding: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))

        if self.num_classes <= 0:
            raise ValueError(f"num_classes must be > 0, got {self.num_classes}")
        if self.in_channels <= 0:
            raise ValueError(f"in_channels must be > 0, got {self.in_channels}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be (H, W) with H, W >= 1, got {self.input_size}")
        if not self.widths or min(self.widths) <= 0:
            raise ValueError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if len(self.strides) != len(self.widths):
            raise ValueError(
                f"strides ({len(self.strides)}) and widths ({len(self.widths)}) must have equal length"
            )
        if min(self.strides) < 1:
            raise ValueError(f"strides must be >= 1, got {self.strides}")
        if self.kernel_size < 1 or self.padding < 0:
            raise ValueError(
                f"invalid kernel_size={self.kernel_size} / padding={self.padding}"
            )
        h, w = self.input_size
        for i, s in enumerate(self.strides):
            if self.kernel_size > min(h, w) + 2 * self.padding:
                raise ValueError(f"block {i}: kernel_size {self.kernel_size} exceeds feature map {h}x{w}")
            h = (h + 2 * self.padding - self.kernel_size) // s + 1
            w = (w + 2 * self.padding - self.kernel_size) // s + 1

    def parameter_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        c = self.in_channels
        k = self.kernel_size
        for i, width in enumerate(self.widths, start=1):
            shapes[f"conv{i}.weight"] = (width, c, k, k)
            shapes[f"conv{i}.bias"] = (width,)
            c = width
        shapes["head.weight"] = (self.num_classes, c)
        shapes["head.bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        return {key: list(v) if isinstance(v, tuple) else v for key, v in d.items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "Architecture":
        return cls(**dict(data))  # type: ignore[arg-type]


@dataclass
class ModelParams:
    """Ordered name -> Tensor collection for one backbone, plus its architecture."""

    arch: Architecture
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __post_init__(self) -> None:
        expected = self.arch.parameter_shapes()
        if list(self.tensors) != list(expected):
            raise ShapeError(
                f"parameter names {list(self.tensors)} do not match architecture {list(expected)}"
            )
        for name, shape in expected.items():
            found = self.tensors[name].shape
            if found != shape:
                raise ShapeError(f"{name}: expected shape {shape}, found {found}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self) -> List[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        nx.zero_grad(self.values())

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (name, t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.tensors.items()
        )

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            nx.check_finite(name, t.data)

    def fingerprint(self) -> str:
        """sha256 over names, shapes and raw little-endian values."""
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode("utf-8"))
            h.update(repr(t.shape).encode("utf-8"))
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            OrderedDict(
                (name, Tensor(t.data, requires_grad=t.requires_grad)) for name, t in self.tensors.items()
            ),
        )

    def equals(self, other: "ModelParams") -> bool:
        """Bit-level equality of architecture and every parameter."""
        if self.arch != other.arch or list(self.tensors) != list(other.tensors):
            return False
        return all(
            np.array_equal(t.data, other.tensors[name].data) for name, t in self.tensors.items()
        )


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights (He-uniform, std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in arch.parameter_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    params = ModelParams(arch, tensors)
    logger.debug(f"Initialized {params.num_parameters()} parameters (seed={seed})")
    return params


def forward_logits(params: ModelParams, batch: Union[Tensor, np.ndarray]) -> Tensor:
    """Raw N x K logits of the backbone. Pure: never mutates ``params``."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    arch = params.arch
    expected = (arch.in_channels,) + tuple(arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"forward: expected batch [N,{','.join(map(str, expected))}], got {x.shape}")
    for i, stride in enumerate(arch.strides, start=1):
        x = nx.relu(
            nx.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride, arch.padding)
        )
    pooled = nx.global_avg_pool(x)
    return nx.linear(pooled, params["head.weight"], params["head.bias"])


def predict(params: ModelParams, batch: Union[Tensor, np.ndarray]) -> Tensor:
    """y_p = sigmoid(f_theta(I)); the same function serves both training branches."""
    return nx.sigmoid(forward_logits(params, batch))
