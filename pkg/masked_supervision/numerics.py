"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When gradients are enabled and at
least one input requires them, the result remembers its parents and a closure
computing the vector-Jacobian product; :meth:`Tensor.backward` walks that record
in reverse topological order.

Only bias-add broadcasts. All other elementwise ops require identical shapes.
"""
from __future__ import annotations

import contextvars
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "msl_grad_enabled", default=True
)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed operations without recording a graph (context-local)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def check_finite(name: str, array: np.ndarray) -> None:
    """Health check: raise NonFiniteError if ``array`` holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(f"{name} contains {bad} non-finite value(s)")


class Tensor:
    """A row-major float64 array with optional gradient state."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)  # copy: callers keep ownership of their array
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        # Set on sigmoid outputs so probability-space BCE can use the fused logit form
        self._logits: Optional["Tensor"] = None

    @classmethod
    def _result(
        cls,
        data: np.ndarray,
        parents: Tuple["Tensor", ...],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._logits = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it with dSelf/dLeaf.

        Leaf gradients accumulate: calling backward twice without
        :func:`zero_grad` adds the second pass on top of the first. The graph is
        retained, so repeated calls are allowed.
        """
        if self.data.ndim != 0:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def _topological_order(root: Tensor) -> List[Tensor]:
    # Iterative DFS; each node is emitted once, after all of its parents.
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def leaves(root: Tensor) -> List[Tensor]:
    """Trainable leaf tensors the graph of ``root`` reads, in topological order."""
    return [t for t in _topological_order(root) if t.requires_grad and t._backward is None]


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ==================== Elementwise and reductions ====================

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return Tensor._result(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor._result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def square(a: Tensor) -> Tensor:
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._result(
        np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._result(
        np.asarray(a.data.sum() / n), (a,), lambda g: (np.full_like(a.data, g / n),), "mean"
    )


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out_data = _stable_sigmoid(x.data)
    out = Tensor._result(
        out_data, (x,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid"
    )
    out._logits = x
    return out


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0; NaN propagates
    active = x.data > 0
    return Tensor._result(np.maximum(x.data, 0.0), (x,), lambda g: (g * active,), "relu")


# ==================== Layers ====================

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an FCkk kernel bank (im2col + one GEMM)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [N,C,H,W], got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D [F,C,kh,kw], got shape {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: kernel channel dimension C={kc} != input channels C={c}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias must have shape ({f},) for F={f}, got {bias.shape}")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel height kh={kh} exceeds padded height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel width kw={kw} exceeds padded width {w + 2 * padding}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    cols = windows[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out_mat = cols @ wmat.T + bias.data
    out_data = np.ascontiguousarray(out_mat.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        d_bias = g_mat.sum(axis=0)
        d_kernel = (g_mat.T @ cols).reshape(f, c, kh, kw)
        d_x = None
        if x.requires_grad:
            d_cols = (g_mat @ wmat).reshape(n, ho, wo, c, kh, kw)
            d_xp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    d_xp[
                        :, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride
                    ] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            d_x = d_xp[:, :, padding : padding + h, padding : padding + w]
        return d_x, d_kernel, d_bias

    return Tensor._result(out_data, (x, kernel, bias), backward, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(
            f"linear: expected x [N,D] and weight [K,D], got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: inner dimension D mismatch, input has {x.shape[1]}, weight has {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out_data = x.data @ weight.data.T + bias.data

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return Tensor._result(out_data, (x, weight, bias), backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    area = float(h * w)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.broadcast_to((g / area)[:, :, None, None], (n, c, h, w)).copy(),)

    return Tensor._result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


# ==================== Losses ====================

PROB_EPS = 1e-12


def binary_cross_entropy(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean BCE over all entries, with ``pred`` clamped to [1e-12, 1 - 1e-12]."""
    if pred.shape != tuple(target.shape):
        raise ShapeError(f"bce: pred shape {pred.shape} != target shape {tuple(target.shape)}")
    p = np.clip(pred.data, PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64)
    n = p.size
    value = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n
    inside = (pred.data > PROB_EPS) & (pred.data < 1.0 - PROB_EPS)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * inside * (p - t) / (p * (1.0 - p)) / n,)

    return Tensor._result(np.asarray(value), (pred,), backward, "bce")


def binary_cross_entropy_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean BCE of sigmoid(logits) against ``target`` in the stable fused form."""
    if logits.shape != tuple(target.shape):
        raise ShapeError(
            f"bce_with_logits: logits shape {logits.shape} != target shape {tuple(target.shape)}"
        )
    z = logits.data
    t = np.asarray(target, dtype=np.float64)
    n = z.size
    value = np.sum(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))) / n

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * (_stable_sigmoid(z) - t) / n,)

    return Tensor._result(np.asarray(value), (logits,), backward, "bce_with_logits")


# ==================== Gradient checking ====================

REL_ERROR_FLOOR = 1e-12


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_input: int
    worst_index: Tuple[int, ...]

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    fn: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar ``fn`` with central differences.

    ``x`` may be one tensor or a sequence; ``fn`` is called with as many
    positional tensors. The relative error per element is
    ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data, requires_grad=True) for t in inputs]
    out = fn(*leaves)
    check_finite("grad_check output", out.data)
    out.backward()

    def evaluate(arrays: List[np.ndarray]) -> float:
        with no_grad():
            value = fn(*[Tensor(a) for a in arrays])
        if not np.isfinite(value.data).all():
            raise NonFiniteError("grad_check: fn produced a non-finite value")
        return value.item()

    max_rel, max_abs = 0.0, 0.0
    worst: Tuple[int, Tuple[int, ...]] = (0, ())
    base = [leaf.data.copy() for leaf in leaves]
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for idx in np.ndindex(*leaf.data.shape):
            arrays = [a.copy() for a in base]
            arrays[k][idx] = base[k][idx] + eps
            f_plus = evaluate(arrays)
            arrays[k][idx] = base[k][idx] - eps
            f_minus = evaluate(arrays)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
            max_abs = max(max_abs, abs_err)
            if rel_err > max_rel:
                max_rel = rel_err
                worst = (k, tuple(int(i) for i in idx))
    return GradCheckReport(max_rel, max_abs, worst[0], worst[1])
