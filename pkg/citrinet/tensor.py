"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every op computes its value with numpy and, when one of its inputs requires grad,
records a `Node` holding the inputs and a closure that maps the gradient of the
output to gradients of the inputs. `Tape.from_output` orders the recorded tensors
topologically and `backward` visits each of them exactly once in reverse order.
"""

import contextlib
import logging
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from citrinet.errors import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Axis = Union[None, int, Tuple[int, ...]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed block without recording any op."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    """One recorded op: its inputs and its local gradient closure."""

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], grad_fn: GradFn) -> None:
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_ufunc__ = None

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence],
        requires_grad: bool = False,
        node: Optional[Node] = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node = node

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, tape: Optional["Tape"] = None) -> None:
        backward(self, tape)

    # arithmetic
    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: "TensorLike") -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: "TensorLike") -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return getitem(self, index)

    # shape and reductions
    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    # elementwise
    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def swish(self) -> "Tensor":
        return swish(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return log_softmax(self, axis)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap a constant as a tensor that does not require grad."""
    return value if isinstance(value, Tensor) else Tensor(value)


def record_op(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=requires, node=Node(op, inputs, grad_fn) if requires else None)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Tape:
    """Topologically ordered list of the tensors that lead to an output."""

    def __init__(self, tensors: List[Tensor]) -> None:
        self.tensors = tensors

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in reversed(tensor.node.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    @property
    def nodes(self) -> List[Node]:
        return [t.node for t in self.tensors if t.node is not None]

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into the `.grad` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = tape if tape is not None else Tape.from_output(loss)

    grads = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(tape.tensors):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            tensor.grad = np.array(grad) if tensor.grad is None else tensor.grad + grad
            continue
        for parent, parent_grad in zip(tensor.node.inputs, tensor.node.grad_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# elementwise arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return record_op(
        "power",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record_op("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return record_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return record_op("sigmoid", y, (a,), lambda g: (_sigmoid_backward(y, g),))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return record_op("relu", np.where(positive, a.data, 0.0), (a,), lambda g: (g * positive,))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    return record_op(
        "swish",
        a.data * s,
        (a,),
        lambda g: (g * (s + a.data * s * (1.0 - s)),),
    )


# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner extents disagree", a.shape, b.shape)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op("matmul", np.matmul(a.data, b.data), (a, b), grad_fn)


def tensor_sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return record_op("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tensor_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index: object) -> Tensor:
    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record_op("getitem", a.data[index], (a,), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    return record_op(
        "stack",
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def masked_fill(a: Tensor, keep: np.ndarray, value: float = 0.0) -> Tensor:
    """Keep entries where `keep` is true, replace the rest with `value`."""
    keep = np.broadcast_to(keep, a.shape)
    return record_op("masked_fill", np.where(keep, a.data, value), (a,), lambda g: (g * keep,))


# normalized exponentials


def _softmax_backward(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return record_op("softmax", y, (a,), lambda g: (_softmax_backward(y, g, axis),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return record_op(
        "log_softmax",
        y,
        (a,),
        lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),),
    )


def masked_softmax(a: Tensor, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to the positions where `allowed` is true.

    Disallowed positions get probability exactly 0. A slice with no allowed
    position raises ContractError instead of producing NaN.
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), a.shape)
    if not np.all(allowed.any(axis=axis)):
        raise ContractError("softmax row has no allowed position")
    z = np.where(allowed, a.data, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return record_op("masked_softmax", y, (a,), lambda g: (_softmax_backward(y, g, axis),))


# convolution


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    groups: int = 1,
) -> Tensor:
    """Grouped 1D cross-correlation with symmetric same padding.

    x is [B, Cin, T], weight is [Cout, Cin/groups, K] with K odd. Each side is
    padded with (K - 1) / 2 zeros, so the output has ceil(T / stride) frames and
    output frame t is centred on input frame stride * t.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError("conv1d expects [B,Cin,T] input and [Cout,Cin/g,K] weight", x.shape, weight.shape)
    batch, c_in, frames = x.shape
    c_out, c_group, kernel = weight.shape
    if kernel % 2 == 0:
        raise ConfigurationError(f"conv1d kernel size must be odd, got {kernel}")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv1d stride must be 1 or 2, got {stride}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_group != c_in // groups:
        raise DimensionError("conv1d weight does not match input channels per group", x.shape, weight.shape)

    pad = (kernel - 1) // 2
    out_frames = -(-frames // stride)
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    columns = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride, :]
    columns = columns.reshape(batch, groups, c_group, out_frames, kernel)
    w = weight.data.reshape(groups, c_out // groups, c_group, kernel)

    out = np.einsum("bgctk,gock->bgot", columns, w, optimize=True).reshape(batch, c_out, out_frames)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        g_grouped = g.reshape(batch, groups, c_out // groups, out_frames)
        g_weight = np.einsum("bgot,bgctk->gock", g_grouped, columns, optimize=True).reshape(weight.shape)
        g_columns = np.einsum("bgot,gock->bgctk", g_grouped, w, optimize=True).reshape(
            batch, c_in, out_frames, kernel
        )
        g_padded = np.zeros_like(padded)
        for k in range(kernel):
            g_padded[:, :, k : k + stride * (out_frames - 1) + 1 : stride] += g_columns[:, :, :, k]
        g_x = g_padded[:, :, pad : pad + frames]
        if bias is None:
            return g_x, g_weight
        return g_x, g_weight, g.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv1d", out, inputs, grad_fn)


# regularization


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout with a mask drawn from `rng`; identity outside training."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))
