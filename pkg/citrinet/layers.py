"""Reusable neural layers built on citrinet.tensor."""

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from citrinet.errors import ConfigurationError, ContractError, DimensionError
from citrinet.tensor import (
    Tensor,
    conv1d,
    dropout,
    masked_softmax,
    relu,
    swish,
)

DEFAULT_DROPOUT = 0.1
ACTIVATIONS = ("swish", "relu")
NORMS = ("layer", "batch")


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data: np.ndarray) -> None:
        super().__init__(data, requires_grad=True)


class Initializer:
    """Source of initial parameter values and of the dropout generator.

    With `rng=None` the initializer is in census mode: every array is a read-only
    zero view that costs no memory, so full-size models can be counted cheaply.
    """

    def __init__(self, rng: Optional[np.random.Generator]) -> None:
        self.rng = rng
        self.generator = rng if rng is not None else np.random.default_rng(0)

    @property
    def census(self) -> bool:
        return self.rng is None

    def uniform(self, shape: Tuple[int, ...], bound: float) -> np.ndarray:
        if self.census:
            return np.broadcast_to(np.float64(0.0), shape)
        return self.rng.uniform(-bound, bound, size=shape)

    def constant(self, shape: Tuple[int, ...], value: float) -> np.ndarray:
        if self.census:
            return np.broadcast_to(np.float64(value), shape)
        return np.full(shape, value, dtype=np.float64)


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value: object) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
            return
        object.__setattr__(self, name, value)

    def __getattr__(self, name: str) -> object:
        buffers = self.__dict__.get("_buffers", {})
        if name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__} has no attribute '{name}'")

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def __call__(self, *args: object, **kwargs: object) -> object:
        return self.forward(*args, **kwargs)

    def forward(self, *args: object, **kwargs: object) -> object:
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._modules.items())

    def modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for path, module in self.modules(prefix):
            for name, param in module._parameters.items():
                yield (f"{path}.{name}" if path else name), param

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for path, module in self.modules(prefix):
            for name, buf in module._buffers.items():
                yield (f"{path}.{name}" if path else name), buf

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(state)
        unexpected = set(state) - set(expected)
        if missing or unexpected:
            raise ContractError(
                f"state mismatch; missing: {sorted(missing)}, unexpected: {sorted(unexpected)}"
            )
        for path, module in self.modules():
            for name, param in module._parameters.items():
                key = f"{path}.{name}" if path else name
                if state[key].shape != param.shape:
                    raise DimensionError(f"shape mismatch for {key}", state[key].shape, param.shape)
                param.data = np.array(state[key], dtype=np.float64)
            for name in list(module._buffers):
                key = f"{path}.{name}" if path else name
                module._buffers[name] = np.array(state[key], dtype=np.float64)


class ModuleList(Module):
    """Ordered list of child modules named by index."""

    def __init__(self, modules: Sequence[Module] = ()) -> None:
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, index: int) -> Module:
        return list(self._modules.values())[index]


def time_mask(valid_len: Sequence[int], frames: int) -> np.ndarray:
    """Boolean [B, 1, T] mask of the valid frames of each batch item."""
    valid_len = np.asarray(valid_len)
    return (np.arange(frames)[None, :] < valid_len[:, None])[:, None, :]


def downsample_lengths(valid_len: Sequence[int], stride: int) -> np.ndarray:
    """Valid lengths after a strided same-padded convolution: ceil(len / stride)."""
    return -(-np.asarray(valid_len, dtype=np.int64) // stride)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed [length, dim] sine/cosine position table."""
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : dim // 2]
    return table


class Linear(Module):
    """x @ weight + bias over the last axis; weight is [in, out]."""

    def __init__(self, in_features: int, out_features: int, init: Initializer, bias: bool = True) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(init.uniform((in_features, out_features), bound))
        self.bias = Parameter(init.uniform((out_features,), bound)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    """Same-padded 1D convolution over [B, C, T] inputs."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        init: Initializer,
        stride: int = 1,
        groups: int = 1,
        bias: bool = False,
    ) -> None:
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {kernel_size}")
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"channels ({in_channels} in, {out_channels} out) not divisible by groups={groups}"
            )
        self.stride = stride
        self.groups = groups
        fan_in = in_channels // groups * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(init.uniform((out_channels, in_channels // groups, kernel_size), bound))
        self.bias = Parameter(init.uniform((out_channels,), bound)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)


class LayerNorm(Module):
    """Normalize along one axis to zero mean and unit variance, then scale and shift."""

    def __init__(self, features: int, init: Initializer, axis: int = -1, eps: float = 1e-5) -> None:
        super().__init__()
        self.axis = axis
        self.eps = eps
        self.scale = Parameter(init.constant((features,), 1.0))
        self.shift = Parameter(init.constant((features,), 0.0))

    def _affine_shape(self, ndim: int) -> Tuple[int, ...]:
        shape = [1] * ndim
        shape[self.axis] = -1
        return tuple(shape)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        centred = x - x.mean(axis=self.axis, keepdims=True)
        variance = (centred * centred).mean(axis=self.axis, keepdims=True)
        normalized = centred / (variance + self.eps) ** 0.5
        shape = self._affine_shape(x.ndim)
        return normalized * self.scale.reshape(shape) + self.shift.reshape(shape)


class BatchNorm1d(Module):
    """Batch normalization over the valid frames of [B, C, T] inputs.

    Train mode normalizes with the statistics of the valid frames and updates the
    running statistics as running = momentum * running + (1 - momentum) * batch.
    """

    def __init__(self, channels: int, init: Initializer, momentum: float = 0.9, eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = Parameter(init.constant((channels,), 1.0))
        self.shift = Parameter(init.constant((channels,), 0.0))
        self.register_buffer("running_mean", init.constant((channels,), 0.0))
        self.register_buffer("running_var", init.constant((channels,), 1.0))

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if mask is None:
            mask = np.ones((x.shape[0], 1, x.shape[2]), dtype=bool)
        weights = mask.astype(np.float64)
        count = weights.sum() * 1.0
        if self.training:
            if count == 0:
                raise ContractError("batch norm needs at least one valid frame")
            batch_mean = (x * weights).sum(axis=(0, 2), keepdims=True) / count
            centred = x - batch_mean
            batch_var = (centred * centred * weights).sum(axis=(0, 2), keepdims=True) / count
            self.running_mean = (
                self.momentum * self.running_mean + (1.0 - self.momentum) * batch_mean.data.reshape(-1)
            )
            self.running_var = (
                self.momentum * self.running_var + (1.0 - self.momentum) * batch_var.data.reshape(-1)
            )
            normalized = centred / (batch_var + self.eps) ** 0.5
        else:
            running_mean = self.running_mean.reshape(1, -1, 1)
            running_var = self.running_var.reshape(1, -1, 1)
            normalized = (x - running_mean) / np.sqrt(running_var + self.eps)
        return normalized * self.scale.reshape(1, -1, 1) + self.shift.reshape(1, -1, 1)


def make_norm(kind: str, channels: int, init: Initializer) -> Module:
    """Channel normalization for [B, C, T] tensors: 'layer' or 'batch'."""
    if kind == "layer":
        return LayerNorm(channels, init, axis=1)
    if kind == "batch":
        return BatchNorm1d(channels, init)
    raise ConfigurationError(f"unknown norm '{kind}', expected one of {NORMS}")


class Activation(Module):
    """Swish or ReLU behind one interface."""

    def __init__(self, kind: str) -> None:
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{kind}', expected one of {ACTIVATIONS}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return swish(x) if self.kind == "swish" else relu(x)


class Dropout(Module):
    def __init__(self, p: float, init: Initializer) -> None:
        super().__init__()
        self.p = p
        self.rng = init.generator

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.rng, self.training)


@dataclass(frozen=True)
class AttentionMask:
    """Which keys each query may attend to.

    `allowed` is [Tq, Tk] or [B, Tq, Tk]; kind is one of none, causal,
    anti-causal, padding or combined.
    """

    allowed: np.ndarray
    kind: str = "none"

    @classmethod
    def none(cls, queries: int, keys: int) -> "AttentionMask":
        return cls(np.ones((queries, keys), dtype=bool), "none")

    @classmethod
    def causal(cls, length: int) -> "AttentionMask":
        return cls(np.tril(np.ones((length, length), dtype=bool)), "causal")

    @classmethod
    def anti_causal(cls, length: int) -> "AttentionMask":
        return cls(np.triu(np.ones((length, length), dtype=bool)), "anti-causal")

    @classmethod
    def padding(cls, valid_len: Sequence[int], queries: int, keys: int) -> "AttentionMask":
        key_valid = np.arange(keys)[None, :] < np.asarray(valid_len)[:, None]
        return cls(np.broadcast_to(key_valid[:, None, :], (len(key_valid), queries, keys)).copy(), "padding")

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(self.allowed & other.allowed, "combined")

    def for_heads(self) -> np.ndarray:
        """Broadcastable [B or 1, 1, Tq, Tk] view for per-head scores."""
        if self.allowed.ndim == 2:
            return self.allowed[None, None]
        return self.allowed[:, None]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with Q, K, V and output projections of [d, d].

    Dropout is applied to the module output only.
    """

    def __init__(self, dim: int, heads: int, init: Initializer, p_dropout: float = DEFAULT_DROPOUT) -> None:
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, init)
        self.k_proj = Linear(dim, dim, init)
        self.v_proj = Linear(dim, dim, init)
        self.out_proj = Linear(dim, dim, init)
        self.dropout = Dropout(p_dropout, init)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        batch, frames, dim = x.shape
        return x.reshape(batch, frames, self.heads, dim // self.heads).transpose(0, 2, 1, 3)

    def forward(
        self,
        query: Tensor,
        key_value: Optional[Tensor] = None,
        mask: Optional[AttentionMask] = None,
    ) -> Tensor:
        source = query if key_value is None else key_value
        batch, queries, dim = query.shape
        if mask is None:
            mask = AttentionMask.none(queries, source.shape[1])
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(source))
        v = self._split(self.v_proj(source))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dim // self.heads))
        weights = masked_softmax(scores, mask.for_heads())
        self.last_weights = weights.data
        context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, queries, dim)
        return self.dropout(self.out_proj(context))


class FeedForward(Module):
    """Position-wise d -> hidden -> d network with dropout after each linear layer."""

    def __init__(
        self,
        dim: int,
        hidden: int,
        init: Initializer,
        activation: str = "swish",
        p_dropout: float = DEFAULT_DROPOUT,
    ) -> None:
        super().__init__()
        self.linear1 = Linear(dim, hidden, init)
        self.activation = Activation(activation)
        self.dropout1 = Dropout(p_dropout, init)
        self.linear2 = Linear(hidden, dim, init)
        self.dropout2 = Dropout(p_dropout, init)

    def forward(self, x: Tensor) -> Tensor:
        hidden = self.dropout1(self.activation(self.linear1(x)))
        return self.dropout2(self.linear2(hidden))
