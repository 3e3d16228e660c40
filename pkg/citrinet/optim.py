"""Novograd with per-tensor gradient normalization and the cosine warmup schedule."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from citrinet.errors import ConfigurationError, ContractError
from citrinet.layers import Parameter

logger = logging.getLogger(__name__)

NOVOGRAD_BETAS = (0.8, 0.25)


@dataclass
class MomentState:
    m: np.ndarray
    v: float


class Novograd:
    """Layer-wise adaptive moments.

    Per tensor: v <- beta2 * v + (1 - beta2) * |g|^2 (|g|^2 on the first step),
    m <- beta1 * m + g / (sqrt(v) + eps) + wd * w and w <- w - lr * m.
    """

    def __init__(
        self,
        params: Iterable[Tuple[str, Parameter]],
        lr: float = 0.05,
        betas: Tuple[float, float] = NOVOGRAD_BETAS,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        if lr < 0:
            raise ConfigurationError(f"invalid learning rate {lr}")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ConfigurationError(f"invalid betas {betas}")
        self.params: List[Tuple[str, Parameter]] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: Dict[str, MomentState] = {}
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for name, param in self.params:
            if param.grad is None:
                continue
            grad = param.grad
            norm_sq = float(np.sum(grad * grad))
            state = self.state.get(name)
            if state is None:
                v = norm_sq
                m = np.zeros_like(param.data)
            else:
                v = self.beta2 * state.v + (1.0 - self.beta2) * norm_sq
                m = state.m
            normalized = grad / (math.sqrt(v) + self.eps) if v > 0.0 else np.zeros_like(grad)
            m = self.beta1 * m + (normalized + self.weight_decay * param.data)
            self.state[name] = MomentState(m=m, v=v)
            param.data = param.data - lr * m
        self.step_count += 1

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step": np.array(float(self.step_count))}
        for name, _ in self.params:
            if name in self.state:
                state[f"{name}.m"] = self.state[name].m
                state[f"{name}.v"] = np.array(self.state[name].v)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if "step" not in state:
            raise ContractError("optimizer state has no step counter")
        self.step_count = int(state["step"])
        self.state = {}
        for name, param in self.params:
            if f"{name}.m" in state:
                m = np.array(state[f"{name}.m"], dtype=np.float64)
                if m.shape != param.shape:
                    raise ContractError(f"optimizer moment for {name} has shape {m.shape}, expected {param.shape}")
                self.state[name] = MomentState(m=m, v=float(state[f"{name}.v"]))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for param in params:
            if param.grad is not None:
                param.grad = param.grad * scale
        logger.debug("clipped gradient norm %.4g to %.4g", total, max_norm)
    return total


def cosine_lr(step: int, lr_max: float = 0.05, warmup: int = 10000, total: int = 100000, lr_min: float = 0.0) -> float:
    """Linear warmup to lr_max, then cosine annealing to lr_min at `total`."""
    if warmup > total:
        raise ConfigurationError(f"warmup {warmup} exceeds total steps {total}")
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    if step > total:
        return lr_min
    if step < warmup:
        return lr_max * step / warmup
    if total == warmup:
        return lr_max
    progress = (step - warmup) / (total - warmup)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class CosineWarmupSchedule:
    lr_max: float = 0.05
    warmup: int = 10000
    total: int = 100000
    lr_min: float = 0.0

    def __post_init__(self) -> None:
        if self.warmup > self.total:
            raise ConfigurationError(f"warmup {self.warmup} exceeds total steps {self.total}")

    def __call__(self, step: int) -> float:
        return cosine_lr(step, self.lr_max, self.warmup, self.total, self.lr_min)
