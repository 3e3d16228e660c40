"""
Jasper blocks: the separable-convolution module, its attention-enhanced variant,
squeeze-and-excitation gating and the residual path.

A block computes x' = Res(x) + x~ * SE(x~), where x~ is the output of the
convolution module. Blocks without a residual path (prolog, epilog) return the
gated main path alone.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from citrinet.errors import ConfigurationError, ContractError
from citrinet.layers import (
    ACTIVATIONS,
    DEFAULT_DROPOUT,
    NORMS,
    Activation,
    AttentionMask,
    BatchNorm1d,
    Conv1d,
    Dropout,
    FeedForward,
    Initializer,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    downsample_lengths,
    make_norm,
    time_mask,
)
from citrinet.tensor import Tensor, masked_fill

ORIGINAL_REPEAT = 5
ENHANCED_REPEAT = 1


@dataclass(frozen=True)
class BlockSpec:
    """Shape and flavour of one Jasper block."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    repeat: int = ORIGINAL_REPEAT
    has_residual: bool = True
    attention_enhanced: bool = False
    se_reduction: int = 8
    heads: int = 8
    norm: str = "batch"
    activation: str = "relu"
    use_ffn: bool = True
    ffn_mult: int = 4
    dropout: float = DEFAULT_DROPOUT
    name: str = ""

    def __post_init__(self) -> None:
        if self.kernel % 2 == 0:
            raise ConfigurationError(f"{self.label}: kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"{self.label}: stride must be 1 or 2, got {self.stride}")
        if self.attention_enhanced or not self.has_residual:
            expected = ENHANCED_REPEAT
        else:
            expected = ORIGINAL_REPEAT
        if self.repeat != expected:
            raise ConfigurationError(f"{self.label}: repeat must be {expected}, got {self.repeat}")
        if self.out_channels % self.se_reduction:
            raise ConfigurationError(
                f"{self.label}: {self.out_channels} channels not divisible by SE reduction {self.se_reduction}"
            )
        if self.attention_enhanced and self.in_channels % self.heads:
            raise ConfigurationError(
                f"{self.label}: {self.in_channels} input channels not divisible by {self.heads} heads"
            )
        if self.norm not in NORMS:
            raise ConfigurationError(f"{self.label}: unknown norm '{self.norm}'")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"{self.label}: unknown activation '{self.activation}'")

    @property
    def label(self) -> str:
        return self.name or "block"

    @property
    def group(self) -> str:
        """Name of the mega block (or prolog/epilog) the block belongs to."""
        return self.name.split(".")[0] if self.name else "block"


def mask_frames(x: Tensor, valid_len: Sequence[int]) -> Tensor:
    """Zero every frame of x beyond its item's valid length."""
    return masked_fill(x, time_mask(valid_len, x.shape[2]))


def _check_lengths(valid_len: Sequence[int]) -> np.ndarray:
    valid_len = np.asarray(valid_len, dtype=np.int64)
    if np.any(valid_len <= 0):
        raise ContractError(f"every batch item needs at least one valid frame, got {valid_len.tolist()}")
    return valid_len


class SeparableConv(Module):
    """Depthwise K-conv, pointwise 1x1 conv, normalization and optional activation/dropout."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        init: Initializer,
        stride: int = 1,
        norm: str = "batch",
        activation: Optional[str] = "relu",
        p_dropout: float = DEFAULT_DROPOUT,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.depthwise = Conv1d(in_channels, in_channels, kernel, init, stride=stride, groups=in_channels)
        self.pointwise = Conv1d(in_channels, out_channels, 1, init)
        self.norm = make_norm(norm, out_channels, init)
        self.activation = Activation(activation) if activation else None
        self.dropout = Dropout(p_dropout, init) if activation else None

    def forward(self, x: Tensor, valid_len: Sequence[int]) -> Tuple[Tensor, np.ndarray]:
        y = self.pointwise(self.depthwise(mask_frames(x, valid_len)))
        out_len = downsample_lengths(valid_len, self.stride)
        y = self.norm(y, time_mask(out_len, y.shape[2]))
        if self.activation is not None:
            y = self.dropout(self.activation(y))
        return y, out_len


class SEModule(Module):
    """Squeeze-and-excitation: channel gates in (0, 1) from the mean over valid frames."""

    def __init__(self, channels: int, reduction: int, init: Initializer) -> None:
        super().__init__()
        self.squeeze = Linear(channels, channels // reduction, init)
        self.excite = Linear(channels // reduction, channels, init)

    def forward(self, x: Tensor, valid_len: Sequence[int]) -> Tensor:
        valid_len = _check_lengths(valid_len)
        batch, channels, frames = x.shape
        pooled = mask_frames(x, valid_len).sum(axis=2) / valid_len[:, None].astype(np.float64)
        gates = self.excite(self.squeeze(pooled).relu()).sigmoid()
        return gates.reshape(batch, channels, 1)


class ResModule(Module):
    """1x1 convolution with the block's stride followed by batch normalization."""

    def __init__(self, in_channels: int, out_channels: int, init: Initializer, stride: int = 1) -> None:
        super().__init__()
        self.stride = stride
        self.conv = Conv1d(in_channels, out_channels, 1, init, stride=stride)
        self.norm = BatchNorm1d(out_channels, init)

    def forward(self, x: Tensor, valid_len: Sequence[int]) -> Tensor:
        y = self.conv(mask_frames(x, valid_len))
        out_len = downsample_lengths(valid_len, self.stride)
        return self.norm(y, time_mask(out_len, y.shape[2]))


class ConvModule(Module):
    """The original module: R separable convolutions, the last one without activation/dropout."""

    def __init__(self, spec: BlockSpec, init: Initializer) -> None:
        super().__init__()
        self.repeats = ModuleList()
        channels = spec.in_channels
        for r in range(spec.repeat):
            last = r == spec.repeat - 1
            self.repeats.append(
                SeparableConv(
                    channels,
                    spec.out_channels,
                    spec.kernel,
                    init,
                    stride=spec.stride if r == 0 else 1,
                    norm=spec.norm,
                    activation=None if last else spec.activation,
                    p_dropout=spec.dropout,
                )
            )
            channels = spec.out_channels

    def forward(self, x: Tensor, valid_len: Sequence[int]) -> Tuple[Tensor, np.ndarray]:
        for repeat in self.repeats:
            x, valid_len = repeat(x, valid_len)
        return x, valid_len


class AttConvModule(Module):
    """Attention-enhanced module: pre-norm FFN and MHSA residual branches at the
    input width, then a single separable convolution with activation and dropout.
    """

    def __init__(self, spec: BlockSpec, init: Initializer) -> None:
        super().__init__()
        width = spec.in_channels
        self.use_ffn = spec.use_ffn
        if spec.use_ffn:
            self.ffn_norm = LayerNorm(width, init)
            self.ffn = FeedForward(width, spec.ffn_mult * width, init, spec.activation, spec.dropout)
        self.mhsa_norm = LayerNorm(width, init)
        self.mhsa = MultiHeadAttention(width, spec.heads, init, spec.dropout)
        self.conv = SeparableConv(
            width,
            spec.out_channels,
            spec.kernel,
            init,
            stride=spec.stride,
            norm=spec.norm,
            activation=spec.activation,
            p_dropout=spec.dropout,
        )

    @property
    def residual_connections(self) -> int:
        return 2 if self.use_ffn else 1

    def forward(self, x: Tensor, valid_len: Sequence[int]) -> Tuple[Tensor, np.ndarray]:
        frames = x.shape[2]
        h = mask_frames(x, valid_len).transpose(0, 2, 1)
        if self.use_ffn:
            h = h + self.ffn(self.ffn_norm(h))
        h = h + self.mhsa(self.mhsa_norm(h), mask=AttentionMask.padding(valid_len, frames, frames))
        return self.conv(h.transpose(0, 2, 1), valid_len)


@dataclass
class BlockParts:
    """Intermediate results of one block, kept apart for inspection."""

    main: Tensor
    gates: Tensor
    residual: Optional[Tensor]
    valid_len: np.ndarray

    def combine(self) -> Tensor:
        gated = self.main * self.gates
        return gated if self.residual is None else self.residual + gated


class JasperBlock(Module):
    """Convolution module, SE gating and (optionally) the residual path."""

    def __init__(self, spec: BlockSpec, init: Initializer) -> None:
        super().__init__()
        self.spec = spec
        self.conv = AttConvModule(spec, init) if spec.attention_enhanced else ConvModule(spec, init)
        self.se = SEModule(spec.out_channels, spec.se_reduction, init)
        self.res = ResModule(spec.in_channels, spec.out_channels, init, spec.stride) if spec.has_residual else None

    def parts(self, x: Tensor, valid_len: Sequence[int]) -> BlockParts:
        valid_len = _check_lengths(valid_len)
        main, out_len = self.conv(x, valid_len)
        gates = self.se(main, out_len)
        residual = self.res(x, valid_len) if self.res is not None else None
        return BlockParts(main=main, gates=gates, residual=residual, valid_len=out_len)

    def forward(self, x: Tensor, valid_len: Sequence[int]) -> Tuple[Tensor, np.ndarray]:
        parts = self.parts(x, valid_len)
        return parts.combine(), parts.valid_len
