"""
Model assembly: kernel schedule, encoder, CTC head, bidirectional Transformer
decoder and parameter census.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from citrinet.blocks import BlockSpec, JasperBlock, mask_frames
from citrinet.config import ModelConfig, mega_block_counts
from citrinet.errors import ContractError, DimensionError, InputError
from citrinet.layers import (
    AttentionMask,
    Conv1d,
    FeedForward,
    Initializer,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    Parameter,
    sinusoidal_positions,
)
from citrinet.tensor import Tensor

logger = logging.getLogger(__name__)

PROLOG_KERNEL = 11
EPILOG_KERNEL = 41
MEGA_KERNELS = (
    tuple(range(11, 22, 2)),
    tuple(range(13, 26, 2)),
    tuple(range(25, 40, 2)),
)
DIRECTIONS = ("l2r", "r2l")


@dataclass(frozen=True)
class Vocabulary:
    """Token ids 0..size-1 followed by blank, sos, eos and pad."""

    size: int = 4096

    @property
    def blank(self) -> int:
        return self.size

    @property
    def sos(self) -> int:
        return self.size + 1

    @property
    def eos(self) -> int:
        return self.size + 2

    @property
    def pad(self) -> int:
        return self.size + 3

    @property
    def ctc_classes(self) -> int:
        return self.size + 1

    @property
    def decoder_classes(self) -> int:
        """Tokens, blank, sos and eos; pad is never predicted."""
        return self.size + 3

    @property
    def embedding_rows(self) -> int:
        return self.size + 4

    def check_tokens(self, tokens: Sequence[int]) -> None:
        for token in tokens:
            if not 0 <= int(token) < self.size:
                raise InputError(f"token id {token} outside the vocabulary [0, {self.size})")


@dataclass
class TokenBatch:
    """Padded [B, L] batch of token ids with per-item valid lengths."""

    ids: np.ndarray
    lengths: np.ndarray
    pad_id: int

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.ids.ndim != 2 or self.lengths.shape != (self.ids.shape[0],):
            raise DimensionError("token batch needs [B, L] ids and B lengths", self.ids.shape, self.lengths.shape)
        positions = np.arange(self.ids.shape[1])[None, :]
        if np.any(self.ids[positions >= self.lengths[:, None]] != self.pad_id):
            raise ContractError("entries beyond the valid length must equal the pad id")

    @classmethod
    def from_sequences(cls, sequences: Sequence[Sequence[int]], pad_id: int) -> "TokenBatch":
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        ids = np.full((len(sequences), int(lengths.max(initial=0))), pad_id, dtype=np.int64)
        for i, sequence in enumerate(sequences):
            ids[i, : len(sequence)] = sequence
        return cls(ids, lengths, pad_id)

    @property
    def batch_size(self) -> int:
        return int(self.ids.shape[0])

    @property
    def max_length(self) -> int:
        return int(self.ids.shape[1])

    def sequences(self) -> List[List[int]]:
        return [self.ids[i, :n].tolist() for i, n in enumerate(self.lengths)]


def decoder_io(
    targets: Sequence[Sequence[int]], vocab: Vocabulary, direction: str
) -> Tuple[TokenBatch, TokenBatch]:
    """Teacher-forcing inputs and references for one decoder direction.

    l2r reads (sos, y1..yN), r2l reads (sos, yN..y1); both are scored against
    (y1..yN, eos).
    """
    if direction not in DIRECTIONS:
        raise ContractError(f"unknown decoder direction '{direction}'")
    inputs, references = [], []
    for target in targets:
        target = [int(t) for t in target]
        vocab.check_tokens(target)
        stream = target if direction == "l2r" else target[::-1]
        inputs.append([vocab.sos] + stream)
        references.append(target + [vocab.eos])
    return (
        TokenBatch.from_sequences(inputs, vocab.pad),
        TokenBatch.from_sequences(references, vocab.pad),
    )


def kernel_schedule(config: ModelConfig) -> List[BlockSpec]:
    """Block layout: prolog, three mega blocks, epilog.

    Pruned layouts keep the leading blocks (and kernels) of each mega block; the
    first block of every mega block halves the time axis.
    """
    counts = mega_block_counts(config.total_blocks)
    attention = config.attention_enhanced
    shared = dict(
        se_reduction=config.se_reduction,
        heads=config.encoder_heads,
        norm=config.norm,
        activation=config.act,
        use_ffn=config.use_ffn,
        dropout=config.dropout,
    )
    specs = [
        BlockSpec(
            config.feat_dim,
            config.channels,
            PROLOG_KERNEL,
            repeat=1,
            has_residual=False,
            attention_enhanced=False,
            name="prolog",
            **shared,
        )
    ]
    for index, (count, kernels) in enumerate(zip(counts, MEGA_KERNELS), start=1):
        for j in range(count):
            specs.append(
                BlockSpec(
                    config.channels,
                    config.channels,
                    kernels[j],
                    stride=2 if j == 0 else 1,
                    repeat=1 if attention else 5,
                    has_residual=True,
                    attention_enhanced=attention,
                    name=f"mega{index}.{j}",
                    **shared,
                )
            )
    specs.append(
        BlockSpec(
            config.channels,
            config.epilog_dim,
            EPILOG_KERNEL,
            repeat=1,
            has_residual=False,
            attention_enhanced=attention,
            name="epilog",
            **shared,
        )
    )
    return specs


class Encoder(Module):
    def __init__(self, config: ModelConfig, init: Initializer) -> None:
        super().__init__()
        self.feat_dim = config.feat_dim
        self.specs = kernel_schedule(config)
        self.blocks = ModuleList([JasperBlock(spec, init) for spec in self.specs])

    def forward(self, features: Tensor, valid_len: Sequence[int]) -> Tuple[Tensor, np.ndarray]:
        if features.ndim != 3 or features.shape[1] != self.feat_dim:
            raise DimensionError(f"encoder expects [B, {self.feat_dim}, T] features", features.shape)
        if features.shape[2] == 0:
            raise InputError("cannot encode an empty feature sequence (T = 0)")
        x, lengths = features, np.asarray(valid_len, dtype=np.int64)
        for block in self.blocks:
            x, lengths = block(x, lengths)
        return mask_frames(x, lengths), lengths


class CTCHead(Module):
    """Pointwise convolution to the CTC classes followed by log-softmax."""

    def __init__(self, in_channels: int, classes: int, init: Initializer) -> None:
        super().__init__()
        self.conv = Conv1d(in_channels, classes, 1, init, bias=True)

    def forward(self, enc: Tensor) -> Tensor:
        return self.conv(enc).transpose(0, 2, 1).log_softmax(axis=-1)


class DecoderLayer(Module):
    """Pre-norm self-attention, cross-attention and feed-forward sublayers."""

    def __init__(self, dim: int, heads: int, ffn_mult: int, init: Initializer, p_dropout: float) -> None:
        super().__init__()
        self.self_norm = LayerNorm(dim, init)
        self.self_attn = MultiHeadAttention(dim, heads, init, p_dropout)
        self.cross_norm = LayerNorm(dim, init)
        self.cross_attn = MultiHeadAttention(dim, heads, init, p_dropout)
        self.ffn_norm = LayerNorm(dim, init)
        self.ffn = FeedForward(dim, ffn_mult * dim, init, "swish", p_dropout)

    def forward(
        self, x: Tensor, memory: Tensor, self_mask: AttentionMask, cross_mask: AttentionMask
    ) -> Tensor:
        x = x + self.self_attn(self.self_norm(x), mask=self_mask)
        x = x + self.cross_attn(self.cross_norm(x), memory, mask=cross_mask)
        return x + self.ffn(self.ffn_norm(x))


class DecoderStack(Module):
    """Decoder layers of one direction with their final normalization."""

    def __init__(self, config: ModelConfig, init: Initializer) -> None:
        super().__init__()
        dim = config.decoder_dim
        self.layers = ModuleList(
            [
                DecoderLayer(dim, config.decoder_heads, config.decoder_ffn_mult, init, config.dropout)
                for _ in range(config.decoder_blocks)
            ]
        )
        self.final_norm = LayerNorm(dim, init)
        if not config.share_decoder_vocab:
            vocab = Vocabulary(config.vocab)
            self.embedding = Parameter(init.uniform((vocab.embedding_rows, dim), 1.0 / math.sqrt(dim)))
            self.output = Linear(dim, vocab.decoder_classes, init)

    def forward(
        self, x: Tensor, memory: Tensor, self_mask: AttentionMask, cross_mask: AttentionMask
    ) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, self_mask, cross_mask)
        return self.final_norm(x)


class BiDecoder(Module):
    """Left-to-right and right-to-left decoders scoring whole targets in one pass."""

    def __init__(self, config: ModelConfig, init: Initializer) -> None:
        super().__init__()
        self.dim = config.decoder_dim
        self.vocab = Vocabulary(config.vocab)
        self.shared_vocab = config.share_decoder_vocab
        self.memory_proj = (
            Linear(config.epilog_dim, self.dim, init) if config.epilog_dim != self.dim else None
        )
        self.l2r = DecoderStack(config, init)
        self.r2l = DecoderStack(config, init)
        if self.shared_vocab:
            self.embedding = Parameter(
                init.uniform((self.vocab.embedding_rows, self.dim), 1.0 / math.sqrt(self.dim))
            )
            self.output = Linear(self.dim, self.vocab.decoder_classes, init)

    def stack(self, direction: str) -> DecoderStack:
        if direction not in DIRECTIONS:
            raise ContractError(f"unknown decoder direction '{direction}'")
        return self.l2r if direction == "l2r" else self.r2l

    def forward(
        self, enc: Tensor, enc_len: Sequence[int], tokens_in: TokenBatch, direction: str
    ) -> Tensor:
        stack = self.stack(direction)
        owner = self if self.shared_vocab else stack
        ids = tokens_in.ids
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.embedding_rows):
            raise InputError(f"decoder token id outside [0, {self.vocab.embedding_rows})")
        if tokens_in.batch_size != enc.shape[0]:
            raise DimensionError("decoder batch does not match encoder batch", ids.shape, enc.shape)

        length = tokens_in.max_length
        memory = enc.transpose(0, 2, 1)
        if self.memory_proj is not None:
            memory = self.memory_proj(memory)
        x = owner.embedding[ids] * math.sqrt(self.dim) + sinusoidal_positions(length, self.dim)
        self_mask = AttentionMask.causal(length) & AttentionMask.padding(
            np.maximum(tokens_in.lengths, 1), length, length
        )
        cross_mask = AttentionMask.padding(enc_len, length, memory.shape[1])
        return owner.output(stack(x, memory, self_mask, cross_mask))


class CitrinetModel(Module):
    """Encoder, CTC head and (when the attention losses are used) the bidirectional decoder."""

    def __init__(self, config: ModelConfig, init: Initializer) -> None:
        super().__init__()
        self.config = config
        self.vocabulary = Vocabulary(config.vocab)
        self.encoder = Encoder(config, init)
        self.ctc_head = CTCHead(config.epilog_dim, self.vocabulary.ctc_classes, init)
        self.decoder = BiDecoder(config, init) if config.has_decoder else None

    @property
    def specs(self) -> List[BlockSpec]:
        return self.encoder.specs

    def encode(self, features: Tensor, valid_len: Sequence[int]) -> Tuple[Tensor, np.ndarray]:
        return self.encoder(features, valid_len)

    def ctc_log_probs(self, enc: Tensor) -> Tensor:
        return self.ctc_head(enc)

    def decode(self, enc: Tensor, enc_len: Sequence[int], tokens_in: TokenBatch, direction: str) -> Tensor:
        if self.decoder is None:
            raise ContractError(f"{self.config.label} has no attention decoder")
        return self.decoder(enc, enc_len, tokens_in, direction)

    def forward(self, features: Tensor, valid_len: Sequence[int]) -> Tuple[Tensor, np.ndarray]:
        enc, enc_len = self.encode(features, valid_len)
        return self.ctc_log_probs(enc), enc_len


def build_model(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> CitrinetModel:
    """Build a model; without `rng` the parameters are zero views (census mode)."""
    model = CitrinetModel(config, Initializer(rng))
    logger.info("built %s with %d blocks", config.label, len(model.specs))
    return model


def count_params(config: ModelConfig) -> int:
    return sum(p.size for p in build_model(config).parameters())


def param_census(model: CitrinetModel) -> Dict[str, int]:
    """Parameter counts grouped by prolog, mega blocks, epilog, head and decoder parts."""
    census: Dict[str, int] = {}
    specs = model.specs
    for name, param in model.named_parameters():
        parts = name.split(".")
        if parts[0] == "encoder":
            group = f"encoder.{specs[int(parts[2])].group}"
        elif parts[0] == "decoder":
            group = f"decoder.{parts[1]}"
        else:
            group = parts[0]
        census[group] = census.get(group, 0) + param.size
    return census
