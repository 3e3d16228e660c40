"""Model and training configuration, read from and written to flat `key = value` files."""

import logging
import os
from typing import Dict, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from citrinet.errors import ConfigurationError

logger = logging.getLogger(__name__)

VARIANTS = ("C", "Att-C")
PRUNED_BLOCK_TOTALS = (8, 9, 10, 11, 12, 13, 15, 17, 20)
FULL_BLOCK_TOTAL = 23
DESK_BLOCK_TOTALS = (5, 6, 7)
ALLOWED_BLOCK_TOTALS = DESK_BLOCK_TOTALS + PRUNED_BLOCK_TOTALS + (FULL_BLOCK_TOTAL,)


def mega_block_counts(total_blocks: int) -> Tuple[int, int, int]:
    """Blocks per mega block once prolog and epilog are taken out of the total."""
    if total_blocks not in ALLOWED_BLOCK_TOTALS:
        raise ConfigurationError(
            f"total_blocks={total_blocks} is not one of {sorted(ALLOWED_BLOCK_TOTALS)}"
        )
    first = 6 * total_blocks // 21
    second = 7 * total_blocks // 21
    return first, second, total_blocks - 2 - first - second


def default_decoder_dim(channels: int) -> int:
    if channels in (256, 384):
        return channels
    return 512


class ModelConfig(BaseModel):
    """Declarative description of one model variant.

    Fields left as None are filled from the variant: C is the original model
    (23 blocks, batch norm, ReLU, CTC only), Att-C the attention-enhanced one
    (13 blocks, layer norm, Swish, bidirectional decoder, lambda1 = 0.3).

    With `share_decoder_vocab` (the default) the l2r and r2l decoders use one
    token embedding and one output projection, which keeps the census of every
    published size near its reference count. Separate tables add about
    2 * vocab * decoder_dim parameters; Att-C-384 then counts roughly 49M.
    """

    model_config = ConfigDict(extra="forbid")

    variant: Literal["C", "Att-C"] = "Att-C"
    channels: int = 384
    total_blocks: Optional[int] = None
    vocab: int = 4096
    feat_dim: int = 80
    epilog_dim: int = 640
    se_reduction: int = 8
    encoder_heads: int = 8
    decoder_blocks: int = 3
    decoder_heads: int = 8
    decoder_dim: Optional[int] = None
    decoder_ffn_mult: int = 4
    share_decoder_vocab: bool = True
    dropout: float = 0.1
    lambda1: Optional[float] = None
    lambda2: float = 0.7
    delta: float = 0.1
    use_bidecoder: Optional[bool] = None
    use_ffn: bool = True
    norm: Optional[Literal["layer", "batch"]] = None
    act: Optional[Literal["swish", "relu"]] = None

    @field_validator("variant", mode="before")
    @classmethod
    def _normalize_variant(cls, value: object) -> object:
        if isinstance(value, str):
            key = value.strip().lower().replace("_", "-")
            if key == "c":
                return "C"
            if key in ("att-c", "attc"):
                return "Att-C"
        return value

    @model_validator(mode="after")
    def _fill_variant_defaults(self) -> "ModelConfig":
        attention = self.variant == "Att-C"
        if self.total_blocks is None:
            self.total_blocks = 13 if attention else FULL_BLOCK_TOTAL
        if self.use_bidecoder is None:
            self.use_bidecoder = attention
        if self.lambda1 is None:
            self.lambda1 = 0.3 if self.use_bidecoder else 1.0
        if self.norm is None:
            self.norm = "layer" if attention else "batch"
        if self.act is None:
            self.act = "swish" if attention else "relu"
        if self.decoder_dim is None:
            self.decoder_dim = default_decoder_dim(self.channels)

        mega_block_counts(self.total_blocks)
        for name in ("lambda1", "lambda2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigurationError(f"delta must lie in [0, 1), got {self.delta}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lambda1 < 1.0 and not self.use_bidecoder:
            raise ConfigurationError("lambda1 < 1 needs the bidirectional decoder (use_bidecoder = true)")
        for name in ("channels", "epilog_dim"):
            if getattr(self, name) % self.se_reduction:
                raise ConfigurationError(
                    f"{name}={getattr(self, name)} not divisible by se_reduction={self.se_reduction}"
                )
        if attention and self.channels % self.encoder_heads:
            raise ConfigurationError(
                f"channels={self.channels} not divisible by encoder_heads={self.encoder_heads}"
            )
        if self.has_decoder and self.decoder_dim % self.decoder_heads:
            raise ConfigurationError(
                f"decoder_dim={self.decoder_dim} not divisible by decoder_heads={self.decoder_heads}"
            )
        if self.vocab < 1:
            raise ConfigurationError(f"vocab must be positive, got {self.vocab}")
        return self

    @property
    def attention_enhanced(self) -> bool:
        return self.variant == "Att-C"

    @property
    def has_decoder(self) -> bool:
        """Decoder parameters exist only when the attention losses carry weight."""
        return bool(self.use_bidecoder) and self.lambda1 < 1.0

    @property
    def label(self) -> str:
        return f"{self.variant}-{self.channels}"


class TrainConfig(BaseModel):
    """Optimizer, schedule, batching and decoding settings."""

    model_config = ConfigDict(extra="forbid")

    lr_max: float = 0.05
    lr_min: float = 0.0
    warmup_steps: int = 10000
    total_steps: int = 100000
    beta1: float = 0.8
    beta2: float = 0.25
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    max_frames: int = 4000
    checkpoint_every: int = 1000
    beam_width: int = 8
    w_ctc: float = 0.3
    spec_augment: bool = True
    dither: float = 1.0
    seed: int = 0

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 0 and total_steps >= 1")
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup_steps={self.warmup_steps} exceeds total_steps={self.total_steps}"
            )
        if self.beam_width < 1:
            raise ConfigurationError(f"beam_width must be >= 1, got {self.beam_width}")
        if not 0.0 <= self.w_ctc <= 1.0:
            raise ConfigurationError(f"w_ctc must lie in [0, 1], got {self.w_ctc}")
        if self.checkpoint_every < 1 or self.max_frames < 1:
            raise ConfigurationError("checkpoint_every and max_frames must be positive")
        return self


class RunConfig(BaseModel):
    """Model and training settings of one run."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @classmethod
    def from_flat(cls, values: Mapping[str, object]) -> "RunConfig":
        model_values: Dict[str, object] = {}
        train_values: Dict[str, object] = {}
        for key, value in values.items():
            if key in ModelConfig.model_fields:
                model_values[key] = value
            elif key in TrainConfig.model_fields:
                train_values[key] = value
            else:
                raise ConfigurationError(f"unknown config key '{key}'")
        try:
            return cls(model=ModelConfig(**model_values), train=TrainConfig(**train_values))
        except ValidationError as e:
            raise ConfigurationError(_summarize(e)) from e

    def to_flat(self) -> Dict[str, object]:
        flat: Dict[str, object] = {}
        for section in (self.model, self.train):
            for key, value in section.model_dump().items():
                if value is not None:
                    flat[key] = value
        return flat


def _summarize(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in item['loc']) or 'config'}: {item['msg']}" for item in error.errors()
    )


def parse_flat_config(text: str) -> Dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {number}: missing key")
        if key in values:
            raise ConfigurationError(f"line {number}: duplicate key '{key}'")
        values[key] = value
    return values


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_flat_config(config: RunConfig) -> str:
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in config.to_flat().items())


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, object]] = None,
    base: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """Start from `base` (or the defaults), then the config file, then overrides."""
    values: Dict[str, object] = dict(base or {})
    if path:
        if not os.path.isfile(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as handle:
            values.update(parse_flat_config(handle.read()))
        logger.info("loaded config from %s", path)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig.from_flat(values)


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(dump_flat_config(config))
