"""
Self-describing binary checkpoints.

Layout (little-endian): magic "CITR", u32 version, u32 config length + flat
config text, parameter table, optimizer table, u32 length + RNG state JSON,
u64 step. A table is a u32 count, then per tensor a u32 name length, the
UTF-8 name, a u32 rank and rank u32 extents, then the f64 payload of every
tensor in directory order.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from citrinet.config import RunConfig, dump_flat_config, parse_flat_config
from citrinet.errors import InputError
from citrinet.layers import Initializer, Module
from citrinet.model import CitrinetModel
from citrinet.optim import Novograd

logger = logging.getLogger(__name__)

MAGIC = b"CITR"
FORMAT_VERSION = 1
SUFFIX = ".citr"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config_text: str
    tensors: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Dict[str, object] = field(default_factory=dict)
    step: int = 0
    version: int = FORMAT_VERSION

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_flat(parse_flat_config(self.config_text))

    @classmethod
    def capture(
        cls,
        config: RunConfig,
        model: Module,
        optimizer: Optional[Novograd] = None,
        rng: Optional[np.random.Generator] = None,
        step: int = 0,
    ) -> "Checkpoint":
        return cls(
            config_text=dump_flat_config(config),
            tensors={k: np.array(v, dtype=np.float64) for k, v in model.state_dict().items()},
            optimizer={k: np.array(v, dtype=np.float64) for k, v in optimizer.state_dict().items()}
            if optimizer is not None
            else {},
            rng_state=rng.bit_generator.state if rng is not None else {},
            step=step,
        )

    def restore(
        self,
        model: Module,
        optimizer: Optional[Novograd] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        """Load parameters, optimizer moments and generator state in place."""
        model.load_state_dict(self.tensors)
        if optimizer is not None and self.optimizer:
            optimizer.load_state_dict(self.optimizer)
        if rng is not None and self.rng_state:
            rng.bit_generator.state = self.rng_state

    def build_model(self) -> CitrinetModel:
        """A model of the echoed config carrying the stored parameters and buffers."""
        model = CitrinetModel(self.config.model, Initializer(np.random.default_rng(0)))
        model.load_state_dict(self.tensors)
        return model

    def to_bytes(self) -> bytes:
        config = self.config_text.encode("utf-8")
        rng = json.dumps(self.rng_state, sort_keys=True).encode("utf-8")
        parts = [MAGIC, _U32.pack(self.version), _U32.pack(len(config)), config]
        parts += _pack_table(self.tensors)
        parts += _pack_table(self.optimizer)
        parts += [_U32.pack(len(rng)), rng, _U64.pack(self.step)]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        reader = _Reader(blob)
        if reader.take(4) != MAGIC:
            raise InputError("not a checkpoint (bad magic)")
        version = reader.u32()
        if version != FORMAT_VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        config_text = reader.take(reader.u32()).decode("utf-8")
        tensors = _unpack_table(reader)
        optimizer = _unpack_table(reader)
        try:
            rng_state = json.loads(reader.take(reader.u32()).decode("utf-8"))
        except ValueError as e:
            raise InputError(f"corrupt RNG state in checkpoint: {e}") from e
        step = reader.u64()
        if reader.remaining:
            raise InputError(f"{reader.remaining} trailing bytes after checkpoint")
        return cls(config_text, tensors, optimizer, rng_state, step, version)


def _pack_table(tensors: Dict[str, np.ndarray]) -> List[bytes]:
    parts = [_U32.pack(len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        shape = np.shape(value)
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(len(shape))]
        parts += [_U32.pack(extent) for extent in shape]
    for value in tensors.values():
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return parts


def _unpack_table(reader: "_Reader") -> Dict[str, np.ndarray]:
    directory: List[Tuple[str, Tuple[int, ...]]] = []
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        directory.append((name, shape))
    tensors = {}
    for name, shape in directory:
        count = int(np.prod(shape)) if shape else 1
        payload = reader.take(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return tensors


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.offset

    def take(self, size: int) -> bytes:
        if size > self.remaining:
            raise InputError(f"checkpoint truncated at byte {self.offset}")
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(checkpoint.to_bytes())
    logger.info("wrote checkpoint for step %d to %s", checkpoint.step, path)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise InputError(f"checkpoint not found: {path}")
    with open(path, "rb") as handle:
        return Checkpoint.from_bytes(handle.read())
