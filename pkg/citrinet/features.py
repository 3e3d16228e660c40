"""
Front end: log mel filterbank features, global CMVN, SpecAugment masking and
padded feature batches.
"""

import functools
import logging
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from citrinet.errors import DimensionError, InputError
from citrinet.tensor import Tensor

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WINDOW_SIZE = 400
HOP_SIZE = 160
N_FFT = 512
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
CMVN_EPS = 1e-8

FREQ_MASKS = 2
FREQ_MASK_WIDTH = 10
TIME_MASKS = 2
TIME_MASK_WIDTH = 50

DUMP_MAGIC = b"FBNK"
DUMP_HEADER = struct.Struct("<4sII")


def hz_to_mel(hz: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=4)
def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """[n_mels, n_fft // 2 + 1] triangular filters evenly spaced on the HTK mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    return weights


def num_frames(samples: int) -> int:
    return (samples - WINDOW_SIZE) // HOP_SIZE + 1


def fbank(wave: Sequence[float], dither_scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """[80, T] log mel filterbank energies of a 16 kHz waveform.

    Seeded Gaussian dither, Hann window, magnitude spectrum, mel filters and a
    floored natural log, one frame per 10 ms hop of a 25 ms window.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.shape[0] < WINDOW_SIZE:
        raise InputError(f"waveform needs at least {WINDOW_SIZE} samples, got {wave.shape}")
    if dither_scale > 0.0:
        wave = wave + dither_scale * np.random.default_rng(seed).standard_normal(wave.shape[0])

    frames = num_frames(wave.shape[0])
    windows = sliding_window_view(wave, WINDOW_SIZE)[::HOP_SIZE][:frames] * np.hanning(WINDOW_SIZE)
    spectrum = np.abs(np.fft.rfft(windows, n=N_FFT, axis=-1))
    energies = spectrum @ mel_filterbank().T
    return np.log(np.maximum(energies, LOG_FLOOR)).T


@dataclass(frozen=True)
class CmvnStats:
    mean: np.ndarray
    variance: np.ndarray
    frames: int

    def __post_init__(self) -> None:
        if self.mean.shape != self.variance.shape:
            raise DimensionError("CMVN mean and variance disagree", self.mean.shape, self.variance.shape)
        if np.any(self.variance < 0):
            raise InputError("CMVN variance must be non-negative")

    @property
    def dims(self) -> int:
        return int(self.mean.shape[0])


def cmvn_fit(corpus: Iterable[np.ndarray]) -> CmvnStats:
    """Global per-dimension mean and variance over all frames of [dims, T] matrices."""
    matrices = [np.asarray(m, dtype=np.float64) for m in corpus]
    frames = sum(m.shape[1] for m in matrices)
    if not matrices or frames == 0:
        raise InputError("cannot fit CMVN on an empty corpus")
    dims = matrices[0].shape[0]
    if any(m.shape[0] != dims for m in matrices):
        raise DimensionError("CMVN corpus mixes feature dims", *(m.shape for m in matrices[:2]))

    total = np.zeros(dims)
    for m in matrices:
        total += m.sum(axis=1)
    mean = total / frames
    squares = np.zeros(dims)
    for m in matrices:
        squares += ((m - mean[:, None]) ** 2).sum(axis=1)
    return CmvnStats(mean=mean, variance=squares / frames, frames=frames)


def cmvn_apply(x: np.ndarray, stats: CmvnStats) -> np.ndarray:
    return (np.asarray(x) - stats.mean[:, None]) / np.sqrt(stats.variance[:, None] + CMVN_EPS)


def cmvn_invert(y: np.ndarray, stats: CmvnStats) -> np.ndarray:
    return np.asarray(y) * np.sqrt(stats.variance[:, None] + CMVN_EPS) + stats.mean[:, None]


def save_cmvn(stats: CmvnStats, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"frames {stats.frames}\n")
        for idx, (mean, variance) in enumerate(zip(stats.mean, stats.variance)):
            handle.write(f"{idx} {float(mean)!r} {float(variance)!r}\n")


def load_cmvn(path: str) -> CmvnStats:
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line.split() for line in handle if line.strip()]
    try:
        if lines[0][0] != "frames":
            raise ValueError("missing frames header")
        frames = int(lines[0][1])
        rows = sorted((int(idx), float(mean), float(var)) for idx, mean, var in lines[1:])
    except (IndexError, ValueError) as e:
        raise InputError(f"malformed CMVN stats file {path}: {e}") from e
    if [r[0] for r in rows] != list(range(len(rows))):
        raise InputError(f"CMVN stats file {path} has missing dimensions")
    return CmvnStats(
        mean=np.array([r[1] for r in rows]),
        variance=np.array([r[2] for r in rows]),
        frames=frames,
    )


@dataclass(frozen=True)
class Mask:
    """One SpecAugment band: `axis` 0 masks feature rows, 1 masks frames."""

    axis: int
    start: int
    width: int


def draw_masks(
    rng: np.random.Generator,
    dims: int,
    frames: int,
    freq_masks: int = FREQ_MASKS,
    freq_width: int = FREQ_MASK_WIDTH,
    time_masks: int = TIME_MASKS,
    time_width: int = TIME_MASK_WIDTH,
) -> List[Mask]:
    masks = []
    for _ in range(freq_masks):
        width = int(rng.integers(0, min(freq_width, dims) + 1))
        masks.append(Mask(0, int(rng.integers(0, dims - width + 1)), width))
    for _ in range(time_masks):
        width = int(rng.integers(0, min(time_width, frames) + 1))
        masks.append(Mask(1, int(rng.integers(0, frames - width + 1)), width))
    return masks


def apply_masks(x: np.ndarray, masks: Sequence[Mask], fill: float = 0.0) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    for mask in masks:
        if mask.axis == 0:
            out[mask.start : mask.start + mask.width, :] = fill
        else:
            out[:, mask.start : mask.start + mask.width] = fill
    return out


def spec_augment(x: np.ndarray, seed: Union[int, np.random.Generator]) -> np.ndarray:
    """Two frequency masks of width <= 10 and two time masks of width <= min(50, T), filled with 0."""
    x = np.asarray(x, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_masks(x, draw_masks(rng, x.shape[0], x.shape[1]))


@dataclass
class FeatureBatch:
    """Zero-padded [B, 80, Tmax] features with per-item valid frame counts."""

    features: Tensor
    valid_len: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.valid_len = np.asarray(self.valid_len, dtype=np.int64)
        if self.features.ndim != 3 or self.features.shape[1] != N_MELS:
            raise DimensionError(f"feature batch must be [B, {N_MELS}, T]", self.features.shape)
        if self.valid_len.shape != (self.features.shape[0],):
            raise DimensionError("one valid length per batch item", self.valid_len.shape, self.features.shape)
        if np.any(self.valid_len > self.features.shape[2]) or np.any(self.valid_len < 0):
            raise InputError(f"valid lengths {self.valid_len.tolist()} outside [0, {self.features.shape[2]}]")

    @property
    def batch_size(self) -> int:
        return int(self.features.shape[0])

    @property
    def max_frames(self) -> int:
        return int(self.features.shape[2])


def collate_features(matrices: Sequence[np.ndarray], pad_to: Optional[int] = None) -> FeatureBatch:
    """Stack [80, T_i] matrices into a zero-padded FeatureBatch."""
    if not matrices:
        raise InputError("cannot collate an empty list of feature matrices")
    lengths = np.array([m.shape[1] for m in matrices], dtype=np.int64)
    frames = int(lengths.max()) if pad_to is None else pad_to
    if frames < lengths.max():
        raise InputError(f"pad_to={pad_to} is shorter than the longest item ({lengths.max()})")
    data = np.zeros((len(matrices), matrices[0].shape[0], frames))
    for i, m in enumerate(matrices):
        data[i, :, : m.shape[1]] = m
    return FeatureBatch(Tensor(data), lengths)


def write_feature_dump(x: np.ndarray, path: str) -> None:
    x = np.asarray(x, dtype=np.float64)
    with open(path, "wb") as handle:
        handle.write(DUMP_HEADER.pack(DUMP_MAGIC, x.shape[0], x.shape[1]))
        handle.write(x.astype("<f8").tobytes(order="C"))


def read_feature_dump(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < DUMP_HEADER.size:
        raise InputError(f"{path}: truncated feature dump header")
    magic, dims, frames = DUMP_HEADER.unpack_from(blob)
    if magic != DUMP_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    payload = blob[DUMP_HEADER.size :]
    if len(payload) != dims * frames * 8:
        raise InputError(f"{path}: expected {dims * frames * 8} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims, frames).astype(np.float64)


def extract_features(
    waves: Sequence[np.ndarray], dither_scale: float = 1.0, seeds: Optional[Sequence[int]] = None
) -> List[np.ndarray]:
    """FBank of every waveform, each dithered from its own seed (its index by default)."""
    seeds = range(len(waves)) if seeds is None else seeds
    if len(seeds) != len(waves):
        raise InputError(f"{len(waves)} waveforms but {len(seeds)} dither seeds")
    matrices = [fbank(w, dither_scale, int(s)) for w, s in zip(waves, seeds)]
    logger.info("extracted features for %d utterances", len(matrices))
    return matrices
