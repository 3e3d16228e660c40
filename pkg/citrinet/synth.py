"""Synthetic tone corpus: each token is a pure tone of its own frequency."""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pyaml
from pyaml import yaml

from citrinet.errors import ConfigurationError, InputError
from citrinet.features import SAMPLE_RATE

logger = logging.getLogger(__name__)

MAX_SUBSET = 64
BASE_FREQUENCY = 200.0
FREQUENCY_STEP = 110.0
TONE_SECONDS = 0.12
GAP_SECONDS = 0.04
EDGE_SECONDS = 0.1
AMPLITUDE = 8000.0
MANIFEST_NAME = "manifest.yaml"


def token_frequency(token: int) -> float:
    return BASE_FREQUENCY + FREQUENCY_STEP * token


def render_waveform(tokens: Sequence[int], seed: int) -> np.ndarray:
    """Silence, one tone per token separated by short gaps, silence.

    The seed draws the starting phase and a small gain of every tone.
    """
    rng = np.random.default_rng(seed)
    tone = int(round(TONE_SECONDS * SAMPLE_RATE))
    gap = int(round(GAP_SECONDS * SAMPLE_RATE))
    edge = int(round(EDGE_SECONDS * SAMPLE_RATE))
    t = np.arange(tone) / SAMPLE_RATE
    envelope = np.hanning(tone) ** 0.25

    pieces = [np.zeros(edge)]
    for i, token in enumerate(tokens):
        if not 0 <= token < MAX_SUBSET:
            raise InputError(f"token {token} has no tone (supported ids: 0..{MAX_SUBSET - 1})")
        if i:
            pieces.append(np.zeros(gap))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        gain = rng.uniform(0.8, 1.0)
        pieces.append(AMPLITUDE * gain * envelope * np.sin(2.0 * np.pi * token_frequency(token) * t + phase))
    pieces.append(np.zeros(edge))
    return np.concatenate(pieces)


@dataclass
class SynthSample:
    tokens: List[int]
    seed: int
    waveform: np.ndarray = field(repr=False)

    @classmethod
    def render(cls, tokens: Sequence[int], seed: int) -> "SynthSample":
        tokens = [int(t) for t in tokens]
        return cls(tokens=tokens, seed=int(seed), waveform=render_waveform(tokens, seed))

    @property
    def duration(self) -> float:
        return self.waveform.shape[0] / SAMPLE_RATE


def synth_dataset(
    n: int,
    seed: int = 0,
    vocab_subset_size: int = 8,
    min_len: int = 2,
    max_len: int = 5,
) -> List[SynthSample]:
    """`n` utterances of random token sequences drawn from the first `vocab_subset_size` ids."""
    if not 1 <= vocab_subset_size <= MAX_SUBSET:
        raise ConfigurationError(f"vocab_subset_size must lie in [1, {MAX_SUBSET}], got {vocab_subset_size}")
    if not 1 <= min_len <= max_len:
        raise ConfigurationError(f"invalid length range [{min_len}, {max_len}]")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        tokens = rng.integers(0, vocab_subset_size, size=length).tolist()
        samples.append(SynthSample.render(tokens, int(rng.integers(0, 2**31 - 1))))
    logger.info("synthesized %d utterances (seed %d, %d tokens)", n, seed, vocab_subset_size)
    return samples


def manifest_entries(samples: Sequence[SynthSample]) -> List[Dict[str, object]]:
    return [
        {
            "id": f"utt{i:05d}",
            "tokens": list(s.tokens),
            "seed": s.seed,
            "samples": int(s.waveform.shape[0]),
        }
        for i, s in enumerate(samples)
    ]


def save_manifest(samples: Sequence[SynthSample], directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(pyaml.dump({"sample_rate": SAMPLE_RATE, "utterances": manifest_entries(samples)}))
    return path


def load_manifest(path: str) -> List[SynthSample]:
    """Rebuild a corpus from its manifest (a directory or the YAML file itself)."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise InputError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as e:
            raise InputError(f"malformed manifest {path}: {e}") from e
    try:
        entries = data["utterances"]
        return [SynthSample.render(entry["tokens"], entry["seed"]) for entry in entries]
    except (KeyError, TypeError) as e:
        raise InputError(f"manifest {path} lacks utterance tokens/seeds: {e}") from e
