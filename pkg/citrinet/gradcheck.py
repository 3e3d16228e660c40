"""Finite-difference check of every parameter gradient of a small model."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from citrinet.config import ModelConfig, RunConfig
from citrinet.layers import Initializer, Parameter
from citrinet.losses import LossWeights, compute_losses
from citrinet.model import CitrinetModel
from citrinet.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

THRESHOLD = 1e-4
STEP = 1e-5
ENTRIES_PER_TENSOR = 6
GRAD_FLOOR = 1e-2
FRAMES = 24


def tiny_config(seed: int = 0) -> RunConfig:
    """Att-C with 16 channels, one block per mega block and an 8-token vocabulary."""
    return RunConfig.from_flat(
        {
            "variant": "Att-C",
            "channels": 16,
            "total_blocks": 5,
            "vocab": 8,
            "epilog_dim": 16,
            "encoder_heads": 4,
            "decoder_blocks": 1,
            "decoder_heads": 4,
            "decoder_dim": 16,
            "dropout": 0.0,
            "spec_augment": False,
            "dither": 0.0,
            "seed": seed,
        }
    )


@dataclass(frozen=True)
class TensorCheck:
    name: str
    shape: Tuple[int, ...]
    max_rel_err: float
    entries: int
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold


@dataclass(frozen=True)
class GradcheckReport:
    seed: int
    loss: float
    checks: Tuple[TensorCheck, ...]
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[TensorCheck]:
        return [check for check in self.checks if not check.passed]

    @property
    def max_rel_err(self) -> float:
        return max((check.max_rel_err for check in self.checks), default=0.0)

    def to_dict(self) -> Dict[str, object]:
        return {
            "seed": self.seed,
            "loss": self.loss,
            "threshold": self.threshold,
            "passed": self.passed,
            "tensors": {
                check.name: {"max_rel_err": check.max_rel_err, "entries": check.entries, "passed": check.passed}
                for check in self.checks
            },
        }


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _sample_entries(rng: np.random.Generator, size: int, entries: int) -> np.ndarray:
    if size <= entries:
        return np.arange(size)
    return np.sort(rng.choice(size, entries, replace=False))


def _probe_batch(
    config: ModelConfig, rng: np.random.Generator
) -> Tuple[Tensor, np.ndarray, List[List[int]]]:
    features = Tensor(rng.standard_normal((2, config.feat_dim, FRAMES)))
    valid_len = np.array([FRAMES, FRAMES - 7])
    targets = [rng.integers(0, config.vocab, size=2).tolist(), rng.integers(0, config.vocab, size=1).tolist()]
    return features, valid_len, targets


def gradcheck(
    config: Optional[RunConfig] = None,
    seed: int = 0,
    entries: int = ENTRIES_PER_TENSOR,
    step: float = STEP,
    threshold: float = THRESHOLD,
) -> GradcheckReport:
    """Compare backprop against central differences on sampled entries of every parameter.

    Dropout is switched off so the loss is a deterministic function of the
    parameters; batch norms keep using batch statistics.
    """
    config = config or tiny_config(seed)
    model_config = config.model.model_copy(update={"dropout": 0.0})
    rng = np.random.default_rng(seed)
    model = CitrinetModel(model_config, Initializer(rng))
    model.train()
    weights = LossWeights(model_config.lambda1, model_config.lambda2, model_config.delta)
    features, valid_len, targets = _probe_batch(model_config, rng)

    def loss_value() -> float:
        with no_grad():
            return compute_losses(model, features, valid_len, targets, weights).combined.item()

    model.zero_grad()
    loss = compute_losses(model, features, valid_len, targets, weights).combined
    backward(loss)

    checks = []
    for name, param in model.named_parameters():
        analytic = np.zeros_like(param.data) if param.grad is None else param.grad
        worst = 0.0
        picked = _sample_entries(rng, param.size, entries)
        for flat in picked:
            index = np.unravel_index(int(flat), param.shape)
            numeric = _central_difference(param, index, step, loss_value)
            worst = max(worst, relative_error(float(analytic[index]), numeric))
        checks.append(TensorCheck(name, tuple(param.shape), worst, len(picked), threshold))
        if worst > threshold:
            logger.warning("gradient mismatch in %s: rel err %.3g", name, worst)

    report = GradcheckReport(seed, float(loss.item()), tuple(checks), threshold)
    logger.info("gradcheck over %d tensors: max rel err %.3g", len(checks), report.max_rel_err)
    return report


def _central_difference(param: Parameter, index: Sequence[int], step: float, loss_value) -> float:
    original = param.data[index]
    param.data[index] = original + step
    plus = loss_value()
    param.data[index] = original - step
    minus = loss_value()
    param.data[index] = original
    return (plus - minus) / (2.0 * step)
