"""
Training objectives: CTC, label-smoothed KL attention losses and their weighted
combination.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from citrinet.errors import ConfigurationError, ContractError, InputError
from citrinet.model import CitrinetModel, TokenBatch, decoder_io
from citrinet.tensor import Tensor, record_op, stack

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 0.1


@dataclass(frozen=True)
class LossWeights:
    """lambda1 weighs CTC against attention, lambda2 weighs l2r against r2l."""

    lambda1: float = 0.3
    lambda2: float = 0.7
    delta: float = DEFAULT_DELTA

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigurationError(f"delta must lie in [0, 1), got {self.delta}")

    @property
    def uses_attention(self) -> bool:
        return self.lambda1 < 1.0


@dataclass(frozen=True)
class CtcResult:
    """Loss and d(loss)/d(log_probs) of one utterance; infeasible targets give +inf."""

    loss: float
    grad: np.ndarray
    feasible: bool


def ctc_alignment_bound(target: Sequence[int]) -> int:
    """Fewest frames able to emit `target`: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _extended_labels(target: Sequence[int], blank: int) -> np.ndarray:
    extended = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    extended[1::2] = target
    return extended


def _ctc_lattice(log_probs: np.ndarray, target: Sequence[int], blank: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Extended labels, skip-transition flags and per-frame emission log-probs."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2 or log_probs.shape[0] == 0:
        raise InputError(f"CTC needs [T, classes] log-probs with T >= 1, got {log_probs.shape}")
    classes = log_probs.shape[1]
    for label in target:
        if not 0 <= label < classes or label == blank:
            raise InputError(f"CTC target label {label} invalid for {classes} classes with blank {blank}")
    extended = _extended_labels(target, blank)
    skip = np.zeros(len(extended), dtype=bool)
    skip[2:] = (extended[2:] != blank) & (extended[2:] != extended[:-2])
    return extended, skip, log_probs[:, extended]


def _ctc_alpha(emit: np.ndarray, skip: np.ndarray) -> np.ndarray:
    frames, states = emit.shape
    alpha = np.full((frames, states), -np.inf)
    alpha[0, : min(2, states)] = emit[0, : min(2, states)]
    with np.errstate(invalid="ignore"):
        for t in range(1, frames):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
            alpha[t] = a + emit[t]
    return alpha


def ctc_end_scores(log_probs: np.ndarray, target: Sequence[int], blank: int) -> Tuple[float, float]:
    """Log-probability of `target` split by whether the alignment ends in blank or in a label."""
    target = [int(t) for t in target]
    _, skip, emit = _ctc_lattice(log_probs, target, blank)
    last = _ctc_alpha(emit, skip)[-1]
    return float(last[-1]), float(last[-2]) if len(last) > 1 else float("-inf")


def ctc_forward_backward(log_probs: np.ndarray, target: Sequence[int], blank: int) -> CtcResult:
    """Log-space forward-backward over the blank-extended label sequence."""
    target = [int(t) for t in target]
    extended, skip, emit = _ctc_lattice(log_probs, target, blank)
    frames, states = emit.shape
    alpha = _ctc_alpha(emit, skip)
    log_likelihood = np.logaddexp.reduce(alpha[-1, max(0, states - 2) :])
    if not np.isfinite(log_likelihood):
        return CtcResult(loss=float("inf"), grad=np.zeros(np.shape(log_probs)), feasible=False)

    beta = np.full((frames, states), -np.inf)
    beta[-1, max(0, states - 2) :] = 0.0
    with np.errstate(invalid="ignore"):
        for t in range(frames - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
            beta[t] = b

    occupancy = np.exp(alpha + beta - log_likelihood)
    grad = np.zeros(np.shape(log_probs))
    np.add.at(grad.T, extended, -occupancy.T)
    return CtcResult(loss=float(-log_likelihood), grad=grad, feasible=True)


def _ctc_op(log_probs: Tensor, result: CtcResult) -> Tensor:
    return record_op("ctc_loss", np.array(result.loss), (log_probs,), lambda g: (g * result.grad,))


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """Negative log-probability of `target` under the CTC collapse of [T, classes] log-probs."""
    result = ctc_forward_backward(log_probs.data, target, blank)
    if not result.feasible:
        logger.warning(
            "CTC target of %d labels needs %d frames, only %d available",
            len(target),
            ctc_alignment_bound(target),
            log_probs.shape[0],
        )
    return _ctc_op(log_probs, result)


def ctc_batch_loss(
    log_probs: Tensor, valid_len: Sequence[int], targets: Sequence[Sequence[int]], blank: int
) -> Tuple[Tensor, List[bool]]:
    """Mean CTC loss over the feasible utterances of a [B, T, classes] batch."""
    losses, feasible = [], []
    for b, target in enumerate(targets):
        item = log_probs[b, : int(valid_len[b])]
        loss = ctc_loss(item, target, blank)
        ok = bool(np.isfinite(loss.data))
        feasible.append(ok)
        if ok:
            losses.append(loss)
    if not losses:
        return Tensor(np.inf), feasible
    return stack(losses).mean(), feasible


def smoothed_targets(
    reference: np.ndarray,
    lengths: np.ndarray,
    classes: int,
    delta: float,
    excluded: Sequence[int] = (),
) -> np.ndarray:
    """[B, L, classes] label-smoothed targets; rows beyond each length are zero.

    The true class gets 1 - delta, every other non-excluded class delta / (K - 1)
    with K the number of non-excluded classes.
    """
    batch, length = reference.shape
    allowed = np.ones(classes, dtype=bool)
    allowed[list(excluded)] = False
    k = int(allowed.sum())
    if k < 2:
        raise ConfigurationError("label smoothing needs at least two target classes")
    valid = np.arange(length)[None, :] < lengths[:, None]
    labels = reference[valid]
    if labels.size and (labels.min() < 0 or labels.max() >= classes or np.any(~allowed[labels])):
        raise InputError("reference token outside the predictable classes")

    q = np.zeros((batch, length, classes))
    q[valid] = np.where(allowed, delta / (k - 1), 0.0)
    rows, cols = np.nonzero(valid)
    q[rows, cols, labels] = 1.0 - delta
    return q


def att_kl_loss(
    logits: Tensor, reference: TokenBatch, delta: float = DEFAULT_DELTA, excluded: Sequence[int] = ()
) -> Tensor:
    """KL(smoothed reference || softmax(logits)), averaged over valid positions then over items."""
    lengths = np.asarray(reference.lengths, dtype=np.int64)
    if lengths.sum() == 0:
        raise ContractError("attention loss needs at least one unpadded position")
    batch, length, classes = logits.shape
    q = smoothed_targets(reference.ids, lengths, classes, delta, excluded)
    with np.errstate(divide="ignore"):
        neg_entropy = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0).sum(axis=-1)
    kl = neg_entropy - (logits.log_softmax(axis=-1) * q).sum(axis=-1)

    items = int(np.count_nonzero(lengths))
    valid = np.arange(length)[None, :] < lengths[:, None]
    weights = np.where(valid, 1.0 / np.maximum(lengths, 1)[:, None], 0.0) / items
    return (kl * weights).sum()


def combined_loss(
    ctc: Tensor, att_l2r: Optional[Tensor], att_r2l: Optional[Tensor], weights: LossWeights
) -> Tensor:
    """lambda1 * CTC + (1 - lambda1) * (lambda2 * l2r + (1 - lambda2) * r2l)."""
    if weights.lambda1 == 1.0:
        return ctc
    if att_l2r is None or att_r2l is None:
        raise ContractError("attention losses are required when lambda1 < 1")
    attention = weights.lambda2 * att_l2r + (1.0 - weights.lambda2) * att_r2l
    return weights.lambda1 * ctc + (1.0 - weights.lambda1) * attention


@dataclass
class LossBreakdown:
    ctc: Tensor
    att_l2r: Optional[Tensor]
    att_r2l: Optional[Tensor]
    combined: Tensor
    feasible: List[bool]

    def as_floats(self) -> Dict[str, Optional[float]]:
        return {
            "ctc": self.ctc.item(),
            "att_l2r": self.att_l2r.item() if self.att_l2r is not None else None,
            "att_r2l": self.att_r2l.item() if self.att_r2l is not None else None,
            "combined": self.combined.item(),
        }


def compute_losses(
    model: CitrinetModel,
    features: Tensor,
    valid_len: Sequence[int],
    targets: Sequence[Sequence[int]],
    weights: LossWeights,
) -> LossBreakdown:
    """Forward a padded batch through `model` and evaluate every active loss."""
    vocab = model.vocabulary
    enc, enc_len = model.encode(features, valid_len)
    ctc, feasible = ctc_batch_loss(model.ctc_log_probs(enc), enc_len, targets, vocab.blank)
    att = {}
    if weights.uses_attention:
        for direction in ("l2r", "r2l"):
            tokens_in, reference = decoder_io(targets, vocab, direction)
            logits = model.decode(enc, enc_len, tokens_in, direction)
            att[direction] = att_kl_loss(logits, reference, weights.delta, excluded=(vocab.sos,))
    combined = combined_loss(ctc, att.get("l2r"), att.get("r2l"), weights)
    return LossBreakdown(ctc, att.get("l2r"), att.get("r2l"), combined, feasible)
