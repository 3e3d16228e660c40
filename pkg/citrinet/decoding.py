"""
CTC decoding: best path, prefix beam search, attention rescoring of the n-best
list and character error rate.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from citrinet.errors import ConfigurationError, ContractError, InputError
from citrinet.features import FeatureBatch, collate_features
from citrinet.losses import ctc_end_scores
from citrinet.model import CitrinetModel, decoder_io
from citrinet.tensor import Tensor, no_grad
from citrinet.training import static_batches

logger = logging.getLogger(__name__)

NEG_INF = float("-inf")


@dataclass
class BeamHypothesis:
    prefix: Tuple[int, ...]
    log_p_blank: float
    log_p_nonblank: float
    att_scores: Optional[Tuple[float, float]] = None

    @property
    def score(self) -> float:
        return float(np.logaddexp(self.log_p_blank, self.log_p_nonblank))

    def sort_key(self) -> Tuple[float, int, Tuple[int, ...]]:
        return (-self.score, len(self.prefix), self.prefix)


def collapse(path: Sequence[int], blank: int) -> List[int]:
    """Merge repeated labels, then drop blanks."""
    labels, previous = [], None
    for label in path:
        label = int(label)
        if label != previous and label != blank:
            labels.append(label)
        previous = label
    return labels


def greedy_decode(log_probs: np.ndarray, blank: int) -> List[int]:
    return collapse(np.argmax(log_probs, axis=-1), blank)


def _exact(prefix: Tuple[int, ...], log_probs: np.ndarray, blank: int) -> BeamHypothesis:
    ends_blank, ends_label = ctc_end_scores(log_probs, prefix, blank)
    return BeamHypothesis(prefix, ends_blank, ends_label)


def _prefix_search(log_probs: np.ndarray, beam_width: int, blank: int) -> Tuple[List[Tuple[int, ...]], bool]:
    """One pruned prefix search; also reports whether any frame dropped a prefix."""
    classes = log_probs.shape[1]
    labels = [c for c in range(classes) if c != blank]
    beams: Dict[Tuple[int, ...], Tuple[float, float]] = {(): (0.0, NEG_INF)}
    pruned = False
    for frame in log_probs:
        if len(labels) > beam_width:
            top = np.argpartition(np.where(np.arange(classes) == blank, NEG_INF, frame), -beam_width)
            candidates = set(int(c) for c in top[-beam_width:])
            pruned = True
        else:
            candidates = set(labels)
        extended: Dict[Tuple[int, ...], List[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (p_blank, p_label) in beams.items():
            total = np.logaddexp(p_blank, p_label)
            stay = extended[prefix]
            stay[0] = np.logaddexp(stay[0], total + frame[blank])
            last = prefix[-1] if prefix else None
            for c in candidates | ({last} if last is not None else set()):
                p = frame[c]
                grown = extended[prefix + (c,)]
                if c == last:
                    stay[1] = np.logaddexp(stay[1], p_label + p)
                    grown[1] = np.logaddexp(grown[1], p_blank + p)
                else:
                    grown[1] = np.logaddexp(grown[1], total + p)
        ranked = sorted(
            extended.items(), key=lambda item: (-np.logaddexp(*item[1]), len(item[0]), item[0])
        )
        pruned = pruned or len(ranked) > beam_width
        beams = {prefix: (scores[0], scores[1]) for prefix, scores in ranked[:beam_width]}
    return list(beams), pruned


def ctc_beam_search(log_probs: np.ndarray, beam_width: int, blank: int) -> List[BeamHypothesis]:
    """Prefix beam search with blank/non-blank tracking and merging of equal prefixes.

    Returns up to `beam_width` hypotheses sorted by score (then length, then
    labels); every score is the exact CTC log-probability of its label sequence.
    Width 1 follows the best path. Wider beams rescore the survivors of every
    narrower search as well, so the top score never drops as the width grows.
    """
    if beam_width < 1:
        raise ConfigurationError(f"beam width must be >= 1, got {beam_width}")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2 or log_probs.shape[0] == 0:
        raise InputError(f"beam search needs [T, classes] log-probs, got {log_probs.shape}")

    found = {tuple(greedy_decode(log_probs, blank)): None}
    for width in range(2, beam_width + 1):
        prefixes, pruned = _prefix_search(log_probs, width, blank)
        found.update(dict.fromkeys(prefixes))
        # an unpruned search already holds every reachable prefix
        if not pruned:
            break
    nbest = sorted((_exact(prefix, log_probs, blank) for prefix in found), key=BeamHypothesis.sort_key)
    return nbest[:beam_width]


def score_hypotheses(
    model: CitrinetModel, enc: Tensor, enc_len: Sequence[int], prefixes: Sequence[Sequence[int]]
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean per-token log-probability of each prefix under the l2r and r2l decoders.

    `enc` holds a single utterance; it is repeated once per hypothesis.
    """
    count = len(prefixes)
    enc_rep = Tensor(np.repeat(enc.data[:1], count, axis=0))
    len_rep = np.repeat(np.asarray(enc_len[:1]), count)
    scores = []
    with no_grad():
        for direction in ("l2r", "r2l"):
            tokens_in, reference = decoder_io(prefixes, model.vocabulary, direction)
            log_probs = model.decode(enc_rep, len_rep, tokens_in, direction).log_softmax(axis=-1).data
            picked = np.take_along_axis(
                log_probs, np.minimum(reference.ids, log_probs.shape[-1] - 1)[..., None], axis=-1
            )[..., 0]
            valid = np.arange(reference.max_length)[None, :] < reference.lengths[:, None]
            scores.append(np.where(valid, picked, 0.0).sum(axis=1) / reference.lengths)
    return scores[0], scores[1]


def attention_rescore(
    nbest: Sequence[BeamHypothesis],
    enc: Tensor,
    enc_len: Sequence[int],
    model: CitrinetModel,
    w_ctc: float = 0.3,
    lambda2: float = 0.7,
) -> BeamHypothesis:
    """Pick the hypothesis maximizing w_ctc * ctc + (1 - w_ctc) * (lambda2 * l2r + (1 - lambda2) * r2l).

    Ties go to the shorter hypothesis, then the lexicographically smaller one.
    """
    if not nbest:
        raise ContractError("cannot rescore an empty n-best list")
    if len(nbest) == 1:
        return nbest[0]
    if model.decoder is None or w_ctc == 1.0:
        return min(nbest, key=BeamHypothesis.sort_key)

    l2r, r2l = score_hypotheses(model, enc, enc_len, [h.prefix for h in nbest])
    best, best_key = None, None
    for hyp, s_l2r, s_r2l in zip(nbest, l2r, r2l):
        hyp.att_scores = (float(s_l2r), float(s_r2l))
        final = w_ctc * hyp.score + (1.0 - w_ctc) * (lambda2 * s_l2r + (1.0 - lambda2) * s_r2l)
        key = (-final, len(hyp.prefix), hyp.prefix)
        if best_key is None or key < best_key:
            best, best_key = hyp, key
    return best


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    row = np.arange(len(ref) + 1)
    for i, h in enumerate(hyp, start=1):
        previous, row = row, np.empty_like(row)
        row[0] = i
        for j, r in enumerate(ref, start=1):
            row[j] = min(previous[j] + 1, row[j - 1] + 1, previous[j - 1] + (h != r))
    return int(row[-1])


def cer(hyp: Sequence, ref: Sequence) -> Fraction:
    if len(ref) == 0:
        raise InputError("CER is undefined for an empty reference")
    return Fraction(edit_distance(hyp, ref), len(ref))


def corpus_cer(pairs: Sequence[Tuple[Sequence, Sequence]]) -> Fraction:
    """Total edits over total reference length."""
    total = sum(len(ref) for _, ref in pairs)
    if total == 0:
        raise InputError("CER is undefined for an empty reference corpus")
    return Fraction(sum(edit_distance(hyp, ref) for hyp, ref in pairs), total)


def decode_batch(
    model: CitrinetModel,
    batch: FeatureBatch,
    beam_width: int = 8,
    w_ctc: float = 0.3,
    lambda2: float = 0.7,
) -> List[List[int]]:
    """Beam search plus attention rescoring for every utterance of a batch."""
    blank = model.vocabulary.blank
    results = []
    with no_grad():
        enc, enc_len = model.encode(batch.features, batch.valid_len)
        log_probs = model.ctc_log_probs(enc).data
        for b in range(batch.batch_size):
            nbest = ctc_beam_search(log_probs[b, : enc_len[b]], beam_width, blank)
            best = attention_rescore(nbest, enc[b : b + 1], enc_len[b : b + 1], model, w_ctc, lambda2)
            results.append(list(best.prefix))
    logger.info("decoded %d utterances with beam %d", batch.batch_size, beam_width)
    return results


def decode_corpus(
    model: CitrinetModel,
    features: Sequence[np.ndarray],
    beam_width: int = 8,
    w_ctc: float = 0.3,
    lambda2: float = 0.7,
    max_frames: int = 4000,
) -> List[List[int]]:
    """Decode [80, T] matrices in length-sorted batches; results follow input order."""
    model.eval()
    results: List[Optional[List[int]]] = [None] * len(features)
    for indices in static_batches([m.shape[1] for m in features], max_frames):
        batch = collate_features([features[i] for i in indices])
        for index, tokens in zip(indices, decode_batch(model, batch, beam_width, w_ctc, lambda2)):
            results[index] = tokens
    return results
