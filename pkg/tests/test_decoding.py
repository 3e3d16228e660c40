"""Tests for CTC decoding, attention rescoring and error rates."""

import itertools
from fractions import Fraction
from typing import List, Tuple

import numpy as np
import pytest

from citrinet.config import ModelConfig
from citrinet.decoding import (
    BeamHypothesis,
    attention_rescore,
    cer,
    collapse,
    corpus_cer,
    ctc_beam_search,
    decode_batch,
    decode_corpus,
    edit_distance,
    greedy_decode,
    score_hypotheses,
)
from citrinet.errors import ConfigurationError, ContractError, InputError
from citrinet.features import collate_features
from citrinet.losses import ctc_loss
from citrinet.model import build_model
from citrinet.tensor import Tensor


def random_log_probs(rng: np.random.Generator, frames: int, classes: int) -> np.ndarray:
    logits = 2.0 * rng.standard_normal((frames, classes))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def exhaustive_best(log_probs: np.ndarray, blank: int) -> Tuple[Tuple[int, ...], float]:
    """Most probable label sequence by scoring every sequence up to T labels."""
    frames, classes = log_probs.shape
    labels = [c for c in range(classes) if c != blank]
    best, best_score = (), -np.inf
    for length in range(frames + 1):
        for sequence in itertools.product(labels, repeat=length):
            score = -ctc_loss(Tensor(log_probs), list(sequence), blank).item()
            if score > best_score:
                best, best_score = sequence, score
    return best, best_score


def attention_model(rng: np.random.Generator):
    config = ModelConfig(
        variant="Att-C",
        channels=16,
        total_blocks=5,
        vocab=8,
        epilog_dim=16,
        encoder_heads=4,
        decoder_blocks=1,
        decoder_heads=4,
        decoder_dim=16,
        dropout=0.0,
    )
    return build_model(config, rng).eval()


class TestGreedy:
    """Test cases for collapsing and best-path decoding."""

    def test_collapse(self) -> None:
        """Test repeats merge and blanks vanish, but blank-separated repeats stay."""
        assert collapse([0, 0, 3, 0, 1, 1, 3, 3], blank=3) == [0, 0, 1]

    def test_greedy(self) -> None:
        """Test best path takes the per-frame argmax."""
        log_probs = np.log(np.array([[0.7, 0.2, 0.1], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8], [0.2, 0.7, 0.1]]))
        assert greedy_decode(log_probs, blank=2) == [0, 1]


class TestBeamSearch:
    """Test cases for the CTC prefix beam search."""

    @pytest.mark.parametrize("frames", [1, 3, 4, 5])
    def test_wide_beam_matches_exhaustive_search(self, rng: np.random.Generator, frames: int) -> None:
        """Test a 128-wide beam finds the most probable label sequence."""
        for _ in range(3):
            log_probs = random_log_probs(rng, frames, 3)
            best, best_score = exhaustive_best(log_probs, blank=2)
            top = ctc_beam_search(log_probs, 128, blank=2)[0]
            assert top.prefix == best
            assert top.score == pytest.approx(best_score, abs=1e-9)

    def test_scores_are_exact(self, rng: np.random.Generator) -> None:
        """Test every hypothesis carries its exact CTC log-probability, best first, without duplicates."""
        log_probs = random_log_probs(rng, 8, 4)
        nbest = ctc_beam_search(log_probs, 5, blank=3)
        assert 1 <= len(nbest) <= 5
        assert len({h.prefix for h in nbest}) == len(nbest)
        for hyp in nbest:
            assert hyp.score == pytest.approx(-ctc_loss(Tensor(log_probs), list(hyp.prefix), 3).item(), abs=1e-9)
        scores = [h.score for h in nbest]
        assert scores == sorted(scores, reverse=True)

    def test_width_one_is_best_path(self, rng: np.random.Generator) -> None:
        """Test a single beam follows the argmax path."""
        log_probs = random_log_probs(rng, 10, 5)
        nbest = ctc_beam_search(log_probs, 1, blank=4)
        assert len(nbest) == 1
        assert list(nbest[0].prefix) == greedy_decode(log_probs, blank=4)

    def test_top_score_never_drops_with_width(self, rng: np.random.Generator) -> None:
        """Test widening the beam never lowers the best score, which stays a log-probability."""
        for _ in range(1000):
            classes = int(rng.integers(3, 6))
            log_probs = random_log_probs(rng, int(rng.integers(1, 8)), classes)
            previous = -np.inf
            for width in (1, 2, 3, 4, 8):
                top = ctc_beam_search(log_probs, width, blank=classes - 1)[0].score
                assert top <= 1e-12
                assert top >= previous
                previous = top

    def test_wider_beam_keeps_the_best_path_prefix(self, rng: np.random.Generator) -> None:
        """Test the best-path labels stay in the n-best list when they outscore the survivors."""
        for _ in range(200):
            log_probs = random_log_probs(rng, 6, 4)
            greedy = tuple(greedy_decode(log_probs, blank=3))
            nbest = ctc_beam_search(log_probs, 2, blank=3)
            greedy_score = ctc_beam_search(log_probs, 1, blank=3)[0].score
            if greedy not in {h.prefix for h in nbest}:
                assert nbest[-1].score >= greedy_score

    def test_more_labels_than_beams(self, rng: np.random.Generator) -> None:
        """Test pruning the candidate labels per frame still returns a sorted n-best list."""
        nbest = ctc_beam_search(random_log_probs(rng, 6, 12), 3, blank=11)
        assert len(nbest) == 3
        assert all(0 <= label < 11 for hyp in nbest for label in hyp.prefix)

    def test_invalid_arguments(self, rng: np.random.Generator) -> None:
        """Test a zero width and empty log-probs are rejected."""
        with pytest.raises(ConfigurationError):
            ctc_beam_search(random_log_probs(rng, 3, 3), 0, blank=2)
        with pytest.raises(InputError):
            ctc_beam_search(np.zeros((0, 3)), 4, blank=2)


class TestAttentionRescore:
    """Test cases for rescoring the n-best list with both decoders."""

    def test_empty_list(self, rng: np.random.Generator) -> None:
        """Test rescoring nothing raises ContractError."""
        model = attention_model(rng)
        with pytest.raises(ContractError):
            attention_rescore([], Tensor(np.zeros((1, 16, 2))), [2], model)

    def test_ctc_weight_one_keeps_the_beam_order(self, rng: np.random.Generator) -> None:
        """Test w_ctc = 1 returns the best CTC hypothesis."""
        model = attention_model(rng)
        nbest = [BeamHypothesis((1,), -1.0, -np.inf), BeamHypothesis((2, 3), -0.5, -np.inf)]
        best = attention_rescore(nbest, Tensor(np.zeros((1, 16, 2))), [2], model, w_ctc=1.0)
        assert best.prefix == (2, 3)

    def test_picks_the_best_combined_score(self, rng: np.random.Generator) -> None:
        """Test the winner maximizes the weighted CTC and attention scores."""
        model = attention_model(rng)
        enc, enc_len = model.encode(Tensor(rng.standard_normal((1, 80, 32))), [32])
        prefixes: List[Tuple[int, ...]] = [(1,), (2, 3), (4, 4, 5), (0, 6)]
        nbest = [BeamHypothesis(p, -1.0 - 0.1 * i, -np.inf) for i, p in enumerate(prefixes)]
        l2r, r2l = score_hypotheses(model, enc, enc_len, prefixes)
        finals = [0.3 * h.score + 0.7 * (0.7 * a + 0.3 * b) for h, a, b in zip(nbest, l2r, r2l)]

        best = attention_rescore(nbest, enc, enc_len, model, w_ctc=0.3, lambda2=0.7)

        assert best.prefix == prefixes[int(np.argmax(finals))]
        assert all(h.att_scores is not None for h in nbest)

    def test_attention_scores_are_mean_log_probs(self, rng: np.random.Generator) -> None:
        """Test each direction scores a hypothesis by its mean token log-probability."""
        model = attention_model(rng)
        enc, enc_len = model.encode(Tensor(rng.standard_normal((1, 80, 32))), [32])
        l2r, r2l = score_hypotheses(model, enc, enc_len, [(1, 2), (3,)])
        assert l2r.shape == r2l.shape == (2,)
        assert np.all(l2r < 0.0) and np.all(r2l < 0.0)


class TestErrorRate:
    """Test cases for edit distance and CER."""

    @pytest.mark.parametrize(
        "hyp,ref,distance",
        [("", "abc", 3), ("abc", "abc", 0), ("abc", "", 3), ("kitten", "sitting", 3), ("ab", "ba", 2)],
    )
    def test_edit_distance(self, hyp: str, ref: str, distance: int) -> None:
        """Test unit-cost Levenshtein distances."""
        assert edit_distance(hyp, ref) == distance

    def test_cer(self) -> None:
        """Test "ab" against "abc" is one edit in three."""
        assert cer("ab", "abc") == Fraction(1, 3)
        assert cer([1, 2], [1, 2]) == 0

    def test_empty_reference(self) -> None:
        """Test CER of an empty reference raises InputError."""
        with pytest.raises(InputError):
            cer("a", "")
        with pytest.raises(InputError):
            corpus_cer([("a", "")])

    def test_corpus_cer_pools_edits(self) -> None:
        """Test the corpus rate is total edits over total reference length."""
        assert corpus_cer([("ab", "abc"), ("x", "y")]) == Fraction(2, 4)


class TestDecodeCorpus:
    """Test cases for batched decoding."""

    def test_batching_matches_single_utterances(self, rng: np.random.Generator) -> None:
        """Test length-sorted padded batches decode like one utterance at a time, in input order."""
        model = attention_model(rng)
        features = [rng.standard_normal((80, n)) for n in (40, 24, 33)]
        together = decode_corpus(model, features, beam_width=4, max_frames=200)
        alone = [decode_batch(model, collate_features([m]), beam_width=4)[0] for m in features]
        assert together == alone
        assert all(0 <= t < 8 for tokens in together for t in tokens)

    def test_small_frame_budget(self, rng: np.random.Generator) -> None:
        """Test a budget below the longest utterance still decodes everything."""
        model = attention_model(rng)
        features = [rng.standard_normal((80, n)) for n in (16, 24)]
        assert len(decode_corpus(model, features, beam_width=2, max_frames=10)) == 2
