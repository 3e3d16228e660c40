"""Tests for the CTC, attention and combined losses."""

import itertools
import math
from typing import Callable, List, Sequence

import numpy as np
import pytest

from citrinet.config import ModelConfig
from citrinet.errors import ConfigurationError, ContractError, InputError
from citrinet.losses import (
    LossWeights,
    att_kl_loss,
    combined_loss,
    compute_losses,
    ctc_alignment_bound,
    ctc_batch_loss,
    ctc_end_scores,
    ctc_forward_backward,
    ctc_loss,
    smoothed_targets,
)
from citrinet.model import TokenBatch, build_model
from citrinet.tensor import Tensor


def collapse(path: Sequence[int], blank: int) -> List[int]:
    out: List[int] = []
    previous = None
    for label in path:
        if label != previous and label != blank:
            out.append(label)
        previous = label
    return out


def brute_force_ctc(log_probs: np.ndarray, target: Sequence[int], blank: int) -> float:
    """-log of the summed probability of every alignment that collapses to `target`."""
    frames, classes = log_probs.shape
    total = 0.0
    for path in itertools.product(range(classes), repeat=frames):
        if collapse(path, blank) == list(target):
            total += math.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def random_log_probs(rng: np.random.Generator, frames: int, classes: int) -> np.ndarray:
    logits = rng.standard_normal((frames, classes))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


class TestCtcLoss:
    """Test cases for the CTC forward-backward."""

    def test_single_frame(self, rng: np.random.Generator) -> None:
        """Test T = 1 with one label costs -log p(label)."""
        log_probs = random_log_probs(rng, 1, 4)
        assert ctc_loss(Tensor(log_probs), [2], blank=3).item() == pytest.approx(-log_probs[0, 2], abs=1e-12)

    def test_empty_target(self, rng: np.random.Generator) -> None:
        """Test the empty target is the all-blank path."""
        log_probs = random_log_probs(rng, 5, 3)
        assert ctc_loss(Tensor(log_probs), [], blank=2).item() == pytest.approx(-log_probs[:, 2].sum(), abs=1e-12)

    def test_two_frames_uniform(self) -> None:
        """Test three of the four alignments emit a single label."""
        log_probs = np.log(np.full((2, 2), 0.5))
        assert ctc_loss(Tensor(log_probs), [0], blank=1).item() == pytest.approx(-math.log(0.75), abs=1e-6)
        assert ctc_loss(Tensor(log_probs), [0], blank=1).item() == pytest.approx(0.287682, abs=1e-6)

    @pytest.mark.parametrize("frames", [1, 2, 3, 4, 5, 6])
    @pytest.mark.parametrize("vocab", [1, 2, 3])
    def test_matches_brute_force(self, rng: np.random.Generator, frames: int, vocab: int) -> None:
        """Test the lattice sum equals enumerating every alignment."""
        blank = vocab
        for _ in range(3):
            log_probs = random_log_probs(rng, frames, vocab + 1)
            target = rng.integers(0, vocab, size=int(rng.integers(0, min(frames, 3) + 1))).tolist()
            expected = brute_force_ctc(log_probs, target, blank)
            actual = ctc_loss(Tensor(log_probs), target, blank).item()
            if math.isinf(expected):
                assert math.isinf(actual) and actual > 0
            else:
                assert actual == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("target", [[0], [0, 1], [1, 1], [0, 1, 0], []])
    def test_gradient(
        self, rng: np.random.Generator, check_gradients: Callable, target: List[int]
    ) -> None:
        """Test d(loss)/d(log_probs) against finite differences."""
        log_probs = Tensor(random_log_probs(rng, 5, 3), requires_grad=True)
        check_gradients(lambda lp: ctc_loss(lp, target, blank=2), [log_probs])

    def test_infeasible_target(self, rng: np.random.Generator) -> None:
        """Test a target needing more frames than available gives +inf with a zero gradient."""
        result = ctc_forward_backward(random_log_probs(rng, 2, 3), [1, 1], blank=2)
        assert not result.feasible
        assert result.loss == math.inf
        assert not np.any(np.isnan(result.grad))

    def test_alignment_bound(self) -> None:
        """Test repeats need a blank in between."""
        assert ctc_alignment_bound([1, 2, 3]) == 3
        assert ctc_alignment_bound([1, 1, 2, 2]) == 6
        assert ctc_alignment_bound([]) == 0

    @pytest.mark.parametrize("target", [[3], [-1], [5]])
    def test_invalid_labels(self, rng: np.random.Generator, target: List[int]) -> None:
        """Test blank or out-of-range labels raise InputError."""
        with pytest.raises(InputError):
            ctc_loss(Tensor(random_log_probs(rng, 4, 4)), target, blank=3)

    def test_end_scores_split_the_total(self, rng: np.random.Generator) -> None:
        """Test blank-ending and label-ending scores add up to the total probability."""
        log_probs = random_log_probs(rng, 6, 4)
        blank_end, label_end = ctc_end_scores(log_probs, [0, 2], blank=3)
        total = ctc_loss(Tensor(log_probs), [0, 2], blank=3).item()
        assert np.logaddexp(blank_end, label_end) == pytest.approx(-total, abs=1e-12)

    def test_batch_mean_skips_infeasible_items(
        self, rng: np.random.Generator, caplog: pytest.LogCaptureFixture
    ) -> None:
        """Test the batch loss averages feasible items and flags the rest."""
        log_probs = np.stack([random_log_probs(rng, 4, 3) for _ in range(3)])
        loss, feasible = ctc_batch_loss(Tensor(log_probs), [4, 4, 1], [[0], [1, 0], [0, 1]], blank=2)
        expected = np.mean([ctc_loss(Tensor(log_probs[b]), t, 2).item() for b, t in ((0, [0]), (1, [1, 0]))])
        assert feasible == [True, True, False]
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert "needs 2 frames" in caplog.text

    def test_all_infeasible_batch(self, rng: np.random.Generator) -> None:
        """Test a batch without feasible items has infinite loss."""
        loss, feasible = ctc_batch_loss(Tensor(random_log_probs(rng, 1, 3)[None]), [1], [[0, 1]], blank=2)
        assert feasible == [False]
        assert math.isinf(loss.item())


class TestAttentionLoss:
    """Test cases for the label-smoothed KL loss."""

    def test_two_classes_uniform_prediction(self) -> None:
        """Test the closed-form KL for K = 2 and delta = 0.1."""
        reference = TokenBatch(np.array([[0]]), np.array([1]), pad_id=9)
        loss = att_kl_loss(Tensor(np.zeros((1, 1, 2))), reference, delta=0.1)
        assert loss.item() == pytest.approx(0.368064, abs=1e-6)

    def test_zero_when_prediction_matches(self, rng: np.random.Generator) -> None:
        """Test predicting the smoothed distribution gives zero loss."""
        reference = TokenBatch(np.array([[1, 3, 0]]), np.array([3]), pad_id=9)
        q = smoothed_targets(reference.ids, reference.lengths, 5, 0.1)
        assert att_kl_loss(Tensor(np.log(q)), reference, delta=0.1).item() == pytest.approx(0.0, abs=1e-12)

    def test_no_smoothing_is_cross_entropy(self, rng: np.random.Generator) -> None:
        """Test delta = 0 reduces to the mean negative log-likelihood."""
        logits = rng.standard_normal((1, 2, 4))
        reference = TokenBatch(np.array([[2, 1]]), np.array([2]), pad_id=9)
        log_p = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        expected = -(log_p[0, 0, 2] + log_p[0, 1, 1]) / 2
        assert att_kl_loss(Tensor(logits), reference, delta=0.0).item() == pytest.approx(expected, abs=1e-12)

    def test_non_negative(self, rng: np.random.Generator) -> None:
        """Test random predictions never give a negative loss."""
        reference = TokenBatch(np.array([[0, 1, 2], [3, 9, 9]]), np.array([3, 1]), pad_id=9)
        for _ in range(10):
            assert att_kl_loss(Tensor(3.0 * rng.standard_normal((2, 3, 6))), reference).item() >= 0.0

    def test_mean_over_positions_then_items(self, rng: np.random.Generator) -> None:
        """Test each item's positions are averaged before averaging items."""
        logits = rng.standard_normal((2, 2, 3))
        both = TokenBatch(np.array([[0, 9], [1, 2]]), np.array([1, 2]), pad_id=9)
        first = att_kl_loss(Tensor(logits[:1, :1]), TokenBatch(np.array([[0]]), np.array([1]), 9))
        second = att_kl_loss(Tensor(logits[1:]), TokenBatch(np.array([[1, 2]]), np.array([2]), 9))
        assert att_kl_loss(Tensor(logits), both).item() == pytest.approx(
            (first.item() + second.item()) / 2, abs=1e-12
        )

    def test_padded_positions_are_ignored(self, rng: np.random.Generator) -> None:
        """Test logits at pad positions do not affect the loss."""
        logits = rng.standard_normal((1, 3, 4))
        changed = logits.copy()
        changed[0, 2] += 10.0
        reference = TokenBatch(np.array([[0, 1, 9]]), np.array([2]), pad_id=9)
        assert att_kl_loss(Tensor(changed), reference).item() == att_kl_loss(Tensor(logits), reference).item()

    def test_all_padded(self) -> None:
        """Test a reference without valid positions raises ContractError."""
        with pytest.raises(ContractError):
            att_kl_loss(Tensor(np.zeros((1, 1, 3))), TokenBatch(np.array([[9]]), np.array([0]), 9))

    def test_excluded_classes_get_no_mass(self) -> None:
        """Test smoothing mass skips excluded classes and rows sum to one."""
        q = smoothed_targets(np.array([[0, 1]]), np.array([1]), 5, 0.2, excluded=(4,))
        np.testing.assert_allclose(q[0, 0], [0.8, 0.2 / 3, 0.2 / 3, 0.2 / 3, 0.0])
        np.testing.assert_array_equal(q[0, 1], np.zeros(5))

    def test_reference_in_excluded_class(self) -> None:
        """Test a reference pointing at an excluded class raises InputError."""
        with pytest.raises(InputError):
            smoothed_targets(np.array([[4]]), np.array([1]), 5, 0.1, excluded=(4,))

    def test_gradient(self, rng: np.random.Generator, check_gradients: Callable) -> None:
        """Test the KL gradient with respect to the logits."""
        reference = TokenBatch(np.array([[0, 1, 9], [2, 0, 3]]), np.array([2, 3]), pad_id=9)
        logits = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
        check_gradients(lambda x: att_kl_loss(x, reference, excluded=(4,)), [logits])


class TestCombinedLoss:
    """Test cases for the weighted combination."""

    def test_weighted_sum(self) -> None:
        """Test 0.3 * 2 + 0.7 * (0.7 * 1 + 0.3 * 3) = 1.72."""
        loss = combined_loss(Tensor(2.0), Tensor(1.0), Tensor(3.0), LossWeights(0.3, 0.7))
        assert loss.item() == pytest.approx(1.72, abs=1e-12)

    def test_ctc_only(self) -> None:
        """Test lambda1 = 1 returns the CTC loss without attention terms."""
        ctc = Tensor(2.5)
        assert combined_loss(ctc, None, None, LossWeights(lambda1=1.0)) is ctc

    def test_left_to_right_only(self) -> None:
        """Test lambda1 = 0 and lambda2 = 1 leave the l2r loss alone."""
        loss = combined_loss(Tensor(2.0), Tensor(1.25), Tensor(3.0), LossWeights(0.0, 1.0))
        assert loss.item() == pytest.approx(1.25, abs=1e-12)

    def test_missing_attention_losses(self) -> None:
        """Test lambda1 < 1 requires both attention losses."""
        with pytest.raises(ContractError):
            combined_loss(Tensor(1.0), Tensor(1.0), None, LossWeights())

    @pytest.mark.parametrize("values", [{"lambda1": -0.1}, {"lambda2": 1.1}, {"delta": 1.0}])
    def test_invalid_weights(self, values: dict) -> None:
        """Test weights outside [0, 1] raise ConfigurationError."""
        with pytest.raises(ConfigurationError):
            LossWeights(**values)

    def test_monotone_in_each_component(self, rng: np.random.Generator) -> None:
        """Test raising any component never lowers the total."""
        for _ in range(20):
            weights = LossWeights(float(rng.uniform()), float(rng.uniform()))
            parts = rng.uniform(0, 5, size=3)
            base = combined_loss(*(Tensor(p) for p in parts), weights).item()
            for i in range(3):
                raised = parts.copy()
                raised[i] += 1.0
                assert combined_loss(*(Tensor(p) for p in raised), weights).item() >= base


class TestComputeLosses:
    """Test cases for the model-level loss evaluation."""

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

    def test_breakdown(self, rng: np.random.Generator) -> None:
        """Test every active loss is reported and combined per the weights."""
        model = build_model(self.config, rng)
        weights = LossWeights(0.3, 0.7)
        losses = compute_losses(model, Tensor(rng.standard_normal((2, 80, 32))), [32, 24], [[1, 2], [3]], weights)
        values = losses.as_floats()
        expected = 0.3 * values["ctc"] + 0.7 * (0.7 * values["att_l2r"] + 0.3 * values["att_r2l"])
        assert values["combined"] == pytest.approx(expected, rel=1e-12)
        assert losses.feasible == [True, True]

    def test_ctc_weight_one(self, rng: np.random.Generator) -> None:
        """Test lambda1 = 1 skips the decoder and reports the CTC loss only."""
        model = build_model(self.config, rng)
        losses = compute_losses(model, Tensor(rng.standard_normal((1, 80, 32))), [32], [[1, 2]], LossWeights(1.0))
        assert losses.att_l2r is None and losses.att_r2l is None
        assert losses.combined.item() == losses.ctc.item()

    def test_pad_length_does_not_change_losses(self, rng: np.random.Generator) -> None:
        """Test extra padding leaves every loss unchanged."""
        model = build_model(self.config, rng)
        features = rng.standard_normal((2, 80, 32))
        features[1, :, 24:] = 0.0
        padded = np.concatenate([features, rng.standard_normal((2, 80, 16))], axis=2)
        weights = LossWeights()
        first = compute_losses(model, Tensor(features), [32, 24], [[1, 2], [3]], weights).as_floats()
        second = compute_losses(model, Tensor(padded), [32, 24], [[1, 2], [3]], weights).as_floats()
        for key in first:
            assert second[key] == pytest.approx(first[key], abs=1e-8)
