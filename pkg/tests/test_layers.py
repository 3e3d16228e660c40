"""Tests for the neural layers."""

from typing import Callable

import numpy as np
import pytest

from citrinet.errors import ConfigurationError, ContractError
from citrinet.layers import (
    Activation,
    AttentionMask,
    BatchNorm1d,
    FeedForward,
    Initializer,
    LayerNorm,
    Linear,
    ModuleList,
    MultiHeadAttention,
    downsample_lengths,
    make_norm,
    sinusoidal_positions,
    time_mask,
)
from citrinet.tensor import Tensor


def leaf(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


@pytest.fixture
def init() -> Initializer:
    return Initializer(np.random.default_rng(7))


class TestActivations:
    """Test cases for Swish and ReLU."""

    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (1.0, 0.731059), (20.0, 20.0)])
    def test_swish_values(self, x: float, expected: float) -> None:
        """Test swish(x) = x * sigmoid(x) at reference points."""
        assert Activation("swish")(Tensor(x)).item() == pytest.approx(expected, abs=1e-6)

    def test_swish_saturates(self) -> None:
        """Test swish(20) is within 1e-7 of 20."""
        assert abs(Activation("swish")(Tensor(20.0)).item() - 20.0) < 1e-7

    def test_relu_and_swish_share_an_interface(self) -> None:
        """Test both activations accept the same call and keep the shape."""
        x = Tensor(np.linspace(-2.0, 2.0, 5))
        for kind in ("relu", "swish"):
            assert Activation(kind)(x).shape == (5,)
        np.testing.assert_array_equal(Activation("relu")(x).data, [0.0, 0.0, 0.0, 1.0, 2.0])

    def test_unknown_activation(self) -> None:
        """Test an unknown activation name raises ConfigurationError."""
        with pytest.raises(ConfigurationError):
            Activation("gelu")


class TestLayerNorm:
    """Test cases for layer normalization."""

    def test_constant_input_normalizes_to_zero(self, init: Initializer) -> None:
        """Test zero variance is handled by epsilon."""
        out = LayerNorm(4, init)(Tensor(np.full((2, 4), 3.0)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_two_values(self, init: Initializer) -> None:
        """Test (1, 3) normalizes to (-1, 1)."""
        out = LayerNorm(2, init)(Tensor([1.0, 3.0]))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=1e-5)

    def test_shift_only_on_constant_input(self, init: Initializer) -> None:
        """Test the shift alone is returned for a constant input."""
        norm = LayerNorm(3, init)
        norm.shift.data[:] = [0.5, -1.0, 2.0]
        np.testing.assert_allclose(norm(Tensor(np.ones((1, 3)))).data, [[0.5, -1.0, 2.0]])

    def test_channel_axis_variant(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test the [B, C, T] form normalizes over channels for every frame."""
        out = make_norm("layer", 5, init)(Tensor(rng.standard_normal((2, 5, 7)))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)

    def test_gradients(self, init: Initializer, rng: np.random.Generator, check_gradients: Callable) -> None:
        """Test input, scale and shift gradients."""
        norm = LayerNorm(4, init)
        norm.scale.data[:] = rng.uniform(0.5, 1.5, 4)
        check_gradients(lambda x, s, b: norm(x), [leaf(rng.standard_normal((3, 4))), norm.scale, norm.shift], rtol=1e-5)


class TestBatchNorm:
    """Test cases for masked batch normalization."""

    def test_train_mode_standardizes_each_channel(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test batch statistics give zero mean and unit variance per channel."""
        out = BatchNorm1d(3, init)(Tensor(2.0 + 3.0 * rng.standard_normal((4, 3, 50)))).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-4)

    def test_eval_mode_uses_running_statistics(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test eval mode applies (x - m) / sqrt(v + eps)."""
        bn = BatchNorm1d(2, init)
        bn.running_mean = np.array([1.0, -2.0])
        bn.running_var = np.array([4.0, 0.25])
        bn.eval()
        x = rng.standard_normal((1, 2, 3))
        expected = (x - np.array([1.0, -2.0])[None, :, None]) / np.sqrt(np.array([4.0, 0.25]) + 1e-5)[None, :, None]
        np.testing.assert_allclose(bn(Tensor(x)).data, expected, atol=1e-12)

    def test_running_statistics_follow_momentum_in_train_mode_only(
        self, init: Initializer, rng: np.random.Generator
    ) -> None:
        """Test running = 0.9 * running + 0.1 * batch, and eval leaves it alone."""
        bn = BatchNorm1d(2, init)
        x = rng.standard_normal((3, 2, 10))
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2)), atol=1e-12)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2)), atol=1e-12)
        before = bn.running_mean.copy()
        bn.eval()
        bn(Tensor(x))
        np.testing.assert_array_equal(bn.running_mean, before)

    def test_padded_frames_do_not_change_valid_outputs(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test padding with masked frames leaves the valid outputs unchanged."""
        x = rng.standard_normal((1, 3, 6))
        padded = np.concatenate([x, 100.0 * rng.standard_normal((1, 3, 4))], axis=2)
        plain = BatchNorm1d(3, init)(Tensor(x)).data
        masked = BatchNorm1d(3, init)(Tensor(padded), time_mask([6], 10)).data
        np.testing.assert_allclose(masked[:, :, :6], plain, atol=1e-10)

    def test_no_valid_frames(self, init: Initializer) -> None:
        """Test an all-padding batch raises ContractError in train mode."""
        with pytest.raises(ContractError):
            BatchNorm1d(2, init)(Tensor(np.ones((1, 2, 3))), time_mask([0], 3))

    def test_gradients(self, init: Initializer, rng: np.random.Generator, check_gradients: Callable) -> None:
        """Test masked batch norm gradients."""
        bn = BatchNorm1d(2, init)
        mask = time_mask([5, 3], 5)
        check_gradients(lambda x, s, b: bn(x, mask), [leaf(rng.standard_normal((2, 2, 5))), bn.scale, bn.shift], rtol=1e-5)


class TestAttentionMask:
    """Test cases for attention masks."""

    def test_causal_and_anti_causal(self) -> None:
        """Test causal allows j <= i and anti-causal allows j >= i."""
        causal = AttentionMask.causal(4).allowed
        anti = AttentionMask.anti_causal(4).allowed
        for i in range(4):
            for j in range(4):
                assert causal[i, j] == (j <= i)
                assert anti[i, j] == (j >= i)

    def test_padding_hides_keys_beyond_length(self) -> None:
        """Test padding masks forbid padded key positions for every query."""
        mask = AttentionMask.padding([2, 3], 2, 3).allowed
        assert mask.shape == (2, 2, 3)
        np.testing.assert_array_equal(mask[0], [[True, True, False], [True, True, False]])
        assert mask[1].all()

    def test_combination(self) -> None:
        """Test & intersects the allowed positions."""
        combined = AttentionMask.causal(3) & AttentionMask.padding([2], 3, 3)
        np.testing.assert_array_equal(
            combined.allowed[0], [[True, False, False], [True, True, False], [True, True, False]]
        )
        assert combined.for_heads().shape == (1, 1, 3, 3)


class TestMultiHeadAttention:
    """Test cases for self and cross attention."""

    def test_heads_must_divide_dim(self, init: Initializer) -> None:
        """Test d % h != 0 raises ConfigurationError."""
        with pytest.raises(ConfigurationError):
            MultiHeadAttention(6, 4, init)

    def test_single_frame_attends_to_itself(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test T = 1 gives weight 1 and output O(V(x))."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        x = Tensor(rng.standard_normal((2, 1, 4)))
        out = mha(x)
        np.testing.assert_array_equal(mha.last_weights, np.ones((2, 2, 1, 1)))
        np.testing.assert_allclose(out.data, mha.out_proj(mha.v_proj(x)).data, atol=1e-12)

    def test_zero_query_projection_averages_values(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test zero Q gives uniform attention and O(mean of V rows)."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        mha.q_proj.weight.data[:] = 0.0
        mha.q_proj.bias.data[:] = 0.0
        x = Tensor(rng.standard_normal((1, 5, 4)))
        out = mha(x).data
        values = mha.v_proj(x).data.mean(axis=1, keepdims=True)
        expected = mha.out_proj(Tensor(np.repeat(values, 5, axis=1))).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_permutation_equivariance(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test permuting frames permutes the output rows identically."""
        mha = MultiHeadAttention(8, 4, init, p_dropout=0.0)
        x = rng.standard_normal((1, 6, 8))
        order = rng.permutation(6)
        np.testing.assert_allclose(mha(Tensor(x[:, order])).data, mha(Tensor(x)).data[:, order], atol=1e-12)

    def test_weights_sum_to_one_over_allowed_keys(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test attention rows are probability vectors over allowed keys."""
        mha = MultiHeadAttention(8, 2, init, p_dropout=0.0)
        mha(Tensor(rng.standard_normal((2, 5, 8))), mask=AttentionMask.padding([5, 3], 5, 5))
        np.testing.assert_allclose(mha.last_weights.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(mha.last_weights[1, :, :, 3:] == 0.0)

    @pytest.mark.parametrize("kind", ["causal", "anti_causal"])
    def test_directional_masks_ignore_the_other_side(
        self, init: Initializer, rng: np.random.Generator, kind: str
    ) -> None:
        """Test outputs do not depend on frames the mask hides."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        mask = getattr(AttentionMask, kind)(6)
        x = rng.standard_normal((1, 6, 4))
        changed = x.copy()
        if kind == "causal":
            changed[:, 4:] += 5.0
            visible = slice(0, 4)
        else:
            changed[:, :2] += 5.0
            visible = slice(2, 6)
        first = mha(Tensor(x), mask=mask).data
        second = mha(Tensor(changed), mask=mask).data
        np.testing.assert_allclose(first[:, visible], second[:, visible], atol=1e-12)

    def test_cross_attention_single_key(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test Tk = 1 gives every query full weight on the only frame."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        mha(Tensor(rng.standard_normal((1, 3, 4))), Tensor(rng.standard_normal((1, 1, 4))))
        np.testing.assert_array_equal(mha.last_weights, np.ones((1, 2, 3, 1)))

    def test_cross_attention_ignores_padded_frames(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test perturbing frames beyond the valid length leaves the output unchanged."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        query = Tensor(rng.standard_normal((1, 3, 4)))
        memory = rng.standard_normal((1, 5, 4))
        perturbed = memory.copy()
        perturbed[:, 3:] = 1e3
        mask = AttentionMask.padding([3], 3, 5)
        np.testing.assert_allclose(
            mha(query, Tensor(memory), mask).data, mha(query, Tensor(perturbed), mask).data, atol=1e-12
        )

    def test_cross_attention_on_itself_equals_self_attention(
        self, init: Initializer, rng: np.random.Generator
    ) -> None:
        """Test key_value = query with no mask reproduces self-attention."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        x = Tensor(rng.standard_normal((2, 4, 4)))
        np.testing.assert_array_equal(mha(x, x).data, mha(x).data)

    def test_fully_masked_query_row(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test a query with no allowed key raises ContractError."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        with pytest.raises(ContractError):
            mha(Tensor(rng.standard_normal((1, 2, 4))), mask=AttentionMask.padding([0], 2, 2))

    def test_gradients(self, init: Initializer, rng: np.random.Generator, check_gradients: Callable) -> None:
        """Test input and projection gradients under a padding mask."""
        mha = MultiHeadAttention(4, 2, init, p_dropout=0.0)
        mask = AttentionMask.causal(3) & AttentionMask.padding([3, 2], 3, 3)
        leaves = [leaf(rng.standard_normal((2, 3, 4))), mha.q_proj.weight, mha.k_proj.weight, mha.v_proj.bias]
        check_gradients(lambda x, *params: mha(x, mask=mask), leaves, rtol=1e-5)


class TestFeedForward:
    """Test cases for the position-wise feed-forward module."""

    def test_zero_parameters_give_zero_output(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test all-zero weights and biases map everything to zero."""
        ffn = FeedForward(4, 16, init)
        for param in ffn.parameters():
            param.data[...] = 0.0
        np.testing.assert_array_equal(ffn(Tensor(rng.standard_normal((2, 3, 4)))).data, np.zeros((2, 3, 4)))

    def test_one_dimensional_hand_case(self, init: Initializer) -> None:
        """Test w1 = 2, w2 = 3, no bias, x = 1 gives 3 * swish(2)."""
        ffn = FeedForward(1, 1, init, p_dropout=0.0)
        ffn.linear1.weight.data[...] = 2.0
        ffn.linear1.bias.data[...] = 0.0
        ffn.linear2.weight.data[...] = 3.0
        ffn.linear2.bias.data[...] = 0.0
        assert ffn(Tensor([[1.0]])).item() == pytest.approx(5.284782, rel=1e-6)

    def test_eval_mode_is_deterministic(self, init: Initializer, rng: np.random.Generator) -> None:
        """Test dropout is off in eval mode."""
        ffn = FeedForward(4, 16, init, p_dropout=0.5).eval()
        x = Tensor(rng.standard_normal((2, 4)))
        np.testing.assert_array_equal(ffn(x).data, ffn(x).data)

    def test_gradients(self, init: Initializer, rng: np.random.Generator, check_gradients: Callable) -> None:
        """Test input and weight gradients."""
        ffn = FeedForward(3, 6, init, p_dropout=0.0)
        leaves = [leaf(rng.standard_normal((2, 3))), ffn.linear1.weight, ffn.linear2.bias]
        check_gradients(lambda x, *params: ffn(x), leaves, rtol=1e-5)


class TestModuleBookkeeping:
    """Test cases for names, state dicts and census mode."""

    def test_parameter_names_are_unique_and_hierarchical(self, init: Initializer) -> None:
        """Test nested modules name their parameters by path."""
        layers = ModuleList([MultiHeadAttention(4, 2, init), FeedForward(4, 8, init)])
        names = [name for name, _ in layers.named_parameters()]
        assert len(names) == len(set(names))
        assert "0.q_proj.weight" in names
        assert "1.linear2.bias" in names

    def test_state_dict_round_trip(self, rng: np.random.Generator) -> None:
        """Test loading a state dict reproduces another module's outputs."""
        source = FeedForward(4, 8, Initializer(np.random.default_rng(1)), p_dropout=0.0)
        target = FeedForward(4, 8, Initializer(np.random.default_rng(2)), p_dropout=0.0)
        target.load_state_dict(source.state_dict())
        x = Tensor(rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(target(x).data, source(x).data)

    def test_state_dict_includes_buffers(self, init: Initializer) -> None:
        """Test batch norm running statistics are part of the state."""
        state = BatchNorm1d(3, init).state_dict()
        assert set(state) == {"scale", "shift", "running_mean", "running_var"}

    def test_missing_state_is_rejected(self, init: Initializer) -> None:
        """Test loading an incomplete state dict raises ContractError."""
        linear = Linear(2, 2, init)
        with pytest.raises(ContractError):
            linear.load_state_dict({"weight": np.zeros((2, 2))})

    def test_census_mode_allocates_zero_views(self) -> None:
        """Test rng=None builds parameters with the right sizes and no random draws."""
        linear = Linear(300, 200, Initializer(None))
        assert sum(p.size for p in linear.parameters()) == 300 * 200 + 200
        assert not np.any(linear.weight.data)


class TestLengthHelpers:
    """Test cases for masks, lengths and position tables."""

    def test_time_mask(self) -> None:
        """Test the valid-frame mask shape and content."""
        mask = time_mask([2, 4], 4)
        assert mask.shape == (2, 1, 4)
        np.testing.assert_array_equal(mask[:, 0], [[True, True, False, False], [True, True, True, True]])

    def test_downsample_lengths(self) -> None:
        """Test lengths follow ceil(len / stride)."""
        np.testing.assert_array_equal(downsample_lengths([1, 4, 5, 8], 2), [1, 2, 3, 4])

    def test_sinusoidal_positions(self) -> None:
        """Test the first row alternates sin(0) = 0 and cos(0) = 1."""
        table = sinusoidal_positions(5, 6)
        assert table.shape == (5, 6)
        np.testing.assert_array_equal(table[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
