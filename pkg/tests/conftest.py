"""Shared fixtures for the citrinet test suite."""

from typing import Callable, Sequence

import numpy as np
import pytest

from citrinet.tensor import Tensor, backward


def numeric_gradient(value: Callable[[], float], array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of `value` with respect to every entry of `array` (perturbed in place)."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        plus = value()
        array[index] = original - h
        minus = value()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def check_gradients(rng: np.random.Generator) -> Callable[..., None]:
    """Compare backprop with central differences for a function of some leaf tensors.

    The output is reduced with fixed random weights so every output entry matters.
    """

    def check(
        build: Callable[..., Tensor],
        leaves: Sequence[Tensor],
        rtol: float = 1e-6,
        atol: float = 1e-8,
        h: float = 1e-6,
    ) -> None:
        out = build(*leaves)
        weights = Tensor(rng.standard_normal(out.shape))

        def value() -> float:
            return float((build(*leaves).data * weights.data).sum())

        for leaf in leaves:
            leaf.grad = None
        backward((out * weights).sum())
        for leaf in leaves:
            numeric = numeric_gradient(value, leaf.data, h)
            analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)

    return check
