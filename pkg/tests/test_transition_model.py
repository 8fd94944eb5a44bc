import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divehmm.transition_model import (PopulationParams, TransitionCoefficients, assemble_coefficients,
                                      log_ratios, softmax_rows, transition_matrices, transition_row,
                                      transition_rows_for)

import oracles


def _random_B(rng, scale=1.0):
    coefs = TransitionCoefficients(scale * rng.standard_normal((1, 5, 4)), scale * rng.standard_normal((5, 8, 4)))
    return coefs.animal(0)


def test_reference_column_is_zero():
    B = _random_B(np.random.default_rng(0))
    assert B.shape == (5, 9, 5)
    np.testing.assert_array_equal(B[:, :, -1], 0.0)
    x = np.random.default_rng(1).standard_normal(9)
    row = transition_row(2, x, B)
    np.testing.assert_allclose(np.log(row[:-1] / row[-1]), log_ratios(2, x, B)[:-1], rtol=1e-10)


def test_matrices_match_oracle():
    rng = np.random.default_rng(2)
    B = _random_B(rng)
    X = rng.standard_normal((6, 9))
    G = transition_matrices(X, B)
    for t in range(6):
        np.testing.assert_allclose(G[t], oracles.transition_matrix(X[t], B), rtol=1e-12)
    np.testing.assert_allclose(transition_rows_for(X, B, 3), G[:, 3, :], rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 400.0))
def test_rows_are_distributions_even_for_huge_logits(seed, scale):
    rng = np.random.default_rng(seed)
    G = transition_matrices(rng.standard_normal((4, 9)), _random_B(rng, scale))
    assert np.isfinite(G).all()
    assert G.min() > 0.0
    np.testing.assert_allclose(G.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_floor():
    p = softmax_rows(np.array([[0.0, -1e4, 10.0]]))
    assert p.min() > 0.5e-300
    assert p[0, 2] == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), rel=1e-14)


def test_assemble_round_trip():
    rng = np.random.default_rng(4)
    ic, fx = rng.standard_normal((5, 4)), rng.standard_normal((5, 8, 4))
    B = assemble_coefficients(ic, fx)
    np.testing.assert_array_equal(B[:, 0, :-1], ic)
    np.testing.assert_array_equal(B[:, 1:, :-1], fx)


def test_shape_validation():
    with pytest.raises(ValueError):
        TransitionCoefficients(np.zeros((2, 5, 4)), np.zeros((5, 7, 4)))
    with pytest.raises(ValueError):
        PopulationParams(np.zeros((5, 4)), np.zeros((5, 3, 3)))
    with pytest.raises(ValueError):
        PopulationParams(np.zeros((5, 4)), np.tile(-np.eye(4), (5, 1, 1)))
