import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sjd2 import (EmbeddingTable, build_schedule, compute_stats, denormalize,
                  nearest_token, normalize, perturb,
                  token_to_normalized_embedding)
from sjd2.embedding_space import nearest_tokens
from sjd2.errors import ConfigurationError


@pytest.fixture
def small_table():
    return EmbeddingTable(np.array([[1.0, 3.0], [3.0, 5.0]]))


def test_stats_hand_example(small_table):
    np.testing.assert_allclose(small_table.mu, [2.0, 4.0])
    np.testing.assert_allclose(small_table.sigma, [1.0, 1.0])


def test_stats_identity_like():
    mu, sigma = compute_stats(np.eye(2))
    np.testing.assert_allclose(mu, [0.5, 0.5])
    np.testing.assert_allclose(sigma, [0.5, 0.5])


def test_stats_identical_rows_hit_floor():
    mu, sigma = compute_stats(np.ones((4, 3)), eps_sigma=1e-6)
    np.testing.assert_allclose(sigma, 1e-6)
    np.testing.assert_allclose(mu, 1.0)


def test_stats_reject_tiny_vocab():
    with pytest.raises(ConfigurationError):
        compute_stats(np.ones((1, 3)))
    with pytest.raises(ConfigurationError):
        EmbeddingTable(np.ones((1, 3)))


def test_normalize_hand_example(small_table):
    np.testing.assert_allclose(normalize(np.array([3.0, 5.0]), small_table),
                               [1.0, 1.0])
    np.testing.assert_allclose(normalize(small_table.mu, small_table), 0.0)


def test_denormalize_hand_example(small_table):
    np.testing.assert_allclose(denormalize(np.array([1.0, 1.0]), small_table),
                               [3.0, 5.0])
    np.testing.assert_allclose(denormalize(np.zeros(2), small_table),
                               small_table.mu)


def test_shape_errors(small_table):
    with pytest.raises(ValueError):
        normalize(np.zeros(3), small_table)
    with pytest.raises(ValueError):
        denormalize(np.zeros(5), small_table)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (8, 4),
                  elements=st.floats(-100, 100, allow_nan=False)))
def test_round_trips(m):
    rng = np.random.default_rng(0)
    table = EmbeddingTable(rng.normal(0, 0.5, (16, 4)))
    np.testing.assert_allclose(denormalize(normalize(m, table), table), m,
                               atol=1e-6)
    np.testing.assert_allclose(normalize(denormalize(m, table), table), m,
                               atol=1e-6)


def test_token_embedding_hand_example(small_table):
    np.testing.assert_allclose(
        token_to_normalized_embedding(0, small_table), [-1.0, -1.0])


def test_token_embedding_round_trip():
    rng = np.random.default_rng(1)
    table = EmbeddingTable(rng.normal(0, 0.2, (12, 6)))
    for v in range(12):
        e = token_to_normalized_embedding(v, table)
        np.testing.assert_allclose(denormalize(e, table), table.weights[v],
                                   atol=1e-12)


def test_token_embedding_index_error(small_table):
    with pytest.raises(IndexError):
        token_to_normalized_embedding(2, small_table)
    with pytest.raises(IndexError):
        token_to_normalized_embedding(-1, small_table)


def test_nearest_token_self_and_scale():
    rng = np.random.default_rng(2)
    table = EmbeddingTable(rng.normal(0, 0.3, (20, 8)))
    for v in (0, 7, 19):
        e = token_to_normalized_embedding(v, table)
        assert nearest_token(e, table) == v
        assert nearest_token(3.7 * e, table) == v
        assert nearest_token(1e-4 * e, table) == v


def test_nearest_token_crafted_rows():
    # normalized rows of this table are (1,-1) and (-1,1) scaled; build a table
    # whose normalized rows align with the axes via direct stats control
    w = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.5, 0.5]])
    table = EmbeddingTable(w)
    rows = table.normalized_rows()
    e = 0.9 * rows[0] + 0.1 * rows[1]
    assert nearest_token(e, table) == 0


def test_nearest_token_tie_breaks_to_smallest_id():
    w = np.array([[2.0, 0.0], [4.0, 0.0], [0.0, 1.0]])  # rows 0,1 same direction
    table = EmbeddingTable(w, identity_stats=True)
    assert nearest_token(np.array([1.0, 0.0]), table) == 0


def test_nearest_token_zero_vector_rejected(small_table):
    with pytest.raises(ValueError, match="zero"):
        nearest_token(np.zeros(2), small_table)


def test_nearest_tokens_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    table = EmbeddingTable(rng.normal(0, 0.3, (15, 5)))
    es = rng.standard_normal((9, 5))
    batch = nearest_tokens(es, table)
    for i in range(9):
        assert batch[i] == nearest_token(es[i], table)


def test_noisy_projection_recovers_token_at_low_noise():
    """Monte-Carlo: projection survives small perturbations >= 99% of draws."""
    rng = np.random.default_rng(1234)
    table = EmbeddingTable(rng.normal(0, 1.0, (32, 24)))
    coeffs, _ = build_schedule(4, 1e-3, 1.0)
    hits = trials = 0
    for _ in range(500):
        v = int(rng.integers(32))
        e = token_to_normalized_embedding(v, table)
        noisy = perturb(e, 0.05, rng.standard_normal(24), coeffs)
        hits += nearest_token(noisy, table) == v
        trials += 1
    assert hits / trials >= 0.99
