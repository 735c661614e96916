import numpy as np
import pytest

from sjd2 import (CLEAN, ForwardInput, KVCache, ModelConfig, build_schedule,
                  build_attention_mask, denormalize, forward, fresh_model,
                  timestep_encoding)
from sjd2.errors import CapacityError, ConfigurationError, ContractViolation
from sjd2.model import (SequenceLayout, forward_core, layout_for_levels,
                        mask_for_layout)


@pytest.fixture(scope="module")
def schedule():
    return build_schedule(6, 1e-3, 1.0)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(vocab_size=12, embed_dim=32, num_layers=2, num_heads=2,
                      context_len=128, seed=3)
    return fresh_model(cfg)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=1)


# ---------------------------------------------------------------------------
# attention mask rules
# ---------------------------------------------------------------------------

def test_mask_prefix_only_is_causal():
    mask = build_attention_mask(2, 0, 0)
    np.testing.assert_array_equal(mask, np.tril(np.ones((2, 2), dtype=bool)))


def test_mask_single_slot_with_timestep():
    mask = build_attention_mask(0, 1, 1)
    # layout: [slot0, ts0]
    np.testing.assert_array_equal(mask, [[True, True], [False, True]])


def test_mask_two_slots_links():
    mask = build_attention_mask(1, 2, 2)
    # layout: [p0, s0, t0, s1, t1]
    p0, s0, t0, s1, t1 = range(5)
    assert mask[s1, p0] and mask[s1, s0] and mask[s1, s1] and mask[s1, t1]
    assert not mask[s1, t0]
    assert not mask[s0, s1] and mask[s0, t0] and not mask[s0, t1]
    # timestep slots see only themselves
    for t in (t0, t1):
        row = np.zeros(5, dtype=bool)
        row[t] = True
        np.testing.assert_array_equal(mask[t], row)
    # no main attends to another's timestep slot
    assert not mask[p0, t0] and not mask[p0, t1]


def test_mask_count_contract():
    with pytest.raises(ContractViolation):
        build_attention_mask(1, 3, 2)


# ---------------------------------------------------------------------------
# forward contracts
# ---------------------------------------------------------------------------

def test_prefix_logits_shape(model):
    logits = forward(model, ForwardInput(prefix_tokens=np.arange(5)))
    assert logits.shape == (5, model.config.vocab_size)
    assert np.all(np.isfinite(logits))


def test_all_clean_window_equals_plain_forward(model, schedule):
    _, grid = schedule
    toks = np.array([1, 2, 3, 4, 5, 6])
    plain = forward(model, ForwardInput(prefix_tokens=toks), dtype=np.float64)
    rows = model.params["tok_emb"][toks[4:]].astype(np.float64)
    mixed = forward(model, ForwardInput(prefix_tokens=toks[:4],
                                        window_embeddings=rows,
                                        window_levels=[CLEAN, CLEAN],
                                        grid=grid), dtype=np.float64)
    np.testing.assert_array_equal(plain, mixed)


def test_noisy_window_emits_rows_per_slot(model, schedule):
    _, grid = schedule
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((3, 32))
    logits = forward(model, ForwardInput(prefix_tokens=np.array([1]),
                                         window_embeddings=emb,
                                         window_levels=[3, 2, 0], grid=grid))
    assert logits.shape == (4, model.config.vocab_size)


def test_non_monotone_noise_rejected(model, schedule):
    _, grid = schedule
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((2, 32))
    with pytest.raises(ContractViolation, match="non-strictly increasing"):
        forward(model, ForwardInput(prefix_tokens=np.array([1]),
                                    window_embeddings=emb,
                                    window_levels=[0, 3], grid=grid))


def test_context_overflow(model):
    with pytest.raises(CapacityError):
        forward(model, ForwardInput(prefix_tokens=np.zeros(200, dtype=int)))


def test_bad_token_id(model):
    with pytest.raises(IndexError):
        forward(model, ForwardInput(prefix_tokens=np.array([99])))


def test_forward_deterministic(model, schedule):
    _, grid = schedule
    rng = np.random.default_rng(5)
    emb = rng.standard_normal((2, 32))
    fwd = ForwardInput(prefix_tokens=np.array([1, 2]), window_embeddings=emb,
                       window_levels=[1, 1], grid=grid)
    a = forward(model, fwd)
    b = forward(model, fwd)
    np.testing.assert_array_equal(a, b)


def test_causality_by_perturbation(model):
    toks = np.array([1, 2, 3, 4, 5, 6, 7])
    base = forward(model, ForwardInput(prefix_tokens=toks), dtype=np.float64)
    mod = toks.copy()
    mod[4] = 9
    pert = forward(model, ForwardInput(prefix_tokens=mod), dtype=np.float64)
    np.testing.assert_array_equal(base[:4], pert[:4])
    assert np.abs(base[4:] - pert[4:]).max() > 0


def test_timestep_isolation(model, schedule):
    """Changing slot j's noise level must not change rows before j."""
    _, grid = schedule
    rng = np.random.default_rng(6)
    emb = rng.standard_normal((3, 32))
    base = forward(model, ForwardInput(prefix_tokens=np.array([1, 2]),
                                       window_embeddings=emb,
                                       window_levels=[4, 3, 1], grid=grid),
                   dtype=np.float64)
    pert = forward(model, ForwardInput(prefix_tokens=np.array([1, 2]),
                                       window_embeddings=emb,
                                       window_levels=[4, 3, 0], grid=grid),
                   dtype=np.float64)
    np.testing.assert_array_equal(base[:4], pert[:4])
    assert np.abs(base[4] - pert[4]).max() > 0


def test_prefix_cache_equivalence(model, schedule):
    _, grid = schedule
    rng = np.random.default_rng(7)
    toks = np.array([1, 2, 3, 4, 5])
    emb = rng.standard_normal((3, 32))
    raw = denormalize(emb, model.table)
    levels = [3, 2, 2]
    full = forward(model, ForwardInput(prefix_tokens=toks,
                                       window_embeddings=raw,
                                       window_levels=levels, grid=grid))
    cache = KVCache(model.config.num_layers)
    p1 = forward(model, ForwardInput(prefix_tokens=toks[:3]), cache=cache,
                 extend_cache=3)
    p2 = forward(model, ForwardInput(prefix_tokens=toks[3:],
                                     window_embeddings=raw,
                                     window_levels=levels, grid=grid),
                 cache=cache, extend_cache=2)
    got = np.vstack([p1, p2])
    np.testing.assert_allclose(got, full, atol=1e-5)
    assert cache.n_mains == 5


def test_mask_links_not_physical_order(model, schedule):
    """Appending the timestep slots at the end (same owner links) must give
    the same logits as interleaving them."""
    _, grid = schedule
    cfg = model.config
    rng = np.random.default_rng(8)
    levels = [2, 1]
    emb = rng.standard_normal((2, 32))
    ref = forward(model, ForwardInput(prefix_tokens=np.array([1]),
                                      window_embeddings=emb,
                                      window_levels=levels, grid=grid),
                  dtype=np.float64)
    # hand-built layout: [p0, s0, s1, ts0, ts1]
    layout = SequenceLayout(
        is_ts=np.array([False, False, False, True, True]),
        owner=np.array([0, 1, 2, 1, 2]),
        main_phys=np.array([0, 1, 2]))
    mask = mask_for_layout(layout)
    x = np.zeros((5, 32))
    x[0] = model.params["tok_emb"][1]
    x[1:3] = emb
    x[3] = timestep_encoding(float(grid.values[2]), 32, model.table)
    x[4] = timestep_encoding(float(grid.values[1]), 32, model.table)
    x = x + model.params["pos_emb"][layout.owner]
    logits, _, _ = forward_core(model.params, cfg, x[None].astype(np.float64),
                                mask[None])
    np.testing.assert_allclose(logits[0, layout.main_phys], ref, atol=1e-9)


# ---------------------------------------------------------------------------
# timestep encodings
# ---------------------------------------------------------------------------

def test_timestep_encoding_standardized_before_table(model):
    from sjd2 import normalize
    enc = timestep_encoding(0.37, 32, model.table)
    back = normalize(enc, model.table)
    assert back.mean() == pytest.approx(0.0, abs=1e-9)
    assert back.std() == pytest.approx(1.0, abs=1e-6)


def test_timestep_encoding_deterministic_and_distinct(model):
    _, grid = build_schedule(8, 1e-3, 1.0)
    a = timestep_encoding(float(grid.values[2]), 32, model.table)
    b = timestep_encoding(float(grid.values[2]), 32, model.table)
    np.testing.assert_array_equal(a, b)
    for i in range(7):
        x = timestep_encoding(float(grid.values[i]), 8, model.table)
        y = timestep_encoding(float(grid.values[i + 1]), 8, model.table)
        assert np.abs(x - y).max() > 1e-9


def test_timestep_encoding_range_check(model):
    with pytest.raises(ValueError):
        timestep_encoding(1.2, 32, model.table)
