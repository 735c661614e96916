"""Shared fixtures: schedules, corpora, and the trained toy models.

Training the session-scoped models takes a couple of minutes total; every
other fixture is cheap. All fixtures are fully seeded.
"""

import time

import numpy as np
import pytest

from sjd2 import (GridCorpusSpec, ModelConfig, build_schedule, fresh_model,
                  gen_grid, gen_markov, random_chain, train_model)

TRAIN_LR = 3e-3
MARKOV_VOCAB = 8
GRID_VOCAB = 16


@pytest.fixture(scope="session")
def schedule8():
    return build_schedule(num_steps=8, t_min=1e-3, t_max=1.0)


@pytest.fixture(scope="session")
def markov_chain():
    return random_chain(order=2, vocab=MARKOV_VOCAB, seed=11, concentration=0.1)


@pytest.fixture(scope="session")
def markov_corpus(markov_chain):
    return gen_markov(markov_chain, num_sequences=256, seq_len=48)


@pytest.fixture(scope="session")
def markov_model(markov_corpus, schedule8):
    """Clean-pretrained then noise-fine-tuned micro model on the Markov corpus.

    Returns (model, fine_tune_history, fine_tune_seconds); the 200-step
    fine-tune history feeds the training-efficacy criterion.
    """
    coeffs, grid = schedule8
    cfg = ModelConfig(vocab_size=MARKOV_VOCAB + 2, embed_dim=64, num_layers=2,
                      num_heads=2, context_len=256, seed=5)
    model = fresh_model(cfg)
    common = dict(batch_size=16, coeffs=coeffs, grid=grid, lr=TRAIN_LR,
                  crop_len=48, window_min=8, window_max=48)
    train_model(model, list(markov_corpus), steps=200, seed=1,
                noise_augment=False, **common)
    t0 = time.perf_counter()
    history = train_model(model, list(markov_corpus), steps=200, seed=2,
                          noise_augment=True, **common)
    return model, history, time.perf_counter() - t0


@pytest.fixture(scope="session")
def grid_corpus():
    spec = GridCorpusSpec(height=16, width=16, vocab=GRID_VOCAB, seed=21)
    return gen_grid(spec, 192)


@pytest.fixture(scope="session")
def grid_heldout():
    spec = GridCorpusSpec(height=16, width=16, vocab=GRID_VOCAB, seed=77)
    return gen_grid(spec, 128)


@pytest.fixture(scope="session")
def grid_model(grid_corpus, schedule8):
    coeffs, grid = schedule8
    cfg = ModelConfig(vocab_size=GRID_VOCAB + 2, embed_dim=64, num_layers=2,
                      num_heads=4, context_len=384, seed=9)
    model = fresh_model(cfg)
    common = dict(batch_size=16, coeffs=coeffs, grid=grid, lr=TRAIN_LR,
                  crop_len=48, window_min=8, window_max=48)
    train_model(model, list(grid_corpus), steps=250, seed=1,
                noise_augment=False, **common)
    train_model(model, list(grid_corpus), steps=250, seed=2,
                noise_augment=True, **common)
    return model


@pytest.fixture(scope="session")
def blobs_heldout():
    spec = GridCorpusSpec(height=16, width=16, vocab=GRID_VOCAB,
                          patterns=("blobs",), seed=77)
    return gen_grid(spec, 64)


@pytest.fixture(scope="session")
def blobs_model(schedule8):
    """Model trained on blob rasters only.

    Blob continuation depends on the (noisy) previous row rather than on
    position, so this model actually has to read denoised context; the
    embedding-normalization ablation needs that.
    """
    coeffs, grid = schedule8
    spec = GridCorpusSpec(height=16, width=16, vocab=GRID_VOCAB,
                          patterns=("blobs",), seed=21)
    imgs = gen_grid(spec, 256)
    cfg = ModelConfig(vocab_size=GRID_VOCAB + 2, embed_dim=64, num_layers=2,
                      num_heads=4, context_len=384, seed=9)
    model = fresh_model(cfg)
    common = dict(batch_size=16, coeffs=coeffs, grid=grid, lr=TRAIN_LR,
                  crop_len=64, window_min=8, window_max=48)
    train_model(model, list(imgs), steps=300, seed=1, noise_augment=False,
                **common)
    train_model(model, list(imgs), steps=300, seed=2, noise_augment=True,
                **common)
    return model


@pytest.fixture()
def tiny_model():
    """Untrained micro model for engine unit tests."""
    cfg = ModelConfig(vocab_size=10, embed_dim=32, num_layers=2, num_heads=2,
                      context_len=256, seed=1)
    return fresh_model(cfg)
