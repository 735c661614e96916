"""Synthetic token corpora with known structure.

Markov chains provide an exact next-token distribution for statistical
oracles; grid rasters (stripes / checkerboard / smoothed blobs) provide the
locally predictable structure that makes multi-token acceptance measurable.

Corpus files are JSONL: one header record carrying provenance, then one
``{"tokens": [...]}`` record per sequence. Generation is a pure function of
(spec, seed), byte-for-byte reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError

CORPUS_VERSION = 1


# ---------------------------------------------------------------------------
# Markov chains
# ---------------------------------------------------------------------------

@dataclass
class MarkovSource:
    """Order-k Markov chain over a small vocabulary.

    transitions has shape (vocab,) * order + (vocab,); each row is a
    probability distribution. Rows built by `random_chain` are sharpened
    Dirichlet draws so the chain is learnable by a small model.
    """

    order: int
    vocab: int
    transitions: np.ndarray
    seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.shape != (self.vocab,) * self.order + (self.vocab,):
            raise ConfigurationError(
                f"transition tensor shape {t.shape} does not match "
                f"order={self.order}, vocab={self.vocab}"
            )
        if np.any(t < 0):
            raise ConfigurationError("transition probabilities must be >= 0")
        sums = t.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ConfigurationError("transition rows must sum to 1")
        self.transitions = t

    def next_distribution(self, context) -> np.ndarray:
        """Exact next-token distribution given the last `order` tokens."""
        if len(context) < self.order:
            raise ValueError(f"context of {len(context)} < order {self.order}")
        idx = tuple(int(c) for c in context[-self.order:])
        return self.transitions[idx]


def random_chain(order: int, vocab: int, seed: int,
                 concentration: float = 0.3) -> MarkovSource:
    """Random chain with peaked rows (small concentration = more deterministic)."""
    if order < 1 or vocab < 2:
        raise ConfigurationError("need order >= 1 and vocab >= 2")
    rng = np.random.default_rng([seed, 0x3A17])
    shape = (vocab,) * order + (vocab,)
    rows = rng.gamma(concentration, 1.0, size=shape)
    rows = np.maximum(rows, 1e-12)
    rows /= rows.sum(axis=-1, keepdims=True)
    return MarkovSource(order=order, vocab=vocab, transitions=rows, seed=seed)


def gen_markov(source: MarkovSource, num_sequences: int, seq_len: int,
               seed: int | None = None) -> np.ndarray:
    """Sample sequences; the first `order` tokens are uniform, the rest chained.

    Vectorized over sequences: one pre-drawn uniform per (sequence, position)
    is inverted through the per-state CDF, so output depends only on
    (source, seed).
    """
    if seq_len <= source.order:
        raise ConfigurationError(
            f"seq_len must exceed the chain order ({seq_len} <= {source.order})"
        )
    rng = np.random.default_rng([source.seed if seed is None else seed, 0xC0DE])
    n, k, V = num_sequences, source.order, source.vocab
    out = np.empty((n, seq_len), dtype=np.int64)
    out[:, :k] = rng.integers(0, V, size=(n, k))
    u = rng.random((n, seq_len - k))
    cdf = np.cumsum(source.transitions.reshape(V ** k, V), axis=-1)
    powers = V ** np.arange(k - 1, -1, -1)
    state = out[:, :k] @ powers
    for t in range(k, seq_len):
        rows = cdf[state]
        nxt = (rows < u[:, t - k][:, None]).sum(axis=1)
        nxt = np.minimum(nxt, V - 1)
        out[:, t] = nxt
        state = (state * V) % (V ** k) + nxt if k > 1 else nxt
    return out


# ---------------------------------------------------------------------------
# grid rasters
# ---------------------------------------------------------------------------

@dataclass
class GridCorpusSpec:
    height: int = 16
    width: int = 16
    vocab: int = 16
    patterns: tuple = ("stripes", "checker", "blobs")
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.patterns, list):
            self.patterns = tuple(self.patterns)
        known = {"stripes", "checker", "blobs"}
        bad = set(self.patterns) - known
        if bad:
            raise ConfigurationError(f"unknown pattern kinds {sorted(bad)}")
        if not self.patterns:
            raise ConfigurationError("at least one pattern kind required")
        if self.vocab < 2:
            raise ConfigurationError("grid vocab must allow >= 2 colors")
        if self.height < 2 or self.width < 2:
            raise ConfigurationError("grid must be at least 2x2")


def stripes_image(height: int, width: int, period: int, palette,
                  horizontal: bool) -> np.ndarray:
    """Two-color stripes; along a row the pattern repeats every `period` cells
    (trivially so for horizontal bands, whose rows are constant)."""
    if period < 2 or period % 2:
        raise ConfigurationError(f"stripe period must be even and >= 2, got {period}")
    w = period // 2
    r = np.arange(height)[:, None]
    c = np.arange(width)[None, :]
    band = (r // w) % 2 if horizontal else (c // w) % 2
    img = np.where(band == 0, palette[0], palette[1])
    return np.broadcast_to(img, (height, width)).astype(np.int64)


def checker_image(height: int, width: int, palette) -> np.ndarray:
    r = np.arange(height)[:, None]
    c = np.arange(width)[None, :]
    return np.where((r + c) % 2 == 0, palette[0], palette[1]).astype(np.int64)


def blobs_image(height: int, width: int, palette, rng,
                iterations: int = 4) -> np.ndarray:
    """Majority-vote smoothing of a random binary field (wrap-around)."""
    cells = rng.random((height, width)) < 0.5
    for _ in range(iterations):
        count = np.zeros((height, width), dtype=np.int64)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                count += np.roll(np.roll(cells, dr, axis=0), dc, axis=1)
        cells = count >= 5
    return np.where(cells, palette[0], palette[1]).astype(np.int64)


def gen_grid(spec: GridCorpusSpec, num_images: int) -> np.ndarray:
    """Raster-flattened token grids, (num_images, height*width)."""
    if spec.vocab < 2:
        raise ConfigurationError("vocab too small for two-color patterns")
    rng = np.random.default_rng([spec.seed, 0x6B1D])
    out = np.empty((num_images, spec.height * spec.width), dtype=np.int64)
    for i in range(num_images):
        kind = spec.patterns[int(rng.integers(len(spec.patterns)))]
        palette = rng.choice(spec.vocab, size=2, replace=False)
        if kind == "stripes":
            period = 2 * int(rng.integers(1, 5))  # period in [2, 8]
            horizontal = bool(rng.integers(2))
            img = stripes_image(spec.height, spec.width, period, palette, horizontal)
        elif kind == "checker":
            img = checker_image(spec.height, spec.width, palette)
        else:
            img = blobs_image(spec.height, spec.width, palette, rng)
        out[i] = img.reshape(-1)
    return out


def mean_run_length(tokens: np.ndarray) -> float:
    """Average length of constant runs over flattened sequences."""
    total = changes = 0
    for row in np.atleast_2d(tokens):
        total += len(row)
        changes += int(np.sum(row[1:] != row[:-1])) + 1
    return total / changes


# ---------------------------------------------------------------------------
# JSONL corpus files
# ---------------------------------------------------------------------------

def write_corpus(path: str, sequences: np.ndarray, kind: str, seed: int,
                 vocab: int, config_hash: str = ""):
    header = {
        "corpus_version": CORPUS_VERSION,
        "kind": kind,
        "seed": int(seed),
        "vocab": int(vocab),
        "config_hash": config_hash,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for row in sequences:
            f.write(json.dumps({"tokens": [int(t) for t in row]},
                               separators=(",", ":")) + "\n")


def read_corpus(path: str):
    """Returns (header dict, list of 1-D int arrays)."""
    header = None
    sequences = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: not valid JSON: {e}") from e
            if "tokens" in rec:
                sequences.append(np.asarray(rec["tokens"], dtype=np.int64))
            elif "corpus_version" in rec:
                header = rec
            else:
                raise FormatError(f"{path}:{lineno}: unrecognized record")
    if header is None:
        raise FormatError(f"{path}: missing corpus header record")
    if not sequences:
        raise FormatError(f"{path}: corpus holds no sequences")
    return header, sequences
