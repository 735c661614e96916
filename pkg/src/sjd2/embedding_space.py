"""Vocabulary embedding table, its normalization transforms, and token projection.

Noise is always added in the normalized space: embeddings standardized per
dimension by the mean/std of the embedding weight matrix over the vocabulary
axis. De-normalization maps back to the raw space the transformer consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

EPS_SIGMA_DEFAULT = 1e-6


def compute_stats(weights: np.ndarray, eps_sigma: float = EPS_SIGMA_DEFAULT):
    """Per-dimension mean and floored population std over the vocabulary axis."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] < 2:
        raise ConfigurationError(
            f"embedding weights must be |V| x D with |V| >= 2, got shape {weights.shape}"
        )
    mu = weights.mean(axis=0)
    sigma = np.maximum(weights.std(axis=0), eps_sigma)
    return mu, sigma


@dataclass
class EmbeddingTable:
    """Embedding weights plus the statistics used by normalize/denormalize.

    Stats are always the column statistics of `weights` (population std,
    floored at eps_sigma); callers that mutate the weights must rebuild the
    table. `identity_stats=True` bypasses standardization (mu=0, sigma=1),
    used only by the normalization-off ablation.
    """

    weights: np.ndarray
    eps_sigma: float = EPS_SIGMA_DEFAULT
    identity_stats: bool = False
    mu: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 2:
            raise ConfigurationError("embedding weights must be a 2-D matrix")
        if self.vocab_size < 2 or self.dim < 1:
            raise ConfigurationError(
                f"need |V| >= 2 and D >= 1, got {self.weights.shape}"
            )
        if self.identity_stats:
            self.mu = np.zeros(self.dim)
            self.sigma = np.ones(self.dim)
        else:
            self.mu, self.sigma = compute_stats(self.weights, self.eps_sigma)
        self._normalized_rows = None
        self._row_norms = None

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def normalized_rows(self) -> np.ndarray:
        """All token embeddings in normalized space, |V| x D (cached)."""
        if self._normalized_rows is None:
            self._normalized_rows = (self.weights - self.mu) / self.sigma
            norms = np.linalg.norm(self._normalized_rows, axis=1)
            self._row_norms = np.maximum(norms, 1e-12)
        return self._normalized_rows


def normalize(m: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Raw embedding -> normalized space: (m - mu) / sigma."""
    m = np.asarray(m)
    if m.shape[-1] != table.dim:
        raise ValueError(f"dimension {m.shape[-1]} does not match table D={table.dim}")
    return (m - table.mu) / table.sigma


def denormalize(e: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Normalized embedding -> raw space: sigma * e + mu."""
    e = np.asarray(e)
    if e.shape[-1] != table.dim:
        raise ValueError(f"dimension {e.shape[-1]} does not match table D={table.dim}")
    return table.sigma * e + table.mu


def token_to_normalized_embedding(token: int, table: EmbeddingTable) -> np.ndarray:
    """Normalized embedding of one vocabulary entry."""
    if not (0 <= token < table.vocab_size):
        raise IndexError(f"token id {token} out of range [0, {table.vocab_size})")
    return table.normalized_rows()[token].copy()


def nearest_token(e: np.ndarray, table: EmbeddingTable) -> int:
    """Token whose normalized embedding has the highest cosine similarity to e.

    Ties break to the smallest id. The input may be any non-zero vector in
    normalized space; positive rescaling does not change the result.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (table.dim,):
        raise ValueError(f"expected a vector of dimension {table.dim}, got {e.shape}")
    norm = np.linalg.norm(e)
    if norm == 0.0:
        raise ValueError("cannot project the zero vector onto the vocabulary")
    rows = table.normalized_rows()
    scores = (rows @ e) / (table._row_norms * norm)
    return int(np.argmax(scores))


def nearest_tokens(es: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Vectorized nearest_token over rows of es (L x D)."""
    es = np.asarray(es, dtype=np.float64)
    norms = np.linalg.norm(es, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("cannot project the zero vector onto the vocabulary")
    rows = table.normalized_rows()
    scores = (es @ rows.T) / (norms[:, None] * table._row_norms[None, :])
    return np.argmax(scores, axis=1)
