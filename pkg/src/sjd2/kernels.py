"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The decode loop calls the transformer forward hundreds of thousands of times
on small tensors, so the non-BLAS inner loops (masked attention softmax,
layer norm, GELU) are worth JIT-compiling. Matrix products stay on numpy/BLAS
in either backend.

Backend selection: set ``JDD2_BACKEND=numpy`` to force the pure-numpy path,
``JDD2_BACKEND=numba`` to require numba (raises if unavailable). The default
(``auto``) uses numba when importable. Both backends compute the same
quantities; floating-point rounding may differ in the last bits because the
summation orders differ, so bitwise reproducibility is guaranteed per
backend, not across backends.
"""

from __future__ import annotations

import os

import numpy as np

_BACKEND_ENV = "JDD2_BACKEND"


def _select_backend() -> str:
    choice = os.environ.get(_BACKEND_ENV, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"{_BACKEND_ENV} must be one of auto/numba/numpy, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise ImportError(f"{_BACKEND_ENV}=numba but numba is not importable")
        return "numpy"
    return "numba"


ACTIVE_BACKEND = _select_backend()


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def masked_softmax_numpy(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the allowed (mask=True) entries of `scores`.

    scores: (B, H, R, K) float; mask: (B, R, K) bool, broadcast over heads.
    Disallowed entries come back as exactly 0. Every row must allow at least
    one key (self-attention guarantees this for all callers).
    """
    m = mask[:, None, :, :]
    neg = np.where(m, scores, -np.inf)
    rowmax = np.max(neg, axis=-1, keepdims=True)
    e = np.exp(neg - rowmax)
    e = np.where(m, e, 0.0)
    denom = np.sum(e, axis=-1, keepdims=True)
    return e / denom


def layer_norm_numpy(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                     eps: float):
    """Per-row layer norm. x: (N, D). Returns (y, mean, rstd) for backward."""
    mean = np.mean(x, axis=-1)
    var = np.mean((x - mean[:, None]) ** 2, axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gamma + beta
    return y, mean, rstd


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_numpy(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU, elementwise."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if ACTIVE_BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _masked_softmax_nb(scores, mask, out):
        B, H, R, K = scores.shape
        for b in range(B):
            for h in range(H):
                for r in range(R):
                    hi = -np.inf
                    for k in range(K):
                        if mask[b, r, k] and scores[b, h, r, k] > hi:
                            hi = scores[b, h, r, k]
                    s = 0.0
                    for k in range(K):
                        if mask[b, r, k]:
                            v = np.exp(scores[b, h, r, k] - hi)
                            out[b, h, r, k] = v
                            s += v
                        else:
                            out[b, h, r, k] = 0.0
                    inv = 1.0 / s
                    for k in range(K):
                        out[b, h, r, k] *= inv

    @njit(cache=True)
    def _layer_norm_nb(x, gamma, beta, eps, y, mean, rstd):
        N, D = x.shape
        for n in range(N):
            m = 0.0
            for d in range(D):
                m += x[n, d]
            m /= D
            v = 0.0
            for d in range(D):
                t = x[n, d] - m
                v += t * t
            v /= D
            r = 1.0 / np.sqrt(v + eps)
            mean[n] = m
            rstd[n] = r
            for d in range(D):
                y[n, d] = (x[n, d] - m) * r * gamma[d] + beta[d]

    @njit(cache=True)
    def _gelu_nb(x, out):
        n = x.shape[0]
        for i in range(n):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + np.tanh(_GELU_C * (v + 0.044715 * v * v * v)))

    def masked_softmax_numba(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
        out = np.empty_like(scores)
        _masked_softmax_nb(np.ascontiguousarray(scores),
                           np.ascontiguousarray(mask), out)
        return out

    def layer_norm_numba(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         eps: float):
        x = np.ascontiguousarray(x)
        y = np.empty_like(x)
        mean = np.empty(x.shape[0], dtype=x.dtype)
        rstd = np.empty(x.shape[0], dtype=x.dtype)
        _layer_norm_nb(x, gamma.astype(x.dtype), beta.astype(x.dtype),
                       x.dtype.type(eps), y, mean, rstd)
        return y, mean, rstd

    def gelu_numba(x: np.ndarray) -> np.ndarray:
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        _gelu_nb(flat, out)
        return out.reshape(x.shape)

    masked_softmax = masked_softmax_numba
    layer_norm = layer_norm_numba
    gelu = gelu_numba
else:
    masked_softmax_numba = None
    layer_norm_numba = None
    gelu_numba = None

    masked_softmax = masked_softmax_numpy
    layer_norm = layer_norm_numpy
    gelu = gelu_numpy
