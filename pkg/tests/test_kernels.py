import subprocess
import sys

import numpy as np
import pytest

from sjd2 import kernels

needs_numba = pytest.mark.skipif(kernels.ACTIVE_BACKEND != "numba",
                                 reason="numba backend not active")


def _random_case(rng, B=2, H=3, R=7, K=9, dtype=np.float64):
    scores = rng.standard_normal((B, H, R, K)).astype(dtype)
    mask = rng.random((B, R, K)) < 0.5
    mask[:, np.arange(min(R, K)), np.arange(min(R, K))] = True  # no empty rows
    return scores, mask


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_masked_softmax_numpy_properties(dtype):
    rng = np.random.default_rng(0)
    scores, mask = _random_case(rng, dtype=dtype)
    probs = kernels.masked_softmax_numpy(scores, mask)
    assert probs.dtype == dtype
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
    assert np.all(probs[~np.broadcast_to(mask[:, None], probs.shape)] == 0.0)
    assert np.all(probs >= 0.0)


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_masked_softmax(dtype):
    rng = np.random.default_rng(1)
    for _ in range(5):
        scores, mask = _random_case(rng, dtype=dtype)
        a = kernels.masked_softmax_numpy(scores, mask)
        b = kernels.masked_softmax_numba(scores, mask)
        np.testing.assert_allclose(a, b, atol=1e-6 if dtype == np.float32 else 1e-12)


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_layer_norm(dtype):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((11, 16)).astype(dtype)
    g = rng.standard_normal(16).astype(dtype)
    b = rng.standard_normal(16).astype(dtype)
    ya, ma, ra = kernels.layer_norm_numpy(x, g, b, 1e-5)
    yb, mb, rb = kernels.layer_norm_numba(x, g, b, 1e-5)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(ya, yb, atol=tol)
    np.testing.assert_allclose(ma, mb, atol=tol)
    np.testing.assert_allclose(ra, rb, rtol=tol)


@needs_numba
def test_backends_agree_gelu():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 9))
    np.testing.assert_allclose(kernels.gelu_numpy(x), kernels.gelu_numba(x),
                               atol=1e-12)


def test_layer_norm_statistics():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 32)) * 3 + 1
    y, mean, rstd = kernels.layer_norm(x, np.ones(32), np.zeros(32), 1e-8)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-4)


def test_env_flag_selects_numpy_backend():
    code = ("import sjd2.kernels as k; "
            "assert k.ACTIVE_BACKEND == 'numpy', k.ACTIVE_BACKEND; "
            "assert k.masked_softmax is k.masked_softmax_numpy")
    subprocess.run([sys.executable, "-c", code],
                   env={"PATH": "/usr/bin:/bin", "JDD2_BACKEND": "numpy"},
                   check=True)


def test_env_flag_rejects_unknown_backend():
    code = "import sjd2.kernels"
    proc = subprocess.run([sys.executable, "-c", code],
                          env={"PATH": "/usr/bin:/bin", "JDD2_BACKEND": "cuda"},
                          capture_output=True)
    assert proc.returncode != 0
