"""The numba kernels agree with their numpy twins."""

import numpy as np
import pytest

from fedgmm import _kernels

pytestmark = pytest.mark.skipif(_kernels.numba_backend is None, reason="numba not installed")

NP, NB = _kernels.numpy_backend, _kernels.numba_backend


@pytest.mark.parametrize("n,d", [(1, 1), (17, 3), (300, 32)])
def test_gaussian_logpdf(rng, n, d):
    x = rng.normal(size=(n, d))
    a = rng.normal(size=(d, d))
    chol = np.linalg.cholesky(a @ a.T + np.eye(d))
    mu = rng.normal(size=d)
    assert np.allclose(NP.gaussian_logpdf(x, mu, chol), NB.gaussian_logpdf(x, mu, chol), rtol=1e-12, atol=1e-10)


def test_log_normalize_rows(rng):
    a = rng.normal(size=(50, 9)) * 300
    a[3] = -np.inf
    a[4, :5] = -np.inf
    out_np, lse_np = NP.log_normalize_rows(a)
    out_nb, lse_nb = NB.log_normalize_rows(a)
    assert np.array_equal(np.isfinite(lse_np), np.isfinite(lse_nb))
    ok = np.isfinite(lse_np)
    assert np.allclose(lse_np[ok], lse_nb[ok], rtol=1e-13)
    assert np.allclose(out_np[ok][np.isfinite(out_np[ok])], out_nb[ok][np.isfinite(out_nb[ok])], atol=1e-10)


@pytest.mark.parametrize("k", [2, 5])
def test_softmax_and_ce(rng, k):
    x = rng.normal(size=(64, 6))
    w = rng.normal(size=(k, 6))
    b = rng.normal(size=k)
    y = rng.integers(0, k, 64)
    sw = rng.random(64)
    assert np.allclose(NP.log_softmax(x, w, b), NB.log_softmax(x, w, b), atol=1e-12)
    for a, c in zip(NP.weighted_ce_grad(x, y, sw, w, b), NB.weighted_ce_grad(x, y, sw, w, b)):
        assert np.allclose(a, c, rtol=1e-11, atol=1e-11)


def test_backend_selected():
    assert _kernels.BACKEND in ("numba", "numpy")
