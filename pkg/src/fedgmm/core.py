"""Numerically stable primitives shared by the rest of the package."""

import numpy as np

from . import _kernels
from .errors import DegenerateRowError, FactorizationError, NumericalError

DEFAULT_FLOOR = 1e-6


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")


def log_sum_exp(values):
    """log(sum(exp(values))) with max subtraction.

    Raises DegenerateRowError when every entry is -inf.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    if v.size == 1:
        if v[0] == -np.inf:
            raise DegenerateRowError("all entries are -inf")
        return float(v[0])
    m = v.max()
    if m == -np.inf:
        raise DegenerateRowError("all entries are -inf")
    if not np.isfinite(m):
        raise NumericalError("log_sum_exp input contains +inf or nan")
    return float(m + np.log(np.exp(v - m).sum()))


def normalize_log_weights(log_w):
    """Shift a log-domain array so that its exponentials sum to one."""
    log_w = np.asarray(log_w, dtype=np.float64)
    return log_w - log_sum_exp(log_w)


def repair_psd(sigma, floor=DEFAULT_FLOOR):
    """Symmetrise ``sigma`` and lift every eigenvalue to at least ``floor``.

    Matrices that already satisfy the floor come back as their symmetric part,
    so applying the repair twice changes nothing.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"covariance must be square, got shape {s.shape}")
    _check_finite("covariance", s)
    s = 0.5 * (s + s.T)
    w, v = np.linalg.eigh(s)
    tol = 1e-12 * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min() >= floor - tol:
        return s
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def cholesky_factor(sigma, floor=DEFAULT_FLOOR, name="covariance"):
    """Lower Cholesky factor of ``sigma``, repairing it once on failure."""
    s = np.asarray(sigma, dtype=np.float64)
    _check_finite(name, s)
    try:
        return np.linalg.cholesky(0.5 * (s + s.T))
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(repair_psd(s, floor))
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"{name}: Cholesky factorisation failed after regularisation at floor {floor:g}",
            component=name,
        ) from exc


def gaussian_log_density_batch(x, mu, chol):
    """Row-wise log N(x; mu, L L^T) from a precomputed lower factor ``L``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return _kernels.gaussian_logpdf(x, mu, chol)


def gaussian_log_density(x, mu, sigma, floor=DEFAULT_FLOOR, name="covariance"):
    """log N(x; mu, sigma) for a single point, via a triangular factor of sigma."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if x.shape != mu.shape or sigma.shape != (mu.size, mu.size):
        raise ValueError(f"shape mismatch: x {x.shape}, mu {mu.shape}, sigma {sigma.shape}")
    _check_finite("x", x)
    _check_finite("mu", mu)
    chol = cholesky_factor(sigma, floor, name)
    return float(_kernels.gaussian_logpdf(x[None, :], mu, chol)[0])


def log_normalize_rows(a, what="row"):
    """Normalise each row of a 2-D log-domain array; returns (normalised, lse)."""
    out, lse = _kernels.log_normalize_rows(a)
    bad = np.flatnonzero(~np.isfinite(lse))
    if bad.size:
        i = int(bad[0])
        raise DegenerateRowError(f"{what} {i} has no finite log-weight", sample=i)
    return out, lse
