"""Hot inner loops: batched Gaussian log-density, row log-normalisation and
the weighted softmax cross-entropy gradient.

Each kernel has a numba implementation and a pure-numpy twin with the same
signature.  The numba path is used when numba imports cleanly and the
environment variable ``FEDGMM_DISABLE_NUMBA`` is unset (or ``0``); set it to
``1`` to force the numpy path.  Both paths agree to rounding error.
"""

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = math.log(2.0 * math.pi)

_DISABLE = os.environ.get("FEDGMM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    nb = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations


def _np_gaussian_logpdf(x, mu, chol):
    d = x.shape[1]
    z = solve_triangular(chol, (x - mu).T, lower=True, check_finite=False)
    maha = np.einsum("ij,ij->j", z, z)
    half_logdet = np.log(np.diag(chol)).sum()
    return -0.5 * maha - half_logdet - 0.5 * d * LOG_2PI


def _np_log_normalize_rows(a):
    m = a.max(axis=1)
    bad = ~np.isfinite(m)
    m_safe = np.where(bad, 0.0, m)
    with np.errstate(divide="ignore"):
        lse = m_safe + np.log(np.exp(a - m_safe[:, None]).sum(axis=1))
    lse[bad] = m[bad]
    with np.errstate(invalid="ignore"):
        return a - lse[:, None], lse


def _np_log_softmax(x, w, b):
    logits = x @ w.T + b
    out, _ = _np_log_normalize_rows(logits)
    return out


def _np_weighted_ce_grad(x, y, sw, w, b):
    logits = x @ w.T + b
    logp, _ = _np_log_normalize_rows(logits)
    n = x.shape[0]
    loss = -(sw * logp[np.arange(n), y]).sum()
    resid = np.exp(logp)
    resid[np.arange(n), y] -= 1.0
    resid *= sw[:, None]
    return loss, resid.T @ x, resid.sum(axis=0)


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @nb.njit(cache=True, nogil=True)
    def _nb_gaussian_logpdf(x, mu, chol):
        n, d = x.shape
        half_logdet = 0.0
        for k in range(d):
            half_logdet += math.log(chol[k, k])
        const = -half_logdet - 0.5 * d * LOG_2PI
        out = np.empty(n)
        z = np.empty(d)
        for i in range(n):
            maha = 0.0
            for r in range(d):
                acc = x[i, r] - mu[r]
                for c in range(r):
                    acc -= chol[r, c] * z[c]
                z[r] = acc / chol[r, r]
                maha += z[r] * z[r]
            out[i] = const - 0.5 * maha
        return out

    @nb.njit(cache=True, nogil=True)
    def _nb_log_normalize_rows(a):
        n, k = a.shape
        out = np.empty_like(a)
        lse = np.empty(n)
        for i in range(n):
            m = -np.inf
            for j in range(k):
                if a[i, j] > m:
                    m = a[i, j]
            if not math.isfinite(m):
                lse[i] = m
                for j in range(k):
                    out[i, j] = a[i, j] - m
                continue
            s = 0.0
            for j in range(k):
                s += math.exp(a[i, j] - m)
            lse[i] = m + math.log(s)
            for j in range(k):
                out[i, j] = a[i, j] - lse[i]
        return out, lse

    @nb.njit(cache=True, nogil=True)
    def _nb_log_softmax(x, w, b):
        n, d = x.shape
        k = w.shape[0]
        logits = np.empty((n, k))
        for i in range(n):
            for j in range(k):
                acc = b[j]
                for r in range(d):
                    acc += w[j, r] * x[i, r]
                logits[i, j] = acc
        out, _ = _nb_log_normalize_rows(logits)
        return out

    @nb.njit(cache=True, nogil=True)
    def _nb_weighted_ce_grad(x, y, sw, w, b):
        n, d = x.shape
        k = w.shape[0]
        gw = np.zeros((k, d))
        gb = np.zeros(k)
        logp = _nb_log_softmax(x, w, b)
        loss = 0.0
        for i in range(n):
            if sw[i] == 0.0:
                continue
            loss -= sw[i] * logp[i, y[i]]
            for j in range(k):
                r = math.exp(logp[i, j])
                if j == y[i]:
                    r -= 1.0
                r *= sw[i]
                gb[j] += r
                for c in range(d):
                    gw[j, c] += r * x[i, c]
        return loss, gw, gb


numpy_backend = SimpleNamespace(
    name="numpy",
    gaussian_logpdf=_np_gaussian_logpdf,
    log_normalize_rows=_np_log_normalize_rows,
    log_softmax=_np_log_softmax,
    weighted_ce_grad=_np_weighted_ce_grad,
)

numba_backend = (
    SimpleNamespace(
        name="numba",
        gaussian_logpdf=_nb_gaussian_logpdf,
        log_normalize_rows=_nb_log_normalize_rows,
        log_softmax=_nb_log_softmax,
        weighted_ce_grad=_nb_weighted_ce_grad,
    )
    if HAVE_NUMBA
    else None
)

backend = numba_backend if (HAVE_NUMBA and not _DISABLE) else numpy_backend
BACKEND = backend.name


def gaussian_logpdf(x, mu, chol):
    """log N(x_i; mu, L L^T) for every row of ``x`` given the lower factor ``L``."""
    return backend.gaussian_logpdf(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(chol, dtype=np.float64),
    )


def log_normalize_rows(a):
    """Return ``(a - lse[:, None], lse)`` with ``lse`` the row-wise log-sum-exp.

    Rows whose maximum is not finite are passed through with ``lse`` set to
    that maximum; callers decide whether that is an error.
    """
    return backend.log_normalize_rows(np.ascontiguousarray(a, dtype=np.float64))


def log_softmax(x, w, b):
    return backend.log_softmax(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
    )


def weighted_ce_grad(x, y, sample_weight, w, b):
    """Weighted softmax cross-entropy summed over rows, with its gradient.

    Returns ``(loss, grad_w, grad_b)`` for ``sum_i s_i * CE(x_i, y_i; w, b)``.
    """
    return backend.weighted_ce_grad(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        np.ascontiguousarray(sample_weight, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
    )
