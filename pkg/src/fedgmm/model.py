"""The mixture hypothesis for one client: shared Gaussian input components,
shared logistic learners and a personalised weight grid over their product.

All densities and responsibilities live in the log domain.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .core import DEFAULT_FLOOR, cholesky_factor, gaussian_log_density_batch, log_normalize_rows
from .errors import NumericalError, StarvedComponentError

FULL = "full"
CONDITIONAL_ONLY = "conditional-only"
UNSUPERVISED = "unsupervised"
MODES = (FULL, CONDITIONAL_ONLY, UNSUPERVISED)

STARVATION_RATIO = 1e-8


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    mu: np.ndarray
    sigma: np.ndarray
    label: str = "gaussian"
    floor: float = DEFAULT_FLOOR

    @cached_property
    def chol(self):
        return cholesky_factor(self.sigma, self.floor, self.label)

    def log_density(self, x):
        return gaussian_log_density_batch(x, self.mu, self.chol)


@dataclass(frozen=True, eq=False)
class LearnerParams:
    """Multinomial logistic regression: P(y|x) = softmax(W x + b)[y]."""

    weights: np.ndarray  # (K, d)
    biases: np.ndarray  # (K,)

    @property
    def n_classes(self):
        return self.weights.shape[0]

    def log_proba(self, x):
        return _kernels.log_softmax(np.atleast_2d(x), self.weights, self.biases)

    def copy(self):
        return LearnerParams(self.weights.copy(), self.biases.copy())


@dataclass(frozen=True, eq=False)
class MixtureWeights:
    """A client's log-domain weight grid over (gaussian, learner) pairs."""

    log: np.ndarray  # (M1, M2)

    @classmethod
    def uniform(cls, m1, m2):
        return cls(np.full((m1, m2), -np.log(m1 * m2)))

    @classmethod
    def from_probs(cls, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        with np.errstate(divide="ignore"):
            log = np.log(p / p.sum())
        return cls(log)

    @property
    def probs(self):
        return np.exp(self.log)

    @property
    def shape(self):
        return self.log.shape


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    x: np.ndarray  # (N, d)
    y: np.ndarray  # (N,) int
    client_id: int = 0
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=np.int64).ravel()
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]


@dataclass(frozen=True, eq=False)
class ResponsibilityBlock:
    """Per-sample posterior over the (M1, M2) grid, in log domain.

    ``row_loglik[i]`` is the log normaliser of sample i, i.e. its log-likelihood
    under the parameters the block was computed with.
    """

    log_q: np.ndarray  # (N, M1, M2)
    row_loglik: np.ndarray = field(default=None)

    @property
    def q(self):
        return np.exp(self.log_q)

    @property
    def n_samples(self):
        return self.log_q.shape[0]


# ---------------------------------------------------------------------------
# component terms


def learner_log_conditional(theta, x, y):
    """log P_theta(y | x).  Scalar for a single x, array for a batch."""
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim <= 1 and np.ndim(y) == 0
    if single:
        x_arr = x_arr.reshape(1, -1)
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.int64))
    logp = theta.log_proba(x_arr)[np.arange(x_arr.shape[0]), y_arr]
    return float(logp[0]) if single else logp


def gaussian_terms(x, gaussians):
    """(N, M1) matrix of log N(x_i; mu_m, Sigma_m)."""
    return np.column_stack([g.log_density(x) for g in gaussians])


def learner_terms(x, y, learners):
    """(N, M2) matrix of log P_theta_m(y_i | x_i)."""
    idx = np.arange(x.shape[0])
    return np.column_stack([t.log_proba(x)[idx, y] for t in learners])


def _grid_shape(weights, gaussians, learners):
    m1, m2 = weights.shape
    if gaussians is not None and len(gaussians) != m1:
        raise ValueError(f"weight grid has {m1} gaussian rows but {len(gaussians)} components")
    if learners is not None and len(learners) != m2:
        raise ValueError(f"weight grid has {m2} learner columns but {len(learners)} learners")
    return m1, m2


def joint_log_terms(x, y, weights, gaussians, learners, mode=FULL):
    """Unnormalised log pi(m1,m2) + log N(x; m1) + log P(y|x; m2), shape (N, M1, M2)."""
    m1, m2 = _grid_shape(weights, gaussians, learners)
    n = x.shape[0]
    out = np.broadcast_to(weights.log, (n, m1, m2)).copy()
    if mode != CONDITIONAL_ONLY:
        out += gaussian_terms(x, gaussians)[:, :, None]
    if mode != UNSUPERVISED:
        out += learner_terms(x, y, learners)[:, None, :]
    return out


# ---------------------------------------------------------------------------
# EM steps


def e_step(data, weights, gaussians, learners, mode=FULL):
    """Posterior responsibilities q(i, m1, m2) for every sample of ``data``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    joint = joint_log_terms(data.x, data.y, weights, gaussians, learners, mode)
    n, m1, m2 = joint.shape
    flat, lse = log_normalize_rows(joint.reshape(n, m1 * m2), what="sample")
    return ResponsibilityBlock(flat.reshape(n, m1, m2), lse)


def m_step_pi(resp):
    """pi(m1, m2) = mean over samples of q(i, m1, m2)."""
    n = resp.n_samples
    if n == 0:
        raise ValueError("cannot estimate mixture weights from an empty client")
    log_pi = logsumexp(resp.log_q, axis=0) - np.log(n)
    # renormalise away accumulated rounding
    return MixtureWeights(log_pi - logsumexp(log_pi))


def m_step_gaussian(resp, data, m1, previous=None, threshold=STARVATION_RATIO):
    """Local weighted mean, scatter around that mean, and responsibility mass.

    A component whose mass is at most ``threshold * N`` is starved: the
    ``previous`` parameters are echoed with mass 0, so aggregation ignores it.
    """
    w = resp.q[:, m1, :].sum(axis=1)
    mass = float(w.sum())
    if mass <= threshold * len(data):
        if previous is None:
            raise StarvedComponentError(f"gaussian {m1} is starved (mass {mass:.3g})")
        return previous.mu, previous.sigma, 0.0
    mu = (w @ data.x) / mass
    diff = data.x - mu
    sigma = (diff * w[:, None]).T @ diff / mass
    return mu, 0.5 * (sigma + sigma.T), mass


def weighted_ce(theta, x, y, sample_weight):
    """(sum_i s_i CE_i, dW, db) with the gradient of that sum."""
    return _kernels.weighted_ce_grad(x, y, sample_weight, theta.weights, theta.biases)


def m_step_learner(resp, data, m2, theta0, steps=1, lr=0.1, batch=128, rng=None):
    """Mini-batch gradient descent on sum_i sum_m1 q(i, m1, m2) * CE(x_i, y_i).

    Each of the ``steps`` epochs sweeps the data once in batches of ``batch``;
    the per-batch objective is the weighted sum divided by the batch size.
    With ``rng=None`` the sweep order is the data order.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr <= 0:
        raise ValueError("lr must be positive")
    sw = resp.q[:, :, m2].sum(axis=1)
    w = theta0.weights.copy()
    b = theta0.biases.copy()
    n = len(data)
    if n == 0 or not np.any(sw > 0):
        return LearnerParams(w, b)
    batch = max(1, min(int(batch), n))
    for step in range(steps):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, gw, gb = _kernels.weighted_ce_grad(data.x[idx], data.y[idx], sw[idx], w, b)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite learner loss at epoch {step}")
            scale = lr / idx.size
            w -= scale * gw
            b -= scale * gb
    return LearnerParams(w, b)


# ---------------------------------------------------------------------------
# prediction and likelihoods


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 0 or (x.ndim == 1 and x.size == dim)
    return x.reshape(-1, dim), single


def _dim_of(gaussians, learners):
    if gaussians is not None:
        return gaussians[0].mu.size
    return learners[0].weights.shape[1]


def joint_log_scores(x, weights, gaussians, learners, mode=FULL):
    """(N, K) matrix of log sum_{m1,m2} pi N(x; m1) P(y=k | x; m2) for every class k."""
    m1, m2 = _grid_shape(weights, gaussians, learners)
    xb, _ = _as_batch(x, _dim_of(gaussians, learners))
    n = xb.shape[0]
    base = np.broadcast_to(weights.log, (n, m1, m2)).copy()
    if mode != CONDITIONAL_ONLY:
        base += gaussian_terms(xb, gaussians)[:, :, None]
    logp = np.stack([t.log_proba(xb) for t in learners], axis=1)  # (N, M2, K)
    terms = base[:, :, :, None] + logp[:, None, :, :]
    return logsumexp(terms.reshape(n, m1 * m2, -1), axis=1)


def predict_label(x, weights, gaussians, learners, mode=FULL):
    """argmax_y of the mixture joint; an int for one point, an array for a batch."""
    xb, single = _as_batch(x, _dim_of(gaussians, learners))
    labels = np.argmax(joint_log_scores(xb, weights, gaussians, learners, mode), axis=1)
    return int(labels[0]) if single else labels


def log_marginal_x(x, weights, gaussians):
    """log sum_{m1,m2} pi(m1,m2) N(x; mu_m1, Sigma_m1)."""
    xb, single = _as_batch(x, gaussians[0].mu.size)
    log_pi1 = logsumexp(weights.log, axis=1)
    out = logsumexp(gaussian_terms(xb, gaussians) + log_pi1[None, :], axis=1)
    return float(out[0]) if single else out


def log_conditional_y(x, y, weights, gaussians, learners, mode=FULL):
    """log P(y | x) under the mixture, normalised over classes.

    In conditional-only mode the input density is dropped and this is the
    weighted mixture of learner conditionals.
    """
    xb, single = _as_batch(x, _dim_of(gaussians, learners))
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    scores = joint_log_scores(xb, weights, gaussians, learners, mode)
    out = scores[np.arange(xb.shape[0]), yb] - logsumexp(scores, axis=1)
    return float(out[0]) if single else out


def sample_log_likelihood(data, weights, gaussians, learners, mode=FULL):
    """Per-sample log sum_{m1,m2} pi N P for the factors active in ``mode``."""
    joint = joint_log_terms(data.x, data.y, weights, gaussians, learners, mode)
    n = joint.shape[0]
    return logsumexp(joint.reshape(n, -1), axis=1)


def client_log_likelihood(data, weights, gaussians, learners, mode=FULL):
    return float(sample_log_likelihood(data, weights, gaussians, learners, mode).sum())
