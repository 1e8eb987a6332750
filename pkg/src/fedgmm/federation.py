"""Client-server EM rounds, server aggregation, the centralised oracle and
pi-only adaptation of unseen clients."""

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import model as mm
from ._rng import stream
from .core import DEFAULT_FLOOR, repair_psd
from .errors import ConfigError, NumericalError
from .model import (
    CONDITIONAL_ONLY,
    FULL,
    MODES,
    STARVATION_RATIO,
    UNSUPERVISED,
    GaussianComponent,
    LearnerParams,
    MixtureWeights,
)

log = logging.getLogger(__name__)

FREE = "free"
FIXED_IDENTITY = "fixed-identity"
COVARIANCE_MODES = (FREE, FIXED_IDENTITY)
INIT_METHODS = ("kmeans++", "bootstrap")


@dataclass
class FederationConfig:
    m1: int = 3
    m2: int = 3
    rounds: int = 200
    seed: int = 0
    covariance: str = FREE
    participation: float = 1.0
    lr: float = 0.01
    local_epochs: int = 1
    batch: int = 128
    floor: float = DEFAULT_FLOOR
    mode: str = FULL
    sigma_correction: bool = False
    init: str = "kmeans++"
    bootstrap_client: int = 0
    init_scale: float = 0.1
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ConfigError("m1 and m2 must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        if self.covariance not in COVARIANCE_MODES:
            raise ConfigError(f"covariance must be one of {COVARIANCE_MODES}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.init not in INIT_METHODS:
            raise ConfigError(f"init must be one of {INIT_METHODS}")
        if self.lr <= 0 or self.local_epochs < 1 or self.batch < 1:
            raise ConfigError("lr must be positive, local_epochs and batch >= 1")
        if self.floor <= 0:
            raise ConfigError("floor must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.mode == UNSUPERVISED and self.m2 != 1:
            raise ConfigError("unsupervised mode has no learners; m2 must be 1")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True, eq=False)
class GlobalModel:
    gaussians: tuple
    learners: tuple | None
    round: int = 0

    @property
    def m1(self):
        return len(self.gaussians)

    @property
    def m2(self):
        return 1 if self.learners is None else len(self.learners)

    @property
    def dim(self):
        return self.gaussians[0].mu.size

    @property
    def n_classes(self):
        return None if self.learners is None else self.learners[0].n_classes

    def arrays(self):
        """Every parameter array, in a fixed order."""
        out = []
        for g in self.gaussians:
            out += [g.mu, g.sigma]
        for t in self.learners or ():
            out += [t.weights, t.biases]
        return out

    def fingerprint(self):
        h = hashlib.sha256(str(self.round).encode())
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class ClientState:
    """Training data plus the client's personalised weights (updated in place by rounds)."""

    client_id: int
    data: mm.LabeledDataset
    weights: MixtureWeights
    test: mm.LabeledDataset | None = None
    val: mm.LabeledDataset | None = None


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    n_samples: int
    local_mu: list
    local_sigma: list
    local_theta: list | None
    gamma: np.ndarray  # (M1, M2) summed responsibilities
    gauss_mass: np.ndarray  # (M1,) aggregation weights, 0 where the client gave no mass
    learner_mass: np.ndarray  # (M2,)


@dataclass
class RoundLog:
    round: int
    F: float
    delta_F: float
    per_client_F: dict = field(default_factory=dict)
    mean_accuracy: float = float("nan")
    wall_time: float = 0.0


def _make_gaussians(mus, sigmas, floor):
    return tuple(
        GaussianComponent(np.asarray(mu, dtype=np.float64), np.asarray(s, dtype=np.float64), f"gaussian[{k}]", floor)
        for k, (mu, s) in enumerate(zip(mus, sigmas))
    )


# ---------------------------------------------------------------------------
# initialisation


def _kmeanspp(points, k, rng):
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def init_model(clients, cfg, n_classes=None):
    """Initial GlobalModel: seeded means, diagonal-variance covariances, small random learners."""
    rng = stream(cfg.seed, "init")
    xs = [c.data.x for c in sorted(clients, key=lambda c: c.client_id)]
    pooled = np.concatenate(xs)
    d = pooled.shape[1]
    if cfg.init == "bootstrap":
        boot = next((c for c in clients if c.client_id == cfg.bootstrap_client), None)
        if boot is None:
            raise ConfigError(f"bootstrap client {cfg.bootstrap_client} not found")
        src = np.unique(boot.data.x, axis=0)
        if src.shape[0] < cfg.m1:
            raise ConfigError(f"bootstrap client has fewer than {cfg.m1} distinct points")
        means = src[rng.choice(src.shape[0], cfg.m1, replace=False)]
    else:
        means = _kmeanspp(pooled, cfg.m1, rng)
    if cfg.covariance == FIXED_IDENTITY:
        sigma = np.eye(d)
    else:
        sigma = repair_psd(np.diag(pooled.var(axis=0)), cfg.floor)
    gaussians = _make_gaussians(means, [sigma] * cfg.m1, cfg.floor)
    learners = None
    if cfg.mode != UNSUPERVISED:
        if n_classes is None:
            n_classes = int(max(int(c.data.y.max()) for c in clients if len(c.data)) + 1)
        learners = tuple(
            LearnerParams(rng.normal(0.0, cfg.init_scale, (n_classes, d)), np.zeros(n_classes))
            for _ in range(cfg.m2)
        )
    return GlobalModel(gaussians, learners, 0)


def make_clients(datasets, cfg, tests=None, vals=None):
    """Wrap per-client training sets as ClientStates with uniform weights."""
    tests = tests or {}
    vals = vals or {}
    return [
        ClientState(ds.client_id, ds, MixtureWeights.uniform(cfg.m1, cfg.m2), tests.get(ds.client_id), vals.get(ds.client_id))
        for ds in datasets
    ]


# ---------------------------------------------------------------------------
# client side


def client_update(model, state, cfg, round_index):
    """One client's E-step and M-step; returns (ClientUpdate, new weights)."""
    data = state.data
    resp = mm.e_step(data, state.weights, model.gaussians, model.learners, cfg.mode)
    new_pi = mm.m_step_pi(resp)
    q = resp.q
    gamma = q.sum(axis=0)
    n = len(data)

    mus, sigmas = [], []
    gauss_mass = np.zeros(model.m1)
    for k, g in enumerate(model.gaussians):
        if cfg.mode == CONDITIONAL_ONLY:
            mus.append(g.mu)
            sigmas.append(g.sigma)
            continue
        # any positive mass is reported; the server applies the starvation threshold
        mu, sigma, mass = mm.m_step_gaussian(resp, data, k, previous=g, threshold=0.0)
        if cfg.covariance == FIXED_IDENTITY:
            sigma = g.sigma
        mus.append(mu)
        sigmas.append(sigma)
        gauss_mass[k] = mass

    thetas = None
    learner_mass = np.zeros(model.m2)
    if cfg.mode != UNSUPERVISED:
        thetas = []
        for k, theta in enumerate(model.learners):
            mass = float(gamma[:, k].sum())
            if mass <= 0.0:
                thetas.append(theta)
                continue
            rng = stream(cfg.seed, "sgd", round_index, k, state.client_id)
            thetas.append(
                mm.m_step_learner(resp, data, k, theta, cfg.local_epochs, cfg.lr, cfg.batch, rng)
            )
            learner_mass[k] = mass
    update = ClientUpdate(state.client_id, n, mus, sigmas, thetas, gamma, gauss_mass, learner_mass)
    return update, new_pi


# ---------------------------------------------------------------------------
# server side


def _weighted(values, weights):
    out = None
    for v, w in zip(values, weights):
        if w == 0.0:
            continue
        out = w * v if out is None else out + w * v
    return out


def aggregate(updates, previous, cfg=None):
    """Mass-weighted average of client-local parameters.

    Components whose total mass is at most STARVATION_RATIO times the pooled
    sample count keep the ``previous`` parameters.  With
    ``cfg.sigma_correction`` the between-client spread of local means is added
    to each covariance.
    """
    if not updates:
        raise ValueError("aggregate needs at least one update")
    cfg = cfg or FederationConfig(m1=previous.m1, m2=previous.m2, mode=FULL if previous.learners else UNSUPERVISED)
    updates = sorted(updates, key=lambda u: u.client_id)
    thresh = STARVATION_RATIO * sum(u.n_samples for u in updates)
    any_mass = False
    starved = []

    mus, sigmas = [], []
    for k, g in enumerate(previous.gaussians):
        mass = np.array([u.gauss_mass[k] for u in updates])
        total = mass.sum()
        if total <= thresh:
            if cfg.mode != CONDITIONAL_ONLY:
                starved.append(k)
            mus.append(g.mu)
            sigmas.append(g.sigma)
            continue
        any_mass = True
        w = mass / total
        mu = _weighted([u.local_mu[k] for u in updates], w)
        if cfg.covariance == FIXED_IDENTITY:
            sigma = g.sigma
        else:
            sigma = _weighted([u.local_sigma[k] for u in updates], w)
            if cfg.sigma_correction:
                spread = [np.outer(u.local_mu[k] - mu, u.local_mu[k] - mu) for u in updates]
                sigma = sigma + _weighted(spread, w)
            sigma = repair_psd(sigma, cfg.floor)
        mus.append(mu)
        sigmas.append(sigma)

    learners = None
    if previous.learners is not None:
        learners = []
        for k, theta in enumerate(previous.learners):
            mass = np.array([u.learner_mass[k] for u in updates])
            total = mass.sum()
            if total <= thresh:
                learners.append(theta)
                continue
            any_mass = True
            w = mass / total
            learners.append(
                LearnerParams(
                    _weighted([u.local_theta[k].weights for u in updates], w),
                    _weighted([u.local_theta[k].biases for u in updates], w),
                )
            )
        learners = tuple(learners)

    if not any_mass:
        raise NumericalError("every component received zero responsibility mass")
    for k in starved:
        log.warning("gaussian %d received negligible total mass; carried over", k)
    floor = previous.gaussians[0].floor
    return GlobalModel(_make_gaussians(mus, sigmas, floor), learners, previous.round + 1)


def global_pi(updates):
    """pi = sum_c gamma_c / N_c, renormalised."""
    if not updates:
        raise ValueError("global_pi needs at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    acc = _weighted([u.gamma for u in updates], [1.0 / u.gamma.sum() for u in updates])
    return MixtureWeights.from_probs(acc / acc.sum())


def global_pi_from_clients(clients):
    """Same aggregate, computed from each client's stored weights."""
    acc = sum(c.weights.probs for c in sorted(clients, key=lambda c: c.client_id))
    return MixtureWeights.from_probs(acc / acc.sum())


# ---------------------------------------------------------------------------
# rounds


def select_participants(clients, cfg, round_index):
    ids = sorted(c.client_id for c in clients)
    if cfg.participation >= 1.0:
        return set(ids)
    k = max(1, int(np.ceil(cfg.participation * len(ids))))
    rng = stream(cfg.seed, "participation", round_index)
    return set(int(i) for i in rng.choice(ids, size=k, replace=False))


def log_likelihoods(model, clients, mode):
    return {
        c.client_id: mm.client_log_likelihood(c.data, c.weights, model.gaussians, model.learners, mode)
        for c in clients
    }


def mean_accuracy(model, clients, mode):
    accs = []
    for c in clients:
        if c.test is None or len(c.test) == 0 or model.learners is None:
            continue
        pred = mm.predict_label(c.test.x, c.weights, model.gaussians, model.learners, mode)
        accs.append(float(np.mean(pred == c.test.y)))
    return float(np.mean(accs)) if accs else float("nan")


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def run_round(model, clients, cfg, prev_F=None, track_accuracy=True):
    """One synchronous round.  Participating clients' weights are updated in place.

    Returns the new GlobalModel and a RoundLog whose F is measured with the
    new parameters and every client's current weights.
    """
    if not clients:
        raise ValueError("run_round needs at least one client")
    if model.m1 != cfg.m1 or model.m2 != cfg.m2:
        raise ConfigError(f"model grid {model.m1}x{model.m2} does not match config {cfg.m1}x{cfg.m2}")
    start = time.perf_counter()
    t = model.round + 1
    if prev_F is None:
        prev_F = sum(log_likelihoods(model, clients, cfg.mode).values())
    chosen = select_participants(clients, cfg, t)
    active = sorted((c for c in clients if c.client_id in chosen), key=lambda c: c.client_id)
    results = _map(lambda c: client_update(model, c, cfg, t), active, cfg.workers)
    for c, (_, pi) in zip(active, results):
        c.weights = pi
    new_model = aggregate([u for u, _ in results], model, cfg)
    per_client = log_likelihoods(new_model, clients, cfg.mode)
    F = float(sum(per_client[k] for k in sorted(per_client)))
    acc = mean_accuracy(new_model, clients, cfg.mode) if track_accuracy else float("nan")
    entry = RoundLog(t, F, F - prev_F, per_client, acc, time.perf_counter() - start)
    if not np.isfinite(F):
        raise NumericalError(f"log-likelihood became non-finite in round {t}")
    log.debug("round %d F=%.6f dF=%.3e acc=%.4f", t, F, entry.delta_F, acc)
    return new_model, entry


def train(model, clients, cfg, rounds=None, track_accuracy=True, callback=None):
    """Run ``rounds`` (default ``cfg.rounds``) rounds; returns (model, [RoundLog])."""
    rounds = cfg.rounds if rounds is None else rounds
    logs = []
    prev_F = None
    for _ in range(rounds):
        model, entry = run_round(model, clients, cfg, prev_F, track_accuracy)
        prev_F = entry.F
        logs.append(entry)
        if callback is not None:
            callback(model, entry)
    return model, logs


def run_unsupervised(clients, cfg, model=None):
    """Federated GMM without learners.  Returns (model, logs); clients' weights are updated."""
    if cfg.mode != UNSUPERVISED:
        raise ConfigError("run_unsupervised requires mode='unsupervised'")
    model = model or init_model(clients, cfg)
    return train(model, clients, cfg, track_accuracy=False)


# ---------------------------------------------------------------------------
# centralised oracle


def centralized_em(clients, cfg, model=None, rounds=None):
    """EM with global sums over the pooled data, per-client weights kept.

    Gaussian means and covariances are the pooled closed-form updates; the
    learners take the same SGD budget on the pooled weighted objective.
    Returns (model, {client_id: MixtureWeights}, [RoundLog]).  The input
    client states are not modified.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    model = model or init_model(clients, cfg)
    weights = {c.client_id: c.weights for c in clients}
    rounds = cfg.rounds if rounds is None else rounds
    ids = [c.client_id for c in clients]
    pooled = mm.LabeledDataset(
        np.concatenate([c.data.x for c in clients]), np.concatenate([c.data.y for c in clients])
    )
    n_total = len(pooled)

    def F_of(m):
        return {
            c.client_id: mm.client_log_likelihood(c.data, weights[c.client_id], m.gaussians, m.learners, cfg.mode)
            for c in clients
        }

    prev_F = sum(F_of(model).values())
    logs = []
    for _ in range(rounds):
        start = time.perf_counter()
        t = model.round + 1
        blocks = [mm.e_step(c.data, weights[c.client_id], model.gaussians, model.learners, cfg.mode) for c in clients]
        for c, b in zip(clients, blocks):
            weights[c.client_id] = mm.m_step_pi(b)
        resp = mm.ResponsibilityBlock(np.concatenate([b.log_q for b in blocks]))
        q = resp.q
        mus, sigmas = [], []
        for k, g in enumerate(model.gaussians):
            if cfg.mode == CONDITIONAL_ONLY:
                mus.append(g.mu)
                sigmas.append(g.sigma)
                continue
            mu, sigma, _ = mm.m_step_gaussian(resp, pooled, k, previous=g)
            mus.append(mu)
            sigmas.append(g.sigma if cfg.covariance == FIXED_IDENTITY else repair_psd(sigma, cfg.floor))
        learners = None
        if model.learners is not None:
            learners = []
            for k, theta in enumerate(model.learners):
                if q[:, :, k].sum() <= STARVATION_RATIO * n_total:
                    learners.append(theta)
                    continue
                rng = stream(cfg.seed, "sgd", t, k, *ids)
                learners.append(mm.m_step_learner(resp, pooled, k, theta, cfg.local_epochs, cfg.lr, cfg.batch, rng))
            learners = tuple(learners)
        model = GlobalModel(_make_gaussians(mus, sigmas, cfg.floor), learners, t)
        per_client = F_of(model)
        F = float(sum(per_client[k] for k in sorted(per_client)))
        logs.append(RoundLog(t, F, F - prev_F, per_client, float("nan"), time.perf_counter() - start))
        prev_F = F
    return model, weights, logs


# ---------------------------------------------------------------------------
# unseen clients


def adapt_trajectory(data, model, steps, mode=FULL):
    """Yield the weight grid after 0, 1, ..., ``steps`` pi-only EM steps."""
    if len(data) == 0:
        raise ValueError("cannot adapt to an empty client")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    weights = MixtureWeights.uniform(model.m1, model.m2)
    yield weights
    for _ in range(steps):
        resp = mm.e_step(data, weights, model.gaussians, model.learners, mode)
        weights = mm.m_step_pi(resp)
        yield weights


def adapt_unseen_client(data, model, steps, mode=FULL):
    """Fit only the personalised weights of a new client against a frozen model."""
    weights = None
    for weights in adapt_trajectory(data, model, steps, mode):
        pass
    return weights


def with_round(model, round_index):
    return replace(model, round=round_index)
