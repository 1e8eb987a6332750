import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from fedgmm import model as mm
from fedgmm.core import repair_psd
from fedgmm.errors import DegenerateRowError, StarvedComponentError
from fedgmm.model import GaussianComponent, LabeledDataset, LearnerParams, MixtureWeights

seeds = st.integers(0, 2**31 - 1)


def random_model(r, m1, m2, d, k):
    gs = []
    for _ in range(m1):
        a = r.normal(size=(d, d))
        gs.append(GaussianComponent(r.normal(size=d), a @ a.T / d + 0.5 * np.eye(d)))
    ls = [LearnerParams(r.normal(size=(k, d)), r.normal(size=k)) for _ in range(m2)]
    w = MixtureWeights.from_probs(r.dirichlet(np.ones(m1 * m2)).reshape(m1, m2))
    return gs, ls, w


def linear_joint(x, y, w, gs, ls):
    """pi * N * P in extended precision, shape (N, M1, M2)."""
    ld = np.longdouble
    out = np.zeros((len(x), len(gs), len(ls)), dtype=ld)
    for i in range(len(x)):
        for a, g in enumerate(gs):
            diff = (x[i] - g.mu).astype(ld)
            inv = np.linalg.inv(g.sigma).astype(ld)
            det = ld(np.linalg.det(g.sigma))
            dens = np.exp(-ld(0.5) * diff @ inv @ diff) / np.sqrt((2 * ld(np.pi)) ** len(diff) * det)
            for b, t in enumerate(ls):
                logits = t.weights.astype(ld) @ x[i].astype(ld) + t.biases
                p = np.exp(logits) / np.exp(logits).sum()
                out[i, a, b] = ld(w.probs[a, b]) * dens * p[y[i]]
    return out


# --- learner conditional ---------------------------------------------------


def test_learner_conditional_examples():
    zero = LearnerParams(np.zeros((2, 3)), np.zeros(2))
    assert mm.learner_log_conditional(zero, np.ones(3), 0) == pytest.approx(math.log(0.5))
    t = LearnerParams(np.zeros((2, 3)), np.array([math.log(3), 0.0]))
    assert mm.learner_log_conditional(t, np.ones(3), 0) == pytest.approx(math.log(0.75), abs=1e-15)


@given(seeds, st.integers(2, 3))
def test_learner_conditional_matches_direct_softmax(seed, k):
    r = np.random.default_rng(seed)
    t = LearnerParams(r.normal(size=(k, 4)), r.normal(size=k))
    x = r.normal(size=4)
    logits = t.weights.astype(np.longdouble) @ x + t.biases
    p = np.exp(logits) / np.exp(logits).sum()
    for y in range(k):
        assert mm.learner_log_conditional(t, x, y) == pytest.approx(float(np.log(p[y])), abs=1e-13)


# --- E-step ------------------------------------------------------------------


def test_e_step_single_component():
    r = np.random.default_rng(0)
    gs, ls, w = random_model(r, 1, 1, 2, 2)
    data = LabeledDataset(r.normal(size=(6, 2)), r.integers(0, 2, 6))
    assert np.allclose(mm.e_step(data, w, gs, ls).q, 1.0)


def test_e_step_symmetric_components():
    g = GaussianComponent(np.zeros(2), np.eye(2))
    t = LearnerParams(np.ones((2, 2)), np.zeros(2))
    data = LabeledDataset(np.random.default_rng(1).normal(size=(5, 2)), [0, 1, 0, 1, 1])
    q = mm.e_step(data, MixtureWeights.uniform(2, 2), [g, g], [t, t]).q
    assert np.allclose(q, 0.25, atol=1e-15)


@given(seeds)
def test_e_step_matches_extended_precision(seed):
    r = np.random.default_rng(seed)
    gs, ls, w = random_model(r, 2, 2, 2, 3)
    x = r.normal(size=(3, 2))
    y = r.integers(0, 3, 3)
    lin = linear_joint(x, y, w, gs, ls)
    expected = lin / lin.sum(axis=(1, 2), keepdims=True)
    got = mm.e_step(LabeledDataset(x, y), w, gs, ls).q
    assert np.allclose(got, expected.astype(float), atol=1e-12)


@given(seeds, st.sampled_from(mm.MODES))
def test_e_step_rows_normalised(seed, mode):
    r = np.random.default_rng(seed)
    m2 = 1 if mode == mm.UNSUPERVISED else 3
    gs, ls, w = random_model(r, 3, m2, 3, 2)
    data = LabeledDataset(r.normal(size=(40, 3)) * 5, r.integers(0, 2, 40))
    resp = mm.e_step(data, w, gs, ls if mode != mm.UNSUPERVISED else None, mode)
    n = len(data)
    lse = np.logaddexp.reduce(resp.log_q.reshape(n, -1), axis=1)
    assert np.all(np.abs(lse) < 1e-9)


def test_e_step_degenerate_row_names_sample():
    g = GaussianComponent(np.zeros(1), np.eye(1))
    w = MixtureWeights(np.array([[-np.inf]]))
    data = LabeledDataset(np.zeros((2, 1)), [0, 0])
    with pytest.raises(DegenerateRowError) as exc:
        mm.e_step(data, w, [g], None, mm.UNSUPERVISED)
    assert exc.value.sample == 0


# --- M-steps -----------------------------------------------------------------


def block(q):
    with np.errstate(divide="ignore"):
        return mm.ResponsibilityBlock(np.log(q))


def test_m_step_pi_examples():
    assert np.allclose(mm.m_step_pi(block(np.full((5, 2, 2), 0.25))).probs, 0.25)
    q = np.zeros((4, 2, 2))
    q[:, 1, 1] = 1.0
    assert np.allclose(mm.m_step_pi(block(q)).probs, [[0, 0], [0, 1]])


@given(seeds)
def test_m_step_pi_brute_force(seed):
    r = np.random.default_rng(seed)
    q = r.dirichlet(np.ones(6), size=9).reshape(9, 2, 3)
    assert np.allclose(mm.m_step_pi(block(q)).probs, q.mean(axis=0), atol=1e-14)


def test_m_step_pi_empty():
    with pytest.raises(ValueError):
        mm.m_step_pi(mm.ResponsibilityBlock(np.zeros((0, 1, 1))))


def test_m_step_gaussian_identical_points():
    x0 = np.array([1.5, -2.0])
    data = LabeledDataset(np.tile(x0, (4, 1)), np.zeros(4))
    q = np.zeros((4, 2, 1))
    q[:, 0, 0] = 1.0
    mu, sigma, mass = mm.m_step_gaussian(block(q), data, 0)
    assert np.array_equal(mu, x0) and mass == 4.0
    assert np.allclose(sigma, 0.0)
    assert np.allclose(repair_psd(sigma, 1e-6), 1e-6 * np.eye(2))


def test_m_step_gaussian_symmetric_data():
    x = np.array([[1.0, 2.0], [-1.0, -2.0], [3.0, 0.0], [-3.0, 0.0]])
    mu, _, _ = mm.m_step_gaussian(block(np.full((4, 2, 2), 0.25)), LabeledDataset(x, np.zeros(4)), 1)
    assert np.allclose(mu, 0.0, atol=1e-15)


@given(seeds)
def test_m_step_gaussian_brute_force(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(10, 2))
    q = r.dirichlet(np.ones(4), size=10).reshape(10, 2, 2)
    mu, sigma, mass = mm.m_step_gaussian(block(q), LabeledDataset(x, np.zeros(10)), 1)
    w = [q[i, 1, 0] + q[i, 1, 1] for i in range(10)]
    tot = sum(w)
    m = sum(w[i] * x[i] for i in range(10)) / tot
    s = sum(w[i] * np.outer(x[i] - m, x[i] - m) for i in range(10)) / tot
    assert mass == pytest.approx(tot, rel=1e-13)
    assert np.allclose(mu, m, atol=1e-13) and np.allclose(sigma, s, atol=1e-13)


def test_m_step_gaussian_starved():
    q = np.zeros((3, 2, 1))
    q[:, 0, 0] = 1.0
    data = LabeledDataset(np.ones((3, 1)), np.zeros(3))
    prev = GaussianComponent(np.array([7.0]), np.array([[2.0]]))
    mu, sigma, mass = mm.m_step_gaussian(block(q), data, 1, previous=prev)
    assert mass == 0.0 and mu is prev.mu and sigma is prev.sigma
    with pytest.raises(StarvedComponentError):
        mm.m_step_gaussian(block(q), data, 1)


def numeric_grad(theta, x, y, sw, h=1e-5):
    def f(w, b):
        return mm.weighted_ce(LearnerParams(w, b), x, y, sw)[0]

    gw = np.zeros_like(theta.weights)
    for idx in np.ndindex(gw.shape):
        e = np.zeros_like(gw)
        e[idx] = h
        gw[idx] = (f(theta.weights + e, theta.biases) - f(theta.weights - e, theta.biases)) / (2 * h)
    gb = np.zeros_like(theta.biases)
    for j in range(gb.size):
        e = np.zeros_like(gb)
        e[j] = h
        gb[j] = (f(theta.weights, theta.biases + e) - f(theta.weights, theta.biases - e)) / (2 * h)
    return gw, gb


def test_gradient_matches_finite_differences():
    r = np.random.default_rng(2024)
    x = r.normal(size=(30, 4))
    y = r.integers(0, 3, 30)
    sw = r.random(30)
    for _ in range(10):
        theta = LearnerParams(r.normal(size=(3, 4)), r.normal(size=3))
        _, gw, gb = mm.weighted_ce(theta, x, y, sw)
        nw, nb = numeric_grad(theta, x, y, sw)
        g = np.r_[gw.ravel(), gb]
        n = np.r_[nw.ravel(), nb]
        assert np.linalg.norm(g - n) / np.linalg.norm(g) < 1e-5


def test_learner_zero_responsibility_unchanged():
    r = np.random.default_rng(3)
    q = np.zeros((8, 1, 2))
    q[:, 0, 0] = 1.0
    data = LabeledDataset(r.normal(size=(8, 2)), r.integers(0, 2, 8))
    t0 = LearnerParams(r.normal(size=(2, 2)), r.normal(size=2))
    t1 = mm.m_step_learner(block(q), data, 1, t0, steps=3, lr=0.5, batch=4, rng=r)
    assert np.array_equal(t1.weights, t0.weights) and np.array_equal(t1.biases, t0.biases)


def test_learner_loss_decreases_on_separable_data():
    x = np.linspace(-3, 3, 40)[:, None]
    data = LabeledDataset(x, (x[:, 0] > 0).astype(int))
    resp = block(np.ones((40, 1, 1)))
    theta = LearnerParams(np.zeros((2, 1)), np.zeros(2))
    losses = []
    for _ in range(15):
        theta = mm.m_step_learner(resp, data, 0, theta, steps=1, lr=0.1, batch=40)
        losses.append(mm.weighted_ce(theta, data.x, data.y, np.ones(40))[0])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_learner_argument_checks():
    resp = block(np.ones((2, 1, 1)))
    data = LabeledDataset(np.zeros((2, 1)), [0, 1])
    t = LearnerParams(np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        mm.m_step_learner(resp, data, 0, t, steps=0)
    with pytest.raises(ValueError):
        mm.m_step_learner(resp, data, 0, t, lr=0.0)


# --- EM ascent ---------------------------------------------------------------


@given(seeds)
def test_em_cycle_does_not_decrease_likelihood(seed):
    r = np.random.default_rng(seed)
    centers = np.array([[-3.0, 0.0], [3.0, 1.0]])
    z = r.integers(0, 2, 60)
    x = centers[z] + r.normal(size=(60, 2))
    y = (x[:, 0] + r.normal(size=60) > 0).astype(int)
    data = LabeledDataset(x, y)
    gs, ls, w = random_model(r, 2, 2, 2, 2)
    before = mm.client_log_likelihood(data, w, gs, ls)
    resp = mm.e_step(data, w, gs, ls)
    new_w = mm.m_step_pi(resp)
    new_g = []
    for k in range(2):
        mu, sigma, _ = mm.m_step_gaussian(resp, data, k)
        assert np.linalg.eigvalsh(sigma).min() > 1e-6  # floor inactive
        new_g.append(GaussianComponent(mu, sigma))
    new_l = [mm.m_step_learner(resp, data, k, ls[k], steps=300, lr=0.05, batch=60) for k in range(2)]
    after = mm.client_log_likelihood(data, new_w, new_g, new_l)
    assert after >= before - 1e-8


# --- prediction ----------------------------------------------------------------

S = 40.0


def figure1_model():
    gs = [GaussianComponent(np.array([-2.0]), np.array([[2.25]])), GaussianComponent(np.array([2.0]), np.array([[2.25]]))]
    # P(y=1|x) = sigmoid(-S (x - c)) approximates y = 1{x < c}
    ls = [LearnerParams(np.array([[0.0], [-S]]), np.array([0.0, c * S])) for c in (-2.0, 2.0)]
    return gs, ls


def test_predict_single_component():
    r = np.random.default_rng(4)
    gs, ls, w = random_model(r, 1, 1, 3, 4)
    x = r.normal(size=3)
    assert mm.predict_label(x, w, gs, ls) == int(np.argmax(ls[0].log_proba(x)))


def test_predict_figure1_points():
    gs, ls = figure1_model()
    w = MixtureWeights.from_probs([[0.6, 0.0], [0.0, 0.4]])
    assert mm.predict_label(np.array([-3.0]), w, gs, ls) == 1
    assert mm.predict_label(np.array([0.0]), w, gs, ls) == 0
    assert mm.predict_label(np.array([3.0]), w, gs, ls) == 0


def test_conditional_only_mispredicts_between_means():
    gs, ls = figure1_model()
    w = MixtureWeights.from_probs([[0.6, 0.0], [0.0, 0.4]])
    x = np.array([1.5])
    # the right component is far more likely here, so the Bayes label is 1{1.5 < 2} = 1
    assert 0.4 * norm.pdf(1.5, 2, 1.5) > 0.6 * norm.pdf(1.5, -2, 1.5)
    assert mm.predict_label(x, w, gs, ls) == 1
    assert mm.predict_label(x, w, gs, ls, mm.CONDITIONAL_ONLY) == 0


@given(seeds, st.floats(-50, 50))
def test_predict_invariant_to_log_shift(seed, c):
    r = np.random.default_rng(seed)
    gs, ls, w = random_model(r, 2, 3, 2, 3)
    x = r.normal(size=(20, 2))
    shifted = MixtureWeights(w.log + c)
    assert np.array_equal(mm.predict_label(x, w, gs, ls), mm.predict_label(x, shifted, gs, ls))


@given(seeds, st.sampled_from([mm.FULL, mm.CONDITIONAL_ONLY]))
def test_conditional_sums_to_one(seed, mode):
    r = np.random.default_rng(seed)
    gs, ls, w = random_model(r, 2, 2, 3, 4)
    x = r.normal(size=3) * 3
    total = sum(math.exp(mm.log_conditional_y(x, y, w, gs, ls, mode)) for y in range(4))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_conditional_single_component_equals_learner():
    r = np.random.default_rng(5)
    gs, ls, w = random_model(r, 1, 1, 2, 3)
    x = r.normal(size=2)
    assert mm.log_conditional_y(x, 2, w, gs, ls) == pytest.approx(mm.learner_log_conditional(ls[0], x, 2), abs=1e-13)


def test_conditional_figure1_at_zero():
    gs, ls = figure1_model()
    w = MixtureWeights.from_probs([[0.6, 0.0], [0.0, 0.4]])
    n = norm.pdf(0.0, 2.0, 1.5)  # equal for both components at x=0
    p1 = [1 / (1 + math.exp(S * (0.0 - c))) for c in (-2.0, 2.0)]  # P(y=1|x=0) per learner
    num = 0.6 * n * p1[0] + 0.4 * n * p1[1]
    den = 0.6 * n + 0.4 * n
    assert mm.log_conditional_y(np.array([0.0]), 1, w, gs, ls) == pytest.approx(math.log(num / den), rel=1e-12)


# --- marginals and likelihoods -----------------------------------------------


def test_marginal_examples():
    g = GaussianComponent(np.array([1.0, 2.0, 3.0]), np.eye(3))
    w = MixtureWeights.uniform(1, 2)
    assert mm.log_marginal_x(g.mu, w, [g]) == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)
    x = np.array([0.3, 0.1, -1.0])
    assert mm.log_marginal_x(x, MixtureWeights.uniform(2, 1), [g, g]) == pytest.approx(
        mm.log_marginal_x(x, MixtureWeights.uniform(1, 1), [g]), abs=1e-14
    )


@given(seeds)
def test_marginal_matches_linear_sum(seed):
    r = np.random.default_rng(seed)
    mus = r.normal(size=2) * 3
    sds = r.uniform(0.3, 2.0, 2)
    gs = [GaussianComponent(np.array([m]), np.array([[s * s]])) for m, s in zip(mus, sds)]
    p = r.dirichlet(np.ones(4)).reshape(2, 2)
    w = MixtureWeights.from_probs(p)
    for x in r.normal(size=5) * 3:
        lin = p.sum(axis=1) @ norm.pdf(x, mus, sds)
        assert mm.log_marginal_x(np.array([x]), w, gs) == pytest.approx(math.log(lin), rel=1e-12)


def test_client_likelihood_single_sample():
    r = np.random.default_rng(6)
    gs, ls, w = random_model(r, 1, 1, 2, 2)
    data = LabeledDataset(r.normal(size=(1, 2)), [1])
    expected = gs[0].log_density(data.x)[0] + mm.learner_log_conditional(ls[0], data.x[0], 1)
    assert mm.client_log_likelihood(data, w, gs, ls) == pytest.approx(expected, abs=1e-12)


@given(seeds)
def test_client_likelihood_brute_force(seed):
    r = np.random.default_rng(seed)
    gs, ls, w = random_model(r, 2, 2, 1, 2)
    x = r.normal(size=(5, 1))
    y = r.integers(0, 2, 5)
    lin = linear_joint(x, y, w, gs, ls)
    expected = float(np.log(lin.sum(axis=(1, 2))).sum())
    assert mm.client_log_likelihood(LabeledDataset(x, y), w, gs, ls) == pytest.approx(expected, abs=1e-10)


@given(seeds)
def test_client_likelihood_grid_permutation(seed):
    r = np.random.default_rng(seed)
    gs, ls, w = random_model(r, 3, 2, 2, 2)
    data = LabeledDataset(r.normal(size=(10, 2)), r.integers(0, 2, 10))
    p1, p2 = r.permutation(3), r.permutation(2)
    w2 = MixtureWeights(w.log[p1][:, p2])
    a = mm.client_log_likelihood(data, w, gs, ls)
    b = mm.client_log_likelihood(data, w2, [gs[i] for i in p1], [ls[j] for j in p2])
    assert a == pytest.approx(b, abs=1e-10)
