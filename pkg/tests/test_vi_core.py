import itertools

import numpy as np
import pytest
from scipy.special import expit, logsumexp
from scipy.stats import multivariate_normal

from covgraph.errors import InvalidArgumentError, NumericalFailureError
from covgraph.vi_core import (
    ALPHA_EPS,
    HyperChoice,
    RegressionProblem,
    VariationalState,
    elbo,
    fit,
    update_alpha_batch,
    update_mu_batch,
    update_s2,
)


def random_problem(rng, n=40, m=3, weighted=True, signal=1.0):
    X = rng.normal(size=(n, m))
    beta = signal * rng.normal(size=m) * (rng.random(m) < 0.5)
    y = X @ beta + rng.normal(size=n)
    w = rng.uniform(0.05, 1.0, size=n) if weighted else np.ones(n)
    return RegressionProblem(y, X, w)


def random_state(rng, m):
    return VariationalState(
        alpha=rng.uniform(0.01, 0.99, m), mu=rng.normal(size=m), s2=rng.uniform(0.05, 1.0, m)
    )


# -- oracles ------------------------------------------------------------------


def log_marginal_terms(problem, hyper):
    """log p(gamma) + log of the weighted marginal likelihood, for every gamma.

    Uses N(y; 0, sigma2 (W^-1 + sigma2_beta X_g X_g')) plus the constant that
    turns prod_i N(y_i; ., sigma2/w_i) into the weighted likelihood.
    """
    X, y, w = problem.predictors, problem.response, problem.weights
    n, m = X.shape
    const = np.sum(0.5 * (1 - w) * np.log(2 * np.pi * hyper.sigma2) - 0.5 * np.log(w))
    out = {}
    for gamma in itertools.product([0, 1], repeat=m):
        g = np.array(gamma, dtype=bool)
        cov = np.diag(hyper.sigma2 / w)
        if g.any():
            Xg = X[:, g]
            cov = cov + hyper.sigma2 * hyper.sigma2_beta * Xg @ Xg.T
        prior = g.sum() * np.log(hyper.pi) + (m - g.sum()) * np.log1p(-hyper.pi)
        out[gamma] = prior + multivariate_normal(np.zeros(n), cov).logpdf(y) + const
    return out


def exact_inclusion(problem, hyper):
    terms = log_marginal_terms(problem, hyper)
    keys = list(terms)
    lz = logsumexp([terms[k] for k in keys])
    m = problem.n_predictors
    return np.array(
        [np.exp(logsumexp([terms[k] for k in keys if k[i]]) - lz) for i in range(m)]
    ), lz


def monte_carlo_elbo(state, problem, hyper, draws, rng):
    X, y, w = problem.predictors, problem.response, problem.weights
    m = X.shape[1]
    gam = rng.random((draws, m)) < state.alpha
    slab = state.mu + np.sqrt(state.s2) * rng.standard_normal((draws, m))
    beta = np.where(gam, slab, 0.0)
    resid = y[None, :] - beta @ X.T
    loglik = -0.5 * w.sum() * np.log(2 * np.pi * hyper.sigma2) - (resid**2 @ w) / (2 * hyper.sigma2)
    slab_var = hyper.sigma2 * hyper.sigma2_beta
    log_prior_slab = -0.5 * np.log(2 * np.pi * slab_var) - beta**2 / (2 * slab_var)
    log_q_slab = -0.5 * np.log(2 * np.pi * state.s2) - (beta - state.mu) ** 2 / (2 * state.s2)
    ratio = np.where(
        gam,
        np.log(hyper.pi) + log_prior_slab - np.log(state.alpha) - log_q_slab,
        np.log1p(-hyper.pi) - np.log1p(-state.alpha),
    )
    vals = loglik + ratio.sum(axis=1)
    return vals.mean(), vals.std(ddof=1) / np.sqrt(draws)


def reference_unweighted_fit(X, y, hyper, sweeps):
    """The same schedule written on raw data with no weight factors at all."""
    m = X.shape[1]
    alpha = np.full(m, hyper.pi)
    mu = np.zeros(m)
    s2 = hyper.sigma2 / (1 / hyper.sigma2_beta + (X**2).sum(axis=0))
    for _ in range(sweeps):
        for k in range(m):
            others = [i for i in range(m) if i != k]
            resid = y - X[:, others] @ (alpha[others] * mu[others])
            mu[k] = s2[k] / hyper.sigma2 * X[:, k] @ resid
        z = (np.log(hyper.pi / (1 - hyper.pi)) + mu**2 / (2 * s2)
             + np.log(np.sqrt(s2) / np.sqrt(hyper.sigma2 * hyper.sigma2_beta)))
        alpha = np.clip(expit(z), ALPHA_EPS, 1 - ALPHA_EPS)
    return alpha, mu


# -- closed-form updates --------------------------------------------------------


def test_s2_direct_substitution():
    X = np.array([[1.0], [1.0], [1.0]])
    p = RegressionProblem(np.zeros(3), X, np.ones(3))
    assert update_s2(p, HyperChoice(0.5, 1.0, 1.0))[0] == pytest.approx(0.25)


def test_s2_zero_weight_column_gets_prior_variance():
    X = np.array([[1.0, 0.0], [2.0, 0.0]])
    p = RegressionProblem(np.zeros(2), X, np.array([1.0, 0.0]) + [0, 0])
    s2 = update_s2(RegressionProblem(np.zeros(2), X, np.array([1.0, 1.0])), HyperChoice(0.5, 1.0, 1.0))
    assert s2[1] == pytest.approx(1.0)
    assert p.n_predictors == 2


def test_s2_formula_identity():
    rng = np.random.default_rng(0)
    p = random_problem(rng)
    S = np.einsum("i,ik->k", p.weights, p.predictors**2)
    for sigma2, sb in [(0.7, 2.0), (1.4, 2.0), (1.4, 4.0)]:
        np.testing.assert_allclose(update_s2(p, HyperChoice(0.3, sigma2, sb)), sigma2 / (1 / sb + S))


def test_mu_single_predictor_matches_weighted_least_squares():
    rng = np.random.default_rng(1)
    x = rng.normal(size=25)
    y = 1.7 * x + 0.1 * rng.normal(size=25)
    w = np.ones(25)
    p = RegressionProblem(y, x[:, None], w)
    hyper = HyperChoice(0.5, 1.0, 1e12)
    st = VariationalState(np.array([0.5]), np.zeros(1), update_s2(p, hyper))
    ols = np.linalg.lstsq(x[:, None], y, rcond=None)[0][0]
    assert update_mu_batch(st, p, hyper)[0] == pytest.approx(ols, rel=1e-9)


def test_mu_stays_zero_for_zero_response():
    rng = np.random.default_rng(2)
    p = RegressionProblem(np.zeros(30), rng.normal(size=(30, 4)), np.ones(30))
    hyper = HyperChoice(0.2, 1.0, 1.0)
    st = VariationalState(np.full(4, 0.2), np.zeros(4), update_s2(p, hyper))
    np.testing.assert_array_equal(update_mu_batch(st, p, hyper), 0.0)


def test_mu_orthogonal_predictors_decouple():
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.normal(size=(20, 2)))
    y = rng.normal(size=20)
    hyper = HyperChoice(0.4, 0.8, 3.0)
    both = RegressionProblem(y, Q, np.ones(20))
    st = VariationalState(np.full(2, 0.4), rng.normal(size=2), update_s2(both, hyper))
    mu_both = update_mu_batch(st, both, hyper)
    for k in range(2):
        single = RegressionProblem(y, Q[:, [k]], np.ones(20))
        st_k = VariationalState(st.alpha[[k]], st.mu[[k]], st.s2[[k]])
        assert mu_both[k] == pytest.approx(update_mu_batch(st_k, single, hyper)[0], rel=1e-12)


def test_alpha_equals_prior_when_corrections_vanish():
    hyper = HyperChoice(0.23, 1.5, 2.0)
    s = np.sqrt(1.5 * 2.0)
    st = VariationalState(np.array([0.5]), np.zeros(1), np.array([s**2]))
    assert update_alpha_batch(st, hyper)[0] == pytest.approx(0.23, rel=1e-12)


def test_alpha_half_at_logit_zero():
    st = VariationalState(np.array([0.1]), np.zeros(1), np.array([2.0]))
    assert update_alpha_batch(st, HyperChoice(0.5, 1.0, 2.0))[0] == pytest.approx(0.5)


def test_alpha_saturates_without_overflow():
    hyper = HyperChoice(0.1, 1.0, 1.0)
    # mu^2 / (2 s2) = 50 with s = sigma * sigma_beta
    st = VariationalState(np.array([0.1]), np.array([10.0]), np.array([1.0]))
    a = update_alpha_batch(st, hyper)[0]
    assert a > 1 - 1e-8 and a <= 1 - ALPHA_EPS
    huge = VariationalState(np.array([0.1]), np.array([1e200]), np.array([1.0]))
    with np.errstate(over="ignore"):
        assert update_alpha_batch(huge, hyper)[0] == 1 - ALPHA_EPS


# -- ELBO -----------------------------------------------------------------------


def test_elbo_null_state():
    rng = np.random.default_rng(4)
    p = random_problem(rng, m=3)
    hyper = HyperChoice(0.2, 1.3, 1.0)
    st = VariationalState(np.full(3, ALPHA_EPS), np.zeros(3), update_s2(p, hyper))
    w, y = p.weights, p.response
    null_loglik = -0.5 * w.sum() * np.log(2 * np.pi * 1.3) - (w * y**2).sum() / 2.6
    # a point mass on "excluded" still pays KL(Bern(0) || Bern(pi)) = -log(1 - pi) per predictor
    assert elbo(st, p, hyper) == pytest.approx(null_loglik + 3 * np.log(0.8), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_elbo_below_exact_log_marginal(seed):
    rng = np.random.default_rng(10 + seed)
    p = random_problem(rng, n=25, m=2)
    hyper = HyperChoice(0.3, 0.9, 2.0)
    _, log_z = exact_inclusion(p, hyper)
    for _ in range(20):
        assert elbo(random_state(rng, 2), p, hyper) <= log_z + 1e-9
    assert fit(p, hyper).elbo <= log_z + 1e-9


def test_elbo_matches_monte_carlo():
    rng = np.random.default_rng(20)
    p = random_problem(rng, n=15, m=3)
    hyper = HyperChoice(0.35, 1.2, 1.5)
    st = random_state(rng, 3)
    est, se = monte_carlo_elbo(st, p, hyper, 10**6, rng)
    assert abs(est - elbo(st, p, hyper)) < 3 * se


# -- fit ------------------------------------------------------------------------


def test_fit_initial_state_and_flags():
    rng = np.random.default_rng(5)
    p = random_problem(rng)
    st = fit(p, HyperChoice(0.2, 1.0, 1.0), max_sweeps=1)
    assert st.iterations == 1 and len(st.elbo_trace) == 2
    assert st.elbo == st.elbo_trace[-1]
    full = fit(p, HyperChoice(0.2, 1.0, 1.0))
    assert full.converged and full.iterations < 500


def test_fit_rejects_bad_controls():
    p = random_problem(np.random.default_rng(6))
    with pytest.raises(InvalidArgumentError):
        fit(p, HyperChoice(0.2, 1.0, 1.0), max_sweeps=0)
    with pytest.raises(InvalidArgumentError):
        fit(p, HyperChoice(0.2, 1.0, 1.0), tol=0.0)


def test_fit_reports_numerical_failure():
    X = np.array([[1e200, 1.0], [1e200, -1.0], [-1e200, 0.5]])
    p = RegressionProblem(np.array([1e200, 0.0, 1.0]), X, np.ones(3))
    with np.errstate(all="ignore"), pytest.raises(NumericalFailureError) as info:
        fit(p, HyperChoice(0.2, 1.0, 1.0))
    assert info.value.sweep is not None


def test_pure_noise_excludes_everything():
    passes = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(100, 5))
        st = fit(RegressionProblem(rng.normal(size=100), X, np.ones(100)), HyperChoice(0.01, 1.0, 1.0))
        passes += bool(np.all(st.alpha < 0.5))
    assert passes >= 48


def test_strong_signal_included():
    passes = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(100, 5))
        y = 5 * X[:, 0] + 0.1 * rng.normal(size=100)
        st = fit(RegressionProblem(y, X, np.ones(100)), HyperChoice(0.2, 1.0, 1.0))
        passes += bool(st.alpha[0] > 0.5)
    assert passes >= 48


def exact_posterior_deviation(seeds=range(30)):
    devs = []
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        X = rng.normal(size=(30, 2))
        X[:, 1] += 0.5 * X[:, 0]
        y = X @ (rng.normal(size=2) * (rng.random(2) < 0.6)) + rng.normal(size=30)
        p = RegressionProblem(y, X, np.ones(30))
        hyper = HyperChoice(0.3, 1.0, 1.0)
        exact, _ = exact_inclusion(p, hyper)
        devs.append(np.abs(fit(p, hyper).alpha - exact))
    return float(np.mean(devs))


def test_exact_posterior_oracle():
    assert exact_posterior_deviation() < 0.15


# -- invariants -----------------------------------------------------------------


def monotone_violations(n_problems=200, seed=0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_problems):
        n, m = int(rng.integers(5, 101)), int(rng.integers(1, 20))
        C = rng.normal(size=(m, m))
        cov = C @ C.T / m + rng.uniform(0.01, 1) * np.eye(m)
        X = rng.multivariate_normal(np.zeros(m), cov, size=n)
        beta = rng.normal(size=m) * (rng.random(m) < 0.3) * rng.uniform(0, 3)
        y = X @ beta + rng.uniform(0.1, 2) * rng.normal(size=n)
        p = RegressionProblem(y, X, rng.uniform(0, 1, size=n))
        hyper = HyperChoice(rng.uniform(0.01, 0.9), rng.uniform(0.05, 5), rng.uniform(0.05, 20))
        tr = np.asarray(fit(p, hyper, tol=1e-10).elbo_trace)
        if np.any(tr[1:] < tr[:-1] - 1e-8 * np.abs(tr[:-1])):
            bad += 1
    return bad


def test_elbo_never_decreases():
    assert monotone_violations() == 0


def absorption_gap(seed=7, c=3.7):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, n=50, m=6)
    hyper = HyperChoice(0.25, 0.9, 2.0)
    scaled = RegressionProblem(p.response, p.predictors, c * p.weights)
    # slab variance sigma2 * sigma2_beta must stay fixed for the identity to be exact
    hyper_c = HyperChoice(0.25, c * 0.9, 2.0 / c)
    a, b = fit(p, hyper, tol=1e-12), fit(scaled, hyper_c, tol=1e-12)
    rel = lambda u, v: np.max(np.abs(u - v) / np.maximum(np.abs(u), 1e-300))
    return max(rel(a.alpha, b.alpha), rel(a.mu, b.mu), rel(a.s2, b.s2))


def test_weight_sigma2_absorption():
    assert absorption_gap() < 1e-10


def uniform_weight_gap(seed=8):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, n=60, m=5, weighted=False, signal=2.0)
    hyper = HyperChoice(0.3, 1.1, 1.5)
    st = fit(p, hyper, max_sweeps=25, tol=1e-300)
    ref_alpha, ref_mu = reference_unweighted_fit(p.predictors, p.response, hyper, st.iterations)
    return max(np.max(np.abs(st.alpha - ref_alpha)), np.max(np.abs(st.mu - ref_mu)))


def test_uniform_weights_reduce_to_unweighted_updates():
    assert uniform_weight_gap() < 1e-10


def test_predictor_permutation_equivariance():
    rng = np.random.default_rng(9)
    p = random_problem(rng, n=40, m=4)
    perm = np.array([2, 0, 3, 1])
    hyper = HyperChoice(0.3, 1.0, 1.0)
    a = fit(p, hyper, tol=1e-12)
    b = fit(RegressionProblem(p.response, p.predictors[:, perm], p.weights), hyper, tol=1e-12)
    np.testing.assert_allclose(b.alpha, a.alpha[perm], atol=1e-7)
    np.testing.assert_allclose(b.mu, a.mu[perm], atol=1e-7)
    np.testing.assert_allclose(b.s2, a.s2[perm], rtol=1e-12)


def test_alpha_bounds_and_positive_s2():
    rng = np.random.default_rng(11)
    for _ in range(20):
        p = random_problem(rng, n=20, m=4, signal=20.0)
        st = fit(p, HyperChoice(0.5, 0.01, 100.0))
        assert np.all(st.alpha >= ALPHA_EPS) and np.all(st.alpha <= 1 - ALPHA_EPS)
        assert np.all(st.s2 > 0)


def test_constant_predictor_is_allowed():
    rng = np.random.default_rng(12)
    X = np.column_stack([rng.normal(size=30), np.ones(30)])
    st = fit(RegressionProblem(rng.normal(size=30), X, np.ones(30)), HyperChoice(0.2, 1.0, 1.0))
    assert np.all(np.isfinite(st.alpha))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(response=np.zeros(3), predictors=np.zeros((4, 1)), weights=np.ones(3)),
        dict(response=np.zeros(3), predictors=np.zeros((3, 1)), weights=np.zeros(3)),
        dict(response=np.zeros(3), predictors=np.zeros((3, 1)), weights=-np.ones(3)),
        dict(response=np.array([0, np.nan, 0]), predictors=np.zeros((3, 1)), weights=np.ones(3)),
    ],
)
def test_problem_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        RegressionProblem(**kwargs)


@pytest.mark.parametrize("args", [(0.0, 1, 1), (1.0, 1, 1), (0.5, 0, 1), (0.5, 1, -1)])
def test_hyper_validation(args):
    with pytest.raises(InvalidArgumentError):
        HyperChoice(*args)
