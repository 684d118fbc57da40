import dataclasses
import math

import numpy as np
import pytest
from scipy import special

from skewtmix.em import (
    DegenerateComponentError,
    EStepCache,
    FitConfig,
    estep,
    estep_e1_osl,
    estep_e1_series,
    estep_e2_e3,
    estep_responsibilities,
    estep_w,
    fit,
    information_criteria,
    initialize,
    mstep_delta_diagonal,
    mstep_delta_full,
    mstep_delta_single_column,
    mstep_update,
    q_function,
    solve_df,
    solve_df_stat,
)
from skewtmix.model import CfustParams, MixtureParams, SkewStructure, mixture_component_logpdfs
from skewtmix.model import sample_cfust, sample_mixture
from skewtmix.oracle import posterior_expectations_mc

from helpers import random_params, random_spd, two_component_model

EULER = 0.5772156649015329


def cache_of(z, w, e1, e2, e3):
    return EStepCache(z=np.asarray(z, float), w=np.asarray(w, float), e1=np.asarray(e1, float),
                      e2=np.asarray(e2, float), e3=np.asarray(e3, float))


def gaussian_em_step(y, weights, mus, sigmas):
    """Textbook Gaussian-mixture EM update, written independently of the package."""
    from scipy.stats import multivariate_normal
    dens = np.column_stack([wt * multivariate_normal.pdf(y, m, s)
                            for wt, m, s in zip(weights, mus, sigmas)])
    z = dens / dens.sum(axis=1, keepdims=True)
    nk = z.sum(axis=0)
    new_mu = (z.T @ y) / nk[:, None]
    new_sig = [((z[:, h, None] * (y - new_mu[h])).T @ (y - new_mu[h])) / nk[h]
               for h in range(len(weights))]
    return nk / len(y), new_mu, new_sig


# --- configuration ----------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"tol": 0.0}, {"df_bounds": (0.1, 100.0)}, {"df_bounds": (1.0, 2e4)},
    {"e1_method": "magic"}, {"g": 0}, {"init": "spectral"},
])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        FitConfig(**kwargs)


def test_config_q_defaults():
    assert FitConfig().q_for(3) == 3
    assert FitConfig(skew_structure="single-column").q_for(3) == 1
    assert FitConfig(e1_method="mc").e1_method == "monte-carlo"
    with pytest.raises(ValueError):
        FitConfig(skew_structure="diagonal", q=2).q_for(3)


# --- E-step -----------------------------------------------------------------

def test_responsibilities():
    rng = np.random.default_rng(1)
    a = random_params(rng, 2, 2)
    y = rng.normal(size=2)
    np.testing.assert_array_equal(estep_responsibilities(y, MixtureParams(np.ones(1), (a,))), [1.0])
    twin = MixtureParams(np.array([0.3, 0.7]), (a, a))
    np.testing.assert_allclose(estep_responsibilities(y, twin), [0.3, 0.7], atol=1e-14)
    psi = MixtureParams(np.array([0.2, 0.5, 0.3]), tuple(random_params(rng, 2, 2) for _ in range(3)))
    logs = mixture_component_logpdfs(y[None, :], psi)[0]
    direct = np.exp(logs) / np.exp(logs).sum()
    np.testing.assert_allclose(estep_responsibilities(y, psi), direct, rtol=1e-12)


def test_responsibilities_all_underflow_uniform():
    comp = CfustParams([0.0], [[1e-4]], [[50.0]], 200.0)
    psi = MixtureParams(np.array([0.5, 0.5]), (comp, comp))
    np.testing.assert_array_equal(estep_responsibilities([-1e6], psi), [0.5, 0.5])


def test_w_zero_projection():
    par = CfustParams([0.0, 0.0], np.eye(2), [[1.0], [0.0]], 4.0)
    assert estep_w([0.0, math.sqrt(2.0)], par) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("p, q", [(1, 1), (2, 2), (3, 1)])
def test_w_zero_skew(p, q):
    rng = np.random.default_rng(p + q)
    par = CfustParams(np.zeros(p), random_spd(rng, p), np.zeros((p, q)), 6.0)
    y = rng.normal(size=p) * 2
    d = y @ np.linalg.solve(par.sigma, y)
    assert estep_w(y, par) == pytest.approx((6 + p) / (6 + d), abs=1e-12)


@pytest.mark.parametrize("nu", [3.0, 10.0])
@pytest.mark.parametrize("p", [1, 3])
@pytest.mark.parametrize("d", [0.5, 10.0])
def test_e1_zero_skew_identity(nu, p, d):
    y = np.zeros(p)
    y[0] = math.sqrt(d)
    par = CfustParams(np.zeros(p), np.eye(p), np.zeros((p, p)), nu)
    res = estep_e1_series(y, par)
    assert res.converged
    assert res.value == pytest.approx(special.psi((nu + p) / 2) - math.log((nu + d) / 2), abs=1e-6)


def test_e1_osl_arithmetic():
    par = CfustParams([0.0, 0.0], np.eye(2), np.zeros((2, 2)), 4.0)
    res = estep_e1_osl([1.0, 1.0], par, 1.0)
    assert res.approximate
    assert res.value == pytest.approx(1 - math.log(3) + 1 - special.psi(3), abs=1e-14)


def test_e1_osl_gap_reported():
    # the one-step-late formula is not exact even without skewness; only finiteness is required
    for d in (0.5, 2.0, 10.0):
        par = CfustParams([0.0], [[1.0]], [[0.0]], 5.0)
        y = [math.sqrt(d)]
        w = estep_w(y, par)
        assert math.isfinite(estep_e1_osl(y, par, w).value)


def test_e2_e3_zero_skew_scalar():
    nu, y = 5.0, 1.3
    par = CfustParams([0.0], [[1.0]], [[0.0]], nu)
    w = estep_w([y], par)
    e2, e3 = estep_e2_e3([y], par, w)
    scale = (nu + y * y) / (nu + 3)
    half_mean = math.sqrt(nu + 3) * math.exp(special.gammaln((nu + 2) / 2)
                                             - special.gammaln((nu + 3) / 2)) / math.sqrt(math.pi)
    assert e3[0, 0] == pytest.approx(w * scale * (nu + 3) / (nu + 1), rel=1e-10)
    assert e2[0] == pytest.approx(w * math.sqrt(scale) * half_mean, rel=1e-10)


@pytest.mark.parametrize("p", [1, 2])
def test_estep_against_oracle(p):
    rng = np.random.default_rng(40 + p)
    par = random_params(rng, p, p)
    y = par.mu + rng.normal(size=p)
    ref = posterior_expectations_mc(y, par, 100_000, seed=3)
    w = estep_w(y, par)
    e1 = estep_e1_series(y, par)
    e2, e3 = estep_e2_e3(y, par, w)
    assert abs(w - ref["w"].value) <= 3 * ref["w"].std_error
    if e1.converged:
        assert abs(e1.value - ref["log_w"].value) <= 3 * ref["log_w"].std_error
    assert np.all(np.abs(e2 - ref["wu"].value) <= 3 * ref["wu"].std_error)
    assert np.all(np.abs(e3 - ref["wuu"].value) <= 3 * ref["wuu"].std_error)


def test_estep_cache_invariants():
    psi = two_component_model()
    y, _ = sample_mixture(psi, 200, seed=1)
    cache = estep(y, psi, FitConfig(g=2))
    np.testing.assert_allclose(cache.z.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(cache.z >= 0) and np.all(cache.w > 0)
    e3 = cache.e3.reshape(-1, 2, 2)
    np.testing.assert_allclose(e3, np.swapaxes(e3, 1, 2), atol=1e-12)
    assert np.linalg.eigvalsh(e3).min() >= -1e-8


def test_estep_thread_count_irrelevant():
    psi = two_component_model()
    y, _ = sample_mixture(psi, 100, seed=2)
    one = estep(y, psi, FitConfig(g=2), iteration=3, run_seed=9)
    many = estep(y, psi, FitConfig(g=2, threads=2), iteration=3, run_seed=9)
    for name in ("z", "w", "e1", "e2", "e3"):
        np.testing.assert_array_equal(getattr(one, name), getattr(many, name))


# --- M-step -----------------------------------------------------------------

def test_mstep_gaussian_reduction():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(30, 2))
    z = rng.dirichlet([1, 1], size=30)
    cache = cache_of(z, np.ones((30, 2)), np.zeros((30, 2)), np.zeros((30, 2, 1)),
                     np.zeros((30, 2, 1, 1)))
    comp = CfustParams(np.zeros(2), np.eye(2), np.zeros((2, 1)), 10.0)
    psi = MixtureParams(np.array([0.5, 0.5]), (comp, comp))
    cfg = FitConfig(g=2, fixed_nu=10.0, fix_zero_delta=True)
    new = mstep_update(y, cache, psi, cfg)
    for h in range(2):
        zh = z[:, h]
        mean = zh @ y / zh.sum()
        scatter = ((zh[:, None] * (y - mean)).T @ (y - mean)) / zh.sum()
        np.testing.assert_allclose(new.components[h].mu, mean, atol=1e-14)
        np.testing.assert_allclose(new.components[h].sigma, scatter, atol=1e-14)
    np.testing.assert_allclose(new.weights, z.mean(axis=0))


def test_delta_full_identity():
    a = np.array([[1.0, -2.0], [0.5, 3.0]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    # e2 rows chosen so that sum (y - 0) e2^T = A; e3 halves sum to I
    cache = cache_of(np.ones((2, 1)), np.ones((2, 1)), np.zeros((2, 1)),
                     a[:, None, :], np.broadcast_to(0.5 * np.eye(2), (2, 1, 2, 2)))
    np.testing.assert_allclose(mstep_delta_full(y, cache, np.zeros(2)), a, atol=1e-14)


def test_delta_single_column_example():
    cache = cache_of([[1.0]], [[1.0]], [[0.0]], [[[2.0]]], [[[[4.0]]]])
    delta = mstep_delta_single_column(np.array([[1.0, 3.0]]), cache, np.zeros(2))
    np.testing.assert_allclose(delta, [0.5, 1.5])


def test_delta_single_column_zero_e2():
    cache = cache_of(np.ones((3, 1)), np.ones((3, 1)), np.zeros((3, 1)), np.zeros((3, 1, 1)),
                     np.ones((3, 1, 1, 1)))
    np.testing.assert_array_equal(
        mstep_delta_single_column(np.ones((3, 2)), cache, np.zeros(2)), [0.0, 0.0])


def test_delta_single_column_degenerate():
    cache = cache_of(np.ones((3, 1)), np.ones((3, 1)), np.zeros((3, 1)), np.zeros((3, 1, 1)),
                     np.zeros((3, 1, 1, 1)))
    with pytest.raises(DegenerateComponentError):
        mstep_delta_single_column(np.ones((3, 2)), cache, np.zeros(2))


def random_cache(rng, n, q):
    e2 = np.abs(rng.normal(size=(n, 1, q)))
    e3 = np.einsum("nhi,nhj->nhij", e2, e2) + 0.3 * np.eye(q)
    return cache_of(rng.uniform(0.2, 1, size=(n, 1)), rng.uniform(0.5, 2, size=(n, 1)),
                    np.zeros((n, 1)), e2, e3)


def test_delta_single_column_matches_full_restricted():
    rng = np.random.default_rng(6)
    y = rng.normal(size=(25, 3))
    cache = random_cache(rng, 25, 3)
    sliced = dataclasses.replace(cache, e2=cache.e2[:, :, :1], e3=cache.e3[:, :, :1, :1])
    np.testing.assert_allclose(mstep_delta_single_column(y, cache, np.zeros(3)),
                               mstep_delta_full(y, sliced, np.zeros(3))[:, 0], rtol=1e-12)


def test_delta_diagonal_scalar_collapse():
    rng = np.random.default_rng(7)
    y = rng.normal(size=(20, 1))
    cache = random_cache(rng, 20, 1)
    np.testing.assert_allclose(mstep_delta_diagonal(y, cache, np.zeros(1), np.eye(1) * 2.3),
                               mstep_delta_single_column(y, cache, np.zeros(1)), rtol=1e-12)


def test_delta_diagonal_matches_full_when_decoupled():
    rng = np.random.default_rng(8)
    n, p = 30, 3
    y = rng.normal(size=(n, p))
    e2 = np.abs(rng.normal(size=(n, 1, p)))
    e3 = np.zeros((n, 1, p, p))
    e3[:, 0, np.arange(p), np.arange(p)] = e2[:, 0] ** 2 + 0.5
    cache = cache_of(np.ones((n, 1)), np.ones((n, 1)), np.zeros((n, 1)), e2, e3)
    sigma = np.diag([0.5, 1.0, 2.0])
    full = mstep_delta_full(y, cache, np.zeros(p))
    np.testing.assert_allclose(mstep_delta_diagonal(y, cache, np.zeros(p), sigma), np.diag(full),
                               rtol=1e-12)


def test_delta_diagonal_identity_system():
    n, p = 4, 2
    a = np.array([[2.0, 7.0], [-1.0, 3.0]])
    y = np.eye(p)[np.arange(n) % p]
    e2 = np.zeros((n, 1, p))
    e2[:p, 0] = a.T
    cache = cache_of(np.ones((n, 1)), np.ones((n, 1)), np.zeros((n, 1)), e2,
                     np.broadcast_to(np.eye(p) / n, (n, 1, p, p)))
    np.testing.assert_allclose(mstep_delta_diagonal(y, cache, np.zeros(p), np.eye(p)),
                               np.diag(a), atol=1e-14)


@pytest.mark.parametrize("structure", ["full", "diagonal", "single-column"])
def test_q_function_does_not_decrease(structure):
    psi = two_component_model()
    y, _ = sample_mixture(psi, 300, seed=4)
    cfg = FitConfig(g=2, skew_structure=structure)
    start = initialize(y, cfg, np.random.default_rng(1))
    cache = estep(y, start, cfg)
    new = mstep_update(y, cache, start, cfg)
    assert q_function(y, cache, new) >= q_function(y, cache, start) - 1e-9


def test_mstep_collapse_raises():
    psi = two_component_model()
    y, _ = sample_mixture(psi, 20, seed=0)
    z = np.zeros((20, 2))
    z[:, 0] = 1.0
    z[0] = [0.0, 1.0]
    cache = estep(y, psi, FitConfig(g=2))
    cache.z = z
    with pytest.raises(DegenerateComponentError):
        mstep_update(y, cache, psi, FitConfig(g=2))


# --- degrees of freedom -----------------------------------------------------

def test_solve_df_root_at_two():
    cache = cache_of(np.ones((4, 1)), np.full((4, 1), 1.0), np.full((4, 1), -EULER), np.zeros((4, 1, 1)),
                     np.zeros((4, 1, 1, 1)))
    sol = solve_df(cache, 0, 5.0)
    assert not sol.clamped
    assert sol.nu == pytest.approx(2.0, abs=1e-8)


def test_solve_df_clamps():
    sol = solve_df_stat(-1e-9, (1.0, 1000.0))
    assert sol.clamped and sol.nu == 1000.0
    sol = solve_df_stat(-50.0, (1.0, 1000.0))
    assert sol.clamped and sol.nu == 1.0


def test_df_recovered_from_t_data():
    true = CfustParams([0.0, 0.0], [[1.0, 0.3], [0.3, 1.0]], np.zeros((2, 2)), 5.0)
    y = sample_cfust(true, 4000, seed=12)
    cfg = FitConfig(fix_zero_delta=True, init_params=MixtureParams(np.ones(1), (true,)),
                    max_iter=200)
    res = fit(y, cfg)
    assert abs(res.psi.components[0].nu - 5.0) < 1.0


# --- criteria ---------------------------------------------------------------

def test_information_criteria_counts():
    one = MixtureParams(np.ones(1), (CfustParams([0.0], [[1.0]], [[0.5]], 4.0),))
    bic, aic = information_criteria(-10.0, one, 50)
    assert aic == pytest.approx(20.0 + 8.0)
    assert bic == pytest.approx(20.0 + 4 * math.log(50))
    two = two_component_model()
    bic, aic = information_criteria(0.0, two, 100)
    assert aic == pytest.approx(42.0)
    bic_d, _ = information_criteria(0.0, two, 100, "diagonal")
    assert bic_d == pytest.approx(17 * math.log(100))
    assert bic_d < bic


# --- initialization and fitting ---------------------------------------------

def test_initialize_single_and_seeded():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(50, 2))
    cfg = FitConfig()
    init = initialize(y, cfg)
    np.testing.assert_allclose(init.components[0].mu, y.mean(axis=0))
    assert init.components[0].nu == 30.0
    psi = two_component_model()
    y2, labels = sample_mixture(psi, 200, seed=5)
    cfg2 = FitConfig(g=2, seed=4)
    a, b = initialize(y2, cfg2), initialize(y2, cfg2)
    for ca, cb in zip(a.components, b.components):
        np.testing.assert_array_equal(ca.mu, cb.mu)
    near = np.argmin([[np.linalg.norm(m - c.mu) for c in a.components]
                      for m in (psi.components[0].mu, psi.components[1].mu)], axis=1)
    assert set(near) == {0, 1}


def test_fit_zero_skew_single_component():
    true = CfustParams([1.0, -1.0], [[1.0, 0.4], [0.4, 1.5]], np.zeros((2, 2)), 6.0)
    y = sample_cfust(true, 2000, seed=21)
    res = fit(y, FitConfig(max_iter=300, seed=2))
    true_ll = float(np.sum(mixture_component_logpdfs(y, MixtureParams(np.ones(1), (true,)))))
    assert res.loglik >= true_ll - 2.0
    assert np.all(np.diff(res.loglik_trace) >= -1e-8)
    assert res.labels.shape == (2000,) and np.all(res.labels == 0)


def test_fit_deterministic():
    psi = two_component_model()
    y, _ = sample_mixture(psi, 200, seed=6)
    cfg = FitConfig(g=2, seed=3, max_iter=15)
    a, b = fit(y, cfg), fit(y, cfg)
    assert a.loglik_trace == b.loglik_trace
    np.testing.assert_array_equal(a.responsibilities, b.responsibilities)
    for ca, cb in zip(a.psi.components, b.psi.components):
        np.testing.assert_array_equal(ca.delta, cb.delta)


def test_fit_scale_equivariance():
    psi = two_component_model()
    y, _ = sample_mixture(psi, 200, seed=7)
    scale, shift = 2.5, np.array([1.0, -3.0])
    cfg = FitConfig(g=2, seed=3, max_iter=20, tol=1e-14)
    a = fit(y, cfg)
    b = fit(scale * y + shift, cfg)
    assert a.iterations == b.iterations
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_allclose(b.responsibilities, a.responsibilities, atol=1e-6)
    for ca, cb in zip(a.psi.components, b.psi.components):
        np.testing.assert_allclose(cb.mu, scale * ca.mu + shift, atol=1e-6 * scale)
        np.testing.assert_allclose(cb.sigma, scale ** 2 * ca.sigma, atol=1e-6 * scale ** 2)
        np.testing.assert_allclose(cb.delta, scale * ca.delta, atol=1e-6 * scale)
        assert cb.nu == pytest.approx(ca.nu, rel=1e-6)


def gaussian_gap(y, start, nu):
    comps = tuple(CfustParams(c.mu, c.sigma, np.zeros((2, 1)), nu) for c in start.components)
    psi = MixtureParams(start.weights, comps)
    cfg = FitConfig(g=2, fixed_nu=nu, fix_zero_delta=True)
    new = mstep_update(y, estep(y, psi, cfg), psi, cfg)
    pi, mus, sigmas = gaussian_em_step(y, psi.weights, [c.mu for c in comps],
                                       [c.sigma for c in comps])
    gap = np.max(np.abs(new.weights - pi))
    for h in range(2):
        gap = max(gap, np.max(np.abs(new.components[h].mu - mus[h])),
                  np.max(np.abs(new.components[h].sigma - sigmas[h])))
    return gap


def test_gaussian_limit():
    rng = np.random.default_rng(9)
    y = np.vstack([rng.normal(size=(150, 2)), rng.normal(size=(100, 2)) * 0.7 + 3])
    start = initialize(y, FitConfig(g=2, skew_structure="single-column"), np.random.default_rng(0))
    gaps = {nu: gaussian_gap(y, start, nu) for nu in (200.0, 2000.0, 1e8)}
    # t updates approach the Gaussian ones at rate 1 / nu
    assert 5 < gaps[200.0] / gaps[2000.0] < 20
    assert gaps[1e8] <= 1e-6
