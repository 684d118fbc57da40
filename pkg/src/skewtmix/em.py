"""EM fitting of finite CFUST mixtures.

E-step quantities for component h and observation j, given the hierarchy
``Y | u, w ~ N(mu + Delta u, Sigma / w)``, ``U | w ~ |N_q(0, I / w)|`` and
``W ~ Gamma(nu/2, nu/2)``:

* ``z``  posterior membership probability,
* ``w``  E[W | y],
* ``e1`` E[log W | y],
* ``e2`` E[W U | y],
* ``e3`` E[W U U^T | y].

With ``n0 = nu + p`` and ``c = nu + d(y)`` all of them are driven by the
orthant probabilities ``P(s) = T_q(q(y) sqrt((n0 + 2s)/c); 0, Lambda, n0 + 2s)``
for s = 0, 1, 2, ...; :func:`skewtmix.specfun.df_profile` returns the whole
ladder at once.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.cluster.vq import kmeans2
from scipy.optimize import brentq
from scipy.special import gammaln, logsumexp, psi as digamma_fn

from .model import (
    CfustParams,
    MixtureParams,
    SkewStructure,
    component_terms,
    make_delta,
    mixture_component_logpdfs,
)
from .oracle import posterior_expectations_mc
from .specfun import (
    DEFAULT_PRECISION,
    TINY_PROB,
    CdfPrecision,
    UnderflowError,
    df_profile,
    trunc_mvt_moments,
    trunc_mvt_moments_batch,
)

__all__ = [
    "DegenerateComponentError",
    "DfSolution",
    "E1Result",
    "EStepCache",
    "FitConfig",
    "FitResult",
    "component_expectations",
    "estep",
    "estep_e1_osl",
    "estep_e1_series",
    "estep_e2_e3",
    "estep_responsibilities",
    "estep_w",
    "fit",
    "information_criteria",
    "initialize",
    "mstep_delta_diagonal",
    "mstep_delta_single_column",
    "mstep_update",
    "q_function",
    "solve_df",
]

log = logging.getLogger(__name__)

E1_METHODS = {"series": "series", "osl": "osl", "monte-carlo": "monte-carlo",
              "mc": "monte-carlo"}
MAX_RESTARTS = 3


class DegenerateComponentError(ArithmeticError):
    """A component lost its support or produced a singular update."""

    def __init__(self, component, reason):
        super().__init__(f"component {component + 1}: {reason}")
        self.component = component


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit`.

    ``q`` defaults to p for the full and diagonal structures and to 1 for
    single-column.  ``series_fallback`` chooses what replaces a series value
    that failed to converge: ``"limit"`` uses the exact derivative of the
    orthant probability in the degrees of freedom, ``"monte-carlo"`` uses the
    importance-sampling estimate with ``mc_samples`` draws.
    """

    g: int = 1
    skew_structure: SkewStructure = SkewStructure.FULL
    q: int | None = None
    max_iter: int = 500
    tol: float = 1e-6
    e1_method: str = "series"
    series_r_max: int = 25
    series_tol: float = 1e-8
    series_fallback: str = "limit"
    mc_samples: int = 10_000
    df_bounds: tuple = (1.0, 1000.0)
    init: str = "kmeans"
    n_starts: int = 1
    seed: int = 0
    cdf_precision: CdfPrecision = field(default_factory=CdfPrecision)
    threads: int = 1
    fixed_nu: float | None = None
    fix_zero_delta: bool = False
    init_params: MixtureParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "skew_structure", SkewStructure.parse(self.skew_structure))
        if self.e1_method not in E1_METHODS:
            raise ValueError(f"unknown e1 method {self.e1_method!r}")
        object.__setattr__(self, "e1_method", E1_METHODS[self.e1_method])
        if self.series_fallback not in ("limit", "monte-carlo"):
            raise ValueError("series_fallback must be 'limit' or 'monte-carlo'")
        object.__setattr__(self, "df_bounds", tuple(float(b) for b in self.df_bounds))
        lo, hi = self.df_bounds
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if lo < 0.5 or hi > 1e4 or not lo < hi:
            raise ValueError("df_bounds must satisfy 0.5 <= nu_min < nu_max <= 1e4")
        if self.g < 1 or self.max_iter < 1 or self.n_starts < 1 or self.threads < 1:
            raise ValueError("g, max_iter, n_starts and threads must be positive")
        if self.series_r_max < 1 or not self.series_tol > 0:
            raise ValueError("series_r_max must be >= 1 and series_tol > 0")
        if self.init not in ("kmeans", "random"):
            raise ValueError("init must be 'kmeans' or 'random'")
        if self.q is not None and self.q < 1:
            raise ValueError("q must be at least 1")

    def q_for(self, p):
        if self.q is not None:
            if self.skew_structure is SkewStructure.DIAGONAL and self.q != p:
                raise ValueError("diagonal structure requires q = p")
            return self.q
        return 1 if self.skew_structure is SkewStructure.SINGLE_COLUMN else p


@dataclass
class EStepCache:
    """Per-observation, per-component conditional expectations."""

    z: np.ndarray
    w: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    log_dens: np.ndarray | None = None
    loglik: float = float("nan")
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class E1Result:
    value: float
    converged: bool
    n_terms: int
    approximate: bool = False


@dataclass(frozen=True)
class DfSolution:
    nu: float
    clamped: bool


@dataclass
class FitResult:
    psi: MixtureParams
    loglik_trace: list
    responsibilities: np.ndarray
    labels: np.ndarray
    iterations: int
    converged: bool
    bic: float
    aic: float
    structure: SkewStructure = SkewStructure.FULL
    diagnostics: dict = field(default_factory=dict)

    @property
    def loglik(self):
        return self.loglik_trace[-1]


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _series_sum(values, errors, r_max, tol):
    """Newton forward-difference series for the slope of the orthant-probability ratio.

    ``values[:, s]`` holds ``P(s)``.  With ``rho_s = P(s) / P(0)`` the series
    ``sum_r (-1)^(r+1) Delta^r rho_0 / r`` equals the derivative of rho at 0.
    Differences of order r amplify the noise on rho by up to ``2^r``; a row
    stops unconverged once that bound reaches ``tol``.
    """
    p0 = values[:, 0]
    rho = values / p0[:, None]
    noise = np.max(errors / p0[:, None], axis=1) + 4 * np.finfo(float).eps
    n = values.shape[0]
    total = np.zeros(n)
    terms = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    conv = np.zeros(n, dtype=bool)
    diff = rho
    for r in range(1, min(r_max, values.shape[1] - 1) + 1):
        diff = diff[:, 1:] - diff[:, :-1]
        group = (-1.0) ** (r + 1) * diff[:, 0] / r
        active = ~done
        total[active] += group[active]
        terms[active] = r
        small = active & (np.abs(group) < tol)
        conv |= small
        done |= small | (active & ((2.0 ** r / r) * noise >= tol))
        if done.all():
            break
    return total, conv, terms


def component_expectations(y, params: CfustParams, e1_method="series", series_r_max=25,
                           series_tol=1e-8, series_fallback="limit", precision=None,
                           mc_samples=10_000, mc_seed=0, moments=True):
    """E-step quantities of one component for a batch of observations.

    Returns a dict with ``logpdf``, ``underflow`` (orthant probability at or
    below 1e-300), ``w``, ``e1``, ``e1_converged``, ``e1_terms``, ``e1_fallback``
    and, when ``moments`` is set, ``e2`` (n, q) and ``e3`` (n, q, q).
    """
    precision = precision or DEFAULT_PRECISION
    method = E1_METHODS[e1_method]
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, p, q = y.shape[0], params.p, params.q
    t = component_terms(y, params)
    n0 = params.nu + p
    c = t["c"]
    n_steps = series_r_max if method == "series" else 1
    want_limit = method == "series" and series_fallback == "limit"
    prof = df_profile(t["b"], t["corr"], n0, n_steps, precision, derivative=want_limit)
    vals, errs = prof["values"], prof["errors"]
    p0, p1 = vals[:, 0], vals[:, 1]
    under = p0 <= TINY_PROB
    ok = ~under
    safe_p0 = np.where(ok, p0, 1.0)

    with np.errstate(divide="ignore"):
        logpdf = q * math.log(2.0) + t["log_t"] + np.where(ok, np.log(safe_p0), -np.inf)
    w = (n0 / c) * np.where(ok, p1 / safe_p0, 1.0)
    base = digamma_fn(n0 / 2) - np.log(c / 2)
    out = {"logpdf": logpdf, "underflow": under, "w": w}

    conv = np.ones(n, dtype=bool)
    terms = np.zeros(n, dtype=int)
    fallback = np.zeros(n, dtype=bool)
    if method == "series":
        corr_sum = np.zeros(n)
        if np.any(ok):
            s, cv, tm = _series_sum(vals[ok], errs[ok], series_r_max, series_tol)
            corr_sum[ok], conv[ok], terms[ok] = s, cv, tm
        e1 = base + corr_sum
        out["e1_partial"] = e1.copy()
        fallback = ok & ~conv
        if np.any(fallback):
            if series_fallback == "limit":
                # d/ds log P(s) = 2 d/dn log T_q at n = n0
                e1[fallback] = base[fallback] + 2.0 * prof["dlog"][fallback]
            else:
                for j in np.flatnonzero(fallback):
                    e1[j] = _e1_monte_carlo(y[j], params, mc_samples, (mc_seed, j))
    elif method == "osl":
        e1 = w - np.log(c / 2) + n0 / c - digamma_fn(n0 / 2)
    else:
        e1 = base.copy()
        for j in np.flatnonzero(ok):
            e1[j] = _e1_monte_carlo(y[j], params, mc_samples, (mc_seed, j))
    out.update(e1=e1, e1_converged=conv, e1_terms=terms, e1_fallback=fallback)

    if moments:
        e2 = np.zeros((n, q))
        e3 = np.zeros((n, q, q))
        if np.any(ok):
            df_t = n0 + 2.0
            _, m1, m2 = trunc_mvt_moments_batch(
                t["qv"][ok], t["dq"].lam, df_t, scale_factors=c[ok] / df_t,
                precision=precision, probs=(p1[ok], p0[ok]))
            e2[ok] = w[ok, None] * m1
            e3[ok] = w[ok, None, None] * m2
        bad = ~np.all(np.isfinite(e2), axis=1) | ~np.all(np.isfinite(e3), axis=(1, 2))
        e2[bad] = 0.0
        e3[bad] = 0.0
        out.update(e2=e2, e3=e3, moment_failures=int(np.count_nonzero(bad & ok)))
    return out


def _e1_monte_carlo(y_j, params, n_samples, seed):
    est = posterior_expectations_mc(y_j, params, max(n_samples, 10_000),
                                    seed=np.random.SeedSequence(list(seed)))
    return est["log_w"].value


def estep_responsibilities(y_j, psi: MixtureParams, precision=None):
    """Posterior membership probabilities of one observation.

    If every component density underflows the result is uniform.
    """
    logs = mixture_component_logpdfs(np.atleast_2d(y_j), psi, precision)[0]
    if not np.any(np.isfinite(logs)):
        return np.full(psi.g, 1.0 / psi.g)
    return np.exp(logs - logsumexp(logs))


def estep_w(y_j, params: CfustParams, precision=None, index=None):
    """E[W | y] for one observation."""
    out = component_expectations(y_j, params, e1_method="osl", precision=precision,
                                 moments=False)
    if out["underflow"][0]:
        where = "" if index is None else f" for observation {index}"
        raise UnderflowError(f"orthant probability underflow{where}")
    return float(out["w"][0])


def estep_e1_series(y_j, params: CfustParams, config: FitConfig | None = None):
    """E[log W | y] from the truncated series, with a convergence flag.

    The value returned when the flag is down is the last partial sum; it is
    not corrected.
    """
    config = config or FitConfig()
    out = component_expectations(y_j, params, "series", config.series_r_max,
                                 config.series_tol, "limit", config.cdf_precision,
                                 moments=False)
    return E1Result(float(out["e1_partial"][0]), bool(out["e1_converged"][0]),
                    int(out["e1_terms"][0]))


def estep_e1_osl(y_j, params: CfustParams, w_value):
    """One-step-late approximation to E[log W | y]; flagged approximate."""
    t = component_terms(np.atleast_2d(y_j), params)
    n0 = params.nu + params.p
    c = float(t["c"][0])
    value = w_value - math.log(c / 2) + n0 / c - float(digamma_fn(n0 / 2))
    return E1Result(value, True, 0, approximate=True)


def estep_e2_e3(y_j, params: CfustParams, w_value, precision=None):
    """E[W U | y] and E[W U U^T | y] from the positive-orthant truncated t."""
    t = component_terms(np.atleast_2d(y_j), params)
    df_t = params.nu + params.p + 2.0
    scale = (t["c"][0] / df_t) * t["dq"].lam
    mom = trunc_mvt_moments(t["qv"][0], scale, df_t, precision)
    return w_value * mom.m1, w_value * mom.m2


def estep(y, psi: MixtureParams, config: FitConfig, iteration=0, run_seed=0,
          moments=True) -> EStepCache:
    """Full E-step over all components; deterministic for any thread count."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, g, q = y.shape[0], psi.g, psi.q

    def one(h):
        ss = np.random.SeedSequence([run_seed, iteration, h])
        prec = dataclasses.replace(config.cdf_precision,
                                   seed=int(ss.generate_state(1)[0]))
        return component_expectations(
            y, psi.components[h], config.e1_method, config.series_r_max, config.series_tol,
            config.series_fallback, prec, config.mc_samples,
            mc_seed=int(ss.generate_state(2)[1]), moments=moments)

    if config.threads > 1 and g > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(one, range(g)))
    else:
        parts = [one(h) for h in range(g)]

    with np.errstate(divide="ignore"):
        log_pi = np.where(psi.weights > 0, np.log(np.maximum(psi.weights, 1e-300)), -np.inf)
    log_dens = np.stack([pt["logpdf"] for pt in parts], axis=1) + log_pi
    row = logsumexp(log_dens, axis=1)
    dead = ~np.isfinite(row)
    z = np.empty((n, g))
    z[~dead] = np.exp(log_dens[~dead] - row[~dead, None])
    z[dead] = 1.0 / g
    loglik = float(np.sum(row)) if not np.any(dead) else -np.inf

    cache = EStepCache(
        z=z,
        w=np.stack([pt["w"] for pt in parts], axis=1),
        e1=np.stack([pt["e1"] for pt in parts], axis=1),
        e2=np.stack([pt["e2"] for pt in parts], axis=1) if moments else np.zeros((n, g, q)),
        e3=np.stack([pt["e3"] for pt in parts], axis=1) if moments else np.zeros((n, g, q, q)),
        log_dens=log_dens,
        loglik=loglik,
    )
    cache.diagnostics = {
        "degenerate_points": int(np.count_nonzero(dead)),
        "underflow": int(sum(np.count_nonzero(pt["underflow"]) for pt in parts)),
        "e1_unconverged": int(sum(np.count_nonzero(pt["e1_fallback"]) for pt in parts)),
        "e1_max_terms": int(max(int(pt["e1_terms"].max(initial=0)) for pt in parts)),
        "moment_failures": int(sum(pt.get("moment_failures", 0) for pt in parts)),
    }
    return cache


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def _weighted_stats(data, cache, h, mu):
    z = cache.z[:, h]
    r = data - mu
    a = (z[:, None] * r).T @ cache.e2[:, h]
    b = np.einsum("j,jab->ab", z, cache.e3[:, h])
    return r, a, 0.5 * (b + b.T)


def mstep_delta_full(data, cache, mu_new, h=0):
    """Unconstrained skewness update [sum z (y - mu) e2^T][sum z e3]^{-1}."""
    _, a, b = _weighted_stats(data, cache, h, mu_new)
    try:
        chol = linalg.cho_factor(b)
    except linalg.LinAlgError as exc:
        raise DegenerateComponentError(h, "singular weighted sum of e3") from exc
    return linalg.cho_solve(chol, a.T).T


def mstep_delta_diagonal(data, cache, mu_new, sigma_current, h=0):
    """Diagonal skewness update.

    Solves ``(Sigma^{-1} o B) delta = diag(Sigma^{-1} A)`` where ``o`` is the
    elementwise product, ``A = sum z (y - mu) e2^T`` and ``B = sum z e3``.
    """
    _, a, b = _weighted_stats(data, cache, h, mu_new)
    s_inv = linalg.inv(sigma_current)
    lhs = s_inv * b.T
    rhs = np.diag(s_inv @ a)
    try:
        return linalg.solve(lhs, rhs, assume_a="sym")
    except (linalg.LinAlgError, ValueError) as exc:
        raise DegenerateComponentError(h, "singular diagonal skewness system") from exc


def mstep_delta_single_column(data, cache, mu_new, h=0):
    """Skewness vector for a single latent skewing variable."""
    z = cache.z[:, h]
    denom = float(z @ cache.e3[:, h, 0, 0])
    if not denom > 0:
        raise DegenerateComponentError(h, "zero denominator in skewness update")
    return ((z * cache.e2[:, h, 0]) @ (data - mu_new)) / denom


def solve_df(cache, h, nu_current, bounds=(1.0, 1000.0)):
    """Root of log(nu/2) + 1 - psi(nu/2) + mean_z(e1 - w) on ``bounds``."""
    z = cache.z[:, h]
    total = z.sum()
    if not total > 0:
        raise DegenerateComponentError(h, "empty component")
    stat = float(z @ (cache.e1[:, h] - cache.w[:, h])) / total
    return solve_df_stat(stat, bounds)


def solve_df_stat(stat, bounds=(1.0, 1000.0)):
    lo, hi = bounds

    def g(nu):
        return math.log(nu / 2) + 1.0 - float(digamma_fn(nu / 2)) + stat

    g_lo, g_hi = g(lo), g(hi)
    if g_lo <= 0:
        return DfSolution(lo, g_lo < 0)
    if g_hi >= 0:
        return DfSolution(hi, g_hi > 0)
    return DfSolution(brentq(g, lo, hi, xtol=1e-10, rtol=4 * np.finfo(float).eps), False)


def _repair_spd(s):
    s = 0.5 * (s + s.T)
    try:
        linalg.cholesky(s, lower=True)
        return s, False
    except linalg.LinAlgError:
        p = s.shape[0]
        ridge = 1e-8 * max(np.trace(s), 1e-300) / p
        for _ in range(60):
            s = s + ridge * np.eye(p)
            try:
                linalg.cholesky(s, lower=True)
                return s, True
            except linalg.LinAlgError:
                ridge *= 10
        raise


def mstep_update(data, cache: EStepCache, psi: MixtureParams, config: FitConfig,
                 report=None) -> MixtureParams:
    """One conditional-maximization sweep: pi, then mu, Delta, Sigma, nu per component."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, p = data.shape
    structure = config.skew_structure
    sums = cache.z.sum(axis=0)
    weights = sums / n
    comps = []
    for h, old in enumerate(psi.components):
        z = cache.z[:, h]
        if sums[h] < p + 1:
            raise DegenerateComponentError(h, f"effective size {sums[h]:.3g} < p + 1")
        zw = z * cache.w[:, h]
        mu = (zw @ data - old.delta @ (z @ cache.e2[:, h])) / zw.sum()
        if config.fix_zero_delta:
            delta = np.zeros_like(old.delta)
        elif structure is SkewStructure.DIAGONAL:
            delta = np.diag(mstep_delta_diagonal(data, cache, mu, old.sigma, h))
        elif structure is SkewStructure.SINGLE_COLUMN:
            delta = make_delta(structure, mstep_delta_single_column(data, cache, mu, h),
                               q=old.q)
        else:
            delta = mstep_delta_full(data, cache, mu, h)
        r, a, b = _weighted_stats(data, cache, h, mu)
        s = (zw[:, None] * r).T @ r - delta @ a.T - a @ delta.T + delta @ b @ delta.T
        sigma, repaired = _repair_spd(s / sums[h])
        if config.fixed_nu is not None:
            nu, clamped = float(config.fixed_nu), False
        else:
            sol = solve_df(cache, h, old.nu, config.df_bounds)
            nu, clamped = sol.nu, sol.clamped
        if report is not None:
            report["ridge_repairs"] = report.get("ridge_repairs", 0) + int(repaired)
            report["df_clamped"] = report.get("df_clamped", 0) + int(clamped)
        comps.append(CfustParams(mu, sigma, delta, nu))
    weights = weights / weights.sum()
    return MixtureParams(weights, tuple(comps))


def q_function(data, cache: EStepCache, psi: MixtureParams):
    """Expected complete-data log-likelihood under a fixed E-step cache."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, p = data.shape
    total = 0.0
    for h, comp in enumerate(psi.components):
        z = cache.z[:, h]
        if not np.any(z > 0):
            continue
        q = comp.q
        w, e1, e2, e3 = cache.w[:, h], cache.e1[:, h], cache.e2[:, h], cache.e3[:, h]
        s_inv = linalg.inv(comp.sigma)
        _, logdet = np.linalg.slogdet(comp.sigma)
        r = data - comp.mu
        quad = (w * np.einsum("ij,jk,ik->i", r, s_inv, r)
                - 2 * np.einsum("ij,jk,ik->i", r, s_inv @ comp.delta, e2)
                + np.einsum("ab,jba->j", comp.delta.T @ s_inv @ comp.delta, e3))
        nu = comp.nu
        per = (math.log(psi.weights[h])
               - 0.5 * (p + q) * math.log(2 * math.pi) + q * math.log(2.0)
               - 0.5 * logdet - 0.5 * quad - 0.5 * np.trace(e3, axis1=1, axis2=2)
               + 0.5 * nu * math.log(nu / 2) - gammaln(nu / 2)
               + (0.5 * (p + q + nu) - 1.0) * e1 - 0.5 * nu * w)
        total += float(z @ per)
    return total


# ---------------------------------------------------------------------------
# initialization, criteria, driver
# ---------------------------------------------------------------------------

def _skew_columns(x, q, structure):
    """Initial skewness: sign of sample skewness times 0.1 sd per coordinate.

    Coordinates are dealt round-robin to the q columns so that no two columns
    start identical.
    """
    p = x.shape[1]
    centered = x - x.mean(axis=0)
    sd = centered.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    skew = np.mean(centered ** 3, axis=0)
    vec = np.where(skew >= 0, 1.0, -1.0) * 0.1 * sd
    if structure is SkewStructure.DIAGONAL:
        return np.diag(vec)
    if structure is SkewStructure.SINGLE_COLUMN:
        return make_delta(structure, vec, q=q)
    delta = np.zeros((p, q))
    for i in range(p):
        delta[i, i % q] = vec[i]
    return delta


def _component_from(x, q, structure, fallback_cov):
    p = x.shape[1]
    cov = np.cov(x, rowvar=False).reshape(p, p) if x.shape[0] > 1 else fallback_cov
    cov = 0.9 * cov
    try:
        linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        cov = 0.9 * fallback_cov
    return CfustParams(x.mean(axis=0), cov, _skew_columns(x, q, structure), 30.0)


def initialize(data, config: FitConfig, rng=None) -> MixtureParams:
    """Starting values from k-means clusters or perturbed global moments."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, p = data.shape
    q = config.q_for(p)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    g = config.g
    glob_cov = np.cov(data, rowvar=False).reshape(p, p) + 1e-9 * np.eye(p)
    if g == 1:
        return MixtureParams(np.ones(1), (_component_from(data, q, config.skew_structure,
                                                           glob_cov),))
    if config.init == "kmeans":
        for _ in range(10):
            _, labels = kmeans2(data, g, minit="++", seed=rng)
            counts = np.bincount(labels, minlength=g)
            if counts.min() >= p + 1:
                break
        else:
            raise DegenerateComponentError(int(np.argmin(counts)),
                                           "k-means produced a cluster with < p + 1 points")
        comps = tuple(_component_from(data[labels == h], q, config.skew_structure, glob_cov)
                      for h in range(g))
        weights = counts / n
    else:
        chol = linalg.cholesky(glob_cov, lower=True)
        mean = data.mean(axis=0)
        delta = _skew_columns(data, q, config.skew_structure)
        comps = tuple(CfustParams(mean + chol @ rng.standard_normal(p), glob_cov, delta, 30.0)
                      for _ in range(g))
        weights = np.full(g, 1.0 / g)
    weights = weights / weights.sum()
    return MixtureParams(weights, comps)


def information_criteria(loglik, psi: MixtureParams, n, structure=SkewStructure.FULL):
    """(BIC, AIC) with m = (g-1) + g (p + p(p+1)/2 + p q_free + 1)."""
    structure = SkewStructure.parse(structure)
    g, p, q = psi.g, psi.p, psi.q
    q_free = q if structure is SkewStructure.FULL else 1
    m = (g - 1) + g * (p + p * (p + 1) // 2 + p * q_free + 1)
    return -2.0 * loglik + m * math.log(n), -2.0 * loglik + 2.0 * m


def _run_em(data, psi, config, run_seed):
    cache = estep(data, psi, config, 0, run_seed)
    trace = [cache.loglik]
    report = {"e1_unconverged": cache.diagnostics["e1_unconverged"],
              "underflow_max": cache.diagnostics["underflow"]}
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        psi = mstep_update(data, cache, psi, config, report)
        cache = estep(data, psi, config, it, run_seed)
        trace.append(cache.loglik)
        report["e1_unconverged"] += cache.diagnostics["e1_unconverged"]
        report["underflow_max"] = max(report["underflow_max"], cache.diagnostics["underflow"])
        prev, cur = trace[-2], trace[-1]
        if np.isfinite(cur) and np.isfinite(prev) and abs(cur - prev) < config.tol * abs(cur):
            converged = True
            break
    log.debug("run %s: %d iterations, loglik %.6f", run_seed, it, trace[-1])
    return psi, trace, cache, it, converged, report


def _canonical_order(psi, z, structure):
    order = np.argsort(-psi.weights, kind="stable")
    comps = []
    for h in order:
        comp = psi.components[h]
        delta = comp.delta
        if structure is SkewStructure.FULL and delta.shape[1] > 1:
            cols = np.argsort(-np.linalg.norm(delta, axis=0), kind="stable")
            delta = delta[:, cols]
        comps.append(CfustParams(comp.mu, comp.sigma, delta, comp.nu))
    return MixtureParams(psi.weights[order], tuple(comps)), z[:, order]


def fit(data, config: FitConfig | None = None) -> FitResult:
    """Best-of-``n_starts`` EM fit of a g-component CFUST mixture.

    Raises DegenerateComponentError when every start collapses.
    """
    config = config or FitConfig()
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, p = data.shape
    if not np.all(np.isfinite(data)):
        raise ValueError("data must be finite")
    if n <= config.g:
        raise ValueError("need more observations than components")
    best = None
    failures = []
    n_starts = 1 if config.init_params is not None else config.n_starts
    for start in range(n_starts):
        for attempt in range(MAX_RESTARTS + 1):
            ss = np.random.SeedSequence([config.seed, start, attempt])
            run_seed = int(ss.generate_state(1)[0])
            try:
                if config.init_params is not None and attempt == 0:
                    psi0 = config.init_params
                else:
                    psi0 = initialize(data, config, np.random.default_rng(ss))
                outcome = _run_em(data, psi0, config, run_seed)
            except DegenerateComponentError as exc:
                log.info("start %d attempt %d collapsed: %s", start, attempt, exc)
                failures.append({"start": start, "attempt": attempt, "reason": str(exc)})
                continue
            outcome[5]["start"] = start
            outcome[5]["restarts"] = attempt
            if best is None or outcome[1][-1] > best[1][-1]:
                best = outcome
            break
    if best is None:
        raise DegenerateComponentError(0, "all starts collapsed")
    psi, trace, cache, iterations, converged, report = best
    psi, z = _canonical_order(psi, cache.z, config.skew_structure)
    bic, aic = information_criteria(trace[-1], psi, n, config.skew_structure)
    report["failed_attempts"] = failures
    report["e1_method"] = config.e1_method
    report["e1_approximate"] = config.e1_method == "osl"
    return FitResult(
        psi=psi,
        loglik_trace=[float(v) for v in trace],
        responsibilities=z,
        labels=np.argmax(z, axis=1),
        iterations=iterations,
        converged=converged,
        bic=bic,
        aic=aic,
        structure=config.skew_structure,
        diagnostics=report,
    )
