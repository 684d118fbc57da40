"""Special functions behind the CFUST density and the E-step.

Multivariate t probabilities are evaluated through the normal/chi-square
mixture

    T_q(b * sqrt(n); 0, R, n) = E[ Phi_R(b * sqrt(G)) ],   G ~ chi^2_n,

which lets every degrees-of-freedom value on a grid ``n, n + 2, n + 4, ...``
share one set of normal-CDF evaluations.  For ``q == 1`` the univariate t
CDF is used directly, for ``q == 2`` the chi-square integral is done with a
trapezoid rule in ``log G`` over Genz's bivariate normal CDF, and for
``q >= 3`` a randomized lattice rule on the Genz-Bretz separation-of-variables
integrand is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.optimize import brentq
from scipy.special import gammainccinv, gammaln, log_ndtr, ndtr, ndtri, psi, stdtr

__all__ = [
    "CdfEstimate",
    "CdfPrecision",
    "DomainError",
    "TruncatedTMoments",
    "UnderflowError",
    "bvn_cdf",
    "correlation",
    "df_profile",
    "digamma",
    "log_gamma",
    "log_via_series",
    "mvt_cdf",
    "mvt_cdf_batch",
    "mvt_logpdf",
    "trunc_mvt_moments",
    "trunc_mvt_moments_batch",
]

TINY_PROB = 1e-300


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


class UnderflowError(ArithmeticError):
    """A probability is too small to be represented usefully."""


@dataclass(frozen=True)
class CdfPrecision:
    """Accuracy knobs for multivariate t probabilities.

    ``abs_tol``, ``max_points``, ``n_shifts`` and ``seed`` drive the randomized
    lattice rule used for ``q >= 3``.  ``grid_factor`` sets the trapezoid step
    of the deterministic ``q == 2`` rule as a fraction of the spread of
    ``log chi^2_n``.
    """

    abs_tol: float = 1e-6
    max_points: int = 100_000
    n_shifts: int = 8
    seed: int = 0
    grid_factor: float = 0.5

    def __post_init__(self):
        if self.abs_tol <= 0:
            raise ValueError("abs_tol must be positive")
        if self.n_shifts < 8:
            raise ValueError("at least 8 randomization shifts are required")
        if self.max_points < self.n_shifts:
            raise ValueError("max_points must be at least n_shifts")
        if not 0 < self.grid_factor <= 1:
            raise ValueError("grid_factor must lie in (0, 1]")


DEFAULT_PRECISION = CdfPrecision()


@dataclass(frozen=True)
class CdfEstimate:
    value: float
    error_estimate: float
    samples_used: int


@dataclass(frozen=True)
class TruncatedTMoments:
    """Moments of a t vector restricted to the positive orthant."""

    prob: float
    m1: np.ndarray
    m2: np.ndarray


# ---------------------------------------------------------------------------
# scalar functions
# ---------------------------------------------------------------------------

def log_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("log_gamma requires x > 0")
    out = gammaln(x)
    return float(out) if out.ndim == 0 else out


def digamma(x):
    """Digamma function for ``x > 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("digamma requires x > 0")
    out = psi(x)
    return float(out) if out.ndim == 0 else out


def log_via_series(x: float, tol: float = 1e-8, r_max: int = 10_000) -> float:
    """Partial sum of the Taylor series of ``log(x)`` about 1.

    The double sum over binomial terms collapses to ``-sum_r (1 - x)^r / r``;
    summation stops at the first term smaller than ``tol`` in magnitude, or
    after ``r_max`` terms.
    """
    if not 0 < x < 2:
        raise DomainError("log_via_series requires 0 < x < 2")
    if tol <= 0 or r_max < 1:
        raise ValueError("tol must be positive and r_max at least 1")
    u = 1.0 - x
    total = 0.0
    power = 1.0
    for r in range(1, r_max + 1):
        power *= u
        term = -power / r
        total += term
        if abs(term) < tol:
            break
    return total


# ---------------------------------------------------------------------------
# multivariate t density
# ---------------------------------------------------------------------------

def mvt_logpdf(y, mu, omega, nu):
    """Log density of the p-variate t distribution t_p(mu, omega, nu).

    ``y`` may be a single p-vector or an ``(n, p)`` array; the return value
    is a float or an ``(n,)`` array accordingly.
    """
    y = np.asarray(y, dtype=float)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if nu <= 0:
        raise DomainError("degrees of freedom must be positive")
    p = mu.shape[0]
    chol = linalg.cholesky(omega, lower=True)
    diff = np.atleast_2d(y) - mu
    z = linalg.solve_triangular(chol, diff.T, lower=True)
    maha = np.sum(z * z, axis=0)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    out = (gammaln((nu + p) / 2) - gammaln(nu / 2) - 0.5 * p * math.log(nu * math.pi)
           - 0.5 * log_det - 0.5 * (nu + p) * np.log1p(maha / nu))
    return float(out[0]) if y.ndim == 1 else out


def correlation(scale):
    """Split an SPD scale matrix into standard deviations and correlation."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    sd = np.sqrt(np.diag(scale))
    corr = scale / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return sd, corr


# ---------------------------------------------------------------------------
# bivariate normal CDF (Drezner-Wesolowsky / Genz)
# ---------------------------------------------------------------------------

_GL = {n: np.polynomial.legendre.leggauss(n) for n in (6, 12, 20)}
_GL_TAIL = np.polynomial.legendre.leggauss(24)
_NEG_TAIL = 1e-6


def _bvn_upper_negcorr_tail(h, k, r):
    """P(X > h, Y > k) for r < 0 in the far tail, with full relative accuracy.

    Integrates ``phi(x) Phi((r x - k) / s)`` over ``x > h`` in log space;
    the closed forms lose everything to cancellation there.  The log
    integrand is concave with slope ``-rate`` at ``x = h`` and curvature at
    most ``1 + r^2 / s^2``, which bounds the range where it stays within 45
    nats of its value at ``h``; Gauss-Legendre covers that range.  ``h``
    must be the larger threshold.
    """
    s2 = (1.0 - r) * (1.0 + r)
    s = math.sqrt(s2)
    a = (r * h - k) / s
    rate = h + (-r / s) * np.exp(-0.5 * a * a - 0.5 * math.log(2 * math.pi) - log_ndtr(a))
    rate = np.maximum(rate, 0.0)
    kappa = 1.0 + r * r / s2
    span = (np.sqrt(rate * rate + 90.0 * kappa) - rate) / kappa
    t, w = _GL_TAIL
    x = h[..., None] + 0.5 * (t + 1.0) * span[..., None]
    logf = -0.5 * x * x + log_ndtr((r * x - k[..., None]) / s)
    top = logf.max(axis=-1)
    total = np.exp(logf - top[..., None]) @ w
    return np.exp(top + np.log(total) - 0.5 * math.log(2 * math.pi)) * 0.5 * span


def _bvn_upper(h, k, r):
    """P(X > h, Y > k) for a standard bivariate normal with correlation r."""
    out = _bvn_upper_closed(h, k, r)
    if r < 0:
        tail = out < _NEG_TAIL
        if np.any(tail):
            hi = np.maximum(h, k)[tail]
            lo = np.minimum(h, k)[tail]
            hi, lo = np.atleast_1d(hi), np.atleast_1d(lo)
            out = np.array(out, dtype=float)
            out[tail] = _bvn_upper_negcorr_tail(hi, lo, r)
    return out


def _bvn_upper_closed(h, k, r):
    if r == 0.0:
        return ndtr(-h) * ndtr(-k)
    n = 6 if abs(r) < 0.3 else 12 if abs(r) < 0.75 else 20
    t, w = _GL[n]
    x = 1.0 + t
    hk = h * k
    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * math.asin(r)
        sn = np.sin(asr * x)
        e = np.exp((sn * hk[..., None] - hs[..., None]) / (1.0 - sn * sn)) @ w
        return np.clip(e * asr / (2 * np.pi) + ndtr(-h) * ndtr(-k), 0.0, 1.0)
    if r < 0:
        k = -k
        hk = -hk
    bvn = np.zeros(np.broadcast(h, k).shape)
    if abs(r) < 1:
        as_ = (1.0 - r) * (1.0 + r)
        a = math.sqrt(as_)
        bs = (h - k) ** 2
        asr = -0.5 * (bs / as_ + hk)
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 80.0
        with np.errstate(over="ignore", invalid="ignore"):
            lead = a * np.exp(asr) * (1 - c * (bs - as_) * (1 - d * bs) / 3 + c * d * as_ ** 2)
            bvn = np.where(asr > -100, lead, 0.0)
            b = np.sqrt(bs)
            tail = (np.exp(-0.5 * hk) * math.sqrt(2 * np.pi) * ndtr(-b / a) * b
                    * (1 - c * bs * (1 - d * bs) / 3))
            bvn = bvn - np.where(hk > -100, tail, 0.0)
            a2 = 0.5 * a
            xs = (a2 * x) ** 2
            asr_i = -0.5 * (bs[..., None] / xs + hk[..., None])
            sp = 1 + c[..., None] * xs * (1 + 5 * d[..., None] * xs)
            rs = np.sqrt(1 - xs)
            ep = np.exp(asr_i - 0.5 * hk[..., None] * xs / (1 + rs) ** 2) / rs
            terms = np.where(asr_i > -100, np.exp(asr_i) * sp - ep, 0.0)
        bvn = (a2 * (terms @ w) - bvn) / (2 * np.pi)
    if r > 0:
        bvn = bvn + ndtr(-np.maximum(h, k))
    else:
        span = np.where(h < 0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
        bvn = np.where(h >= k, -bvn, span - bvn)
    return np.clip(bvn, 0.0, 1.0)


def bvn_cdf(b1, b2, r):
    """Lower-orthant probability P(X <= b1, Y <= b2) of a standard bivariate normal."""
    b1 = np.clip(np.asarray(b1, dtype=float), -40.0, 40.0)
    b2 = np.clip(np.asarray(b2, dtype=float), -40.0, 40.0)
    b1, b2 = np.broadcast_arrays(b1, b2)
    return _bvn_upper(-b1, -b2, float(r))


# ---------------------------------------------------------------------------
# chi-square mixture grid
# ---------------------------------------------------------------------------

_CUT = 36.0  # nats below the mode where the log chi-square density is dropped


def _log_chi2_grid(df_lo, df_hi, factor, v_extra=None):
    """Equispaced nodes in v = log G covering chi^2_n for n in [df_lo, df_hi]."""
    lo = math.log(df_lo) - 2.0 * (_CUT + 0.5 * df_lo) / df_lo
    if v_extra is not None:
        lo = min(lo, v_extra)
    vm = math.log(df_hi)

    def drop(v):
        return 0.5 * df_hi * (v - vm) - 0.5 * (math.exp(v) - df_hi) + _CUT

    hi = brentq(drop, vm, vm + 30.0)
    step = min(0.25, factor * math.sqrt(2.0 / df_hi))
    n = int(math.ceil((hi - lo) / step))
    return np.linspace(lo, hi, n + 1)


def _log_chi2_weights(v, dfs):
    """Log trapezoid weights (K, S) of chi^2_df on the log-scale nodes ``v``."""
    dfs = np.atleast_1d(np.asarray(dfs, dtype=float))
    lw = (0.5 * dfs[None, :] * (v[:, None] - math.log(2.0)) - 0.5 * np.exp(v)[:, None]
          - gammaln(0.5 * dfs)[None, :])
    top = lw.max(axis=0)
    return lw - (top + np.log(np.sum(np.exp(lw - top), axis=0)))


def _normal_orthant(x, corr):
    """Phi_R(x) for x of shape (..., q) with q in {1, 2}."""
    if corr.shape[0] == 1:
        return ndtr(x[..., 0])
    return bvn_cdf(x[..., 0], x[..., 1], corr[0, 1])


def _grid_profile(b, corr, dfs, factor, derivative, blocks=None):
    """Chi-square mixture evaluation when every correlation block has size <= 2.

    A single bivariate block with moderate correlation goes through
    :func:`_theta_profile`; rows it cannot resolve to full relative accuracy
    (far tails) fall back to the bivariate-normal grid.
    """
    if blocks is None:
        blocks = [np.arange(corr.shape[0])]
    if len(blocks) == 1 and blocks[0].size == 2 and abs(corr[0, 1]) < _THETA_MAX_R:
        idx = blocks[0]
        out = _theta_profile(b[:, idx], corr[idx[0], idx[1]], dfs, factor, derivative)
        tail = ~(out["values"].min(axis=1) >= _THETA_MIN_P)
        if np.any(tail):
            sub = _bvn_grid_profile(b[tail], corr, dfs, factor, derivative, blocks)
            for key in ("values", "errors") + (("dlog",) if derivative else ()):
                out[key][tail] = sub[key]
            out["points"] = max(out["points"], sub["points"])
        return out
    return _bvn_grid_profile(b, corr, dfs, factor, derivative, blocks)


_THETA_MAX_R = 0.925
_THETA_MIN_P = 1e-5


def _theta_profile(b, r, dfs, factor, derivative):
    """Bivariate orthant probabilities along a df ladder, split in two parts.

    ``Phi_R(x) = Phi(x1) Phi(x2) + (1/2pi) int_0^asin(r) exp(-A(t)/2) dt`` with
    ``A(t) = (x1^2 - 2 sin(t) x1 x2 + x2^2) / cos(t)^2``.  At ``x = b sqrt(G)``
    the exponent is linear in G, so its chi-square_n expectation is
    ``(1 + A_b(t))^(-n/2)`` and only the product term needs the G grid.
    Loses relative accuracy when the two parts nearly cancel.
    """
    v = _log_chi2_grid(dfs[0], dfs[-1], factor)
    root = np.exp(0.5 * v)
    h = ndtr(b[:, 0, None] * root) * ndtr(b[:, 1, None] * root)
    logw = _log_chi2_weights(v, dfs)
    first = h @ np.exp(logw)
    t, w = _GL[12 if abs(r) < 0.75 else 20]
    end = math.asin(r)
    theta = 0.5 * end * (t + 1.0)
    wt = 0.5 * end * w / (2 * np.pi)
    sn = np.sin(theta)
    cos2 = np.cos(theta) ** 2
    b1, b2 = b[:, 0, None], b[:, 1, None]
    lg = np.log1p((b1 * b1 - 2.0 * sn * b1 * b2 + b2 * b2) / cos2)  # (n, nodes)
    dfa = np.asarray(dfs, dtype=float)
    kern = np.exp(-0.5 * dfa[None, :, None] * lg[:, None, :])  # (n, S, nodes)
    values = first + kern @ wt
    out = {"values": values}
    if derivative:
        score = 0.5 * (v - math.log(2.0)) - 0.5 * psi(0.5 * dfs[0])
        num = h @ (np.exp(logw[:, 0]) * score) + (-0.5 * lg * kern[:, 0, :]) @ wt
        with np.errstate(divide="ignore", invalid="ignore"):
            out["dlog"] = np.where(values[:, 0] > 0, num / values[:, 0], 0.0)
    coarse = h[:, ::2] @ np.exp(_log_chi2_weights(v[::2], dfs))
    out["errors"] = np.abs(first - coarse) ** 2 + 1e-15 * np.abs(values)
    out["points"] = v.size
    return out


def _bvn_grid_profile(b, corr, dfs, factor, derivative, blocks):
    """Integrate products of per-block normal orthant probabilities over G."""
    neg = np.min(b, initial=0.0)
    v_extra = None
    if neg < 0:
        # Far lower tails put their mass at small G; reach down to b^2 G ~ 1e-2.
        v_extra = math.log(1e-2 / (neg * neg)) - 4.0
    v = _log_chi2_grid(dfs[0], dfs[-1], factor, v_extra)
    root = np.exp(0.5 * v)
    h = np.ones((b.shape[0], v.size))
    for idx in blocks:
        h = h * _normal_orthant(b[:, None, idx] * root[None, :, None], corr[np.ix_(idx, idx)])
    logw = _log_chi2_weights(v, dfs)  # (K, S)
    values = h @ np.exp(logw)
    out = {"values": values}
    if derivative:
        score = 0.5 * (v - math.log(2.0)) - 0.5 * psi(0.5 * dfs[0])
        num = h @ (np.exp(logw[:, 0]) * score)
        with np.errstate(divide="ignore", invalid="ignore"):
            out["dlog"] = np.where(values[:, 0] > 0, num / values[:, 0], 0.0)
    # Halving the node count squares the error of an exponentially convergent rule.
    coarse_w = np.exp(_log_chi2_weights(v[::2], dfs))
    coarse = h[:, ::2] @ coarse_w
    out["errors"] = np.abs(values - coarse) ** 2 + 1e-15 * values
    out["points"] = v.size
    return out


# ---------------------------------------------------------------------------
# randomized lattice rule (q >= 3)
# ---------------------------------------------------------------------------

def _primes(count):
    found = []
    cand = 2
    while len(found) < count:
        if all(cand % p for p in found if p * p <= cand):
            found.append(cand)
        cand += 1
    return np.array(found, dtype=float)


def _sov_integrand(a, chol, scale_chi, pts):
    """Genz-Bretz separation-of-variables integrand for a batch of limits.

    ``a`` (n, q) standardized limits, ``chol`` lower Cholesky factor of the
    correlation matrix, ``scale_chi`` (N,) chi radii divided by sqrt(df),
    ``pts`` (N, q - 1) uniform points.  Returns (n, N) integrand values.
    """
    n, q = a.shape
    npts = scale_chi.size
    lim = a[:, None, :] * scale_chi[None, :, None]
    ys = np.empty((n, npts, q - 1))
    e = ndtr(lim[:, :, 0] / chol[0, 0])
    f = e.copy()
    for i in range(1, q):
        u = np.clip(pts[None, :, i - 1] * e, 1e-300, 1 - 1e-16)
        ys[:, :, i - 1] = ndtri(u)
        shift = ys[:, :, :i] @ chol[i, :i]
        e = ndtr((lim[:, :, i] - shift) / chol[i, i])
        f *= e
    return f


def _lattice_profile(b, corr, dfs, precision, derivative):
    """Randomized rank-1 lattice estimate of E[Phi_R(b sqrt(G_n))] for each n."""
    n, q = b.shape
    chol = linalg.cholesky(corr, lower=True)
    gen = np.sqrt(_primes(q))
    rng = np.random.default_rng(precision.seed)
    shifts = rng.random((precision.n_shifts, q))
    eval_dfs = list(dfs)
    h = 0.0
    if derivative:
        h = min(0.05, 0.25 * dfs[0])
        eval_dfs += [dfs[0] - h, dfs[0] + h]
    per_shift = max(64, min(1024, precision.max_points // (precision.n_shifts * 2)))
    used = 0
    while True:
        idx = np.arange(1, per_shift + 1)[:, None]
        base = np.mod(idx * gen[None, :], 1.0)
        sums = np.zeros((precision.n_shifts, n, len(eval_dfs)))
        for s in range(precision.n_shifts):
            pts = np.mod(base + shifts[s], 1.0)
            pts = np.abs(2.0 * pts - 1.0)  # baker's transform
            for sign in (0, 1):
                pp = pts if sign == 0 else 1.0 - pts
                pp = np.clip(pp, 1e-15, 1 - 1e-15)
                for k, df in enumerate(eval_dfs):
                    radius = np.sqrt(2.0 * gammainccinv(0.5 * df, pp[:, 0]))
                    f = _sov_integrand(b, chol, radius, pp[:, 1:])
                    sums[s, :, k] += 0.5 * f.mean(axis=1)
        used = 2 * per_shift * precision.n_shifts
        est = sums.mean(axis=0)
        se = sums.std(axis=0, ddof=1) / math.sqrt(precision.n_shifts)
        err = 3.0 * se
        if np.max(err[:, : len(dfs)]) <= precision.abs_tol or 2 * used > precision.max_points:
            break
        per_shift *= 2
    out = {"values": est[:, : len(dfs)], "errors": err[:, : len(dfs)], "points": used}
    if derivative:
        lo, hi = est[:, -2], est[:, -1]
        with np.errstate(divide="ignore", invalid="ignore"):
            out["dlog"] = np.where(est[:, 0] > 0, (hi - lo) / (2 * h) / est[:, 0], 0.0)
    return out


# ---------------------------------------------------------------------------
# public CDF entry points
# ---------------------------------------------------------------------------

def df_profile(b, corr, df0, n_steps=0, precision=None, derivative=False):
    """Orthant probabilities along a ladder of degrees of freedom.

    For each row ``b_j`` returns ``P_js = T_q(b_j * sqrt(n_s); 0, R, n_s)`` with
    ``n_s = df0 + 2 s``, ``s = 0..n_steps``; this is the probability
    ``E[Phi_R(b_j sqrt(G))]`` with ``G ~ chi^2_{n_s}``.

    Returns a dict with ``values`` and ``errors`` of shape ``(n, n_steps + 1)``,
    ``points`` (evaluation count) and, when ``derivative`` is set, ``dlog``:
    the derivative of ``log P_j0`` with respect to the degrees of freedom.
    """
    precision = precision or DEFAULT_PRECISION
    b = np.atleast_2d(np.asarray(b, dtype=float))
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    if df0 <= 0:
        raise DomainError("degrees of freedom must be positive")
    dfs = [df0 + 2.0 * s for s in range(n_steps + 1)]
    const, live = _split_blocks(b, corr)
    if not live:
        ones = np.full((b.shape[0], len(dfs)), const)
        out = {"values": ones, "errors": np.zeros_like(ones), "points": 0}
        if derivative:
            out["dlog"] = np.zeros(b.shape[0])
        return out
    if len(live) == 1 and live[0].size == 1:
        dfa = np.array(dfs)
        col = b[:, live[0]]
        vals = stdtr(dfa[None, :], col * np.sqrt(dfa)[None, :])
        out = {"values": vals, "errors": np.zeros_like(vals), "points": 0}
        if derivative:
            out["dlog"] = _grid_profile(col, np.ones((1, 1)), dfs[:1], precision.grid_factor,
                                        True)["dlog"]
    elif max(idx.size for idx in live) <= 2:
        out = _grid_profile(b, corr, dfs, precision.grid_factor, derivative, live)
    else:
        idx = np.concatenate(live)
        out = _lattice_profile(b[:, idx], corr[np.ix_(idx, idx)], dfs, precision, derivative)
    if const != 1.0:
        out["values"] = out["values"] * const
        out["errors"] = out["errors"] * const
    return out


def _orthant_at_zero(corr):
    """P(X <= 0) for a centered normal with correlation ``corr`` (size <= 3)."""
    q = corr.shape[0]
    if q == 1:
        return 0.5
    if q == 2:
        return 0.25 + math.asin(corr[0, 1]) / (2 * math.pi)
    if q == 3:
        return 0.125 + (math.asin(corr[0, 1]) + math.asin(corr[0, 2])
                        + math.asin(corr[1, 2])) / (4 * math.pi)
    return None


def _block_labels(corr):
    """Connected components of the nonzero pattern of a correlation matrix."""
    q = corr.shape[0]
    adj = np.abs(corr) > 0
    label = np.full(q, -1)
    k = 0
    for start in range(q):
        if label[start] >= 0:
            continue
        members = adj[start].copy()
        while True:
            grown = np.any(adj[members], axis=0) | members
            if np.array_equal(grown, members):
                break
            members = grown
        label[members] = k
        k += 1
    return label


def _split_blocks(b, corr):
    """Split coordinates into independent correlation blocks.

    Blocks whose limits are identically zero contribute a closed-form
    constant factor; the rest are returned as index arrays.
    """
    label = _block_labels(corr)
    n_comp = label.max() + 1
    const = 1.0
    live = []
    for k in range(n_comp):
        idx = np.flatnonzero(label == k)
        if not np.any(b[:, idx]):
            value = _orthant_at_zero(corr[np.ix_(idx, idx)])
            if value is not None:
                const *= value
                continue
        live.append(idx)
    if len(live) > 1 and sum(i.size for i in live) > 2 and max(i.size for i in live) > 2:
        live = [np.concatenate(live)]
    return const, live


def mvt_cdf_batch(a, scale, nu, precision=None):
    """``T_q(a_j; 0, scale, nu)`` for each row of ``a``; returns (values, errors)."""
    vals, errs, _ = _cdf_batch(a, scale, nu, precision)
    return vals, errs


def _cdf_batch(a, scale, nu, precision):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    if a.shape[1] == 0:
        ones = np.ones(a.shape[0])
        return ones, np.zeros_like(ones), 0
    linalg.cholesky(scale, lower=True)
    sd, corr = correlation(scale)
    b = a / sd
    vals = np.empty(a.shape[0])
    errs = np.zeros(a.shape[0])
    hi = np.all(b == np.inf, axis=1)
    lo = np.any(b == -np.inf, axis=1)
    vals[hi] = 1.0
    vals[lo] = 0.0
    rest = ~(hi | lo)
    used = 0
    if np.any(rest):
        bb = np.clip(b[rest], -1e150, 1e150) / math.sqrt(nu)
        prof = df_profile(bb, corr, nu, 0, precision)
        vals[rest] = prof["values"][:, 0]
        errs[rest] = prof["errors"][:, 0]
        used = prof["points"] if a.shape[1] > 1 else 1
    return np.clip(vals, 0.0, 1.0), errs, used


def mvt_cdf(a, center, scale, nu, precision=None) -> CdfEstimate:
    """P(X <= a) for X ~ t_q(center, scale, nu)."""
    precision = precision or DEFAULT_PRECISION
    a = np.atleast_1d(np.asarray(a, dtype=float))
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if nu <= 0:
        raise DomainError("degrees of freedom must be positive")
    vals, errs, used = _cdf_batch((a - center)[None, :], scale, nu, precision)
    return CdfEstimate(float(vals[0]), float(errs[0]), int(used))


# ---------------------------------------------------------------------------
# truncated t moments on the positive orthant
# ---------------------------------------------------------------------------

def _lower_region_moments(c, sigma, nu, precision, order, probs=None):
    """Partial moments of Z ~ t_q(0, sigma, nu) over {Z <= c_j}, row by row.

    Returns ``(P, M1, M2)`` with ``P_j = P(Z <= c_j)``,
    ``M1_j = E[Z 1{Z <= c_j}]`` and ``M2_j = E[Z Z^T 1{Z <= c_j}]``.  The
    first moment needs (q-1)-variate t CDFs with ``nu - 1`` degrees of freedom,
    the second additionally (q-2)-variate ones and a q-variate CDF with
    ``nu - 2``.  ``probs`` may supply ``(P, P_nu_minus_2)`` precomputed.
    """
    n, q = c.shape
    if probs is not None and probs[0] is not None:
        prob = probs[0]
    else:
        prob, _ = mvt_cdf_batch(c, sigma, nu, precision)
    m1 = m2 = None
    if order == 0:
        return prob, m1, m2
    if nu <= 1:
        nan1 = np.full((n, q), np.nan)
        return prob, nan1, (np.full((n, q, q), np.nan) if order > 1 else None)
    h = np.empty((n, q))
    rows = np.empty((n, q, q)) if order > 1 else None
    for i in range(q):
        s_ii = sigma[i, i]
        ci = c[:, i]
        log_g = (-math.log(2.0) + gammaln(0.5 * (nu - 1)) - gammaln(0.5 * nu)
                 + 0.5 * nu * math.log(nu) - 0.5 * (nu - 1) * np.log(nu + ci * ci / s_ii)
                 - 0.5 * math.log(math.pi * s_ii))
        g = np.exp(log_g)
        if q == 1:
            p_sub = np.ones(n)
            m1_sub = np.zeros((n, 0))
            m_cond = np.zeros((n, 0))
            infl = np.ones(n)
        else:
            rest = [k for k in range(q) if k != i]
            s_ri = sigma[rest, i]
            schur = sigma[np.ix_(rest, rest)] - np.outer(s_ri, s_ri) / s_ii
            m_cond = ci[:, None] * s_ri[None, :] / s_ii
            infl = (nu + ci * ci / s_ii) / (nu - 1)
            c_sub = (c[:, rest] - m_cond) / np.sqrt(infl)[:, None]
            p_sub, m1_sub, _ = _lower_region_moments(
                c_sub, schur, nu - 1, precision, 1 if order > 1 else 0)
        h[:, i] = g * p_sub
        if order > 1:
            e_row = np.empty((n, q))
            e_row[:, i] = ci * p_sub
            if q > 1:
                e_row[:, rest] = m_cond * p_sub[:, None] + np.sqrt(infl)[:, None] * m1_sub
            rows[:, i, :] = g[:, None] * e_row
    m1 = -h @ sigma
    if order > 1:
        if nu <= 2:
            m2 = np.full((n, q, q), np.nan)
        else:
            if probs is not None and probs[1] is not None:
                p_m2 = probs[1]
            else:
                p_m2, _ = mvt_cdf_batch(c, sigma * nu / (nu - 2), nu - 2, precision)
            m2 = -np.einsum("ab,nbc->nac", sigma, rows) + (nu / (nu - 2)) * p_m2[:, None, None] * sigma
            m2 = 0.5 * (m2 + np.swapaxes(m2, 1, 2))
    return prob, m1, m2


def trunc_mvt_moments_batch(centers, scale, nu, scale_factors=None, precision=None,
                            probs=None):
    """Positive-orthant moments for X_j ~ t_q(centers_j, s_j * scale, nu).

    Returns ``(prob, m1, m2)`` with shapes ``(n,)``, ``(n, q)``, ``(n, q, q)``.
    Rows whose orthant probability is below 1e-300 come back as NaN; the
    caller decides whether that is an error.  ``probs`` may pass in the
    orthant probability at ``nu`` and at ``nu - 2`` (scale ``s_j * scale *
    nu / (nu - 2)``) when they are already known.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    n, q = centers.shape
    if nu <= 0:
        raise DomainError("degrees of freedom must be positive")
    linalg.cholesky(scale, lower=True)
    s = np.ones(n) if scale_factors is None else np.asarray(scale_factors, dtype=float)
    root = np.sqrt(s)
    c = centers / root[:, None]
    prob, e1, e2 = _lower_region_moments(c, scale, nu, precision, 2, probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ez = root[:, None] * e1 / prob[:, None]
        ezz = s[:, None, None] * e2 / prob[:, None, None]
        m1 = centers - ez
        m2 = (centers[:, :, None] * centers[:, None, :] - centers[:, :, None] * ez[:, None, :]
              - ez[:, :, None] * centers[:, None, :] + ezz)
    bad = prob <= TINY_PROB
    m1[bad] = np.nan
    m2[bad] = np.nan
    return prob, m1, m2


def trunc_mvt_moments(center, scale, nu, precision=None) -> TruncatedTMoments:
    """Probability, mean and second moment of t_q(center, scale, nu) given X > 0."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    prob, m1, m2 = trunc_mvt_moments_batch(center[None, :], scale, nu, precision=precision)
    if not prob[0] > TINY_PROB:
        raise UnderflowError("positive orthant probability below 1e-300")
    return TruncatedTMoments(float(prob[0]), m1[0], m2[0])
