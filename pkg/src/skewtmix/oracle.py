"""Brute-force references: importance sampling, rejection sampling, quadrature.

These are deliberately simple and slow.  They share no numerical code with
the E-step beyond the parameter containers and the log-density being
integrated, so agreement between the two is meaningful.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import CfustParams, cfust_logpdf, sample_cfust

__all__ = [
    "LowAcceptanceError",
    "OracleEstimate",
    "density_normalization_quadrature",
    "posterior_expectations_mc",
    "truncated_moments_mc",
]

BLOCK = 1 << 14


class LowAcceptanceError(RuntimeError):
    """Rejection sampler accepted too few draws to be trusted."""


@dataclass(frozen=True)
class OracleEstimate:
    value: np.ndarray | float
    std_error: np.ndarray | float
    n_samples: int


def _blocks(n_samples, seed):
    n_blocks = -(-n_samples // BLOCK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    for k, child in enumerate(children):
        size = min(BLOCK, n_samples - k * BLOCK)
        yield size, np.random.default_rng(child)


def posterior_expectations_mc(y, params: CfustParams, n_samples=100_000, seed=0):
    """Self-normalized importance sampling of the latent posterior moments.

    Draws ``(w, u)`` from their prior, ``w ~ Gamma(nu/2, rate nu/2)`` and
    ``u = |N_q(0, I/w)|``, and weights each draw by the normal density of
    ``y`` given ``(u, w)``.  Returns a dict with OracleEstimates under keys
    ``w`` (E[W|y]), ``log_w`` (E[log W|y]), ``wu`` (E[W U|y]) and ``wuu``
    (E[W U U^T|y]), plus ``ess`` and ``low_ess`` (ESS below 100).
    """
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    y = np.asarray(y, dtype=float).reshape(-1)
    p, q = params.p, params.q
    chol = linalg.cholesky(params.sigma, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    logw_parts, stats = [], []
    for size, rng in _blocks(n_samples, seed):
        w = rng.gamma(params.nu / 2, 2.0 / params.nu, size=size)
        u = np.abs(rng.standard_normal((size, q))) / np.sqrt(w)[:, None]
        resid = y - params.mu - u @ params.delta.T
        z = linalg.solve_triangular(chol, resid.T, lower=True)
        maha = np.sum(z * z, axis=0)
        logw_parts.append(0.5 * p * np.log(w) - 0.5 * w * maha - 0.5 * log_det)
        wu = w[:, None] * u
        wuu = (w[:, None, None] * u[:, :, None] * u[:, None, :]).reshape(size, q * q)
        stats.append(np.column_stack([w, np.log(w), wu, wuu]))
    logw = np.concatenate(logw_parts)
    f = np.concatenate(stats)
    wt = np.exp(logw - logw.max())
    wt /= wt.sum()
    est = wt @ f
    se = np.sqrt(np.sum((wt[:, None] * (f - est)) ** 2, axis=0))
    ess = 1.0 / np.sum(wt * wt)
    low = ess < 100
    if low:
        warnings.warn(f"importance sampling effective sample size {ess:.1f} < 100",
                      RuntimeWarning, stacklevel=2)

    def pick(sl, shape):
        return OracleEstimate(est[sl].reshape(shape), se[sl].reshape(shape), n_samples)

    return {
        "w": OracleEstimate(float(est[0]), float(se[0]), n_samples),
        "log_w": OracleEstimate(float(est[1]), float(se[1]), n_samples),
        "wu": pick(slice(2, 2 + q), (q,)),
        "wuu": pick(slice(2 + q, 2 + q + q * q), (q, q)),
        "ess": float(ess),
        "low_ess": bool(low),
    }


def truncated_moments_mc(center, scale, nu, n_samples=1_000_000, seed=0,
                         min_acceptance=1e-4):
    """Rejection sampling of t_q(center, scale, nu) restricted to X > 0.

    Returns ``(m1, m2)`` OracleEstimates; ``n_samples`` counts proposals.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    q = center.size
    chol = linalg.cholesky(scale, lower=True)
    kept = []
    for size, rng in _blocks(n_samples, seed):
        g = rng.chisquare(nu, size=size) / nu
        x = center + (rng.standard_normal((size, q)) @ chol.T) / np.sqrt(g)[:, None]
        kept.append(x[np.all(x > 0, axis=1)])
    x = np.concatenate(kept)
    n_acc = x.shape[0]
    if n_acc < max(2, min_acceptance * n_samples):
        raise LowAcceptanceError(
            f"acceptance {n_acc / n_samples:.2e} below {min_acceptance:g}; "
            "use the analytic truncated moments instead")
    outer = (x[:, :, None] * x[:, None, :]).reshape(n_acc, q * q)
    root_n = math.sqrt(n_acc)
    m1 = OracleEstimate(x.mean(axis=0), x.std(axis=0, ddof=1) / root_n, n_acc)
    m2 = OracleEstimate(outer.mean(axis=0).reshape(q, q),
                        (outer.std(axis=0, ddof=1) / root_n).reshape(q, q), n_acc)
    return m1, m2


def density_normalization_quadrature(params: CfustParams, n_grid=None, tail_prob=1e-5,
                                     n_draws=400_000, seed=0, precision=None):
    """Tensor-grid integral of the CFUST density over a sampler-derived box.

    The box spans the ``tail_prob`` and ``1 - tail_prob`` sample quantiles of
    each coordinate, widened by a quarter of its width.  Nodes are equispaced
    in ``t`` under ``x = m + s * sinh(t)`` (median ``m``, interquartile scale
    ``s``) so heavy tails are covered without wasting points in the bulk.
    """
    p = params.p
    if p > 2:
        raise ValueError("quadrature check supports p <= 2")
    n_grid = n_grid or (4001 if p == 1 else 201)
    draws = sample_cfust(params, n_draws, seed=seed)
    axes, jac = [], []
    for k in range(p):
        col = draws[:, k]
        lo, hi = np.quantile(col, [tail_prob, 1 - tail_prob])
        width = hi - lo
        lo, hi = lo - 0.25 * width, hi + 0.25 * width
        m = float(np.median(col))
        s = float(np.subtract(*np.quantile(col, [0.75, 0.25]))) / 2 or 1.0
        t = np.linspace(math.asinh((lo - m) / s), math.asinh((hi - m) / s), n_grid)
        wt = np.full(n_grid, t[1] - t[0])
        wt[[0, -1]] *= 0.5
        axes.append(m + s * np.sinh(t))
        jac.append(wt * s * np.cosh(t))
    if p == 1:
        dens = np.exp(cfust_logpdf(axes[0][:, None], params, precision))
        return float(dens @ jac[0])
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    dens = np.exp(cfust_logpdf(pts, params, precision)).reshape(gx.shape)
    return float(jac[0] @ dens @ jac[1])
