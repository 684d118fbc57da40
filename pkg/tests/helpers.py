import math

import numpy as np
from scipy import integrate, optimize, special

from skewtmix.model import CfustParams, MixtureParams, derived
from skewtmix.specfun import bvn_cdf, correlation


def random_spd(rng, p, jitter=0.3):
    a = rng.standard_normal((p, p))
    return a @ a.T / p + jitter * np.eye(p)


def random_params(rng, p, q, nu_range=(3.0, 15.0), delta_scale=1.0):
    """Random CFUST component with moderate skewness and heavy-ish tails."""
    return CfustParams(
        mu=rng.normal(scale=0.5, size=p),
        sigma=random_spd(rng, p),
        delta=rng.normal(scale=delta_scale, size=(p, q)),
        nu=float(rng.uniform(*nu_range)),
    )


def two_component_model(p=2, q=2, sep=6.0, nu=(8.0, 12.0)):
    """Well-separated two-component mixture used by fitting tests."""
    c1 = CfustParams(np.zeros(p), np.eye(p), np.eye(p, q) * 1.5, nu[0])
    c2 = CfustParams(np.full(p, sep), 0.6 * np.eye(p) + 0.2, -np.eye(p, q)[:, ::-1] * 1.2,
                     nu[1])
    return MixtureParams(np.array([0.6, 0.4]), (c1, c2))


def recovery_model():
    """Two tight, strongly skewed components with separated locations.

    Small scale relative to skewness keeps the location well identified,
    which matters for any check on fitted mu.
    """
    c1 = CfustParams([0.0, 0.0], [[0.04, 0.01], [0.01, 0.04]], -1.5 * np.eye(2), 10.0)
    c2 = CfustParams([5.0, 5.0], [[0.03, -0.01], [-0.01, 0.03]], [[1.5, 0.5], [0.0, 1.5]], 15.0)
    return MixtureParams(np.array([0.6, 0.4]), (c1, c2))


def elogw_reference(y, par):
    """E[log W | y] for one component by one-dimensional quadrature in log w.

    Only q <= 2 is supported.  Given w, the conditional density of y is a
    normal kernel times the orthant probability Phi_q(sqrt(w) x) with
    x = Delta' Omega^-1 (y - mu) scaled by the standard deviations of Lambda.
    """
    dq = derived(par)
    diff = np.asarray(y, dtype=float) - par.mu
    d = float(diff @ dq.omega_inv @ diff)
    sd, corr = correlation(dq.lam)
    x = (par.delta.T @ dq.omega_inv @ diff) / sd
    nu, p = par.nu, par.p
    if par.q > 2:
        raise ValueError("reference supports q <= 2")

    def log_kernel(t):
        w = math.exp(t)
        arg = math.sqrt(w) * x
        if par.q == 1:
            log_phi = float(special.log_ndtr(arg[0]))
        else:
            val = float(bvn_cdf(arg[0], arg[1], corr[0, 1]))
            log_phi = math.log(val) if val > 0 else -math.inf
        return 0.5 * (nu + p) * t - 0.5 * w * (nu + d) + log_phi

    res = optimize.minimize_scalar(lambda t: -log_kernel(t), bounds=(-40.0, 10.0),
                                   method="bounded")
    t0, top = res.x, -res.fun

    def moment(k):
        f = lambda t: math.exp(log_kernel(t) - top) * t ** k  # noqa: E731
        return integrate.quad(f, t0 - 30, t0 + 30, points=[t0], limit=400,
                              epsabs=0, epsrel=1e-12)[0]

    return moment(1) / moment(0)
