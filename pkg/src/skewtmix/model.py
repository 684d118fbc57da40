"""The CFUST distribution: parameters, log-densities, mixtures and sampling."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, stdtr

from .specfun import (
    DEFAULT_PRECISION,
    TINY_PROB,
    CdfPrecision,
    correlation,
    df_profile,
    mvt_logpdf,
)

__all__ = [
    "CfustParams",
    "DerivedQuantities",
    "MixtureParams",
    "SkewStructure",
    "cfust_logpdf",
    "component_terms",
    "derived",
    "load_model",
    "make_delta",
    "mixture_logpdf",
    "model_from_dict",
    "model_to_dict",
    "rmst_logpdf",
    "sample_cfust",
    "sample_mixture",
    "save_model",
    "umst_logpdf",
]


class SkewStructure(enum.Enum):
    FULL = "full"
    DIAGONAL = "diagonal"
    SINGLE_COLUMN = "single-column"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown skew structure {value!r}")


def _spd_check(mat, name):
    try:
        linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{name} is not symmetric positive definite") from exc


@dataclass(frozen=True, eq=False)
class CfustParams:
    """Parameters (mu, Sigma, Delta, nu) of one CFUST component."""

    mu: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    nu: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).copy()
        p = mu.shape[0]
        sigma = np.asarray(self.sigma, dtype=float).reshape(p, p).copy()
        delta = np.asarray(self.delta, dtype=float)
        delta = delta.reshape(p, -1).copy() if delta.size else np.zeros((p, 1))
        if mu.ndim != 1:
            raise ValueError("mu must be a vector")
        if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        _spd_check(sigma, "sigma")
        nu = float(self.nu)
        if not nu > 0:
            raise ValueError("nu must be positive")
        for arr in (mu, sigma, delta):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "nu", nu)

    @property
    def p(self):
        return self.mu.shape[0]

    @property
    def q(self):
        return self.delta.shape[1]


@dataclass(frozen=True)
class DerivedQuantities:
    omega: np.ndarray
    omega_inv: np.ndarray
    lam: np.ndarray
    log_det_omega: float


def derived(params: CfustParams) -> DerivedQuantities:
    """Omega = Sigma + Delta Delta^T and Lambda = I_q - Delta^T Omega^{-1} Delta."""
    dl = params.delta
    omega = params.sigma + dl @ dl.T
    chol = linalg.cholesky(omega, lower=True)
    omega_inv = linalg.cho_solve((chol, True), np.eye(params.p))
    omega_inv = 0.5 * (omega_inv + omega_inv.T)
    lam = np.eye(params.q) - dl.T @ omega_inv @ dl
    lam = 0.5 * (lam + lam.T)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return DerivedQuantities(omega, omega_inv, lam, log_det)


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Mixing proportions and component parameters of a g-component mixture.

    Zero weights are accepted (a component that never fires); at least one
    weight must be positive and the weights must sum to one within 1e-12.
    """

    weights: np.ndarray
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        comps = tuple(self.components)
        if len(comps) != weights.size or not comps:
            raise ValueError("need one weight per component")
        if np.any(weights < 0) or not np.any(weights > 0):
            raise ValueError("weights must be nonnegative with at least one positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        p, q = comps[0].p, comps[0].q
        if any(c.p != p or c.q != q for c in comps):
            raise ValueError("components must share p and q")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", comps)

    @property
    def g(self):
        return len(self.components)

    @property
    def p(self):
        return self.components[0].p

    @property
    def q(self):
        return self.components[0].q


def make_delta(structure, delta_vec, q=None):
    """Expand a skewness vector into the p x q matrix of a structure.

    Single-column gives ``[delta 0 ... 0]`` with ``q`` columns (default 1);
    diagonal gives ``diag(delta)``; full returns the matrix unchanged.
    """
    structure = SkewStructure.parse(structure)
    arr = np.asarray(delta_vec, dtype=float)
    if structure is SkewStructure.FULL:
        if arr.ndim != 2:
            raise ValueError("full structure expects a p x q matrix")
        return arr.copy()
    if arr.ndim != 1:
        raise ValueError("expected a skewness vector")
    if structure is SkewStructure.DIAGONAL:
        if q is not None and q != arr.size:
            raise ValueError("diagonal structure requires q = p")
        return np.diag(arr)
    out = np.zeros((arr.size, 1 if q is None else q))
    out[:, 0] = arr
    return out


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def component_terms(y, params: CfustParams, dq: DerivedQuantities | None = None):
    """Quantities shared by the density and the E-step for a batch of points.

    Returns a dict with the Mahalanobis distances ``d`` under Omega, the
    skewing projections ``qv = (y - mu) Omega^{-1} Delta`` (n x q), the t_p
    log-density ``log_t`` and the standardized orthant arguments ``b`` such
    that the orthant probability at df ``nu + p + 2s`` is
    ``E[Phi_R(b sqrt(G))]`` with ``G ~ chi^2_{nu+p+2s}``.
    """
    dq = dq or derived(params)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    diff = y - params.mu
    proj = diff @ dq.omega_inv
    d = np.maximum(np.einsum("ij,ij->i", proj, diff), 0.0)
    qv = proj @ params.delta
    c = params.nu + d
    sd, corr = correlation(dq.lam)
    b = qv / (sd[None, :] * np.sqrt(c)[:, None])
    p = params.p
    log_t = (math.lgamma((params.nu + p) / 2) - math.lgamma(params.nu / 2)
             - 0.5 * p * math.log(params.nu * math.pi) - 0.5 * dq.log_det_omega
             - 0.5 * (params.nu + p) * np.log1p(d / params.nu))
    return {"d": d, "qv": qv, "c": c, "b": b, "corr": corr, "log_t": log_t, "dq": dq}


def cfust_logpdf(y, params: CfustParams, precision: CdfPrecision | None = None,
                 return_flag=False):
    """Log-density of the CFUST distribution.

    ``y`` is a p-vector or an (n, p) array.  Points whose orthant probability
    is at or below 1e-300 get ``-inf``; with ``return_flag`` a boolean array
    marking them is returned alongside the values.
    """
    precision = precision or DEFAULT_PRECISION
    y_arr = np.asarray(y, dtype=float)
    terms = component_terms(y_arr, params)
    prof = df_profile(terms["b"], terms["corr"], params.nu + params.p, 0, precision)
    prob = prof["values"][:, 0]
    flag = prob <= TINY_PROB
    with np.errstate(divide="ignore"):
        out = params.q * math.log(2.0) + terms["log_t"] + np.where(flag, -np.inf, np.log(prob))
    if y_arr.ndim == 1:
        out = float(out[0])
        flag = bool(flag[0])
    return (out, flag) if return_flag else out


def rmst_logpdf(y, mu, sigma, delta_vec, nu):
    """Log-density of the restricted skew t (one latent skewing variable)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    dv = np.asarray(delta_vec, dtype=float).reshape(-1)
    p = mu.size
    omega = sigma + np.outer(dv, dv)
    y_arr = np.asarray(y, dtype=float)
    diff = np.atleast_2d(y_arr) - mu
    oi_d = linalg.solve(omega, dv, assume_a="pos")
    lam = 1.0 - dv @ oi_d
    qv = diff @ oi_d
    d = np.einsum("ij,ij->i", diff, linalg.solve(omega, diff.T, assume_a="pos").T)
    arg = qv / math.sqrt(lam) * np.sqrt((nu + p) / (nu + d))
    with np.errstate(divide="ignore"):
        out = math.log(2.0) + mvt_logpdf(diff + mu, mu, omega, nu) + np.log(stdtr(nu + p, arg))
    return float(out[0]) if y_arr.ndim == 1 else out


def umst_logpdf(y, mu, sigma, delta_vec, nu, precision=None):
    """Log-density of the unrestricted skew t (diagonal skewness matrix).

    Evaluated from its own closed form with ``Omega = Sigma + D^2``,
    ``q(y) = D Omega^{-1} (y - mu)`` and ``Lambda = I - D Omega^{-1} D``.
    """
    precision = precision or DEFAULT_PRECISION
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    dmat = np.diag(np.asarray(delta_vec, dtype=float).reshape(-1))
    p = mu.size
    omega = sigma + dmat @ dmat
    omega_inv = linalg.inv(omega)
    y_arr = np.asarray(y, dtype=float)
    diff = np.atleast_2d(y_arr) - mu
    qv = diff @ omega_inv @ dmat
    d = np.einsum("ij,jk,ik->i", diff, omega_inv, diff)
    lam = np.eye(p) - dmat @ omega_inv @ dmat
    lam = 0.5 * (lam + lam.T)
    sd, corr = correlation(lam)
    b = qv / (sd[None, :] * np.sqrt(nu + d)[:, None])
    prob = df_profile(b, corr, nu + p, 0, precision)["values"][:, 0]
    with np.errstate(divide="ignore"):
        out = p * math.log(2.0) + mvt_logpdf(diff + mu, mu, omega, nu) + np.log(prob)
    return float(out[0]) if y_arr.ndim == 1 else out


def mixture_component_logpdfs(y, psi: MixtureParams, precision=None):
    """(n, g) array of log pi_h + log f_h(y_j)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    cols = []
    with np.errstate(divide="ignore"):
        for wt, comp in zip(psi.weights, psi.components):
            cols.append(math.log(wt) + cfust_logpdf(y, comp, precision) if wt > 0
                        else np.full(y.shape[0], -np.inf))
    return np.stack(cols, axis=1)


def mixture_logpdf(y, psi: MixtureParams, precision=None):
    """Log-density of a finite CFUST mixture via log-sum-exp."""
    y_arr = np.asarray(y, dtype=float)
    out = logsumexp(mixture_component_logpdfs(y_arr, psi, precision), axis=1)
    return float(out[0]) if y_arr.ndim == 1 else out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _draw(params: CfustParams, n, rng):
    w = rng.gamma(params.nu / 2, 2.0 / params.nu, size=n)
    scale = 1.0 / np.sqrt(w)
    u0 = rng.standard_normal((n, params.q)) * scale[:, None]
    chol = linalg.cholesky(params.sigma, lower=True)
    u1 = (rng.standard_normal((n, params.p)) @ chol.T) * scale[:, None]
    u = np.abs(u0)
    return params.mu + u @ params.delta.T + u1, u, w


def sample_cfust(params: CfustParams, n, seed=None, return_latent=False):
    """Draw ``n`` points from the stochastic representation.

    ``w ~ Gamma(nu/2, rate nu/2)``, ``U0 ~ N_q(0, I/w)``, ``U1 ~ N_p(0, Sigma/w)``
    and ``Y = mu + Delta |U0| + U1``.  With ``return_latent`` the tuple
    ``(y, u, w)`` is returned, where ``u = |U0|``.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    y, u, w = _draw(params, int(n), rng)
    return (y, u, w) if return_latent else y


def sample_mixture(psi: MixtureParams, n, seed=None):
    """Ancestral sampling; returns ``(y, labels)`` with labels in ``0..g-1``."""
    rng = np.random.default_rng(seed)
    n = int(n)
    if psi.g == 1:
        y, _, _ = _draw(psi.components[0], n, rng)
        return y, np.zeros(n, dtype=int)
    labels = rng.choice(psi.g, size=n, p=psi.weights)
    y = np.empty((n, psi.p))
    for h, comp in enumerate(psi.components):
        idx = np.flatnonzero(labels == h)
        if idx.size:
            y[idx], _, _ = _draw(comp, idx.size, rng)
    return y, labels


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_dict(psi: MixtureParams):
    return {
        "p": psi.p,
        "q": psi.q,
        "g": psi.g,
        "weights": [float(w) for w in psi.weights],
        "components": [
            {
                "mu": [float(v) for v in c.mu],
                "sigma": [float(v) for v in c.sigma.ravel()],
                "delta": [float(v) for v in c.delta.ravel()],
                "nu": float(c.nu),
            }
            for c in psi.components
        ],
    }


def model_from_dict(doc) -> MixtureParams:
    try:
        p, q, g = int(doc["p"]), int(doc["q"]), int(doc["g"])
        comps = []
        for entry in doc["components"]:
            comps.append(CfustParams(
                mu=np.array(entry["mu"], dtype=float).reshape(p),
                sigma=np.array(entry["sigma"], dtype=float).reshape(p, p),
                delta=np.array(entry["delta"], dtype=float).reshape(p, q),
                nu=float(entry["nu"]),
            ))
        weights = np.array(doc["weights"], dtype=float)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model document: {exc}") from exc
    if len(comps) != g:
        raise ValueError("component count does not match g")
    return MixtureParams(weights, tuple(comps))


def save_model(psi: MixtureParams, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(psi), fh, indent=2)
        fh.write("\n")


def load_model(path) -> MixtureParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "model" in doc and "components" not in doc:
        doc = doc["model"]
    return model_from_dict(doc)
