"""Generalized Gamma and skew-t response families with link functions.

The two parameterizations are recorded here because every fitted chart
artifact refers back to them.

GG(mu, sigma, nu): support y > 0, with mu > 0, sigma > 0, nu != 0.

    theta = 1 / (sigma^2 nu^2),  z = (y / mu)^nu
    f(y) = |nu| theta^theta z^theta exp(-theta z) / (Gamma(theta) y)

nu = 1 recovers a Gamma distribution with mean mu; mu acts as a scale, so
GG(1, 1, 1) is the unit exponential.

ST1(mu, sigma, nu, tau): support on all reals, with sigma > 0, tau > 0.

    z = (y - mu) / sigma
    f(y) = (2 / sigma) t_tau(z) T_{tau+1}(nu z sqrt((tau + 1) / (tau + z^2)))

where t_d and T_d are the density and CDF of a Student t with d degrees of
freedom. nu = 0 reduces exactly to a location-scale t with tau degrees of
freedom, and large tau approaches the skew normal 2/sigma phi(z) Phi(nu z).

All operations are pure functions of their arguments. Sampling takes an
explicit seed and is reproducible; the ST1 sampler uses the exact
normal/chi-square mixture representation of the skew t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import DomainError, NumericalError

_LOG2 = math.log(2.0)
# beyond this tail-weight the t kernels are numerically normal
_TAU_NORMAL = 1e8
_TINY_P = 1e-300


# ---------------------------------------------------------------------------
# links

def _ones_like(x):
    return np.ones_like(np.asarray(x, dtype=float))


class Link:
    """A named monotone transform with inverse and inverse-derivative."""

    def __init__(self, name, apply, invert, dinvert):
        self.name = name
        self.apply = apply
        self.invert = invert
        self.dinvert = dinvert  # d linkinv(eta) / d eta

    def __repr__(self):
        return f"Link({self.name!r})"


LINKS = {
    "identity": Link("identity", lambda x: np.asarray(x, dtype=float),
                     lambda e: np.asarray(e, dtype=float), _ones_like),
    "log": Link("log", np.log, np.exp, np.exp),
}


@dataclass(frozen=True)
class LinkSet:
    """Link names for the four distribution parameters."""

    mu: str = "identity"
    sigma: str = "log"
    nu: str = "identity"
    tau: str | None = "log"

    def __post_init__(self):
        for name in (self.mu, self.sigma, self.nu):
            if name not in LINKS:
                raise DomainError(f"unknown link {name!r}")
        if self.tau is not None and self.tau not in LINKS:
            raise DomainError(f"unknown link {self.tau!r}")

    @classmethod
    def defaults(cls, family: str) -> "LinkSet":
        if family == "GG":
            return cls(mu="log", sigma="log", nu="identity", tau=None)
        if family == "ST1":
            return cls(mu="identity", sigma="log", nu="identity", tau="log")
        raise DomainError(f"unknown family {family!r}")

    def link(self, param: str) -> Link:
        name = getattr(self, param)
        if name is None:
            raise DomainError(f"no link defined for parameter {param!r}")
        return LINKS[name]


# ---------------------------------------------------------------------------
# parameter container

FAMILIES = ("GG", "ST1")


@dataclass(frozen=True)
class FamilyParams:
    """Validated parameter bundle for one family.

    GG uses (mu, sigma, nu) and requires tau to be None; ST1 uses all four.
    """

    family: str
    mu: float
    sigma: float
    nu: float
    tau: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown family {self.family!r}")
        for name in ("mu", "sigma", "nu"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise DomainError(f"{name} must be a finite real, got {v!r}")
        if self.sigma <= 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.family == "GG":
            if self.tau is not None:
                raise DomainError("GG takes three parameters; tau must be None")
            if self.mu <= 0:
                raise DomainError(f"GG mu must be positive, got {self.mu}")
            if self.nu == 0:
                raise DomainError("GG nu must be nonzero")
        else:
            if self.tau is None or not math.isfinite(self.tau) or self.tau <= 0:
                raise DomainError(f"ST1 tau must be positive, got {self.tau}")


# ---------------------------------------------------------------------------
# generalized gamma kernels (vectorized; scalars broadcast)

def gg_logpdf(y, mu, sigma, nu):
    y = np.asarray(y, dtype=float)
    theta = 1.0 / (sigma * sigma * nu * nu)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logz = nu * (np.log(y) - np.log(mu))
        z = np.exp(logz)
        out = (np.log(np.abs(nu)) + theta * np.log(theta)
               - special.gammaln(theta) + theta * logz - theta * z - np.log(y))
    return out


def gg_score(y, mu, sigma, nu):
    """Per-observation d log f / d(mu, sigma, nu)."""
    y = np.asarray(y, dtype=float)
    theta = 1.0 / (sigma * sigma * nu * nu)
    u = np.log(y) - np.log(mu)
    logz = nu * u
    with np.errstate(over="ignore", invalid="ignore"):
        z = np.exp(logz)
        g = np.log(theta) + 1.0 - special.digamma(theta) + logz - z
        dmu = theta * nu / mu * (z - 1.0)
        dsigma = -2.0 * theta / sigma * g
        dnu = 1.0 / nu - 2.0 * theta / nu * g + theta * u * (1.0 - z)
    return dmu, dsigma, dnu


def gg_cdf(y, mu, sigma, nu):
    y = np.asarray(y, dtype=float)
    theta = 1.0 / (sigma * sigma * nu * nu)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        x = theta * np.exp(nu * (np.log(y) - np.log(mu)))
        p = special.gammainc(theta, x)
    return np.where(np.asarray(nu, dtype=float) > 0, p, 1.0 - p)


def gg_ppf(p, mu, sigma, nu):
    p = np.asarray(p, dtype=float)
    theta = 1.0 / (sigma * sigma * nu * nu)
    q = np.where(np.asarray(nu, dtype=float) > 0, p, 1.0 - p)
    g = special.gammaincinv(theta, q)
    with np.errstate(divide="ignore"):
        return np.exp(np.log(mu) + (np.log(g) - np.log(theta)) / nu)


def gg_sample(mu, sigma, nu, n, rng):
    """Draw via the Gamma transform y = mu (g / theta)^(1/nu), g ~ Gamma(theta, 1).

    The same transform covers nu < 0, where small Gamma draws map to the
    upper tail. Parameters may be scalars or length-n arrays.
    """
    theta = 1.0 / (np.asarray(sigma, dtype=float) ** 2 * np.asarray(nu, dtype=float) ** 2)
    g = rng.gamma(np.broadcast_to(theta, (n,)), 1.0)
    return np.asarray(mu) * np.exp((np.log(g) - np.log(theta)) / np.asarray(nu))


# ---------------------------------------------------------------------------
# skew-t kernels

def _t_logpdf(z, df):
    z = np.asarray(z, dtype=float)
    return (special.gammaln((df + 1.0) / 2.0) - special.gammaln(df / 2.0)
            - 0.5 * np.log(df * np.pi) - (df + 1.0) / 2.0 * np.log1p(z * z / df))


def _t_logcdf(x, df):
    if np.ndim(df) == 0 and df >= _TAU_NORMAL:
        return special.log_ndtr(np.asarray(x, dtype=float))
    p = special.stdtr(df, np.asarray(x, dtype=float))
    return np.log(np.maximum(p, _TINY_P))


def st1_logpdf(y, mu, sigma, nu, tau):
    y = np.asarray(y, dtype=float)
    z = (y - mu) / sigma
    nu_arr = np.asarray(nu, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        if np.ndim(tau) == 0 and tau >= _TAU_NORMAL:
            core = -0.5 * z * z - 0.5 * math.log(2.0 * math.pi)
            skew = special.log_ndtr(np.where(nu_arr == 0.0, 0.0, nu_arr * z))
            return _LOG2 - np.log(sigma) + core + skew
        d = tau + 1.0
        r = np.sqrt(d / (tau + z * z))
        w = np.where(nu_arr == 0.0, 0.0, nu_arr * z * r)
        return _LOG2 - np.log(sigma) + _t_logpdf(z, tau) + _t_logcdf(w, d)


def st1_score(y, mu, sigma, nu, tau):
    """Per-observation d log f / d(mu, sigma, nu, tau).

    The mu, sigma and nu components are closed-form. The tau component
    needs the derivative of the Student-t CDF in its degrees of freedom,
    which has no closed form; that single term uses a centered difference
    on the dof argument (all other tau terms stay analytic).
    """
    y = np.asarray(y, dtype=float)
    z = (y - mu) / sigma
    d = tau + 1.0
    s2 = tau + z * z
    r = np.sqrt(d / s2)
    nu_arr = np.asarray(nu, dtype=float)
    w = np.where(nu_arr == 0.0, 0.0, nu_arr * z * r)
    h = np.exp(_t_logpdf(w, d) - _t_logcdf(w, d))
    a = -(tau + 1.0) * z / s2
    dwdz = nu * r * tau / s2
    dmu = -(a + h * dwdz) / sigma
    dsigma = -1.0 / sigma - z * (a + h * dwdz) / sigma
    dnu = h * z * r
    dlt_dtau = (0.5 * (special.digamma((tau + 1.0) / 2.0) - special.digamma(tau / 2.0))
                - 0.5 / tau - 0.5 * np.log1p(z * z / tau)
                + (tau + 1.0) * z * z / (2.0 * tau * s2))
    dwdtau = w * (z * z - 1.0) / (2.0 * (tau + 1.0) * s2)
    step = 6e-6 * (1.0 + np.asarray(d, dtype=float))
    dlogT_ddf = (_t_logcdf(w, d + step) - _t_logcdf(w, d - step)) / (2.0 * step)
    dtau = dlt_dtau + dlogT_ddf + h * dwdtau
    return dmu, dsigma, dnu, dtau


def _st1_pdf_z(nu, tau):
    """Standardized density as a fast scalar closure for quadrature."""
    c = (special.gammaln((tau + 1.0) / 2.0) - special.gammaln(tau / 2.0)
         - 0.5 * math.log(tau * math.pi))
    d = tau + 1.0
    sq = math.sqrt(d)

    def pdf(u):
        logt = c - d / 2.0 * math.log1p(u * u / tau)
        w = nu * u * sq / math.sqrt(tau + u * u)
        t_cdf = special.stdtr(d, w)
        if t_cdf <= 0.0:
            return 0.0
        return 2.0 * math.exp(logt) * t_cdf

    return pdf


def st1_cdf_scalar(z, nu, tau):
    """CDF of the standardized ST1 at z by adaptive quadrature.

    Always integrates the nearer tail so the absolute error stays well
    below the 1e-8 round-trip budget.
    """
    if not math.isfinite(z):
        return 0.0 if z < 0 else 1.0
    if nu == 0.0:
        return float(special.stdtr(tau, z))
    pdf = _st1_pdf_z(nu, tau)
    if z <= 0.0:
        val, err = integrate.quad(pdf, -np.inf, z, epsabs=1e-12, epsrel=1e-10,
                                  limit=300)
        out = val
    else:
        val, err = integrate.quad(pdf, z, np.inf, epsabs=1e-12, epsrel=1e-10,
                                  limit=300)
        out = 1.0 - val
    if err > 1e-8:
        raise NumericalError(
            f"skew-t CDF quadrature error {err:.2e} at z={z}, nu={nu}, tau={tau}")
    return min(max(out, 0.0), 1.0)


def st1_cdf(y, mu, sigma, nu, tau):
    """Vectorized ST1 CDF; parameters may be scalars or arrays matching y."""
    y = np.asarray(y, dtype=float)
    z = (y - mu) / sigma
    zf, nuf, tauf = np.broadcast_arrays(z, nu, tau)
    flat_z = np.ravel(zf)
    flat_nu = np.ravel(nuf)
    flat_tau = np.ravel(tauf)
    out = np.empty(flat_z.shape, dtype=float)
    for i in range(flat_z.size):
        out[i] = st1_cdf_scalar(float(flat_z[i]), float(flat_nu[i]), float(flat_tau[i]))
    return out.reshape(zf.shape)


def _invert_monotone(f, lo, hi, flo, fhi, ptol=1e-10, xtol=1e-13, max_iter=200):
    """Safeguarded secant/bisection root find for increasing f with a bracket.

    Terminates when |f| <= ptol or the bracket collapses; raises on a bad
    bracket or iteration exhaustion.
    """
    if flo > 0.0 or fhi < 0.0:
        raise NumericalError(
            f"root bracketing failure: f({lo})={flo:.3e}, f({hi})={fhi:.3e}")
    a, b, fa, fb = lo, hi, flo, fhi
    for _ in range(max_iter):
        if fb != fa:
            x = b - fb * (b - a) / (fb - fa)
        else:
            x = 0.5 * (a + b)
        # fall back to bisection when secant leaves or crowds the bracket
        span = b - a
        if not (a + 0.01 * span <= x <= b - 0.01 * span):
            x = 0.5 * (a + b)
        fx = f(x)
        if abs(fx) <= ptol:
            return x
        if fx < 0.0:
            a, fa = x, fx
        else:
            b, fb = x, fx
        if b - a <= xtol * (1.0 + abs(x)):
            return x
    raise NumericalError(f"quantile iteration did not converge on [{a}, {b}]")


def st1_ppf_scalar(p, nu, tau):
    """Quantile of the standardized ST1 by bracketed secant/bisection."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if nu == 0.0:
        return float(special.stdtrit(tau, p))
    f = lambda u: st1_cdf_scalar(u, nu, tau) - p

    guess = float(special.stdtrit(tau, p))
    step = 1.0 + abs(guess)
    lo = hi = guess
    flo = fhi = f(guess)
    for _ in range(200):
        if flo <= 0.0:
            break
        hi, fhi = lo, flo
        lo -= step
        step *= 2.0
        flo = f(lo)
    else:
        raise NumericalError("could not bracket quantile from below")
    step = 1.0 + abs(guess)
    for _ in range(200):
        if fhi >= 0.0:
            break
        lo, flo = hi, fhi
        hi += step
        step *= 2.0
        fhi = f(hi)
    else:
        raise NumericalError("could not bracket quantile from above")
    return _invert_monotone(f, lo, hi, flo, fhi)


def st1_sample(mu, sigma, nu, tau, n, rng):
    """Draw via the exact mixture: skew-normal numerator over sqrt(chi2/tau).

    With delta = nu / sqrt(1 + nu^2), |Z0| delta + sqrt(1 - delta^2) Z1 is
    skew normal with shape nu, and dividing by sqrt(chi2_tau / tau) yields
    the skew t. Draw order: Z0, Z1, then the chi-square block.
    """
    z0 = rng.standard_normal(n)
    z1 = rng.standard_normal(n)
    g = rng.chisquare(np.broadcast_to(np.asarray(tau, dtype=float), (n,)))
    nu_arr = np.asarray(nu, dtype=float)
    delta = nu_arr / np.sqrt(1.0 + nu_arr * nu_arr)
    sn = delta * np.abs(z0) + np.sqrt(1.0 - delta * delta) * z1
    t = sn / np.sqrt(g / np.asarray(tau, dtype=float))
    return np.asarray(mu) + np.asarray(sigma) * t


# ---------------------------------------------------------------------------
# public single-distribution operations

def _check_gg_support(y):
    arr = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("GG support is y > 0")


def log_density(params: FamilyParams, y):
    if params.family == "GG":
        _check_gg_support(y)
        out = gg_logpdf(y, params.mu, params.sigma, params.nu)
    else:
        out = st1_logpdf(y, params.mu, params.sigma, params.nu, params.tau)
    return float(out) if np.ndim(y) == 0 else out


def density(params: FamilyParams, y):
    with np.errstate(under="ignore"):
        out = np.exp(log_density(params, y))
    return float(out) if np.ndim(y) == 0 else out


def cdf(params: FamilyParams, y):
    if params.family == "GG":
        _check_gg_support(y)
        out = gg_cdf(y, params.mu, params.sigma, params.nu)
    else:
        out = st1_cdf(y, params.mu, params.sigma, params.nu, params.tau)
    return float(out) if np.ndim(y) == 0 else out


def quantile(params: FamilyParams, p):
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    if params.family == "GG":
        out = gg_ppf(arr, params.mu, params.sigma, params.nu)
    else:
        flat = np.ravel(arr)
        vals = np.array([st1_ppf_scalar(float(q), params.nu, params.tau)
                         for q in flat])
        out = params.mu + params.sigma * vals.reshape(arr.shape)
    return float(out) if np.ndim(p) == 0 else out


def sample(params: FamilyParams, n: int, seed) -> np.ndarray:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise DomainError(f"sample size must be a positive integer, got {n}")
    rng = np.random.default_rng(seed)
    if params.family == "GG":
        return gg_sample(params.mu, params.sigma, params.nu, int(n), rng)
    return st1_sample(params.mu, params.sigma, params.nu, params.tau, int(n), rng)
