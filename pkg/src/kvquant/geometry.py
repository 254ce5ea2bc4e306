"""Coordinate law of the uniform distribution on the unit sphere.

A single coordinate of a point drawn uniformly from S^{d-1} follows a
symmetric Beta((d-1)/2, (d-1)/2) law rescaled to [-1, 1].  For large d the
law approaches N(0, 1/d).  Everything downstream (codebooks, histogram
checks) is measured against these functions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

__all__ = [
    "beta_shape",
    "beta_log_norm",
    "beta_pdf",
    "beta_cdf",
    "beta_moment_partial",
    "gaussian_limit_pdf",
    "sample_unit_sphere",
]


def _check_dim(d: int) -> None:
    if int(d) != d or d < 2:
        raise ValueError(f"sphere dimension must be an integer >= 2, got {d!r}")


def _check_support(t: np.ndarray) -> None:
    if np.any(np.abs(t) > 1.0):
        raise ValueError("argument outside the support [-1, 1]")


def beta_shape(d: int) -> float:
    """Shape parameter alpha = beta = (d - 1) / 2 of the coordinate law."""
    _check_dim(d)
    return 0.5 * (d - 1)


def beta_log_norm(d: int) -> float:
    """log of Gamma(d/2) / (sqrt(pi) Gamma((d-1)/2)).

    Computed through log-gamma so that d = 1024 does not overflow.
    """
    _check_dim(d)
    return special.gammaln(0.5 * d) - 0.5 * math.log(math.pi) - special.gammaln(0.5 * (d - 1))


def beta_pdf(t, d: int):
    """Density of one coordinate of a uniform point on S^{d-1}.

    Parameters
    ----------
    t : float or array_like
        Evaluation points in [-1, 1].
    d : int
        Ambient dimension, d >= 2.

    Returns
    -------
    float or ndarray
        Density values.  For d = 2 (the arcsine law) the density diverges at
        the endpoints and ``inf`` is returned there.
    """
    _check_dim(d)
    t_arr = np.asarray(t, dtype=float)
    _check_support(t_arr)
    expo = 0.5 * (d - 3)
    one_minus = 1.0 - t_arr * t_arr
    with np.errstate(divide="ignore"):
        if expo == 0.0:
            logk = np.zeros_like(one_minus)
        else:
            logk = expo * np.log(one_minus)
    out = np.exp(beta_log_norm(d) + logk)
    if np.ndim(out) == 0:
        return float(out)
    return out


def beta_cdf(t, d: int):
    """Distribution function of the coordinate law.

    Uses the regularized incomplete beta function on (t + 1) / 2.
    """
    a = beta_shape(d)
    t_arr = np.asarray(t, dtype=float)
    _check_support(t_arr)
    out = special.betainc(a, a, 0.5 * (t_arr + 1.0))
    if np.ndim(out) == 0:
        return float(out)
    return out


def beta_moment_partial(lo, hi, d: int, k: int):
    """Partial moment E[X**k ; lo < X <= hi] for k in {0, 1, 2}.

    Closed forms: k = 0 is a CDF difference, k = 1 integrates
    t (1 - t^2)^((d-3)/2) exactly, and k = 2 expands X = 2U - 1 with
    U ~ Beta(a, a) and uses shifted incomplete beta functions.
    """
    a = beta_shape(d)
    lo = np.clip(np.asarray(lo, dtype=float), -1.0, 1.0)
    hi = np.clip(np.asarray(hi, dtype=float), -1.0, 1.0)
    ulo = 0.5 * (lo + 1.0)
    uhi = 0.5 * (hi + 1.0)
    if k == 0:
        return special.betainc(a, a, uhi) - special.betainc(a, a, ulo)
    if k == 1:
        # antiderivative of C t (1-t^2)^((d-3)/2) is -C (1-t^2)^((d-1)/2) / (d-1)
        c = math.exp(beta_log_norm(d)) / (d - 1)
        with np.errstate(invalid="ignore"):
            flo = np.power(np.maximum(1.0 - lo * lo, 0.0), 0.5 * (d - 1))
            fhi = np.power(np.maximum(1.0 - hi * hi, 0.0), 0.5 * (d - 1))
        return c * (flo - fhi)
    if k == 2:
        # E[U^j ; cell] = B(a+j, a)/B(a, a) * I(a+j, a)
        p0 = special.betainc(a, a, uhi) - special.betainc(a, a, ulo)
        m1 = a / (2 * a)
        m2 = a * (a + 1) / ((2 * a) * (2 * a + 1))
        p1 = m1 * (special.betainc(a + 1, a, uhi) - special.betainc(a + 1, a, ulo))
        p2 = m2 * (special.betainc(a + 2, a, uhi) - special.betainc(a + 2, a, ulo))
        return 4.0 * p2 - 4.0 * p1 + p0
    raise ValueError("only k in {0, 1, 2} is supported")


def gaussian_limit_pdf(t, d: int):
    """Density of N(0, 1/d), the large-d limit of :func:`beta_pdf`."""
    _check_dim(d)
    t_arr = np.asarray(t, dtype=float)
    out = math.sqrt(d / (2.0 * math.pi)) * np.exp(-0.5 * d * t_arr * t_arr)
    if np.ndim(out) == 0:
        return float(out)
    return out


def sample_unit_sphere(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform draws from S^{d-1} by normalizing standard normal vectors.

    Returns a vector of length ``d`` when ``size`` is None, otherwise an
    array of shape ``(size, d)``.
    """
    _check_dim(d)
    shape = (d,) if size is None else (size, d)
    g = rng.standard_normal(shape)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    # a zero draw has probability zero; resample defensively
    while np.any(norm == 0.0):
        bad = (norm == 0.0).reshape(-1)
        g.reshape(-1, d)[bad] = rng.standard_normal((int(bad.sum()), d))
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norm
