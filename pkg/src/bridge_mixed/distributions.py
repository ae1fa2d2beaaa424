"""Probability kernels used by the cumulative-logit mixed models.

Bridge(phi) is the random-effect law under which integrating a logistic
CDF over the random effect returns another logistic CDF with its argument
scaled by ``phi``.  The Modified Bridge law is that of ``Y / phi_z`` with
``Y ~ Bridge(phi_y)``.

All functions accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

LOG_2PI = math.log(2.0 * math.pi)
_COSH_SWITCH = 30.0
_VAR_CONST = math.pi ** 2 / 3.0


class DistributionError(ValueError):
    """Raised for parameters outside the support of a distribution."""


def _check_phi(phi, name="phi"):
    arr = np.asarray(phi, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise DistributionError(f"{name} must lie in (0, 1), got {phi!r}")
    return arr


def _log_cosh_plus_cos(y, c):
    """log(cosh(y) + c) for |c| < 1, without overflow for large |y|."""
    y = np.asarray(y, dtype=float)
    a = np.abs(y)
    small = a <= _COSH_SWITCH
    a_small = np.where(small, a, 0.0)
    direct = np.log(np.cosh(a_small) + c)
    ea = np.exp(-a)
    far = a - math.log(2.0) + np.log1p(ea * ea + 2.0 * c * ea)
    return np.where(small, direct, far)


def _sinh_over_cosh_plus_cos(y, c):
    """sinh(y) / (cosh(y) + c), stable for all finite y."""
    y = np.asarray(y, dtype=float)
    ea = np.exp(-np.abs(y))
    return np.sign(y) * (1.0 - ea * ea) / (1.0 + ea * ea + 2.0 * c * ea)


# ----------------------------------------------------------------------------
# Bridge
# ----------------------------------------------------------------------------

def bridge_logpdf(x, phi):
    """Log-density of Bridge(phi) for the logit link."""
    phi = _check_phi(phi)
    c = np.cos(phi * math.pi)
    return (np.log(np.sin(phi * math.pi)) - LOG_2PI
            - _log_cosh_plus_cos(phi * np.asarray(x, dtype=float), c))


def bridge_pdf(x, phi):
    return np.exp(bridge_logpdf(x, phi))


def bridge_dlogpdf_dx(x, phi):
    phi = _check_phi(phi)
    c = np.cos(phi * math.pi)
    return -phi * _sinh_over_cosh_plus_cos(phi * np.asarray(x, dtype=float), c)


def bridge_dlogpdf_dphi(x, phi):
    """Derivative of :func:`bridge_logpdf` with respect to ``phi``."""
    phi = _check_phi(phi)
    x = np.asarray(x, dtype=float)
    c = np.cos(phi * math.pi)
    s = np.sin(phi * math.pi)
    y = phi * x
    # d/dphi log(cosh(phi x) + cos(phi pi)) = (x sinh - pi sin) / (cosh + cos)
    ratio = _sinh_over_cosh_plus_cos(y, c)
    inv_den = np.exp(-_log_cosh_plus_cos(y, c))
    return math.pi * c / s - (x * ratio - math.pi * s * inv_den)


def bridge_cdf(x, phi):
    """Closed-form CDF, 1/2 + arctan(tanh(phi x / 2) tan(phi pi / 2)) / (pi phi)."""
    phi = _check_phi(phi)
    x = np.asarray(x, dtype=float)
    return 0.5 + np.arctan(np.tanh(0.5 * phi * x) * np.tan(0.5 * phi * math.pi)) / (math.pi * phi)


def bridge_quantile(p, phi):
    phi = _check_phi(phi)
    p = np.asarray(p, dtype=float)
    if not np.all((p > 0.0) & (p < 1.0)):
        raise DistributionError("probabilities must lie in (0, 1)")
    t = np.tan(math.pi * phi * (p - 0.5)) / np.tan(0.5 * phi * math.pi)
    return 2.0 * np.arctanh(t) / phi


def bridge_sample(rng: np.random.Generator, phi, count: int) -> np.ndarray:
    """Inverse-CDF draws from Bridge(phi)."""
    _check_phi(phi)
    if count < 1:
        raise ValueError("count must be >= 1")
    u = rng.random(count)
    # rng.random is on [0, 1); 0 has probability 2**-53 but must be excluded
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return bridge_quantile(u, phi)


def bridge_variance(phi):
    phi = _check_phi(phi)
    return _VAR_CONST * (phi ** -2 - 1.0)


def bridge_sd(phi):
    return np.sqrt(bridge_variance(phi))


def phi_from_sd(sd):
    """Inverse of :func:`bridge_sd`."""
    sd = np.asarray(sd, dtype=float)
    if not np.all(sd > 0.0):
        raise DistributionError("standard deviation must be positive")
    return 1.0 / np.sqrt(1.0 + sd * sd / _VAR_CONST)


# ----------------------------------------------------------------------------
# Modified Bridge: X = Y / phi_z, Y ~ Bridge(phi_y)
# ----------------------------------------------------------------------------

def _check_divisor(phi_z):
    # phi_z = 1 is allowed and gives back the plain Bridge law
    arr = np.asarray(phi_z, dtype=float)
    if not np.all((arr > 0.0) & (arr <= 1.0)):
        raise DistributionError(f"phi_z must lie in (0, 1], got {phi_z!r}")
    return arr


def modified_bridge_logpdf(x, phi_y, phi_z):
    phi_y = _check_phi(phi_y, "phi_y")
    phi_z = _check_divisor(phi_z)
    return np.log(phi_z) + bridge_logpdf(phi_z * np.asarray(x, dtype=float), phi_y)


def modified_bridge_variance(phi_y, phi_z):
    phi_z = _check_divisor(phi_z)
    return bridge_variance(phi_y) / phi_z ** 2


def modified_bridge_sample(rng: np.random.Generator, phi_y, phi_z, count: int) -> np.ndarray:
    phi_z = _check_divisor(phi_z)
    return bridge_sample(rng, phi_y, count) / phi_z


# ----------------------------------------------------------------------------
# Priors and other kernels
# ----------------------------------------------------------------------------

def normal_logpdf(x, loc=0.0, scale=1.0):
    z = (np.asarray(x, dtype=float) - loc) / scale
    return -0.5 * z * z - np.log(scale) - 0.5 * LOG_2PI


def normal_dlogpdf_dx(x, loc=0.0, scale=1.0):
    return -(np.asarray(x, dtype=float) - loc) / scale ** 2


def cauchy_logpdf(x, loc=0.0, scale=1.0):
    z = (np.asarray(x, dtype=float) - loc) / scale
    return -math.log(math.pi) - np.log(scale) - np.log1p(z * z)


def cauchy_dlogpdf_dx(x, loc=0.0, scale=1.0):
    d = np.asarray(x, dtype=float) - loc
    return -2.0 * d / (scale * scale + d * d)


def half_cauchy_logpdf(x, loc=0.0, scale=1.0):
    """Cauchy folded at ``loc``; -inf below the location."""
    x = np.asarray(x, dtype=float)
    val = math.log(2.0) + cauchy_logpdf(x, loc, scale)
    return np.where(x >= loc, val, -np.inf)


def prior_logpdf(kind: str, x, location=0.0, scale=5.0):
    if not scale > 0:
        raise DistributionError("prior scale must be positive")
    if kind == "cauchy":
        return cauchy_logpdf(x, location, scale)
    if kind == "half_cauchy":
        return half_cauchy_logpdf(x, location, scale)
    if kind == "normal":
        return normal_logpdf(x, location, scale)
    raise DistributionError(f"unknown prior kind {kind!r}")


def logistic_cdf(x):
    return expit(x)


def log_expit(x):
    """log(1 / (1 + exp(-x))) computed stably."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)
