"""Compiled inner loops for the log posterior and its gradient."""
import math

import numpy as np
from numba import njit

_LOG2 = math.log(2.0)
_LOG2PI = math.log(2.0 * math.pi)


@njit(cache=True, inline="always")
def _log_expit_and_complement(x):
    """(log expit(x), expit(-x)) sharing one exponential."""
    if x >= 0.0:
        t = math.exp(-x)
        return -math.log1p(t), t / (1.0 + t)
    t = math.exp(x)
    return x - math.log1p(t), 1.0 / (1.0 + t)


@njit(cache=True)
def ordinal_loglik_grad(alpha, X, beta, y, fam, ind, u, v, inv_e, use_u, use_v,
                        g_alpha, g_beta, g_u, g_v):
    """Sum of record log-likelihoods; gradients are accumulated into the g_* arrays.

    ``g_u`` receives d loglik / d shift summed by family (not divided by e).
    """
    n, p = X.shape
    A = alpha.shape[0] + 1
    log_width = np.zeros(A)
    inv_gap = np.zeros(A)
    for k in range(1, A - 1):
        gap = alpha[k] - alpha[k - 1]
        if not gap > 0.0:  # threshold gap underflowed; outside the support
            return -math.inf
        log_width[k] = math.log(-math.expm1(-gap))
        inv_gap[k] = 1.0 / math.expm1(gap)
    total = 0.0
    for i in range(n):
        s = 0.0
        for j in range(p):
            s += X[i, j] * beta[j]
        if use_v:
            s += v[ind[i]]
        if use_u:
            s += u[fam[i]] * inv_e
        k = y[i] - 1  # 0-based category
        if k == 0:
            lh, ch = _log_expit_and_complement(alpha[0] - s)
            total += lh
            g_hi = ch
            g_lo = 0.0
        elif k == A - 1:
            ll, cl = _log_expit_and_complement(s - alpha[A - 2])
            total += ll
            g_hi = 0.0
            g_lo = -cl
        else:
            lh, ch = _log_expit_and_complement(alpha[k] - s)
            ll, cl = _log_expit_and_complement(s - alpha[k - 1])
            total += log_width[k] + lh + ll
            g_hi = ch + inv_gap[k]
            g_lo = -cl - inv_gap[k]
        r = -(g_hi + g_lo)
        if k < A - 1:
            g_alpha[k] += g_hi
        if k > 0:
            g_alpha[k - 1] += g_lo
        for j in range(p):
            g_beta[j] += r * X[i, j]
        if use_v:
            g_v[ind[i]] += r
        if use_u:
            g_u[fam[i]] += r
    return total


@njit(cache=True)
def bridge_terms(x, phi, omega, g_x):
    """Sum of Bridge(phi) log-densities at ``x``, with ``omega = 1 - phi``.

    ``omega`` is passed separately so that 1 + cos(phi pi) = 2 sin^2(pi omega / 2)
    keeps full precision as phi approaches one.
    Adds d/dx into ``g_x`` and returns (sum, sum of d/dphi).
    """
    s = math.sin(math.pi * omega)
    h = math.sin(0.5 * math.pi * omega)
    one_plus_c = 2.0 * h * h
    log_s = math.log(s)
    cot = -math.pi * math.cos(math.pi * omega) / s
    total = 0.0
    dphi = 0.0
    for i in range(x.shape[0]):
        xi = x[i]
        y = phi * xi
        a = abs(y)
        ea = math.exp(-a)
        m = math.expm1(-a)
        # cosh + cos = e^a / 2 * ((1 - e^-a)^2 + 2 (1 + cos) e^-a)
        den = m * m + 2.0 * one_plus_c * ea
        log_den = a - _LOG2 + math.log(den)
        ratio = -m * (1.0 + ea) / den
        if y < 0.0:
            ratio = -ratio
        inv_den = 2.0 * ea / den
        total += log_s - _LOG2PI - log_den
        g_x[i] += -phi * ratio
        dphi += cot - (xi * ratio - math.pi * s * inv_den)
    return total, dphi


@njit(cache=True)
def cauchy_terms(x, loc, scale, g_x):
    """Sum of Cauchy(loc, scale) log-densities; adds d/dx into ``g_x``."""
    const = -math.log(math.pi) - math.log(scale)
    total = 0.0
    for i in range(x.shape[0]):
        d = x[i] - loc
        total += const - math.log1p((d / scale) ** 2)
        g_x[i] += -2.0 * d / (scale * scale + d * d)
    return total
