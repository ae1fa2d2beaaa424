"""Joint log posterior over the unconstrained coordinate vector, with gradient.

log p(z | y) = log-likelihood
             + random-effect log prior
             + Cauchy / half-Cauchy log priors on (alpha, beta, sd)
             + log |Jacobian| of z -> (alpha, beta, sd)

Everything is vectorized over records; the gradient is hand-derived.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.special import log_expit

from . import _kernels
from . import distributions as dist
from .data import DesignMatrix, PanelDataset
from .model import (FIXED, MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL, TWO_LEVEL_BRIDGE, Layout,
                    ModelError, ModelSpec, ParameterState, from_unconstrained)

_K = 3.0 / math.pi ** 2
_LOG2 = math.log(2.0)
# Effect sd below about 8e-4 (phi this close to one) is treated as excluded: the
# Bridge density there degenerates and cos(phi*pi) carries little precision.
PHI_MAX = 1.0 - 1e-7


class PosteriorTerms(NamedTuple):
    loglik: float
    re_prior: float
    param_prior: float
    log_jacobian: float

    @property
    def total(self) -> float:
        return self.loglik + self.re_prior + self.param_prior + self.log_jacobian


class PosteriorTarget:
    """Log posterior of one model family on one dataset.

    Immutable after construction; evaluation methods are pure.
    """

    def __init__(self, ds: PanelDataset, X: DesignMatrix, spec: ModelSpec,
                 reparameterize: bool = True):
        if X.rows.shape[0] != ds.n_records:
            raise ModelError("design rows do not match the dataset")
        if int(ds.outcomes.max(initial=1)) > spec.categories:
            raise ModelError("dataset has more outcome categories than the model")
        self.spec = spec
        self.dataset = ds
        self.design = X
        self.layout = Layout.for_data(spec, ds, X)
        self.X = np.ascontiguousarray(X.rows, dtype=float)
        self.y = ds.outcomes.copy()
        self.fam = ds.family_codes.copy()
        self.ind = ds.individual_codes.copy()
        self.n_records = ds.n_records
        self._loc = spec.prior_location
        self._scale = spec.prior_scale
        self.reparameterize = bool(reparameterize) and spec.family != FIXED

    # -- helpers ----------------------------------------------------------
    @property
    def dimension(self) -> int:
        return self.layout.dimension

    @property
    def names(self) -> list[str]:
        return self.layout.names

    def params(self, z) -> ParameterState:
        return from_unconstrained(self.to_model(z), self.layout, self.dataset.family_keys,
                                  self.dataset.individual_keys)[0]

    # -- sampling coordinates ---------------------------------------------
    # With ``reparameterize`` the sampler works in coordinates that are close
    # to orthogonal for this model:
    #   * effects are standardized, u = sd_u * w_u and v = sd_v * w_v, which
    #     removes the funnel between a scale and its effects;
    #   * thresholds and coefficients are carried on the population-averaged
    #     scale, alpha = alpha_m / k and beta = beta_m / k, with k the product of
    #     phi(sd) over the scale parameters.  For Bridge families this is the
    #     exact attenuation factor, so (alpha_m, beta_m) barely move with phi.
    # The model's own unconstrained vector is recovered with ``to_model``.
    def _factors(self, z):
        sd = np.exp(z[..., self.layout.scale])
        phi2 = 1.0 / (1.0 + _K * sd * sd)
        log_k = 0.5 * np.sum(np.log(phi2), axis=-1)
        dlogk_ds = -_K * sd * sd * phi2
        return sd, log_k, dlogk_ds

    def to_model(self, z) -> np.ndarray:
        """Map sampling coordinates to the model's unconstrained vector."""
        z = np.array(z, dtype=float)
        if not self.reparameterize:
            return z
        L = self.layout
        sd, log_k, _ = self._factors(z)
        k = np.exp(log_k)[..., None]
        z[..., :1] /= k
        z[..., 1:L.n_alpha] -= log_k[..., None]
        z[..., L.beta] /= k
        z[..., L.u] *= sd[..., :1]
        z[..., L.v] *= sd[..., -1:]
        return z

    def from_model(self, z) -> np.ndarray:
        """Inverse of :meth:`to_model`."""
        z = np.array(z, dtype=float)
        if not self.reparameterize:
            return z
        L = self.layout
        sd, log_k, _ = self._factors(z)
        k = np.exp(log_k)[..., None]
        z[..., :1] *= k
        z[..., 1:L.n_alpha] += log_k[..., None]
        z[..., L.beta] *= k
        z[..., L.u] /= sd[..., :1]
        z[..., L.v] /= sd[..., -1:]
        return z

    def _reparam_log_jacobian(self, z) -> float:
        if not self.reparameterize:
            return 0.0
        L = self.layout
        log_sd = z[L.scale]
        _, log_k, _ = self._factors(z)
        return float(-(1 + L.n_beta) * log_k + L.n_u * log_sd[0] + L.n_v * log_sd[-1])

    def _reparam_grad(self, z, zc, gc):
        """Gradient in sampling coordinates from the model-coordinate gradient."""
        L = self.layout
        sd, log_k, dlogk_ds = self._factors(z)
        k = math.exp(log_k)
        g = gc.copy()
        g[0] = gc[0] / k
        g[L.beta] = gc[L.beta] / k
        # every scale coordinate moves alpha, beta through k
        through_k = -(gc[0] * zc[0] + np.sum(gc[1:L.n_alpha])
                      + np.dot(gc[L.beta], zc[L.beta]) + 1 + L.n_beta)
        g[L.scale] += dlogk_ds * through_k
        s_u, s_v = L.scale.start, L.scale.stop - 1
        g[s_u] += float(np.dot(gc[L.u], zc[L.u])) + L.n_u
        g[s_v] += float(np.dot(gc[L.v], zc[L.v])) + L.n_v
        g[L.u] = gc[L.u] * sd[0]
        g[L.v] = gc[L.v] * sd[-1]
        return g

    def _check(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.layout.dimension,):
            raise ModelError(f"expected vector of length {self.layout.dimension}, got {z.shape}")
        return z

    def _unpack(self, z):
        L = self.layout
        za = z[L.alpha]
        alpha = np.cumsum(np.concatenate([za[:1], np.exp(za[1:])]))
        beta = np.ascontiguousarray(z[L.beta])
        log_sd = z[L.scale]
        return za, alpha, beta, log_sd, np.ascontiguousarray(z[L.u]), np.ascontiguousarray(z[L.v])

    def _shift(self, beta, log_sd, u, v):
        fam = self.spec.family
        shift = self.X @ beta
        if fam == FIXED:
            return shift, 1.0
        e = 1.0
        if fam == MODIFIED_BRIDGE_BRIDGE:
            e = float(dist.phi_from_sd(math.exp(log_sd[1])))
        shift = shift + v[self.ind]
        if fam in (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL):
            shift = shift + u[self.fam] / e
        return shift, e

    @staticmethod
    def _category_tables(alpha):
        A = len(alpha) + 1
        ext = np.concatenate([[-np.inf], alpha, [np.inf]])
        gap = ext[1:] - ext[:-1]  # gap[y-1] for category y
        with np.errstate(over="ignore"):
            log_width = np.log(-np.expm1(-gap))
            inv = 1.0 / np.expm1(gap)
        # index by 1-based category
        return ext, np.concatenate([[0.0], log_width]), np.concatenate([[0.0], inv]), A

    def _pointwise(self, alpha, shift):
        ext, log_width, _, _ = self._category_tables(alpha)
        hi = ext[self.y] - shift
        lo = ext[self.y - 1] - shift
        return log_width[self.y] + log_expit(hi) + log_expit(-lo)

    # -- value ------------------------------------------------------------
    def pointwise_loglik(self, z) -> np.ndarray:
        z = self.to_model(self._check(z))
        _, alpha, beta, log_sd, u, v = self._unpack(z)
        shift, _ = self._shift(beta, log_sd, u, v)
        return self._pointwise(alpha, shift)

    def terms(self, z) -> PosteriorTerms:
        z = self._check(z)
        extra_jac = self._reparam_log_jacobian(z)
        z = self.to_model(z)
        za, alpha, beta, log_sd, u, v = self._unpack(z)
        shift, _ = self._shift(beta, log_sd, u, v)
        loglik = float(np.sum(self._pointwise(alpha, shift)))
        re_prior = self._re_prior(log_sd, u, v)
        param_prior = float(np.sum(dist.cauchy_logpdf(alpha, self._loc, self._scale))
                            + np.sum(dist.cauchy_logpdf(beta, self._loc, self._scale))
                            + np.sum(dist.half_cauchy_logpdf(np.exp(log_sd), 0.0, self._scale)))
        log_jac = float(np.sum(za[1:]) + np.sum(log_sd)) + extra_jac
        return PosteriorTerms(loglik, re_prior, param_prior, log_jac)

    def _re_prior(self, log_sd, u, v) -> float:
        fam = self.spec.family
        if fam == FIXED:
            return 0.0
        sd = np.exp(log_sd)
        if fam == NORMAL_NORMAL:
            return float(np.sum(dist.normal_logpdf(u, 0.0, sd[0]))
                         + np.sum(dist.normal_logpdf(v, 0.0, sd[1])))
        phi = dist.phi_from_sd(sd)
        if fam == TWO_LEVEL_BRIDGE:
            return float(np.sum(dist.bridge_logpdf(v, phi[0])))
        return float(np.sum(dist.bridge_logpdf(u, phi[0])) + np.sum(dist.bridge_logpdf(v, phi[1])))

    def log_posterior(self, z) -> float:
        z = self._check(z)
        if not np.all(np.isfinite(z)):
            return -math.inf
        if self.spec.bridge:
            sd = np.exp(z[self.layout.scale])
            phi = 1.0 / np.sqrt(1.0 + _K * sd * sd)
            if not np.all((phi > 0.0) & (phi < PHI_MAX)):
                return -math.inf
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val = self.terms(z).total
        except dist.DistributionError:
            return -math.inf
        return val if math.isfinite(val) else -math.inf

    # -- gradient ---------------------------------------------------------
    def grad_log_posterior(self, z) -> np.ndarray:
        return self.value_and_grad(z)[1]

    def value_and_grad(self, z):
        z = self._check(z)
        if not np.all(np.isfinite(z)):
            return -math.inf, np.full(z.shape, np.nan)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if not self.reparameterize:
                return self._value_and_grad(z)
            zc = self.to_model(z)
            val, gc = self._value_and_grad(zc)
            return val + self._reparam_log_jacobian(z), self._reparam_grad(z, zc, gc)

    def _value_and_grad(self, z):
        L = self.layout
        fam = self.spec.family
        za, alpha, beta, log_sd, u, v = self._unpack(z)
        loc, scl = self._loc, self._scale
        grad = np.zeros(L.dimension)

        sd = np.exp(log_sd)
        phi = None
        e = 1.0
        if self.spec.bridge:
            q = np.sqrt(1.0 + _K * sd * sd)
            phi = 1.0 / q
            omega = _K * sd * sd / (q * (1.0 + q))
            if not np.all((phi > 0.0) & (phi < PHI_MAX)):
                return -math.inf, np.full(L.dimension, np.nan)
            if fam == MODIFIED_BRIDGE_BRIDGE:
                e = float(phi[1])

        g_alpha = np.zeros(L.n_alpha)
        g_beta = grad[L.beta]
        g_u = np.zeros(L.n_u)
        g_v = np.zeros(L.n_v)
        loglik = _kernels.ordinal_loglik_grad(
            alpha, self.X, beta, self.y, self.fam, self.ind,
            u, v, 1.0 / e,
            L.n_u > 0, L.n_v > 0, g_alpha, g_beta, g_u, g_v)
        if loglik == -math.inf:
            return -math.inf, np.full(L.dimension, np.nan)

        param_prior = _kernels.cauchy_terms(alpha, loc, scl, g_alpha)
        param_prior += _kernels.cauchy_terms(beta, loc, scl, g_beta)
        # alpha_a = z_1 + sum_{k=2..a} exp(z_k)
        tail = np.cumsum(g_alpha[::-1])[::-1]
        grad[0] = tail[0]
        grad[1:L.n_alpha] = np.exp(za[1:]) * tail[1:] + 1.0
        log_jac = float(np.sum(za[1:]))
        re_prior = 0.0

        if fam != FIXED:
            g_sd = np.zeros(len(sd))
            param_prior += _kernels.cauchy_terms(sd, 0.0, scl, g_sd) + len(sd) * _LOG2
            log_jac += float(np.sum(log_sd))
            # d/ds [log halfCauchy(e^s)] + d/ds [s]
            g_scale = g_sd * sd + 1.0

            if fam == NORMAL_NORMAL:
                su, sv = sd
                re_prior = float(np.sum(dist.normal_logpdf(u, 0.0, su))
                                 + np.sum(dist.normal_logpdf(v, 0.0, sv)))
                grad[L.u] = g_u - u / su ** 2
                grad[L.v] = g_v - v / sv ** 2
                g_scale[0] += np.dot(u, u) / su ** 2 - len(u)
                g_scale[1] += np.dot(v, v) / sv ** 2 - len(v)
            else:
                dphi_ds = -_K * sd * sd * phi ** 3
                phi_v = float(phi[-1])
                re_v, g_phi_v = _kernels.bridge_terms(v, phi_v, float(omega[-1]), g_v)
                re_prior = re_v
                grad[L.v] = g_v
                if fam == MODIFIED_BRIDGE_BRIDGE:
                    # b = u / phi_v + v
                    g_phi_v -= float(np.dot(g_u, u)) / phi_v ** 2
                    g_u_total = g_u / e
                    re_u, g_phi_u = _kernels.bridge_terms(u, float(phi[0]), float(omega[0]),
                                                          g_u_total)
                    re_prior += re_u
                    grad[L.u] = g_u_total
                    g_scale[0] += g_phi_u * dphi_ds[0]
                g_scale[-1] += g_phi_v * dphi_ds[-1]
            grad[L.scale] = g_scale

        total = loglik + re_prior + param_prior + log_jac
        if not math.isfinite(total):
            return -math.inf, grad
        return total, grad
