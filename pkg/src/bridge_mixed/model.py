"""Cumulative-logit likelihood with additive random effects.

    logit P(Y <= a | x, b) = alpha_a - x beta - b,      a = 1..A-1

The random effect of a record is ``b = u_star[family] / e + v[individual]``
with ``e = phi_v`` for the Bridge families and ``e = 1`` for Normal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import distributions as dist
from .data import DesignMatrix, PanelDataset, PanelRecord

MODIFIED_BRIDGE_BRIDGE = "modified_bridge_bridge"
NORMAL_NORMAL = "normal_normal"
TWO_LEVEL_BRIDGE = "two_level_bridge"
FIXED = "fixed"
FAMILIES = (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL, TWO_LEVEL_BRIDGE, FIXED)

# scale parameters carried by each family, in vector order
SCALE_NAMES = {
    MODIFIED_BRIDGE_BRIDGE: ("phi_u", "phi_v"),
    NORMAL_NORMAL: ("sigma_u", "sigma_v"),
    TWO_LEVEL_BRIDGE: ("phi_v",),
    FIXED: (),
}

FAMILY_LABELS = {
    MODIFIED_BRIDGE_BRIDGE: "Modified Bridge - Bridge",
    NORMAL_NORMAL: "Normal - Normal",
    TWO_LEVEL_BRIDGE: "Two-level Bridge",
    FIXED: "Fixed-effects",
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    categories: int = 3
    prior_location: float = 0.0
    prior_scale: float = 5.0
    proportional_odds: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.categories < 2:
            raise ModelError("need at least two categories")
        if not self.prior_scale > 0:
            raise ModelError("prior_scale must be positive")
        if not self.proportional_odds:
            raise ModelError("only proportional-odds models are supported")

    @property
    def has_family_effect(self) -> bool:
        return self.family in (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL)

    @property
    def has_individual_effect(self) -> bool:
        return self.family != FIXED

    @property
    def scale_names(self) -> tuple[str, ...]:
        return SCALE_NAMES[self.family]

    @property
    def bridge(self) -> bool:
        return self.family in (MODIFIED_BRIDGE_BRIDGE, TWO_LEVEL_BRIDGE)


@dataclass
class ParameterState:
    alpha: np.ndarray
    beta: np.ndarray
    scale: dict[str, float] = field(default_factory=dict)
    u_star: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    family_keys: tuple[str, ...] = ()
    individual_keys: tuple[str, ...] = ()

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.u_star = np.asarray(self.u_star, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.alpha.ndim != 1 or len(self.alpha) < 1:
            raise ModelError("alpha must be a nonempty vector")
        if np.any(np.diff(self.alpha) <= 0):
            raise ModelError("thresholds must be strictly increasing")
        for name, val in self.scale.items():
            if name.startswith("phi") and not 0.0 < val < 1.0:
                raise ModelError(f"{name} must lie in (0, 1)")
            if name.startswith("sigma") and not val > 0.0:
                raise ModelError(f"{name} must be positive")

    def family_divisor(self, family: str) -> float:
        """The ``e`` in U = U*/e."""
        return self.scale["phi_v"] if family == MODIFIED_BRIDGE_BRIDGE else 1.0


def _check_alpha(alpha):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(np.diff(alpha) <= 0):
        raise ModelError("thresholds must be strictly increasing")
    return alpha


def cumulative_probs(alpha, eta, b=0.0) -> np.ndarray:
    """Category probabilities, shape ``broadcast(eta, b).shape + (A,)``."""
    alpha = _check_alpha(alpha)
    shift = np.asarray(eta, dtype=float) + np.asarray(b, dtype=float)
    cum = dist.logistic_cdf(alpha - shift[..., None])
    upper = np.concatenate([cum, np.ones(shift.shape + (1,))], axis=-1)
    lower = np.concatenate([np.zeros(shift.shape + (1,)), cum], axis=-1)
    return upper - lower


def category_loglik(alpha, y, shift) -> np.ndarray:
    """log P(Y = y) with y 1-based, for linear shift ``eta + b``; vectorized.

    Uses expit(h) - expit(l) = (1 - exp(l - h)) expit(h) expit(-l).
    """
    alpha = np.asarray(alpha, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    shift = np.asarray(shift, dtype=float)
    A = len(alpha) + 1
    ext = np.concatenate([[-np.inf], alpha, [np.inf]])
    hi = ext[y] - shift
    lo = ext[y - 1] - shift
    out = np.zeros(np.broadcast(y, shift).shape)
    first = y == 1
    last = y == A
    mid = ~(first | last)
    out = np.where(first, dist.log_expit(np.where(first, hi, 0.0)), out)
    out = np.where(last, dist.log_expit(-np.where(last, lo, 0.0)), out)
    if np.any(mid):
        gap = ext[np.where(mid, y, 1)] - ext[np.where(mid, y - 1, 0)]
        gap = np.where(mid, gap, 1.0)
        h = np.where(mid, hi, 0.0)
        lw = np.where(mid, lo, 0.0)
        val = np.log(-np.expm1(-gap)) + dist.log_expit(h) + dist.log_expit(-lw)
        out = np.where(mid, val, out)
    return out


def _lookup(keys: Sequence[str], key: str, what: str) -> int:
    try:
        return list(keys).index(str(key))
    except ValueError:
        raise ModelError(f"unknown {what} key {key!r}") from None


def record_random_effect(record: PanelRecord, params: ParameterState, family: str) -> float:
    if family == FIXED:
        return 0.0
    b = float(params.v[_lookup(params.individual_keys, record.individual_id, "individual")])
    if family in (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL):
        u = params.u_star[_lookup(params.family_keys, record.family_id, "family")]
        b += float(u) / params.family_divisor(family)
    return b


def record_loglik(record: PanelRecord, x_row, params: ParameterState, family: str) -> float:
    A = len(params.alpha) + 1
    if not 1 <= record.outcome <= A:
        raise ModelError(f"outcome {record.outcome} outside 1..{A}")
    b = record_random_effect(record, params, family)
    eta = float(np.dot(np.asarray(x_row, dtype=float), params.beta))
    return float(category_loglik(params.alpha, record.outcome, eta + b))


def random_effects_per_record(ds: PanelDataset, params: ParameterState, family: str) -> np.ndarray:
    if family == FIXED:
        return np.zeros(ds.n_records)
    _check_keys(ds, params, family)
    b = params.v[ds.individual_codes]
    if family in (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL):
        b = b + params.u_star[ds.family_codes] / params.family_divisor(family)
    return b


def _check_keys(ds: PanelDataset, params: ParameterState, family: str):
    if len(params.v) != ds.n_individuals:
        raise ModelError("individual random effects do not match the dataset")
    if params.individual_keys and tuple(params.individual_keys) != ds.individual_keys:
        raise ModelError("individual keys do not match the dataset")
    if family in (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL):
        if len(params.u_star) != ds.n_families:
            raise ModelError("family random effects do not match the dataset")
        if params.family_keys and tuple(params.family_keys) != ds.family_keys:
            raise ModelError("family keys do not match the dataset")


def pointwise_loglik(ds: PanelDataset, X: DesignMatrix | np.ndarray, params: ParameterState,
                     family: str) -> np.ndarray:
    rows = X.rows if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if rows.shape[0] != ds.n_records:
        raise ModelError("design rows do not match the dataset")
    shift = rows @ params.beta + random_effects_per_record(ds, params, family)
    return category_loglik(params.alpha, ds.outcomes, shift)


def dataset_loglik(ds: PanelDataset, X: DesignMatrix | np.ndarray, params: ParameterState,
                   family: str) -> float:
    if ds.n_records == 0:
        return 0.0
    return float(np.sum(pointwise_loglik(ds, X, params, family)))


# ----------------------------------------------------------------------------
# unconstrained coordinates
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    """Positions of each parameter block in the unconstrained vector.

    Order: threshold coordinates, coefficients, log standard deviations of
    the random-effect laws, family effects ``u_star``, individual effects ``v``.
    """

    spec: ModelSpec
    n_beta: int
    n_families: int = 0
    n_individuals: int = 0
    beta_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.beta_names:
            object.__setattr__(self, "beta_names", tuple(f"x{k + 1}" for k in range(self.n_beta)))
        if len(self.beta_names) != self.n_beta:
            raise ModelError("beta_names length mismatch")

    @classmethod
    def for_data(cls, spec: ModelSpec, ds: PanelDataset, X: DesignMatrix) -> "Layout":
        return cls(spec, X.rows.shape[1], ds.n_families, ds.n_individuals, X.column_names)

    @property
    def n_alpha(self) -> int:
        return self.spec.categories - 1

    @property
    def n_scale(self) -> int:
        return len(self.spec.scale_names)

    @property
    def n_u(self) -> int:
        return self.n_families if self.spec.has_family_effect else 0

    @property
    def n_v(self) -> int:
        return self.n_individuals if self.spec.has_individual_effect else 0

    @property
    def alpha(self) -> slice:
        return slice(0, self.n_alpha)

    @property
    def beta(self) -> slice:
        return slice(self.n_alpha, self.n_alpha + self.n_beta)

    @property
    def scale(self) -> slice:
        s = self.n_alpha + self.n_beta
        return slice(s, s + self.n_scale)

    @property
    def u(self) -> slice:
        s = self.scale.stop
        return slice(s, s + self.n_u)

    @property
    def v(self) -> slice:
        s = self.u.stop
        return slice(s, s + self.n_v)

    @property
    def n_structural(self) -> int:
        return self.scale.stop

    @property
    def dimension(self) -> int:
        return self.v.stop

    @property
    def names(self) -> list[str]:
        """Names of unconstrained coordinates."""
        out = ["alpha1"] + [f"log_dalpha{a + 1}" for a in range(1, self.n_alpha)]
        out += [f"beta[{n}]" for n in self.beta_names]
        out += ["log_sd_" + n.split("_")[1] for n in self.spec.scale_names]
        out += [f"u_star[{i}]" for i in range(self.n_u)]
        out += [f"v[{j}]" for j in range(self.n_v)]
        return out

    @property
    def structural_names(self) -> list[str]:
        """Names of constrained structural parameters."""
        return ([f"alpha{a + 1}" for a in range(self.n_alpha)]
                + [f"beta[{n}]" for n in self.beta_names] + list(self.spec.scale_names))


def scale_to_sd(name: str, value):
    return dist.bridge_sd(value) if name.startswith("phi") else np.asarray(value, dtype=float)


def sd_to_scale(name: str, sd):
    return dist.phi_from_sd(sd) if name.startswith("phi") else np.asarray(sd, dtype=float)


def to_unconstrained(params: ParameterState, layout: Layout) -> np.ndarray:
    z = np.empty(layout.dimension)
    if not np.all(np.isfinite(params.alpha)) or not np.all(np.isfinite(params.beta)):
        raise ModelError("non-finite parameter values")
    z[0] = params.alpha[0]
    z[1:layout.n_alpha] = np.log(np.diff(params.alpha))
    z[layout.beta] = params.beta
    for k, name in enumerate(layout.spec.scale_names):
        z[layout.scale.start + k] = math.log(float(scale_to_sd(name, params.scale[name])))
    z[layout.u] = params.u_star[:layout.n_u]
    z[layout.v] = params.v[:layout.n_v]
    return z


def from_unconstrained(z, layout: Layout, family_keys=(), individual_keys=()):
    """Map an unconstrained vector to a :class:`ParameterState`.

    Returns ``(params, log_jacobian)``; the Jacobian is that of the map from
    ``z`` to (thresholds, coefficients, random-effect standard deviations,
    random effects), the coordinates on which the priors are stated.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (layout.dimension,):
        raise ModelError(f"expected vector of length {layout.dimension}, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ModelError("non-finite unconstrained vector")
    za = z[layout.alpha]
    alpha = np.cumsum(np.concatenate([za[:1], np.exp(za[1:])]))
    log_jac = float(np.sum(za[1:]))
    scale = {}
    for k, name in enumerate(layout.spec.scale_names):
        s = z[layout.scale.start + k]
        scale[name] = float(sd_to_scale(name, math.exp(s)))
        log_jac += s
    params = ParameterState(alpha, z[layout.beta].copy(), scale, z[layout.u].copy(),
                            z[layout.v].copy(), tuple(family_keys), tuple(individual_keys))
    return params, log_jac


def constrained_matrix(samples: np.ndarray, layout: Layout) -> np.ndarray:
    """Structural parameters (alpha, beta, scales) for a matrix of unconstrained draws."""
    samples = np.atleast_2d(samples)
    za = samples[:, layout.alpha]
    alpha = np.cumsum(np.concatenate([za[:, :1], np.exp(za[:, 1:])], axis=1), axis=1)
    beta = samples[:, layout.beta]
    scales = []
    for k, name in enumerate(layout.spec.scale_names):
        scales.append(sd_to_scale(name, np.exp(samples[:, layout.scale.start + k])))
    scale = np.column_stack(scales) if scales else np.zeros((len(samples), 0))
    return np.hstack([alpha, beta, scale])
