"""Post-processing of posterior draws.

Marginal (population-averaged) coefficients, posterior summaries, WAIC and
LPML from the pointwise conditional likelihood, and posterior predictive
checks.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import Covariate, DesignMatrix, PanelDataset, build_design, load_dataset, write_dataset
from .diagnostics import Diagnostics, diagnostics
from .model import (FIXED, MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL, TWO_LEVEL_BRIDGE, Layout,
                    ModelSpec, category_loglik, constrained_matrix)
from .posterior import PosteriorTarget
from .sampler import PosteriorDraws, SamplerConfig, read_draws, run_chains, write_draws


class InferenceError(ValueError):
    pass


class UnsupportedFamilyError(InferenceError):
    """Raised when a closed-form marginalization does not exist."""


# ----------------------------------------------------------------------------
# fitted model
# ----------------------------------------------------------------------------

@dataclass
class Fit:
    """Draws of one model on one dataset, in the model's unconstrained coordinates."""

    spec: ModelSpec
    dataset: PanelDataset
    design: DesignMatrix
    draws: PosteriorDraws
    covariates: list[Covariate] = field(default_factory=list)

    @property
    def layout(self) -> Layout:
        return Layout.for_data(self.spec, self.dataset, self.design)

    @property
    def structural_names(self) -> list[str]:
        return self.layout.structural_names

    def structural(self) -> np.ndarray:
        """Constrained (alpha, beta, scale) draws, shape (chains * kept, n_structural)."""
        return constrained_matrix(self.draws.flat(), self.layout)

    def structural_chains(self) -> np.ndarray:
        L = self.layout
        return np.stack([constrained_matrix(c, L) for c in self.draws.samples])

    def diagnostics(self, structural_only: bool = True) -> Diagnostics:
        if structural_only:
            return diagnostics(self.structural_chains(), self.structural_names)
        return diagnostics(self.draws.samples, self.draws.names)


def fit_model(ds: PanelDataset, X: DesignMatrix, spec: ModelSpec, config: SamplerConfig,
              covariates: Sequence[Covariate] = (), reparameterize: bool = True) -> Fit:
    """Sample the posterior and return draws in the model's coordinates."""
    target = PosteriorTarget(ds, X, spec, reparameterize=reparameterize)
    raw = run_chains(target, config)
    draws = PosteriorDraws(target.to_model(raw.samples), raw.stats, target.names,
                           raw.step_size, raw.inv_metric)
    return Fit(spec, ds, X, draws, list(covariates))


# ----------------------------------------------------------------------------
# marginalization
# ----------------------------------------------------------------------------

@dataclass
class MarginalDraws:
    alpha: np.ndarray      # (M, A-1); the threshold scaling is not externally validated
    beta: np.ndarray       # (M, p)
    factor: np.ndarray     # (M,)
    alpha_names: list[str]
    beta_names: list[str]
    thresholds_validated: bool = False

    def matrix(self) -> np.ndarray:
        return np.hstack([self.alpha, self.beta])

    @property
    def names(self) -> list[str]:
        return self.alpha_names + self.beta_names


def marginal_factor(family: str, scales: dict) -> np.ndarray:
    """Attenuation from conditional to marginal coefficients, per draw."""
    if family == MODIFIED_BRIDGE_BRIDGE:
        return np.asarray(scales["phi_u"], dtype=float) * np.asarray(scales["phi_v"], dtype=float)
    if family == TWO_LEVEL_BRIDGE:
        return np.asarray(scales["phi_v"], dtype=float)
    if family == FIXED:
        return np.asarray(1.0)
    if family == NORMAL_NORMAL:
        raise UnsupportedFamilyError("normal random effects have no closed-form marginal model")
    raise InferenceError(f"unknown family {family!r}")


def marginalize(structural: np.ndarray, layout: Layout) -> MarginalDraws:
    """Per-draw exact scaling of (alpha, beta) by the Bridge attenuation factor.

    ``structural`` holds constrained draws as produced by
    :func:`~bridge_mixed.model.constrained_matrix`, one row per draw.
    """
    family = layout.spec.family
    structural = np.atleast_2d(np.asarray(structural, dtype=float))
    if structural.shape[1] != layout.n_structural:
        raise InferenceError("structural draws do not match the layout")
    s0 = layout.scale.start
    scales = {n: structural[:, s0 + k] for k, n in enumerate(layout.spec.scale_names)}
    factor = np.broadcast_to(marginal_factor(family, scales), (len(structural),)).copy()
    alpha = factor[:, None] * structural[:, layout.alpha]
    beta = factor[:, None] * structural[:, layout.beta]
    return MarginalDraws(alpha, beta, factor,
                         [f"alpha{a + 1}" for a in range(layout.n_alpha)],
                         [f"beta[{n}]" for n in layout.beta_names])


# ----------------------------------------------------------------------------
# summaries
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    name: str
    mean: float
    sd: float
    lower: float   # 2.5% quantile
    upper: float   # 97.5% quantile
    odds_change: float | None = None  # (exp(mean) - 1) * 100

    def as_tuple(self):
        return (self.name, self.mean, self.sd, self.lower, self.upper, self.odds_change)


def odds_change(beta) -> np.ndarray:
    """Percentage change in the odds for a unit increase: (exp(beta) - 1) * 100."""
    return np.expm1(np.asarray(beta, dtype=float)) * 100.0


def summarize(draws: np.ndarray, names: Sequence[str], odds: bool | Sequence[bool] = False,
              level: float = 0.95) -> list[SummaryRow]:
    """Posterior mean, SD and equal-tailed interval for each column of ``draws``."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    if draws.shape[0] == 0:
        raise InferenceError("no draws to summarize")
    if draws.shape[1] != len(names):
        raise InferenceError("names do not match the number of columns")
    flags = [odds] * len(names) if isinstance(odds, bool) else list(odds)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
    # centred on the first draw: exact for constant columns
    dev = draws - draws[0]
    mean = draws[0] + dev.mean(axis=0)
    sd = dev.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1])
    rows = []
    for k, name in enumerate(names):
        oc = float(odds_change(mean[k])) if flags[k] else None
        rows.append(SummaryRow(str(name), float(mean[k]), float(sd[k]), float(lo[k]), float(hi[k]),
                               oc))
    return rows


def conditional_summary(fit: Fit) -> list[SummaryRow]:
    L = fit.layout
    odds = [False] * L.n_alpha + [True] * L.n_beta + [False] * L.n_scale
    return summarize(fit.structural(), fit.structural_names, odds)


def marginal_summary(fit: Fit) -> tuple[list[SummaryRow], bool]:
    """Marginal rows and whether threshold rows are validated (never, currently)."""
    m = marginalize(fit.structural(), fit.layout)
    odds = [False] * m.alpha.shape[1] + [True] * m.beta.shape[1]
    return summarize(m.matrix(), m.names, odds), m.thresholds_validated


# ----------------------------------------------------------------------------
# pointwise likelihood and criteria
# ----------------------------------------------------------------------------

def _draw_blocks(samples: np.ndarray, layout: Layout):
    """Ordered thresholds and coefficients for a matrix of model-coordinate draws."""
    samples = np.atleast_2d(samples)
    za = samples[:, layout.alpha]
    alpha = np.cumsum(np.concatenate([za[:, :1], np.exp(za[:, 1:])], axis=1), axis=1)
    beta = samples[:, layout.beta]
    return alpha, beta


def record_shifts(samples: np.ndarray, layout: Layout, ds: PanelDataset,
                  X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thresholds (M, A-1) and linear shifts eta + b (M, N) for each draw."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != layout.dimension:
        raise InferenceError(f"draws have {samples.shape[1]} columns, expected {layout.dimension}")
    alpha, beta = _draw_blocks(samples, layout)
    shift = beta @ X.T
    family = layout.spec.family
    if family != FIXED:
        shift = shift + samples[:, layout.v][:, ds.individual_codes]
    if family in (MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL):
        e = np.ones(len(samples))
        if family == MODIFIED_BRIDGE_BRIDGE:
            sd_v = np.exp(samples[:, layout.scale.start + 1])
            e = 1.0 / np.sqrt(1.0 + 3.0 * sd_v ** 2 / math.pi ** 2)
        shift = shift + samples[:, layout.u][:, ds.family_codes] / e[:, None]
    return alpha, shift


def pointwise_loglik(samples: np.ndarray, layout: Layout, ds: PanelDataset,
                     X: DesignMatrix | np.ndarray) -> np.ndarray:
    """M x N matrix of log p(y_record | random effects, parameters) per draw."""
    rows = X.rows if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if rows.shape[0] != ds.n_records:
        raise InferenceError("design rows do not match the dataset")
    alpha, shift = record_shifts(samples, layout, ds, rows)
    out = np.empty(shift.shape)
    for m in range(len(shift)):
        out[m] = category_loglik(alpha[m], ds.outcomes, shift[m])
    return out


def fit_pointwise_loglik(fit: Fit) -> np.ndarray:
    return pointwise_loglik(fit.draws.flat(), fit.layout, fit.dataset, fit.design)


class WaicResult(NamedTuple):
    waic: float
    lppd: float
    rho: float


class LpmlResult(NamedTuple):
    lpml: float
    log_cpo: np.ndarray
    flagged: np.ndarray  # observations with a zero likelihood in some draw

    @property
    def cpo(self) -> np.ndarray:
        return np.exp(self.log_cpo)


def _loglik_matrix(loglik) -> np.ndarray:
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim == 1:
        ll = ll[:, None]
    if ll.ndim != 2:
        raise InferenceError("log-likelihood must be a draws x observations matrix")
    return ll


def waic(loglik) -> WaicResult:
    """WAIC = -2 (lppd - rho) from an M x N matrix of pointwise log-likelihoods."""
    ll = _loglik_matrix(loglik)
    M = ll.shape[0]
    if M < 2:
        raise InferenceError("WAIC needs at least two draws")
    lppd = float(np.sum(logsumexp(ll, axis=0) - math.log(M)))
    rho = float(np.sum(np.var(ll - ll[0], axis=0, ddof=1)))
    return WaicResult(-2.0 * (lppd - rho), lppd, rho)


def lpml(loglik) -> LpmlResult:
    """LPML = sum log CPO with CPO the harmonic mean of the likelihood over draws."""
    ll = _loglik_matrix(loglik)
    M = ll.shape[0]
    flagged = np.any(np.isneginf(ll), axis=0)
    with np.errstate(over="ignore"):
        log_cpo = -(logsumexp(-ll, axis=0) - math.log(M))
    log_cpo = np.where(flagged, -np.inf, log_cpo)
    return LpmlResult(float(np.sum(log_cpo)), log_cpo, flagged)


@dataclass(frozen=True)
class CriteriaRow:
    label: str
    waic: float
    lppd: float
    rho: float
    lpml: float


def criteria(fit: Fit, label: str | None = None) -> CriteriaRow:
    ll = fit_pointwise_loglik(fit)
    w = waic(ll)
    lp = lpml(ll)
    return CriteriaRow(label or fit.spec.family, w.waic, w.lppd, w.rho, lp.lpml)


# ----------------------------------------------------------------------------
# posterior predictive checks
# ----------------------------------------------------------------------------

@dataclass
class PpcTable:
    codes: np.ndarray        # observed - replicated, from -(A-1) to A-1
    percentages: np.ndarray  # (replicates, n_codes)

    @property
    def mean(self) -> np.ndarray:
        return self.percentages.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        if len(self.percentages) < 2:
            return np.zeros(len(self.codes))
        return self.percentages.std(axis=0, ddof=1)

    def percent_at(self, code: int) -> float:
        return float(self.mean[list(self.codes).index(code)])

    def rows(self):
        for c, m, s in zip(self.codes, self.mean, self.sd):
            yield int(c), float(m), float(s)


def ppc_table(observed, replicates, categories: int) -> PpcTable:
    """Discrepancy-code percentages for each replicate (rows of ``replicates``)."""
    observed = np.asarray(observed, dtype=np.int64)
    replicates = np.atleast_2d(np.asarray(replicates, dtype=np.int64))
    if replicates.shape[1] != observed.shape[0]:
        raise InferenceError("replicates do not match the observations")
    codes = np.arange(-(categories - 1), categories)
    diff = observed[None, :] - replicates
    counts = np.stack([(diff == c).sum(axis=1) for c in codes], axis=1)
    return PpcTable(codes, 100.0 * counts / observed.shape[0])


def replicate_outcomes(alpha: np.ndarray, shift: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One replicated outcome vector per draw (rows of ``shift``)."""
    cum = 1.0 / (1.0 + np.exp(-(alpha[:, None, :] - shift[:, :, None])))
    u = rng.random(shift.shape)
    return 1 + np.sum(u[:, :, None] > cum, axis=2)


def ppc(fit: Fit, rng: np.random.Generator) -> PpcTable:
    """One replicate per kept draw, conditional on the drawn random effects."""
    samples = fit.draws.flat()
    alpha, shift = record_shifts(samples, fit.layout, fit.dataset, fit.design.rows)
    reps = replicate_outcomes(alpha, shift, rng)
    return ppc_table(fit.dataset.outcomes, reps, fit.spec.categories)


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------

FIT_META = "fit.json"
FIT_DATA = "data.csv"
FIT_DESIGN = "design.csv"


def save_fit(fit: Fit, directory) -> Path:
    """Write draws (one CSV per chain), the dataset and model metadata."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_draws(fit.draws, d)
    write_dataset(fit.dataset, d / FIT_DATA)
    np.savetxt(d / FIT_DESIGN, fit.design.rows, fmt="%.17g", delimiter=",",
               header=",".join(fit.design.column_names), comments="")
    meta = {
        "family": fit.spec.family,
        "categories": fit.spec.categories,
        "prior_location": fit.spec.prior_location,
        "prior_scale": fit.spec.prior_scale,
        "covariates": [c.__dict__ for c in fit.covariates],
        "design_columns": list(fit.design.column_names),
        "design_log": sorted(fit.design.transform_log),
    }
    (d / FIT_META).write_text(json.dumps(meta, indent=2))
    return d


def load_fit(directory) -> Fit:
    d = Path(directory)
    try:
        meta = json.loads((d / FIT_META).read_text())
    except FileNotFoundError:
        raise InferenceError(f"{d} does not contain a saved fit") from None
    spec = ModelSpec(meta["family"], categories=meta["categories"],
                     prior_location=meta["prior_location"], prior_scale=meta["prior_scale"])
    covs = [Covariate(**c) for c in meta["covariates"]]
    ds = load_dataset(d / FIT_DATA, categories=spec.categories)
    cols = meta["design_columns"]
    if cols:
        rows = np.loadtxt(d / FIT_DESIGN, delimiter=",", skiprows=1, ndmin=2)
    else:
        rows = np.zeros((ds.n_records, 0))
    X = DesignMatrix(rows.reshape(ds.n_records, len(cols)), tuple(cols),
                     frozenset(meta.get("design_log", ())))
    if covs:
        rebuilt = build_design(ds, covs)
        if list(rebuilt.column_names) != cols or not np.allclose(rebuilt.rows, X.rows, rtol=1e-14):
            raise InferenceError("rebuilt design does not match the saved fit")
    draws = read_draws(d)
    L = Layout.for_data(spec, ds, X)
    if draws.dimension != L.dimension:
        raise InferenceError("saved draws do not match the model dimension")
    return Fit(spec, ds, X, draws, covs)
