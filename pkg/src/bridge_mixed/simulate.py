"""Synthetic three-level ordinal panels with known parameters.

Families enter the panel at a random wave, individuals drop out with a
per-wave retention probability and may skip single waves; both mechanisms
depend only on the wave, so missingness is at random.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import distributions as dist
from .data import Covariate, PanelDataset, make_dataset
from .model import (FIXED, MODIFIED_BRIDGE_BRIDGE, NORMAL_NORMAL, SCALE_NAMES, TWO_LEVEL_BRIDGE,
                    ModelError, cumulative_probs)


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class CovariateGenerator:
    """``kind`` continuous (standard normal times ``scale``) or categorical.

    ``level`` is ``"individual"`` (drawn once) or ``"record"`` (drawn per wave).
    Categorical levels are integers ``1..len(probs)``; level 1 is the reference.
    """

    name: str
    kind: str = "continuous"
    level: str = "record"
    probs: tuple[float, ...] = ()
    scale: float = 1.0

    def covariate(self) -> Covariate:
        if self.kind == "continuous":
            return Covariate(self.name)
        return Covariate(self.name, "categorical", 0 if len(self.probs) == 2 else 1)

    def draw(self, rng, size):
        if self.kind == "continuous":
            return self.scale * rng.standard_normal(size)
        p = np.asarray(self.probs, dtype=float)
        levels = np.arange(len(p)) if len(p) == 2 else np.arange(1, len(p) + 1)
        return rng.choice(levels, size=size, p=p / p.sum())


DEFAULT_COVARIATES = (
    CovariateGenerator("income", "continuous", "record"),
    CovariateGenerator("female", "categorical", "individual", (0.5, 0.5)),
    CovariateGenerator("educ", "categorical", "individual", (0.5, 0.35, 0.15)),
    CovariateGenerator("work", "categorical", "record", (0.6, 0.25, 0.15)),
)


@dataclass(frozen=True)
class Missingness:
    """Wave-indexed MAR mechanism.

    entry_probs[k]: probability a family enters at wave k.
    retention[k]: probability an individual present up to wave k-1 is still in
        the panel at wave k (entry 0 is ignored).
    intermittent[k]: probability an in-panel individual skips wave k without
        leaving the panel.
    """

    entry_probs: tuple[float, ...] | None = None
    retention: tuple[float, ...] | None = None
    intermittent: tuple[float, ...] | None = None

    def resolved(self, n_waves: int):
        entry = np.asarray(self.entry_probs if self.entry_probs is not None
                           else [1.0] + [0.0] * (n_waves - 1), dtype=float)
        ret = np.asarray(self.retention if self.retention is not None else [1.0] * n_waves,
                         dtype=float)
        inter = np.asarray(self.intermittent if self.intermittent is not None
                           else [0.0] * n_waves, dtype=float)
        for name, arr in (("entry_probs", entry), ("retention", ret), ("intermittent", inter)):
            if arr.shape != (n_waves,):
                raise SimulationError(f"{name} needs one value per wave")
            if np.any((arr < 0) | (arr > 1)):
                raise SimulationError(f"{name} values must lie in [0, 1]")
        if not np.isclose(entry.sum(), 1.0):
            raise SimulationError("entry_probs must sum to 1")
        return entry, ret, inter


DEFAULT_MISSINGNESS = Missingness(entry_probs=(0.4, 0.25, 0.2, 0.15),
                                  retention=(1.0, 0.85, 0.85, 0.85),
                                  intermittent=(0.0, 0.05, 0.05, 0.0))


@dataclass(frozen=True)
class SimSpec:
    family: str = MODIFIED_BRIDGE_BRIDGE
    n_families: int = 300
    individuals_per_family: tuple[int, int] = (1, 4)
    waves: tuple[int, ...] = (1, 2, 3, 4)
    alpha: tuple[float, ...] = (-0.5, 1.5)
    beta: tuple[float, ...] = (-0.4, 0.4, 0.5, 1.0, 0.3, -0.5)
    scale: dict = field(default_factory=lambda: {"phi_u": 0.85, "phi_v": 0.75})
    covariates: tuple[CovariateGenerator, ...] = DEFAULT_COVARIATES
    missingness: Missingness = DEFAULT_MISSINGNESS
    reformation_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_families < 1:
            raise SimulationError("need at least one family")
        lo, hi = self.individuals_per_family
        if lo < 1 or hi < lo:
            raise SimulationError("individuals_per_family must satisfy 1 <= lo <= hi")
        if self.family not in SCALE_NAMES:
            raise SimulationError(f"unknown family {self.family!r}")
        missing = set(SCALE_NAMES[self.family]) - set(self.scale)
        if missing:
            raise SimulationError(f"missing scale parameter(s): {', '.join(sorted(missing))}")
        if np.any(np.diff(self.alpha) <= 0):
            raise SimulationError("alpha must be strictly increasing")
        if not 0.0 <= self.reformation_prob <= 1.0:
            raise SimulationError("reformation_prob must lie in [0, 1]")
        n_cols = sum(1 if g.kind == "continuous" else len(g.probs) - 1 for g in self.covariates)
        if n_cols != len(self.beta):
            raise SimulationError(f"beta has {len(self.beta)} entries but covariates give {n_cols} columns")

    @property
    def categories(self) -> int:
        return len(self.alpha) + 1

    def covariate_spec(self) -> list[Covariate]:
        return [g.covariate() for g in self.covariates]

    def with_(self, **kw) -> "SimSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SimSpec(**d)


@dataclass
class Truth:
    family: str
    alpha: list[float]
    beta: list[float]
    beta_names: list[str]
    scale: dict
    u_star: dict
    v: dict

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "Truth":
        return cls(**json.loads(Path(path).read_text()))


def _design_columns(frame: pd.DataFrame, gens: Sequence[CovariateGenerator]):
    cols, names = [], []
    for g in gens:
        x = frame[g.name].to_numpy()
        if g.kind == "continuous":
            cols.append(x.astype(float))
            names.append(g.name)
        else:
            levels = np.arange(len(g.probs)) if len(g.probs) == 2 else np.arange(1, len(g.probs) + 1)
            for lev in levels[1:]:
                cols.append((x == lev).astype(float))
                names.append(f"{g.name}[{lev}]")
    return np.column_stack(cols) if cols else np.zeros((len(frame), 0)), names


def simulate_complete(spec: SimSpec, rng: np.random.Generator):
    """Balanced panel before missingness, plus latent effects."""
    lo, hi = spec.individuals_per_family
    sizes = rng.integers(lo, hi + 1, size=spec.n_families)
    n_ind = int(sizes.sum())
    fam_of = np.repeat(np.arange(spec.n_families), sizes)
    n_w = len(spec.waves)

    fam_keys = [f"F{i + 1:05d}" for i in range(spec.n_families)]
    ind_keys = [f"I{j + 1:06d}" for j in range(n_ind)]

    # per-wave family assignment; re-formation moves an individual to a new family
    fam_by_wave = np.tile(fam_of[:, None], (1, n_w))
    n_fam_total = spec.n_families
    if spec.reformation_prob > 0:
        for j in range(n_ind):
            for k in range(1, n_w):
                if rng.random() < spec.reformation_prob:
                    fam_by_wave[j, k:] = n_fam_total
                    fam_keys.append(f"F{n_fam_total + 1:05d}")
                    n_fam_total += 1

    indiv_cov = {g.name: g.draw(rng, n_ind) for g in spec.covariates if g.level == "individual"}
    rows = {"family_id": [], "individual_id": [], "wave": []}
    rec_fam = fam_by_wave.reshape(-1)
    rec_ind = np.repeat(np.arange(n_ind), n_w)
    rec_wave = np.tile(np.asarray(spec.waves), n_ind)
    rows["family_id"] = [fam_keys[f] for f in rec_fam]
    rows["individual_id"] = [ind_keys[j] for j in rec_ind]
    rows["wave"] = rec_wave.astype(np.int64)
    frame = pd.DataFrame(rows)
    for g in spec.covariates:
        if g.level == "individual":
            frame[g.name] = indiv_cov[g.name][rec_ind]
        else:
            frame[g.name] = g.draw(rng, len(frame))

    u_star, v, b = _random_effects(spec, rng, n_fam_total, n_ind, rec_fam, rec_ind)
    X, names = _design_columns(frame, spec.covariates)
    eta = X @ np.asarray(spec.beta, dtype=float)
    probs = cumulative_probs(np.asarray(spec.alpha, dtype=float), eta, b)
    cum = np.cumsum(probs, axis=1)[:, :-1]
    draw = rng.random(len(frame))
    y = 1 + np.sum(draw[:, None] >= cum, axis=1)
    frame.insert(3, "outcome", y.astype(np.int64))
    truth = Truth(spec.family, list(map(float, spec.alpha)), list(map(float, spec.beta)), names,
                  {k: float(spec.scale[k]) for k in SCALE_NAMES[spec.family]},
                  dict(zip(fam_keys, map(float, u_star))), dict(zip(ind_keys, map(float, v))))
    return frame, truth


def _random_effects(spec, rng, n_fam, n_ind, rec_fam, rec_ind):
    s = spec.scale
    zeros_f, zeros_i = np.zeros(n_fam), np.zeros(n_ind)
    if spec.family == FIXED:
        return zeros_f, zeros_i, np.zeros(len(rec_fam))
    if spec.family == MODIFIED_BRIDGE_BRIDGE:
        u = dist.bridge_sample(rng, s["phi_u"], n_fam)
        v = dist.bridge_sample(rng, s["phi_v"], n_ind)
        return u, v, u[rec_fam] / s["phi_v"] + v[rec_ind]
    if spec.family == NORMAL_NORMAL:
        u = s["sigma_u"] * rng.standard_normal(n_fam)
        v = s["sigma_v"] * rng.standard_normal(n_ind)
        return u, v, u[rec_fam] + v[rec_ind]
    if spec.family == TWO_LEVEL_BRIDGE:
        v = dist.bridge_sample(rng, s["phi_v"], n_ind)
        return zeros_f, v, v[rec_ind]
    raise ModelError(spec.family)


def presence_mask(frame: pd.DataFrame, waves: Sequence[int], missingness: Missingness,
                  rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of retained rows under the MAR mechanism."""
    waves = list(waves)
    n_w = len(waves)
    entry, ret, inter = missingness.resolved(n_w)
    pos = {w: k for k, w in enumerate(waves)}
    ind_codes, ind_keys = pd.factorize(frame["individual_id"], sort=True)
    wave_pos = np.array([pos[w] for w in frame["wave"]], dtype=np.int64)

    # a family enters once; an individual follows the family it first appears in
    fam_codes, fam_keys = pd.factorize(frame["family_id"], sort=True)
    fam_entry = rng.choice(n_w, size=len(fam_keys), p=entry)
    first = np.full(len(ind_keys), n_w, dtype=np.int64)
    first_fam = np.zeros(len(ind_keys), dtype=np.int64)
    order = np.lexsort((wave_pos, ind_codes))
    seen = np.zeros(len(ind_keys), dtype=bool)
    for r in order:
        j = ind_codes[r]
        if not seen[j]:
            seen[j] = True
            first[j] = wave_pos[r]
            first_fam[j] = fam_codes[r]
    start = np.maximum(first, fam_entry[first_fam])

    n_ind = len(ind_keys)
    stay = rng.random((n_ind, n_w)) < ret[None, :]
    skip = rng.random((n_ind, n_w)) < inter[None, :]
    in_panel = np.zeros((n_ind, n_w), dtype=bool)
    for k in range(n_w):
        at_start = start == k
        cont = (k > start) & in_panel[:, k - 1] if k > 0 else np.zeros(n_ind, dtype=bool)
        in_panel[:, k] = at_start | (cont & stay[:, k])
    present = in_panel & ~(skip & (np.arange(n_w)[None, :] > start[:, None]))
    return present[ind_codes, wave_pos]


def apply_missingness(ds: PanelDataset, missingness: Missingness, rng: np.random.Generator,
                      waves: Sequence[int] | None = None) -> PanelDataset:
    if waves is None:
        waves = sorted(set(ds.waves.tolist()))
    mask = presence_mask(ds.frame, waves, missingness, rng)
    return ds.subset(mask)


def simulate_dataset(spec: SimSpec):
    """Returns ``(PanelDataset, Truth)``."""
    rng = np.random.default_rng(spec.seed)
    frame, truth = simulate_complete(spec, rng)
    ds = make_dataset(frame, spec.categories, [g.name for g in spec.covariates])
    ds = apply_missingness(ds, spec.missingness, rng, spec.waves)
    # drop latent effects of units with no remaining records
    truth.u_star = {k: truth.u_star[k] for k in ds.family_keys}
    truth.v = {k: truth.v[k] for k in ds.individual_keys}
    return ds, truth
