"""Three-level ordinal panel data: loading, validation, indexing, design matrices.

Records are in long format, one row per (individual, wave).  Individuals
that move to a new household keep their ``individual_id`` and acquire a new
``family_id``, so a record's family is resolved per record.  Missing waves
are simply absent rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

ID_COLUMNS = ("family_id", "individual_id", "wave", "outcome")


class DataError(ValueError):
    """Malformed or inconsistent panel data."""


class DesignError(ValueError):
    """Design-matrix construction failure."""


@dataclass(frozen=True)
class PanelRecord:
    family_id: str
    individual_id: str
    wave: int
    outcome: int
    covariates: Mapping[str, object]


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Validated long-format panel.

    ``frame`` holds one row per record with the four id columns followed by
    covariates.  Family and individual keys are stored as strings; their
    integer codes follow sorted key order so that random-effect vectors have a
    stable layout.
    """

    frame: pd.DataFrame
    categories: int
    covariate_names: tuple[str, ...]
    family_keys: tuple[str, ...] = field(init=False)
    individual_keys: tuple[str, ...] = field(init=False)
    family_codes: np.ndarray = field(init=False, repr=False)
    individual_codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        fam = pd.Categorical(self.frame["family_id"])
        ind = pd.Categorical(self.frame["individual_id"])
        object.__setattr__(self, "family_keys", tuple(fam.categories))
        object.__setattr__(self, "individual_keys", tuple(ind.categories))
        fc = np.asarray(fam.codes, dtype=np.int64)
        ic = np.asarray(ind.codes, dtype=np.int64)
        fc.setflags(write=False)
        ic.setflags(write=False)
        object.__setattr__(self, "family_codes", fc)
        object.__setattr__(self, "individual_codes", ic)

    # counts ---------------------------------------------------------------
    @property
    def n_records(self) -> int:
        return len(self.frame)

    @property
    def n_families(self) -> int:
        return len(self.family_keys)

    @property
    def n_individuals(self) -> int:
        return len(self.individual_keys)

    @property
    def outcomes(self) -> np.ndarray:
        return self.frame["outcome"].to_numpy(dtype=np.int64)

    @property
    def waves(self) -> np.ndarray:
        return self.frame["wave"].to_numpy(dtype=np.int64)

    # indexes --------------------------------------------------------------
    @property
    def family_index(self) -> dict[str, np.ndarray]:
        return _group_rows(self.family_keys, self.family_codes)

    @property
    def individual_index(self) -> dict[str, np.ndarray]:
        return _group_rows(self.individual_keys, self.individual_codes)

    @property
    def records(self) -> list[PanelRecord]:
        cov = self.frame[list(self.covariate_names)].to_dict("records")
        return [
            PanelRecord(f, i, int(w), int(y), c)
            for f, i, w, y, c in zip(self.frame["family_id"], self.frame["individual_id"],
                                     self.frame["wave"], self.frame["outcome"], cov)
        ]

    def record(self, row: int) -> PanelRecord:
        r = self.frame.iloc[row]
        return PanelRecord(str(r["family_id"]), str(r["individual_id"]), int(r["wave"]),
                           int(r["outcome"]), {c: r[c] for c in self.covariate_names})

    def subset(self, mask: np.ndarray) -> "PanelDataset":
        return PanelDataset(self.frame.loc[np.asarray(mask, dtype=bool)].reset_index(drop=True),
                            self.categories, self.covariate_names)

    def equals(self, other: "PanelDataset") -> bool:
        return (self.categories == other.categories
                and self.covariate_names == other.covariate_names
                and self.frame.equals(other.frame))


def _group_rows(keys, codes):
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(len(keys) + 1))
    return {k: order[bounds[i]:bounds[i + 1]] for i, k in enumerate(keys)}


# ----------------------------------------------------------------------------
# construction and IO
# ----------------------------------------------------------------------------

def make_dataset(frame: pd.DataFrame, categories: int | None = None,
                 covariates: Sequence[str] | None = None) -> PanelDataset:
    """Validate a long-format frame and wrap it as a :class:`PanelDataset`."""
    missing = [c for c in ID_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if covariates is None:
        covariates = [c for c in frame.columns if c not in ID_COLUMNS]
    else:
        unknown = [c for c in covariates if c not in frame.columns]
        if unknown:
            raise DataError(f"missing column(s): {', '.join(unknown)}")
    df = frame[list(ID_COLUMNS) + list(covariates)].copy().reset_index(drop=True)
    df["family_id"] = df["family_id"].astype(str)
    df["individual_id"] = df["individual_id"].astype(str)

    for col in ("wave", "outcome"):
        vals = pd.to_numeric(df[col], errors="coerce")
        if vals.isna().any() or not np.all(np.mod(vals, 1) == 0):
            raise DataError(f"column {col!r} must hold integers")
        df[col] = vals.astype(np.int64)

    if df[list(covariates)].isna().any().any():
        bad = df[list(covariates)].columns[df[list(covariates)].isna().any()].tolist()
        raise DataError(f"missing covariate values in: {', '.join(bad)}")

    y = df["outcome"].to_numpy()
    if categories is None:
        categories = int(y.max()) if len(y) else 2
    if categories < 2:
        raise DataError("need at least two outcome categories")
    bad = (y < 1) | (y > categories)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"outcome {int(y[row])} at row {row} outside 1..{categories}")

    dup = df.duplicated(["individual_id", "wave"])
    if dup.any():
        row = df.loc[dup].iloc[0]
        raise DataError(
            f"duplicate record for individual {row['individual_id']!r} at wave {int(row['wave'])}")
    return PanelDataset(df, int(categories), tuple(covariates))


def load_dataset(path, schema: Mapping[str, str] | None = None,
                 categories: int | None = None) -> PanelDataset:
    """Read a CSV panel.

    ``schema`` maps the role names ``family_id``, ``individual_id``, ``wave``
    and ``outcome`` to column names in the file; unmapped roles are expected
    under their own names.  All remaining columns are covariates.
    """
    path = Path(path)
    try:
        raw = pd.read_csv(path, encoding="utf-8", dtype={"family_id": str, "individual_id": str},
                          keep_default_na=True, float_precision="round_trip")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if schema:
        unknown = set(schema) - set(ID_COLUMNS)
        if unknown:
            raise DataError(f"unknown schema role(s): {', '.join(sorted(unknown))}")
        absent = [c for c in schema.values() if c not in raw.columns]
        if absent:
            raise DataError(f"missing column(s): {', '.join(absent)}")
        raw = raw.rename(columns={v: k for k, v in schema.items()})
        for role in ("family_id", "individual_id"):
            raw[role] = raw[role].astype(str)
    return make_dataset(raw, categories)


def write_dataset(ds: PanelDataset, path) -> None:
    ds.frame.to_csv(path, index=False, float_format="%.17g")


# ----------------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------------

@dataclass
class ValidationReport:
    constant_covariates: list[str]
    empty_categories: list[int]
    category_counts: pd.DataFrame  # rows: waves, columns: categories
    n_families: int
    n_individuals: int
    n_records: int

    @property
    def issues(self) -> list[str]:
        out = [f"covariate {c!r} is constant across all records" for c in self.constant_covariates]
        out += [f"outcome category {a} never observed" for a in self.empty_categories]
        return out

    def to_text(self) -> str:
        lines = [f"families: {self.n_families}",
                 f"individuals: {self.n_individuals}",
                 f"records: {self.n_records}",
                 "category counts by wave:",
                 self.category_counts.to_string()]
        issues = self.issues
        lines.append("issues: none" if not issues else "issues:")
        lines += [f"  - {msg}" for msg in issues]
        return "\n".join(lines)


def category_counts(ds: PanelDataset) -> pd.DataFrame:
    waves = sorted(set(ds.waves.tolist()))
    cats = range(1, ds.categories + 1)
    tab = pd.crosstab(ds.frame["wave"], ds.frame["outcome"])
    return tab.reindex(index=waves, columns=list(cats), fill_value=0)


def validate(ds: PanelDataset) -> ValidationReport:
    constant = [c for c in ds.covariate_names if ds.frame[c].nunique(dropna=False) <= 1]
    counts = category_counts(ds)
    totals = counts.sum(axis=0)
    empty = [int(a) for a in totals.index if totals[a] == 0]
    return ValidationReport(constant, empty, counts, ds.n_families, ds.n_individuals,
                            ds.n_records)


# ----------------------------------------------------------------------------
# follow-up patterns
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PatternRow:
    pattern: tuple[bool, ...]
    family_count: int
    individual_count: int

    def label(self) -> str:
        return "".join("x" if p else "." for p in self.pattern)


def _presence(codes: np.ndarray, n_units: int, wave_pos: np.ndarray, n_waves: int) -> np.ndarray:
    present = np.zeros((n_units, n_waves), dtype=bool)
    present[codes, wave_pos] = True
    return present


def pattern_table(ds: PanelDataset, waves: Sequence[int] | None = None) -> list[PatternRow]:
    """Tabulate presence patterns of families and individuals over ``waves``.

    A family is present at a wave when any record carries its key at that
    wave.  Rows are ordered by number of waves present, then lexicographically
    with earlier waves first.
    """
    if waves is None:
        waves = sorted(set(ds.waves.tolist()))
    waves = list(waves)
    if not waves:
        raise ValueError("waves must be nonempty")
    pos = {w: k for k, w in enumerate(waves)}
    keep = np.array([w in pos for w in ds.waves], dtype=bool)
    wave_pos = np.array([pos[w] for w in ds.waves[keep]], dtype=np.int64)

    fam = _presence(ds.family_codes[keep], ds.n_families, wave_pos, len(waves))
    ind = _presence(ds.individual_codes[keep], ds.n_individuals, wave_pos, len(waves))

    counts: dict[tuple[bool, ...], list[int]] = {}
    for row in fam:
        if row.any():
            counts.setdefault(tuple(bool(b) for b in row), [0, 0])[0] += 1
    for row in ind:
        if row.any():
            counts.setdefault(tuple(bool(b) for b in row), [0, 0])[1] += 1

    def order(p):
        return (sum(p), [not b for b in p])

    return [PatternRow(p, c[0], c[1]) for p, c in sorted(counts.items(), key=lambda kv: order(kv[0]))]


def pattern_frame(rows: Sequence[PatternRow], waves: Sequence[int]) -> pd.DataFrame:
    data = {str(w): [r.pattern[k] for r in rows] for k, w in enumerate(waves)}
    data["families"] = [r.family_count for r in rows]
    data["individuals"] = [r.individual_count for r in rows]
    return pd.DataFrame(data)


# ----------------------------------------------------------------------------
# design matrix
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Covariate:
    """One covariate term.

    ``kind`` is ``"continuous"`` or ``"categorical"``.  Categorical terms
    expand to indicator columns for every level except ``reference``.
    ``log1p`` applies x -> log(x + 1) to a continuous column.
    """

    name: str
    kind: str = "continuous"
    reference: object = None
    log1p: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise DesignError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "categorical" and self.reference is None:
            raise DesignError(f"categorical covariate {self.name!r} needs a reference level")
        if self.kind == "categorical" and self.log1p:
            raise DesignError(f"log1p requested on categorical covariate {self.name!r}")


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    rows: np.ndarray
    column_names: tuple[str, ...]
    transform_log: frozenset[str] = frozenset()

    @property
    def shape(self):
        return self.rows.shape


def _level_key(v) -> str:
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        v = int(v)
    return str(v)


def build_design(ds: PanelDataset, covariates: Iterable[Covariate]) -> DesignMatrix:
    covariates = list(covariates)
    cols: list[np.ndarray] = []
    names: list[str] = []
    logged: set[str] = set()
    for cov in covariates:
        if cov.name not in ds.frame.columns or cov.name in ID_COLUMNS and cov.name != "wave":
            raise DesignError(f"unknown covariate {cov.name!r}")
        series = ds.frame[cov.name]
        if cov.kind == "continuous":
            try:
                x = series.to_numpy(dtype=float)
            except (TypeError, ValueError) as exc:
                raise DesignError(f"covariate {cov.name!r} is not numeric") from exc
            if cov.log1p:
                if np.any(x < 0):
                    raise DesignError(f"negative value in log-transformed covariate {cov.name!r}")
                x = np.log1p(x)
                logged.add(cov.name)
            cols.append(x)
            names.append(cov.name)
        else:
            labels = np.array([_level_key(v) for v in series], dtype=object)
            ref = _level_key(cov.reference)
            levels = sorted(set(labels.tolist()), key=_natural_key)
            if ref not in levels:
                raise DesignError(f"reference level {ref!r} not observed for {cov.name!r}")
            for lev in levels:
                if lev == ref:
                    continue
                cols.append((labels == lev).astype(float))
                names.append(f"{cov.name}[{lev}]")
    rows = np.column_stack(cols) if cols else np.zeros((ds.n_records, 0))
    if rows.shape[0] and rows.shape[1]:
        const = np.all(rows == rows[0], axis=0)
        if const.any():
            bad = [n for n, c in zip(names, const) if c]
            raise DesignError(f"constant design column(s): {', '.join(bad)}")
    if not np.all(np.isfinite(rows)):
        raise DesignError("non-finite value in design matrix")
    rows = np.ascontiguousarray(rows)
    rows.setflags(write=False)
    return DesignMatrix(rows, tuple(names), frozenset(logged))


def _natural_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, math.inf, s)
