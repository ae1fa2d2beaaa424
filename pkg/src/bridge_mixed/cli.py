"""Command-line front end: ``bridge-mixed <command> --config <path>``.

Commands
--------
simulate   write a synthetic panel (dataset.csv) and its truth record (truth.json)
fit        sample one model and write draws, diagnostics and a saved fit
summarize  conditional and marginal coefficient tables for a saved fit
compare    WAIC / LPML table over several saved fits
ppc        posterior predictive discrepancy table for a saved fit
patterns   follow-up pattern table and a validation report for a dataset
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import __version__
from .data import (Covariate, DataError, DesignError, build_design, load_dataset, pattern_frame,
                   pattern_table, validate, write_dataset)
from .distributions import DistributionError
from .inference import (InferenceError, UnsupportedFamilyError, conditional_summary, criteria,
                        fit_model, load_fit, marginal_summary, ppc, save_fit)
from .model import FAMILIES, FAMILY_LABELS, SCALE_NAMES, ModelError, ModelSpec
from .sampler import SamplerConfig, SamplerError
from .simulate import Missingness, SimSpec, SimulationError, simulate_dataset

COMMANDS = ("simulate", "fit", "summarize", "compare", "ppc", "patterns")


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# configuration schema
# ----------------------------------------------------------------------------

def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _str(s: str) -> str:
    return s.strip()


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.replace("\n", ",").split(",") if x.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any = None
    help: str = ""


SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "path": Key(_str, None, "input CSV (family_id, individual_id, wave, outcome, covariates)"),
        "categories": Key(_int, None, "number of outcome categories A (default: largest outcome)"),
        "covariates": Key(_strs, (), "comma list of name, name:log1p or name:categorical:<reference>"),
        "waves": Key(_ints, (), "waves for the pattern table (default: all observed)"),
    },
    "model": {
        "family": Key(_str, "modified_bridge_bridge", "one of " + ", ".join(FAMILIES)),
        "prior_location": Key(_float, 0.0, "Cauchy / half-Cauchy location"),
        "prior_scale": Key(_float, 5.0, "Cauchy / half-Cauchy scale"),
    },
    "sampler": {
        "chains": Key(_int, 4, "number of chains"),
        "iterations": Key(_int, 2000, "iterations per chain, warm-up included"),
        "warmup_fraction": Key(_float, 0.5, "fraction of iterations used for warm-up"),
        "target_accept": Key(_float, 0.8, "dual-averaging acceptance target"),
        "max_tree_depth": Key(_int, 10, "maximum trajectory doublings"),
        "seed": Key(_int, 0, "random seed"),
        "threads": Key(_int, 1, "worker processes for chains"),
    },
    "simulate": {
        "family": Key(_str, "modified_bridge_bridge", "generating model family"),
        "n_families": Key(_int, 300, "number of families"),
        "individuals_min": Key(_int, 1, "smallest family size"),
        "individuals_max": Key(_int, 4, "largest family size"),
        "waves": Key(_ints, (1, 2, 3, 4), "wave labels"),
        "alpha": Key(_floats, (-0.5, 1.5), "conditional thresholds"),
        "beta": Key(_floats, (-0.4, 0.4, 0.5, 1.0, 0.3, -0.5), "conditional coefficients"),
        "phi_u": Key(_float, 0.85, "family Bridge parameter"),
        "phi_v": Key(_float, 0.75, "individual Bridge parameter"),
        "sigma_u": Key(_float, 1.0, "family Normal sd"),
        "sigma_v": Key(_float, 1.0, "individual Normal sd"),
        "entry_probs": Key(_floats, (0.4, 0.25, 0.2, 0.15), "probability of entering at each wave"),
        "retention": Key(_floats, (1.0, 0.85, 0.85, 0.85), "per-wave retention"),
        "intermittent": Key(_floats, (0.0, 0.05, 0.05, 0.0), "per-wave skip probability"),
        "reformation_prob": Key(_float, 0.0, "chance an individual moves family between waves"),
        "seed": Key(_int, 0, "random seed"),
    },
    "output": {
        "directory": Key(_str, "output", "directory receiving all artifacts"),
    },
    "summarize": {
        "fit": Key(_str, None, "directory of a saved fit"),
    },
    "compare": {
        "fits": Key(_strs, (), "comma list of saved-fit directories"),
        "labels": Key(_strs, (), "optional labels, one per fit"),
    },
    "ppc": {
        "fit": Key(_str, None, "directory of a saved fit"),
        "seed": Key(_int, 0, "random seed for the replicates"),
    },
}

REQUIRED = {
    "simulate": [],
    "fit": [("data", "path")],
    "summarize": [("summarize", "fit")],
    "compare": [("compare", "fits")],
    "ppc": [("ppc", "fit")],
    "patterns": [("data", "path")],
}


@dataclass
class RunConfig:
    command: str
    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    source: str = ""

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        self.values[section][key] = value

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for k, v in keys.items():
                if v is not None and v != ():
                    lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        canon = json.dumps({"command": self.command, "values": self.values}, sort_keys=True,
                           default=list)
        return hashlib.sha256(canon.encode()).hexdigest()


def _defaults() -> dict[str, dict[str, Any]]:
    return {s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()}


def parse_config_text(text: str, command: str) -> RunConfig:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    values = _defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                values[section][key] = SCHEMA[section][key].parse(raw)
            except ValueError:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None
    cfg = RunConfig(command, values, text)
    check_required(cfg)
    return cfg


def check_required(cfg: RunConfig) -> None:
    for section, key in REQUIRED[cfg.command]:
        if cfg.values[section][key] in (None, ()):
            raise ConfigError(f"missing required field {section}.{key}")


def parse_config(path, command: str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, command)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")


# ----------------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------------

def parse_covariate(entry: str) -> Covariate:
    parts = [p.strip() for p in entry.split(":")]
    name = parts[0]
    if len(parts) == 1:
        return Covariate(name)
    if parts[1] == "log1p" and len(parts) == 2:
        return Covariate(name, log1p=True)
    if parts[1] == "categorical" and len(parts) == 3:
        ref: Any = parts[2]
        try:
            ref = int(ref)
        except ValueError:
            pass
        return Covariate(name, kind="categorical", reference=ref)
    raise ConfigError(f"cannot parse covariate entry {entry!r}")


def model_spec(cfg: RunConfig, categories: int) -> ModelSpec:
    m = cfg.values["model"]
    return ModelSpec(m["family"], categories=categories, prior_location=m["prior_location"],
                     prior_scale=m["prior_scale"])


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.values["sampler"]
    return SamplerConfig(chains=s["chains"], iterations=s["iterations"],
                         warmup_fraction=s["warmup_fraction"], target_accept=s["target_accept"],
                         max_tree_depth=s["max_tree_depth"], seed=s["seed"], threads=s["threads"])


def sim_spec(cfg: RunConfig) -> SimSpec:
    s = cfg.values["simulate"]
    scale = {"phi_u": s["phi_u"], "phi_v": s["phi_v"],
             "sigma_u": s["sigma_u"], "sigma_v": s["sigma_v"]}
    if s["family"] not in SCALE_NAMES:
        raise ConfigError(f"unknown family {s['family']!r}")
    scale = {k: scale[k] for k in SCALE_NAMES[s["family"]]}
    miss = Missingness(s["entry_probs"], s["retention"], s["intermittent"])
    return SimSpec(family=s["family"], n_families=s["n_families"],
                   individuals_per_family=(s["individuals_min"], s["individuals_max"]),
                   waves=s["waves"], alpha=s["alpha"], beta=s["beta"], scale=scale,
                   missingness=miss, reformation_prob=s["reformation_prob"], seed=s["seed"])


# ----------------------------------------------------------------------------
# tables
# ----------------------------------------------------------------------------

def fmt6(x) -> str:
    """Six significant digits; blanks for missing values."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}"
    return str(x)


def format_frame(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.apply(lambda col: col.map(fmt6))


def aligned_text(frame: pd.DataFrame, title: str = "") -> str:
    f = format_frame(frame)
    cols = list(f.columns)
    widths = [max(len(str(c)), *(len(v) for v in f[c])) if len(f) else len(str(c)) for c in cols]
    out = [title] if title else []
    out.append("  ".join(str(c).rjust(w) for c, w in zip(cols, widths)))
    for _, row in f.iterrows():
        out.append("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
    return "\n".join(out) + "\n"


def write_table(frame: pd.DataFrame, directory: Path, stem: str, title: str = "") -> None:
    format_frame(frame).to_csv(directory / f"{stem}.csv", index=False)
    (directory / f"{stem}.txt").write_text(aligned_text(frame, title), encoding="utf-8")


def summary_frame(rows) -> pd.DataFrame:
    return pd.DataFrame([{"parameter": r.name, "mean": r.mean, "sd": r.sd, "q2.5": r.lower,
                          "q97.5": r.upper, "odds_change_pct": r.odds_change} for r in rows])


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.get("output", "directory"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_data(cfg: RunConfig):
    d = cfg.values["data"]
    ds = load_dataset(d["path"], categories=d["categories"])
    covs = [parse_covariate(c) for c in d["covariates"]]
    return ds, covs


def cmd_simulate(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    spec = sim_spec(cfg)
    ds, truth = simulate_dataset(spec)
    write_dataset(ds, out / "dataset.csv")
    truth.to_json(out / "truth.json")
    return {"records": ds.n_records, "families": ds.n_families, "individuals": ds.n_individuals}


def cmd_fit(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    ds, covs = _load_data(cfg)
    if not covs:
        raise ConfigError("data.covariates must name at least one covariate")
    X = build_design(ds, covs)
    spec = model_spec(cfg, ds.categories)
    fit = fit_model(ds, X, spec, sampler_config(cfg), covs)
    save_fit(fit, out)
    diag = fit.diagnostics()
    frame = pd.DataFrame({"parameter": diag.names, "rhat": diag.rhat, "ess": diag.ess})
    write_table(frame, out, "diagnostics", f"Diagnostics: {FAMILY_LABELS[spec.family]}")
    everything = fit.diagnostics(structural_only=False)
    return {"divergent": fit.draws.n_divergent, "max_rhat": diag.max_rhat(),
            "max_rhat_all": everything.max_rhat(), "min_ess": float(np.nanmin(diag.ess))}


def cmd_summarize(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    fit = load_fit(cfg.get("summarize", "fit"))
    label = FAMILY_LABELS[fit.spec.family]
    write_table(summary_frame(conditional_summary(fit)), out, "conditional",
                f"Conditional estimates: {label}")
    try:
        rows, validated = marginal_summary(fit)
    except UnsupportedFamilyError:
        (out / "marginal.txt").write_text(f"Marginal estimates: not applicable for {label}\n")
        return {"marginal": "not applicable"}
    frame = summary_frame(rows)
    if not validated:
        frame.insert(1, "note", ["unvalidated" if n.startswith("alpha") else ""
                                 for n in frame["parameter"]])
    write_table(frame, out, "marginal", f"Marginal estimates: {label}")
    return {"marginal": "written"}


def cmd_compare(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    fits = cfg.get("compare", "fits")
    labels = cfg.get("compare", "labels") or ()
    if labels and len(labels) != len(fits):
        raise ConfigError("compare.labels needs one label per fit")
    rows = []
    for k, path in enumerate(fits):
        fit = load_fit(path)
        label = labels[k] if labels else FAMILY_LABELS[fit.spec.family]
        rows.append(criteria(fit, label))
    frame = pd.DataFrame([{"model": r.label, "WAIC": r.waic, "lppd": r.lppd, "rho": r.rho,
                           "LPML": r.lpml} for r in rows])
    frame["WAIC_rank"] = frame["WAIC"].rank(method="min").astype(int)
    frame["LPML_rank"] = frame["LPML"].rank(method="min", ascending=False).astype(int)
    write_table(frame, out, "criteria", "Model selection criteria")
    best = frame.loc[frame["WAIC"].idxmin(), "model"]
    return {"lowest_waic": str(best)}


def cmd_ppc(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    fit = load_fit(cfg.get("ppc", "fit"))
    table = ppc(fit, np.random.default_rng(cfg.get("ppc", "seed")))
    frame = pd.DataFrame(list(table.rows()), columns=["code", "mean_pct", "sd_pct"])
    write_table(frame, out, "ppc",
                f"Posterior predictive checks: {FAMILY_LABELS[fit.spec.family]}")
    return {"match_pct": table.percent_at(0)}


def cmd_patterns(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    ds = load_dataset(cfg.get("data", "path"), categories=cfg.get("data", "categories"))
    waves = cfg.get("data", "waves") or tuple(int(w) for w in np.unique(ds.waves))
    rows = pattern_table(ds, waves)
    frame = pattern_frame(rows, waves)
    frame.to_csv(out / "patterns.csv", index=False)
    (out / "patterns.txt").write_text(aligned_text(frame, "Follow-up patterns"), encoding="utf-8")
    (out / "validation.txt").write_text(validate(ds).to_text(), encoding="utf-8")
    return {"patterns": len(rows)}


HANDLERS: dict[str, Callable[[RunConfig], dict]] = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "compare": cmd_compare,
    "ppc": cmd_ppc,
    "patterns": cmd_patterns,
}

# exit status and category per exception family
ERROR_CATEGORIES = (
    (ConfigError, 2, "config"),
    (DataError, 3, "data"),
    (DesignError, 3, "data"),
    (SimulationError, 3, "data"),
    (ModelError, 4, "model"),
    (DistributionError, 4, "model"),
    (InferenceError, 4, "model"),
    (SamplerError, 5, "sampler"),
    (OSError, 6, "io"),
)


def _versions() -> dict:
    import numba
    import scipy
    return {"bridge_mixed": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__,
            "numba": numba.__version__}


def dispatch(cfg: RunConfig) -> dict:
    """Run one command; writes artifacts and ``run.json`` into the output directory."""
    start = time.time()
    result = HANDLERS[cfg.command](cfg)
    out = _out_dir(cfg)
    write_config(cfg, out / "config.ini")
    meta = {
        "command": cfg.command,
        "seed": _seed_for(cfg),
        "config_sha256": cfg.digest(),
        "versions": _versions(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(start)),
        "wall_time_s": round(time.time() - start, 3),
        "result": result,
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2, default=str), encoding="utf-8")
    return result


def _seed_for(cfg: RunConfig) -> int:
    section = {"simulate": "simulate", "ppc": "ppc"}.get(cfg.command, "sampler")
    return cfg.get(section, "seed")


def _help_epilog() -> str:
    lines = ["configuration keys (INI sections) and defaults:"]
    for section, keys in SCHEMA.items():
        lines.append(f"  [{section}]")
        for k, key in keys.items():
            default = "required/none" if key.default in (None, ()) else _fmt(key.default)
            lines.append(f"    {k} = {default}    ; {key.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridge-mixed", description=__doc__.splitlines()[0],
                                epilog=_help_epilog(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI configuration file")
    p.add_argument("--seed", type=int, help="override the seed of this command")
    p.add_argument("--threads", type=int, help="override sampler.threads")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.command)
        if args.seed is not None:
            for section in ("sampler", "simulate", "ppc"):
                cfg.set(section, "seed", args.seed)
        if args.threads is not None:
            cfg.set("sampler", "threads", args.threads)
        result = dispatch(cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit status below
        for kind, status, category in ERROR_CATEGORIES:
            if isinstance(exc, kind):
                break
        else:
            status, category = 1, "internal"
        print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
        return status
    print(json.dumps({"command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
