"""Bayesian cumulative-logit mixed models for three-level ordinal panel data.

Random effects may follow Bridge, Modified Bridge or Normal laws.  Bridge
families admit exact population-averaged coefficients, obtained by scaling
the conditional ones.
"""
__version__ = "0.1.0"

from .data import (Covariate, DesignMatrix, PanelDataset, PanelRecord, build_design, load_dataset,
                   make_dataset, pattern_table, validate, write_dataset)
from .diagnostics import diagnostics, effective_sample_size, split_rhat
from .inference import (Fit, PpcTable, SummaryRow, fit_model, load_fit, lpml, marginalize, ppc,
                        save_fit, summarize, waic)
from .model import FAMILIES, ModelSpec, ParameterState, cumulative_probs
from .posterior import PosteriorTarget
from .sampler import PosteriorDraws, SamplerConfig, run_chains
from .simulate import SimSpec, simulate_dataset

__all__ = [
    "Covariate", "DesignMatrix", "FAMILIES", "Fit", "ModelSpec", "PanelDataset", "PanelRecord",
    "ParameterState", "PosteriorDraws", "PosteriorTarget", "PpcTable", "SamplerConfig", "SimSpec",
    "SummaryRow", "build_design", "cumulative_probs", "diagnostics", "effective_sample_size",
    "fit_model", "load_dataset", "load_fit", "lpml", "make_dataset", "marginalize",
    "pattern_table", "ppc", "run_chains", "save_fit", "simulate_dataset", "split_rhat",
    "summarize", "validate", "waic", "write_dataset",
]
