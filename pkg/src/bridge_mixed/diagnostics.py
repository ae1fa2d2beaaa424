"""Split R-hat and effective sample size for multi-chain draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Diagnostics:
    names: list[str]
    rhat: np.ndarray        # NaN where undefined
    ess: np.ndarray
    rhat_available: np.ndarray  # False for single chains or zero within-chain variance

    def max_rhat(self, mask=None) -> float:
        r = self.rhat if mask is None else self.rhat[mask]
        r = r[np.isfinite(r)]
        return float(r.max()) if r.size else float("nan")

    def as_rows(self):
        for n, r, e, ok in zip(self.names, self.rhat, self.ess, self.rhat_available):
            yield n, (float(r) if ok else None), float(e)


def _split(chains: np.ndarray) -> np.ndarray:
    """(m, n, ...) -> (2m, n // 2, ...), dropping the middle draw for odd n."""
    n = chains.shape[1]
    half = n // 2
    return np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)


def split_rhat(chains: np.ndarray):
    """Split potential scale reduction per coordinate.

    ``chains`` has shape (m, n) or (m, n, d).  Returns ``(rhat, available)``;
    ``rhat`` is NaN where it is undefined (one chain, or no within-chain
    variation).
    """
    chains = np.asarray(chains, dtype=float)
    squeeze = chains.ndim == 2
    if squeeze:
        chains = chains[..., None]
    m, n = chains.shape[:2]
    d = chains.shape[2]
    if m < 2 or n < 4:
        out = np.full(d, np.nan), np.zeros(d, dtype=bool)
        return (out[0][0], out[1][0]) if squeeze else out
    s = _split(chains)
    nn = s.shape[1]
    means = s.mean(axis=1)
    within = s.var(axis=1, ddof=1).mean(axis=0)
    between = nn * means.var(axis=0, ddof=1)
    var_plus = (nn - 1) / nn * within + between / nn
    ok = within > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(ok, np.sqrt(var_plus / np.where(ok, within, 1.0)), np.nan)
    if squeeze:
        return rhat[0], ok[0]
    return rhat, ok


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row of ``x`` (shape (m, n)) via FFT."""
    m, n = x.shape
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n]
    return acov / n


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    chains = np.asarray(chains, dtype=float)
    squeeze = chains.ndim == 2
    if squeeze:
        chains = chains[..., None]
    m, n, d = chains.shape
    out = np.empty(d)
    for k in range(d):
        out[k] = _ess_1d(chains[:, :, k])
    return out[0] if squeeze else out


def _ess_1d(x: np.ndarray) -> float:
    m, n = x.shape
    if n < 4:
        return float("nan")
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    within = chain_var.mean()
    if not within > 0:
        return float(m * n)
    var_plus = within * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive, enforce monotone decrease
    tau = -1.0
    prev_pair = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev_pair)
        tau += 2.0 * pair
        prev_pair = pair
        t += 2
    tau = max(tau, 1.0 / np.log10(m * n)) if m * n > 1 else tau
    return float(m * n / tau)


def diagnostics(samples: np.ndarray, names=None) -> Diagnostics:
    """Split R-hat and ESS for draws of shape (chains, kept, dim)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[..., None]
    d = samples.shape[2]
    if names is None:
        names = [f"q{k}" for k in range(d)]
    rhat, ok = split_rhat(samples)
    ess = effective_sample_size(samples)
    return Diagnostics(list(names), rhat, ess, ok)
