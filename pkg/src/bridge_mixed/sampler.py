"""No-U-Turn sampler with a diagonal metric.

Trajectories are built by repeated doubling; states are selected with
multinomial weights exp(-H) (biased progressive sampling between doublings,
uniform within a subtree) and the trajectory stops on the generalized
no-U-turn criterion.  Warm-up runs dual averaging on the step size and
estimates a diagonal inverse metric over doubling windows.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

DIVERGENCE_THRESHOLD = 1000.0
MASS_FLOOR = 1e-10
STAT_NAMES = ("step_size", "tree_depth", "n_leapfrog", "divergent", "accept_stat", "energy",
              "log_density")


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 2000
    warmup_fraction: float = 0.5
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    threads: int = 1
    init_radius: float = 2.0
    # dual averaging
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    # windowed metric adaptation
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.iterations <= 10:
            raise ValueError("iterations must exceed 10")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")

    @property
    def warmup(self) -> int:
        return int(self.iterations * self.warmup_fraction)

    @property
    def kept(self) -> int:
        return self.iterations - self.warmup


@dataclass
class PosteriorDraws:
    """Kept draws in unconstrained coordinates, shape (chains, kept, dim)."""

    samples: np.ndarray
    stats: dict[str, np.ndarray]
    names: list[str]
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inv_metric: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_kept(self) -> int:
        return self.samples.shape[1]

    @property
    def dimension(self) -> int:
        return self.samples.shape[2]

    def flat(self) -> np.ndarray:
        """Draws with chains concatenated in chain order, shape (chains*kept, dim)."""
        return self.samples.reshape(-1, self.dimension)

    @property
    def n_divergent(self) -> int:
        return int(np.sum(self.stats["divergent"]))


# ----------------------------------------------------------------------------
# integrator
# ----------------------------------------------------------------------------

class _Target:
    """Wraps a value-and-gradient callable; counts evaluations."""

    def __init__(self, value_and_grad: Callable):
        self.value_and_grad = value_and_grad
        self.n_evals = 0

    def __call__(self, q):
        self.n_evals += 1
        lp, g = self.value_and_grad(q)
        if not math.isfinite(lp) or not np.all(np.isfinite(g)):
            return -math.inf, g
        return lp, g


def _as_target(target):
    if hasattr(target, "value_and_grad"):
        return _Target(target.value_and_grad)
    return _Target(target)


def leapfrog(q, p, grad, eps, inv_metric, target):
    """One leapfrog step; returns (q, p, log_density, grad).

    ``grad`` is the gradient of the log density at ``q``.  A non-finite
    log density is reported as -inf; callers treat it as divergent.
    """
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * inv_metric * p_half
    lp, g = target(q_new)
    p_new = p_half + 0.5 * eps * g
    return q_new, p_new, lp, g


def leapfrog_states(q, p, eps, inv_metric, target, n_steps=1):
    """Convenience wrapper taking raw value-and-grad callables."""
    tgt = target if isinstance(target, _Target) else _as_target(target)
    lp, g = tgt(q)
    for _ in range(n_steps):
        q, p, lp, g = leapfrog(q, p, g, eps, inv_metric, tgt)
    return q, p, lp


def _kinetic(p, inv_metric):
    return 0.5 * float(np.dot(p * inv_metric, p))


def _criterion(p_sharp_minus, p_sharp_plus, rho):
    return float(np.dot(p_sharp_plus, rho)) > 0.0 and float(np.dot(p_sharp_minus, rho)) > 0.0


@dataclass
class _Tree:
    # forward-time ordered edges
    q_minus: np.ndarray
    p_minus: np.ndarray
    g_minus: np.ndarray
    q_plus: np.ndarray
    p_plus: np.ndarray
    g_plus: np.ndarray
    q_prop: np.ndarray
    lp_prop: float
    g_prop: np.ndarray
    log_weight: float
    rho: np.ndarray
    p_sharp_minus: np.ndarray
    p_sharp_plus: np.ndarray
    valid: bool
    divergent: bool
    sum_accept: float
    n_leapfrog: int


class _NUTS:
    def __init__(self, target, inv_metric, max_depth, rng):
        self.target = target
        self.inv_metric = inv_metric
        self.max_depth = max_depth
        self.rng = rng

    def _leaf(self, q, p, g, direction, eps, H0):
        q1, p1, lp1, g1 = leapfrog(q, p, g, direction * eps, self.inv_metric, self.target)
        H = -lp1 + _kinetic(p1, self.inv_metric) if math.isfinite(lp1) else math.inf
        if not math.isfinite(H):
            H = math.inf
        delta = H - H0
        divergent = not (delta < DIVERGENCE_THRESHOLD)
        accept = math.exp(min(0.0, -delta)) if math.isfinite(delta) else 0.0
        ps = self.inv_metric * p1
        return _Tree(q1, p1, g1, q1, p1, g1, q1, lp1, g1,
                     -delta if math.isfinite(delta) else -math.inf,
                     p1.copy(), ps, ps, not divergent, divergent, accept, 1)

    def build(self, q, p, g, direction, depth, eps, H0):
        if depth == 0:
            return self._leaf(q, p, g, direction, eps, H0)
        first = self.build(q, p, g, direction, depth - 1, eps, H0)
        if not first.valid:
            return first
        if direction > 0:
            second = self.build(first.q_plus, first.p_plus, first.g_plus, direction, depth - 1, eps, H0)
        else:
            second = self.build(first.q_minus, first.p_minus, first.g_minus, direction, depth - 1, eps, H0)
        n_lf = first.n_leapfrog + second.n_leapfrog
        acc = first.sum_accept + second.sum_accept
        if not second.valid:
            second.n_leapfrog = n_lf
            second.sum_accept = acc
            return second
        left, right = (first, second) if direction > 0 else (second, first)
        log_w = np.logaddexp(first.log_weight, second.log_weight)
        if math.log1p(-self.rng.random()) < second.log_weight - log_w:
            q_prop, lp_prop, g_prop = second.q_prop, second.lp_prop, second.g_prop
        else:
            q_prop, lp_prop, g_prop = first.q_prop, first.lp_prop, first.g_prop
        rho = left.rho + right.rho
        valid = (_criterion(left.p_sharp_minus, right.p_sharp_plus, rho)
                 and _criterion(left.p_sharp_minus, right.p_sharp_minus, left.rho + right.p_minus)
                 and _criterion(left.p_sharp_plus, right.p_sharp_plus, right.rho + left.p_plus))
        return _Tree(left.q_minus, left.p_minus, left.g_minus, right.q_plus, right.p_plus,
                     right.g_plus, q_prop, lp_prop, g_prop, float(log_w), rho,
                     left.p_sharp_minus, right.p_sharp_plus, valid, False, acc, n_lf)

    def transition(self, q, lp, g, eps):
        inv_metric = self.inv_metric
        p0 = self.rng.standard_normal(q.shape) / np.sqrt(inv_metric)
        H0 = -lp + _kinetic(p0, inv_metric)
        ps0 = inv_metric * p0
        tree = _Tree(q, p0, g, q, p0, g, q, lp, g, 0.0, p0.copy(), ps0, ps0, True, False, 0.0, 0)
        q_new, lp_new, g_new = q, lp, g
        depth = 0
        divergent = False
        sum_accept = 0.0
        n_leapfrog = 0
        while depth < self.max_depth:
            direction = 1 if self.rng.random() < 0.5 else -1
            if direction > 0:
                sub = self.build(tree.q_plus, tree.p_plus, tree.g_plus, 1, depth, eps, H0)
            else:
                sub = self.build(tree.q_minus, tree.p_minus, tree.g_minus, -1, depth, eps, H0)
            depth += 1
            n_leapfrog += sub.n_leapfrog
            sum_accept += sub.sum_accept
            if sub.divergent:
                divergent = True
                break
            if not sub.valid:
                break
            # biased progressive sampling
            if math.log1p(-self.rng.random()) < sub.log_weight - tree.log_weight:
                q_new, lp_new, g_new = sub.q_prop, sub.lp_prop, sub.g_prop
            left, right = (tree, sub) if direction > 0 else (sub, tree)
            rho = left.rho + right.rho
            valid = (_criterion(left.p_sharp_minus, right.p_sharp_plus, rho)
                     and _criterion(left.p_sharp_minus, right.p_sharp_minus, left.rho + right.p_minus)
                     and _criterion(left.p_sharp_plus, right.p_sharp_plus, right.rho + left.p_plus))
            tree = _Tree(left.q_minus, left.p_minus, left.g_minus, right.q_plus, right.p_plus,
                         right.g_plus, q_new, lp_new, g_new,
                         float(np.logaddexp(tree.log_weight, sub.log_weight)), rho,
                         left.p_sharp_minus, right.p_sharp_plus, valid, False, 0.0, 0)
            if not valid:
                break
        accept_stat = sum_accept / n_leapfrog if n_leapfrog else 0.0
        p_energy = H0
        return q_new, lp_new, g_new, {
            "tree_depth": depth, "n_leapfrog": n_leapfrog, "divergent": divergent,
            "accept_stat": accept_stat, "energy": p_energy, "log_density": lp_new,
        }


def nuts_transition(q, target, eps, inv_metric, rng, max_tree_depth=10):
    """One NUTS transition from ``q``; returns (new position, stats dict)."""
    tgt = target if isinstance(target, _Target) else _as_target(target)
    q = np.asarray(q, dtype=float)
    lp, g = tgt(q)
    if not math.isfinite(lp):
        raise SamplerError("log density is not finite at the starting point")
    inv_metric = np.broadcast_to(np.asarray(inv_metric, dtype=float), q.shape).copy()
    q_new, _, _, stats = _NUTS(tgt, inv_metric, max_tree_depth, rng).transition(q, lp, g, eps)
    stats["step_size"] = eps
    return q_new, stats


# ----------------------------------------------------------------------------
# adaptation
# ----------------------------------------------------------------------------

class DualAveraging:
    def __init__(self, eps0, target_accept=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.h_bar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept_stat) -> float:
        self.count += 1
        t = self.count
        a = accept_stat if math.isfinite(accept_stat) else 0.0
        w = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.delta - a)
        self.log_eps = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        eta = t ** -self.kappa
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return self.step_size

    @property
    def step_size(self) -> float:
        return math.exp(self.log_eps)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.log_eps_bar)


def adaptation_windows(warmup, init_buffer=75, term_buffer=50, base_window=25):
    """(start, end) iteration ranges of the metric-estimation windows.

    Fast initial buffer, slow windows doubling in length, fast terminal
    buffer.  Warm-ups too short for the default buffers use 15% / 75% / 10%.
    """
    if warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    windows = []
    start = init_buffer
    size = base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start = end
        size *= 2
    return windows


def _regularized_variance(samples):
    n = len(samples)
    var = np.var(samples, axis=0, ddof=1) if n > 1 else np.ones(samples.shape[1])
    var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
    return np.maximum(var, MASS_FLOOR)


def find_reasonable_step_size(q, lp, g, inv_metric, target, rng, eps=1.0):
    """Double or halve the step until one leapfrog step's acceptance crosses 1/2."""
    p = rng.standard_normal(q.shape) / np.sqrt(inv_metric)
    H0 = -lp + _kinetic(p, inv_metric)

    def log_accept(e):
        _, p1, lp1, _ = leapfrog(q, p, g, e, inv_metric, target)
        if not math.isfinite(lp1):
            return -math.inf
        return H0 - (-lp1 + _kinetic(p1, inv_metric))

    la = log_accept(eps)
    direction = 1.0 if la > math.log(0.5) else -1.0
    for _ in range(100):
        if direction > 0 and not la > math.log(0.5):
            break
        if direction < 0 and not la < math.log(0.5):
            break
        new = eps * (2.0 ** direction)
        if new > 1e7 or new < 1e-10:
            break
        eps = new
        la = log_accept(eps)
    return eps


def adapt(q, target, config: SamplerConfig, rng, inv_metric=None, callback=None):
    """Run warm-up from ``q``.

    Returns (final position, log density, gradient, step size, inverse metric,
    per-iteration warm-up stats).
    """
    tgt = target if isinstance(target, _Target) else _as_target(target)
    q = np.asarray(q, dtype=float)
    dim = q.size
    inv_metric = np.ones(dim) if inv_metric is None else np.asarray(inv_metric, dtype=float).copy()
    lp, g = tgt(q)
    if not math.isfinite(lp):
        raise SamplerError("log density is not finite at the starting point")
    eps = find_reasonable_step_size(q, lp, g, inv_metric, tgt, rng)
    da = DualAveraging(eps, config.target_accept, config.gamma, config.t0, config.kappa)
    warmup = config.warmup
    windows = adaptation_windows(warmup, config.init_buffer, config.term_buffer,
                                 config.base_window)
    ends = {e for _, e in windows}
    window: list[np.ndarray] = []
    accepts = []
    for it in range(warmup):
        kernel = _NUTS(tgt, inv_metric, config.max_tree_depth, rng)
        q, lp, g, st = kernel.transition(q, lp, g, da.step_size)
        da.update(st["accept_stat"])
        accepts.append(st["accept_stat"])
        if callback is not None:
            callback(it, st)
        if any(s <= it < e for s, e in windows):
            window.append(q.copy())
        if it + 1 in ends:
            inv_metric = _regularized_variance(np.asarray(window))
            window = []
            eps = find_reasonable_step_size(q, lp, g, inv_metric, tgt, rng, da.step_size)
            da.restart(eps)
    step = da.final_step_size if warmup > 0 else eps
    if not math.isfinite(step) or step <= 0.0:
        step = eps
    return q, lp, g, step, inv_metric, np.asarray(accepts)


# ----------------------------------------------------------------------------
# chains
# ----------------------------------------------------------------------------

def _initial_point(target, dim, rng, radius):
    for _ in range(100):
        q = rng.uniform(-radius, radius, dim)
        lp, g = target(q)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return q
    raise SamplerError("no finite initial log density after 100 draws")


def run_chain(target, config: SamplerConfig, seed_seq, dim=None, init=None):
    """Run one chain; returns (kept samples, stats dict, step size, inverse metric)."""
    tgt = target if isinstance(target, _Target) else _as_target(target)
    rng = np.random.default_rng(seed_seq)
    if dim is None:
        dim = target.dimension
    q = _initial_point(tgt, dim, rng, config.init_radius) if init is None else np.asarray(init, float)
    q, lp, g, eps, inv_metric, _ = adapt(q, tgt, config, rng)
    kernel = _NUTS(tgt, inv_metric, config.max_tree_depth, rng)
    kept = config.kept
    samples = np.empty((kept, dim))
    stats = {k: np.empty(kept) for k in STAT_NAMES}
    for it in range(kept):
        q, lp, g, st = kernel.transition(q, lp, g, eps)
        samples[it] = q
        st["step_size"] = eps
        for k in STAT_NAMES:
            stats[k][it] = st[k]
    stats["divergent"] = stats["divergent"].astype(bool)
    stats["tree_depth"] = stats["tree_depth"].astype(np.int64)
    stats["n_leapfrog"] = stats["n_leapfrog"].astype(np.int64)
    return samples, stats, eps, inv_metric


def _chain_job(args):
    target, config, seed_seq, dim = args
    return run_chain(target, config, seed_seq, dim)


def run_chains(target, config: SamplerConfig, names=None, dim=None) -> PosteriorDraws:
    """Run ``config.chains`` independent chains.

    Chain ``c`` uses the ``c``-th child of ``SeedSequence(config.seed)``, so
    results do not depend on ``config.threads``.
    """
    if dim is None:
        dim = target.dimension
    if names is None:
        names = list(getattr(target, "names", [f"q{k}" for k in range(dim)]))
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(target, config, s, dim) for s in seeds]
    if config.threads > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.threads, config.chains)) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    samples = np.stack([r[0] for r in results])
    stats = {k: np.stack([r[1][k] for r in results]) for k in STAT_NAMES}
    return PosteriorDraws(samples, stats, list(names),
                          np.array([r[2] for r in results]), np.stack([r[3] for r in results]))


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

DRAWS_META = "draws.json"


def _chain_file(directory, c):
    return Path(directory) / f"chain_{c + 1}.csv"


def write_draws(draws: PosteriorDraws, directory) -> None:
    """One CSV per chain (iteration, coordinates, stats) plus a small JSON header."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c in range(draws.n_chains):
        frame = pd.DataFrame(draws.samples[c], columns=draws.names)
        frame.insert(0, "iteration", np.arange(1, draws.n_kept + 1))
        for k in STAT_NAMES:
            col = draws.stats[k][c]
            frame[f"{k}__"] = col.astype(np.int64) if col.dtype == bool else col
        frame.to_csv(_chain_file(d, c), index=False, float_format="%.17g")
    meta = {"chains": draws.n_chains, "names": list(draws.names),
            "step_size": [float(x) for x in draws.step_size],
            "inv_metric": np.asarray(draws.inv_metric).tolist()}
    (d / DRAWS_META).write_text(json.dumps(meta))


def read_draws(directory) -> PosteriorDraws:
    d = Path(directory)
    meta = json.loads((d / DRAWS_META).read_text())
    names = meta["names"]
    samples, stats = [], {k: [] for k in STAT_NAMES}
    for c in range(meta["chains"]):
        frame = pd.read_csv(_chain_file(d, c), float_precision="round_trip")
        samples.append(frame[names].to_numpy(dtype=float))
        for k in STAT_NAMES:
            stats[k].append(frame[f"{k}__"].to_numpy())
    out = {k: np.stack(v) for k, v in stats.items()}
    out["divergent"] = out["divergent"].astype(bool)
    return PosteriorDraws(np.stack(samples), out, names, np.array(meta["step_size"]),
                          np.array(meta["inv_metric"]))
