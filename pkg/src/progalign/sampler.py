"""No-U-turn Hamiltonian Monte Carlo with warmup adaptation and thinning.

A from-scratch Euclidean NUTS kernel: leapfrog integration with a diagonal
mass matrix, slice-variable tree doubling with U-turn termination, dual
averaging of the step size toward a target acceptance statistic, and
windowed (fast/slow/fast) diagonal mass estimation during warmup.

Chains are independent: each gets its own RNG stream derived from
``(seed, chain)``, so the retained draws are bit-identical whether chains
run serially or in parallel processes.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DELTA_MAX = 1000.0  # Hamiltonian error past which a trajectory is divergent


class SamplingError(RuntimeError):
    """The sampler could not produce usable draws."""


@dataclass
class SamplerConfig:
    chains: int = 4
    warmup_iters: int = 6000
    sampling_iters: int = 2000
    thin: int = 4
    seed: int = 0
    target_acceptance: float = 0.8
    max_tree_depth: int = 10
    adapt_mass: bool = True
    init_inv_mass: np.ndarray | None = None  # starting (or fixed) metric diagonal
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    jobs: int | None = None

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.thin < 1 or self.sampling_iters % self.thin != 0:
            raise ValueError("sampling_iters must be divisible by thin")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must be in (0, 1)")

    @property
    def retained_per_chain(self) -> int:
        return self.sampling_iters // self.thin


@dataclass
class PosteriorDraws:
    """Retained draws in the natural (constrained) parameter space."""

    draws: np.ndarray            # (total_draws, dim)
    chain_id: np.ndarray         # (total_draws,)
    iteration: np.ndarray        # 1-based post-warmup iteration
    names: list[str]
    divergences: list[int]       # post-warmup, per chain
    warmup_divergences: list[int]
    step_sizes: list[float]
    accept_stats: list[float]
    warnings: list[str] = field(default_factory=list)
    tree_depths: list[float] = field(default_factory=list)  # per-chain mean

    @property
    def n_chains(self) -> int:
        return len(self.divergences)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def chain_matrix(self, j: int) -> np.ndarray:
        """Draws of parameter ``j`` as a (chains, per-chain) matrix."""
        per = self.n_draws // self.n_chains
        return self.draws[:, j].reshape(self.n_chains, per)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


# ---------------------------------------------------------------------------
# adaptation helpers


class _DualAveraging:
    """Nesterov dual averaging of log step size (Hoffman & Gelman 2014)."""

    GAMMA = 0.05
    T0 = 10.0
    KAPPA = 0.75

    def __init__(self, eps0: float):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = math.log(eps0)
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_stat: float, target: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / self.GAMMA * self.h_bar
        w = self.t ** (-self.KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


class _Welford:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        # shrink toward a small diagonal, as short windows are noisy
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        w = self.n / (self.n + 5.0)
        return w * var + (1.0 - w) * 1e-3


def _warmup_windows(warmup: int, init_buffer: int, term_buffer: int,
                    base_window: int) -> list[tuple[int, int]]:
    """Doubling slow-adaptation windows between two fast buffers."""
    if warmup < 20:
        return []
    if warmup < init_buffer + term_buffer + base_window:
        init_buffer = max(1, int(0.15 * warmup))
        term_buffer = max(1, int(0.10 * warmup))
        base_window = max(1, warmup - init_buffer - term_buffer)
    start = init_buffer
    end = warmup - term_buffer
    windows = []
    size = base_window
    while start < end:
        stop = start + size
        if stop + 2 * size > end:
            stop = end
        windows.append((start, stop))
        start = stop
        size *= 2
    return windows


# ---------------------------------------------------------------------------
# NUTS kernel


def _kinetic(p: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(np.dot(p * inv_mass, p))


def _leapfrog(target, z, p, grad, eps, inv_mass):
    half = 0.5 * eps
    p = p + half * grad
    z = z + eps * (p * inv_mass)
    lp, grad = target.log_density_and_grad(z)
    p = p + half * grad
    return z, p, lp, grad


def _uturn(dz, p_minus, p_plus, inv_mass) -> bool:
    return (
        float(np.dot(dz, p_minus * inv_mass)) < 0.0
        or float(np.dot(dz, p_plus * inv_mass)) < 0.0
    )


def _build_tree(target, z, p, grad, log_u, direction, depth, eps, inv_mass,
                joint0, rng):
    """Recursive doubling; returns edges, proposal, and bookkeeping.

    Tuple layout: (z-, p-, g-, z+, p+, g+, z_prop, lp_prop, g_prop,
    n_valid, keep_going, alpha_sum, n_alpha, divergent)
    """
    if depth == 0:
        z1, p1, lp1, g1 = _leapfrog(target, z, p, grad, direction * eps, inv_mass)
        joint = lp1 - _kinetic(p1, inv_mass) if math.isfinite(lp1) else -math.inf
        divergent = not math.isfinite(joint) or (joint0 - joint) > DELTA_MAX
        n_valid = int(log_u <= joint)
        keep_going = (not divergent) and (log_u < joint + DELTA_MAX)
        alpha = math.exp(min(0.0, joint - joint0)) if math.isfinite(joint) else 0.0
        return z1, p1, g1, z1, p1, g1, z1, lp1, g1, n_valid, keep_going, alpha, 1, divergent

    (zm, pm, gm, zp, pp, gp, zprop, lpprop, gprop,
     n1, going, a_sum, n_a, div) = _build_tree(
        target, z, p, grad, log_u, direction, depth - 1, eps, inv_mass, joint0, rng
    )
    if going and not div:
        if direction == -1:
            (zm, pm, gm, _, _, _, zprop2, lpprop2, gprop2,
             n2, going2, a2, na2, div2) = _build_tree(
                target, zm, pm, gm, log_u, direction, depth - 1, eps, inv_mass,
                joint0, rng
            )
        else:
            (_, _, _, zp, pp, gp, zprop2, lpprop2, gprop2,
             n2, going2, a2, na2, div2) = _build_tree(
                target, zp, pp, gp, log_u, direction, depth - 1, eps, inv_mass,
                joint0, rng
            )
        if n1 + n2 > 0 and rng.random() < n2 / (n1 + n2):
            zprop, lpprop, gprop = zprop2, lpprop2, gprop2
        n1 += n2
        going = going2 and not _uturn(zp - zm, pm, pp, inv_mass)
        a_sum += a2
        n_a += na2
        div = div or div2
    return zm, pm, gm, zp, pp, gp, zprop, lpprop, gprop, n1, going, a_sum, n_a, div


def _transition(target, z, lp, grad, eps, inv_mass, sqrt_mass, max_depth, rng):
    """One NUTS update; returns (z, lp, grad, accept_stat, divergent, depth)."""
    p0 = rng.standard_normal(z.size) * sqrt_mass
    joint0 = lp - _kinetic(p0, inv_mass)
    log_u = joint0 + math.log(rng.random())

    zm = zp = z
    pm = pp = p0
    gm = gp = grad
    z_acc, lp_acc, g_acc = z, lp, grad
    n_valid = 1
    alpha_sum, n_alpha = 0.0, 0
    divergent = False
    depth = 0

    while depth < max_depth:
        direction = -1 if rng.random() < 0.5 else 1
        if direction == -1:
            (zm, pm, gm, _, _, _, zprop, lpprop, gprop,
             n2, going, a2, na2, div2) = _build_tree(
                target, zm, pm, gm, log_u, direction, depth, eps, inv_mass,
                joint0, rng
            )
        else:
            (_, _, _, zp, pp, gp, zprop, lpprop, gprop,
             n2, going, a2, na2, div2) = _build_tree(
                target, zp, pp, gp, log_u, direction, depth, eps, inv_mass,
                joint0, rng
            )
        alpha_sum += a2
        n_alpha += na2
        divergent = divergent or div2
        if going and n2 > 0 and rng.random() < min(1.0, n2 / n_valid):
            z_acc, lp_acc, g_acc = zprop, lpprop, gprop
        n_valid += n2
        depth += 1
        if not going or _uturn(zp - zm, pm, pp, inv_mass):
            break

    accept_stat = alpha_sum / max(1, n_alpha)
    return z_acc, lp_acc, g_acc, accept_stat, divergent, depth


def _find_initial_step(target, z, lp, grad, inv_mass, sqrt_mass, rng) -> float:
    eps = 1.0
    p0 = rng.standard_normal(z.size) * sqrt_mass
    joint0 = lp - _kinetic(p0, inv_mass)

    def joint_after(step):
        z1, p1, lp1, _ = _leapfrog(target, z, p0, grad, step, inv_mass)
        if not np.isfinite(lp1):
            return -np.inf
        return lp1 - _kinetic(p1, inv_mass)

    log_ratio = joint_after(eps) - joint0
    for _ in range(60):
        if np.isfinite(log_ratio):
            break
        eps *= 0.5
        log_ratio = joint_after(eps) - joint0
    direction = 1.0 if log_ratio > math.log(0.5) else -1.0
    for _ in range(100):
        eps_next = eps * (2.0**direction)
        if not 1e-10 < eps_next < 1e3:
            break
        log_ratio = joint_after(eps_next) - joint0
        if not np.isfinite(log_ratio):
            log_ratio = -np.inf
        if direction * log_ratio <= direction * math.log(0.5):
            break
        eps = eps_next
    return eps


def _chain_rng(seed: int, stream: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, chain])))


def _run_chain(args):
    target, config, z0, chain = args
    rng = _chain_rng(config.seed, 2, chain)
    dim = z0.size

    lp, grad = target.log_density_and_grad(z0)
    if not np.isfinite(lp):
        raise SamplingError(f"chain {chain}: non-finite log density at the start")

    if config.init_inv_mass is not None:
        inv_mass = np.asarray(config.init_inv_mass, dtype=float).copy()
        if inv_mass.shape != (dim,):
            raise SamplingError("init_inv_mass must have one entry per parameter")
    else:
        inv_mass = np.ones(dim)
    sqrt_mass = 1.0 / np.sqrt(inv_mass)
    z = z0.copy()
    eps = _find_initial_step(target, z, lp, grad, inv_mass, sqrt_mass, rng)
    da = _DualAveraging(eps)

    windows = (
        _warmup_windows(
            config.warmup_iters, config.init_buffer, config.term_buffer,
            config.base_window,
        )
        if config.adapt_mass
        else []
    )
    window_ends = {stop: start for start, stop in windows}
    in_window = np.zeros(config.warmup_iters, dtype=bool)
    for start, stop in windows:
        in_window[start:stop] = True
    acc = _Welford(dim)

    refresh = (
        target.gibbs_refresh
        if getattr(target, "has_gibbs_refresh", False)
        else None
    )

    warm_div = 0
    for it in range(config.warmup_iters):
        z, lp, grad, a_stat, div, _ = _transition(
            target, z, lp, grad, eps, inv_mass, sqrt_mass, config.max_tree_depth, rng
        )
        if refresh is not None:
            z = refresh(z, rng)
            lp, grad = target.log_density_and_grad(z)
        warm_div += int(div)
        eps = da.update(a_stat, config.target_acceptance)
        if in_window[it]:
            acc.push(z)
        if (it + 1) in window_ends:
            inv_mass = acc.regularized_variance()
            sqrt_mass = 1.0 / np.sqrt(inv_mass)
            acc = _Welford(dim)
            eps = da.adapted()
            da = _DualAveraging(eps)

    if config.warmup_iters > 0:
        eps = da.adapted()

    constrain = getattr(target, "constrain", None)
    kept = np.empty((config.retained_per_chain, dim))
    accept_sum = 0.0
    n_div = 0
    row = 0
    depth_sum = 0
    depth_max = 0
    iters = np.empty(config.retained_per_chain, dtype=np.int64)
    for it in range(1, config.sampling_iters + 1):
        z, lp, grad, a_stat, div, depth = _transition(
            target, z, lp, grad, eps, inv_mass, sqrt_mass, config.max_tree_depth, rng
        )
        if refresh is not None:
            z = refresh(z, rng)
            lp, grad = target.log_density_and_grad(z)
        accept_sum += a_stat
        n_div += int(div)
        depth_sum += depth
        depth_max = max(depth_max, depth)
        if it % config.thin == 0:
            kept[row] = constrain(z) if constrain is not None else z
            iters[row] = it
            row += 1
    if n_div >= config.sampling_iters:
        raise SamplingError(f"chain {chain}: every post-warmup transition diverged")
    return {
        "chain": chain,
        "draws": kept,
        "iterations": iters,
        "divergences": n_div,
        "warmup_divergences": warm_div,
        "step_size": eps,
        "accept_rate": accept_sum / config.sampling_iters,
        "mean_tree_depth": depth_sum / config.sampling_iters,
        "max_tree_depth": depth_max,
    }


def run_nuts(target, config: SamplerConfig, init_z: np.ndarray) -> PosteriorDraws:
    """Sample ``config.chains`` chains from ``target`` starting at ``init_z``.

    ``target`` provides ``log_density_and_grad(z)`` (and optionally
    ``constrain`` mapping z to the natural space, plus a ``layout`` with
    parameter names). ``init_z`` is (chains, dim) in the unconstrained
    space. Deterministic given the config seed.
    """
    init_z = np.atleast_2d(np.asarray(init_z, dtype=float))
    if init_z.shape[0] != config.chains:
        raise ValueError("init_z must provide one row per chain")

    args = [(target, config, init_z[c], c) for c in range(config.chains)]
    jobs = config.jobs if config.jobs is not None else min(config.chains, os.cpu_count() or 1)
    if jobs > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_chain, args))
    else:
        results = [_run_chain(a) for a in args]
    results.sort(key=lambda r: r["chain"])

    layout = getattr(target, "layout", None)
    names = list(layout.names) if layout is not None else [
        f"theta[{i}]" for i in range(init_z.shape[1])
    ]

    draws = np.concatenate([r["draws"] for r in results], axis=0)
    chain_id = np.repeat(np.arange(config.chains), config.retained_per_chain)
    iteration = np.concatenate([r["iterations"] for r in results])
    divergences = [r["divergences"] for r in results]
    warnings = []
    total_div = sum(divergences)
    if total_div > 0.01 * config.chains * config.sampling_iters:
        warnings.append(
            f"{total_div} divergent transitions post-warmup "
            f"(> 1% of {config.chains * config.sampling_iters})"
        )
    for w in warnings:
        logger.warning("%s", w)
    return PosteriorDraws(
        draws=draws,
        chain_id=chain_id,
        iteration=iteration,
        names=names,
        divergences=divergences,
        warmup_divergences=[r["warmup_divergences"] for r in results],
        step_sizes=[r["step_size"] for r in results],
        accept_stats=[r["accept_rate"] for r in results],
        warnings=warnings,
        tree_depths=[r["mean_tree_depth"] for r in results],
    )


def initialize_chains(model, config: SamplerConfig) -> np.ndarray:
    """Constrained starting points, one per chain.

    Unconstrained coordinates start uniform in [-2, 2] except the onset
    times, which start at the observed anchor (diagnosis time for
    diagnosed subjects, last visit + 2 years for censored ones) with a
    small jitter. Points are redrawn (up to 100 times) until the log
    posterior is finite.
    """
    rng = _chain_rng(config.seed, 1, 0)
    lay = model.layout
    starts = np.empty((config.chains, model.dim))
    anchor = np.where(model.diagnosed, model.t_event, model.t_event + 2.0)
    for c in range(config.chains):
        for attempt in range(100):
            z = rng.uniform(-2.0, 2.0, size=model.dim)
            tz = np.empty(model.n_subjects)
            if model.spec.anchored:
                # diagnosed: logistic midpoint bias toward t_diag; censored:
                # shifted-log coordinate of t_last + 2
                mid = np.log(model.spec.eps_lower / model.spec.eps_upper)
                tz[model.diagnosed] = mid
                tz[~model.diagnosed] = math.log(2.0 + model.spec.eps_lower)
            else:
                tz = anchor.copy()
            tz += 0.3 * rng.standard_normal(model.n_subjects)
            z[lay.t_star_slice] = tz
            if np.isfinite(model.log_density(z)):
                starts[c] = model.constrain(z)
                break
        else:
            raise SamplingError(f"no finite starting point found for chain {c}")
    return starts
