"""Severity-scale trajectory predictions, threshold crossings, and RMSE.

The mean severity of marker ``k`` at disease time ``s`` for a covariate
profile ``x`` integrates the Gaussian predictive distribution of the
normalized value through the severity back-transform:

    E[P_k(s, x)] = E[ Phi(y) ],   y ~ N(F(s)'beta_k + x gamma_k,
                                        F(s)' B_k F(s) + sigma_k^2)

approximated per posterior draw by Monte Carlo with antithetic pairs and
common random numbers across the ``s`` grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .model import ParameterValues, ProgressionModel
from .sampler import PosteriorDraws

__all__ = [
    "default_grid",
    "mean_severity",
    "trajectory",
    "crossing_times",
    "rmse",
    "TrajectoryGrid",
    "CrossingSummary",
    "MarkerCrossing",
    "write_trajectory_csv",
    "write_crossing_csv",
    "write_rmse_csv",
]

GRID_START = -30.0
GRID_STOP = 5.0
GRID_STEP = 0.25
MC_DRAWS_DEFAULT = 1000


def default_grid(start: float = GRID_START, stop: float = GRID_STOP,
                 step: float = GRID_STEP) -> np.ndarray:
    n = int(round((stop - start) / step))
    grid = start + step * np.arange(n + 1)
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    return grid


def _antithetic_normals(rng: np.random.Generator, m: int) -> np.ndarray:
    if m < 2 or m % 2:
        raise ValueError("Monte Carlo sample count must be even and >= 2")
    half = rng.standard_normal(m // 2)
    return np.concatenate([half, -half])


def _moments(s, x, beta_k, gamma_k, sd_k, cor_k, sigma_k, n_covariates):
    s = np.asarray(s, dtype=float)
    mu = beta_k[0] + beta_k[1] * s
    if n_covariates:
        mu = mu + float(np.dot(np.asarray(x, dtype=float), gamma_k[:n_covariates]))
    var = sd_k[0] ** 2 + sigma_k**2
    if sd_k.size == 2:
        var = var + 2.0 * s * cor_k * sd_k[0] * sd_k[1] + (s * sd_k[1]) ** 2
    var = np.broadcast_to(np.asarray(var, dtype=float), s.shape)
    if np.any(var <= 0):
        raise ValueError("non-positive predictive variance")
    return mu, var


def mean_severity(s, x, params: ParameterValues, k: int, n_covariates: int,
                  m: int = MC_DRAWS_DEFAULT, rng=None) -> float:
    """Monte Carlo mean severity at a single disease time for one draw."""
    rng = rng if rng is not None else np.random.default_rng(0)
    z = _antithetic_normals(rng, m)
    cor = params.cor_u[k] if params.cor_u[k] is not None else 0.0
    mu, var = _moments(
        np.atleast_1d(s), x, params.beta[k], params.gamma[k], params.sd_u[k],
        cor, params.sigma_eps[k], n_covariates
    )
    return float(np.mean(ndtr(mu[0] + math.sqrt(var[0]) * z)))


@dataclass
class TrajectoryGrid:
    """Per-draw and summarized mean-severity curves for one marker."""

    marker: int
    s: np.ndarray          # (G,)
    per_draw: np.ndarray   # (n_draws, G)
    mean: np.ndarray       # (G,)
    lo95: np.ndarray
    hi95: np.ndarray


def trajectory(
    draws: PosteriorDraws,
    model: ProgressionModel,
    x,
    k: int,
    grid: np.ndarray | None = None,
    m: int = MC_DRAWS_DEFAULT,
    seed: int = 0,
    draw_stride: int = 1,
) -> TrajectoryGrid:
    """Mean severity over the disease-time grid, one curve per draw.

    The covariate profile ``x`` covers the shared covariates only; the
    first-visit indicator (when the marker has one) is taken as 0, i.e. a
    non-first assessment. A fresh antithetic normal sample is drawn per
    retained draw and reused across all grid points of that draw.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    lay = model.layout
    spec = model.spec
    rng = np.random.default_rng([seed, 7, k])

    idx = list(range(0, draws.n_draws, draw_stride))
    per_draw = np.empty((len(idx), grid.size))
    b0_col = lay.beta_slice.start + 2 * k
    sig_col = lay.sigma_slice.start + k
    gsl = lay.gamma_slices[k]
    sdl = lay.sd_slices[k]
    cor_col = lay.cor_index[k]
    for row, d in enumerate(idx):
        theta = draws.draws[d]
        beta_k = theta[b0_col : b0_col + 2]
        gamma_k = theta[gsl]
        sd_k = theta[sdl]
        cor_k = float(theta[cor_col]) if cor_col is not None else 0.0
        mu, var = _moments(
            grid, x, beta_k, gamma_k, sd_k, cor_k, float(theta[sig_col]),
            spec.n_covariates
        )
        z = _antithetic_normals(rng, m)
        per_draw[row] = ndtr(mu[:, None] + np.sqrt(var)[:, None] * z[None, :]).mean(axis=1)
    lo, hi = np.quantile(per_draw, [0.025, 0.975], axis=0)
    return TrajectoryGrid(
        marker=k,
        s=grid,
        per_draw=per_draw,
        mean=per_draw.mean(axis=0),
        lo95=lo,
        hi95=hi,
    )


def _first_crossing(s: np.ndarray, values: np.ndarray, threshold: float) -> float:
    """Disease time of the first upward threshold crossing (nan if none).

    A curve already at or above the threshold at the first grid point
    counts as crossing there.
    """
    above = values >= threshold
    if above[0]:
        return float(s[0])
    hits = np.flatnonzero(above[1:] & ~above[:-1])
    if hits.size == 0:
        return math.nan
    j = int(hits[0]) + 1
    v0, v1 = values[j - 1], values[j]
    if v1 == v0:
        return float(s[j])
    frac = (threshold - v0) / (v1 - v0)
    return float(s[j - 1] + frac * (s[j] - s[j - 1]))


@dataclass(frozen=True)
class MarkerCrossing:
    marker: int
    mean_s: float
    lo95: float
    hi95: float
    rank: int
    frac_no_cross: float


@dataclass
class CrossingSummary:
    threshold: float
    rows: list[MarkerCrossing]
    per_draw: dict[int, np.ndarray]  # marker -> crossing time per draw (nan = none)


def crossing_times(trajectories: list[TrajectoryGrid],
                   threshold: float = 0.5) -> CrossingSummary:
    """Per-draw threshold crossings and the marker ordering they imply.

    Markers are ranked by posterior mean crossing time; draws that never
    cross contribute to ``frac_no_cross`` and are excluded from the
    mean/interval.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be inside (0, 1)")
    per_draw: dict[int, np.ndarray] = {}
    stats = []
    for traj in trajectories:
        times = np.array(
            [_first_crossing(traj.s, row, threshold) for row in traj.per_draw]
        )
        per_draw[traj.marker] = times
        ok = times[~np.isnan(times)]
        frac_none = float(np.isnan(times).mean())
        if ok.size:
            lo, hi = np.quantile(ok, [0.025, 0.975])
            stats.append((traj.marker, float(ok.mean()), float(lo), float(hi), frac_none))
        else:
            stats.append((traj.marker, math.nan, math.nan, math.nan, frac_none))
    order = sorted(
        range(len(stats)),
        key=lambda i: (math.isnan(stats[i][1]), stats[i][1]),
    )
    ranks = {stats[i][0]: r for r, i in enumerate(order)}
    rows = [
        MarkerCrossing(
            marker=mk, mean_s=mean, lo95=lo, hi95=hi,
            rank=ranks[mk], frac_no_cross=frac,
        )
        for mk, mean, lo, hi, frac in stats
    ]
    return CrossingSummary(threshold=threshold, rows=rows, per_draw=per_draw)


def rmse(draws: PosteriorDraws, model: ProgressionModel) -> dict[str, float]:
    """Residual RMSE on the severity (percentile) scale, per marker.

    Fitted values plug posterior means of all parameters (including the
    subject-level onset times and random effects) into the marker mean,
    then map to percentiles; residuals compare against the observed
    percentiles. Returns one entry per marker plus ``__overall__``.
    """
    lay = model.layout
    theta = draws.draws.mean(axis=0)
    t_star = theta[lay.t_star_slice]
    out: dict[str, float] = {}
    sq_all = []
    for k, blk in enumerate(model.blocks):
        if blk.n == 0:
            out[f"marker_{k}"] = math.nan
            continue
        b0 = theta[lay.beta_slice.start + 2 * k]
        b1 = theta[lay.beta_slice.start + 2 * k + 1]
        gsl = lay.gamma_slices[k]
        u = theta[lay.u_slices[k]].reshape(model.n_subjects, model.spec.u_dim(k))
        s = blk.t - t_star[blk.subj]
        mean = b0 + b1 * s + u[:, 0][blk.subj]
        if model.spec.random_slope[k]:
            mean = mean + u[:, 1][blk.subj] * s
        for c, col in enumerate(blk.x_cols):
            mean = mean + theta[gsl.start + c] * col
        resid = ndtr(blk.y) - ndtr(mean)
        sq = resid * resid
        out[f"marker_{k}"] = float(np.sqrt(sq.mean()))
        sq_all.append(sq)
    pooled = np.concatenate(sq_all)
    out["__overall__"] = float(np.sqrt(pooled.mean()))
    return out


# CSV writers ---------------------------------------------------------------


def write_trajectory_csv(path, trajectories: list[TrajectoryGrid],
                         marker_names: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["marker", "s", "mean", "lo95", "hi95"])
        for traj in trajectories:
            name = marker_names[traj.marker]
            for i, s in enumerate(traj.s):
                writer.writerow(
                    [name, repr(float(s)), repr(float(traj.mean[i])),
                     repr(float(traj.lo95[i])), repr(float(traj.hi95[i]))]
                )


def write_crossing_csv(path, summary: CrossingSummary,
                       marker_names: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["marker", "mean_s", "lo95", "hi95", "rank", "frac_no_cross"])
        for row in summary.rows:
            writer.writerow(
                [marker_names[row.marker], repr(row.mean_s), repr(row.lo95),
                 repr(row.hi95), row.rank, repr(row.frac_no_cross)]
            )


def write_rmse_csv(path, values: dict[str, float], marker_names: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["marker", "rmse"])
        for k, name in enumerate(marker_names):
            writer.writerow([name, repr(values[f"marker_{k}"])])
        writer.writerow(["__overall__", repr(values["__overall__"])])
