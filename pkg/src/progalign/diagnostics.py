"""Convergence diagnostics and posterior summaries gating a fit.

Split-R-hat (each chain halved, classic between/within variance ratio) and
autocorrelation-based effective sample size with Geyer's initial monotone
sequence truncation. A fit passes the gate when every parameter satisfies
R-hat < 1.05 and ESS/D >= 0.1 (D = retained draws), unless overridden.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .sampler import PosteriorDraws

__all__ = [
    "compute_rhat",
    "compute_ess",
    "summarize_draws",
    "gate_fit",
    "write_summary_csv",
    "DiagnosticsReport",
    "GateResult",
]

RHAT_DEFAULT = 1.05
ESS_RATIO_DEFAULT = 0.1


def _split_halves(chains: np.ndarray) -> np.ndarray:
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a (chains, draws) matrix")
    m, n = x.shape
    if m < 2 or n < 4:
        raise ValueError("need at least 2 chains of at least 4 draws")
    half = n // 2
    return np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)


def compute_rhat(chains: np.ndarray) -> float:
    """Split potential-scale-reduction statistic for one parameter.

    Input is a (chains, draws) matrix. Returns +inf when the within-chain
    variance vanishes (degenerate parameter).
    """
    x = _split_halves(chains)
    m, n = x.shape
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    if w == 0.0:
        return math.inf
    b_over_n = float(np.var(np.mean(x, axis=1), ddof=1))
    return math.sqrt(((n - 1) / n * w + b_over_n) / w)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n]
    return acov / n


def compute_ess(chains: np.ndarray) -> float:
    """Effective sample size for one parameter, combined across chains.

    Uses the cross-chain autocorrelation estimate with Geyer's initial
    monotone sequence over paired sums, on split half-chains. Capped at
    the total number of retained draws.
    """
    x = _split_halves(chains)
    m, n = x.shape
    total = m * n
    variances = np.var(x, axis=1, ddof=1)
    w = float(np.mean(variances))
    if w == 0.0:
        return math.nan
    b_over_n = float(np.var(np.mean(x, axis=1), ddof=1))
    var_plus = (n - 1) / n * w + b_over_n

    acov = np.empty((m, n))
    for c in range(m):
        acov[c] = _autocovariance(x[c])
    mean_acov = acov.mean(axis=0) * n / (n - 1)
    rho = 1.0 - (w - mean_acov) / var_plus

    t_max = (n // 2) * 2
    pairs = rho[:t_max].reshape(-1, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0.0)
    cut = int(neg[0]) if neg.size else pairs.size
    cut = max(cut, 1)
    used = np.minimum.accumulate(pairs[:cut])
    tau = 2.0 * float(np.sum(used)) - 1.0
    if tau <= 1e-12:
        return float(total)
    return float(min(total, total / tau))


@dataclass(frozen=True)
class ParamDiagnostics:
    name: str
    mean: float
    sd: float
    q2_5: float
    q97_5: float
    rhat: float
    ess: float
    ess_ratio: float
    degenerate: bool


@dataclass
class DiagnosticsReport:
    params: list[ParamDiagnostics]
    n_draws: int
    n_chains: int
    divergences: list[int]

    def by_name(self) -> dict[str, ParamDiagnostics]:
        return {p.name: p for p in self.params}


@dataclass(frozen=True)
class GateResult:
    passed: bool
    failures: tuple[str, ...]
    rhat_max: float
    ess_ratio_min: float


def summarize_draws(draws: PosteriorDraws) -> DiagnosticsReport:
    """Posterior mean/SD/95%CI plus R-hat and ESS for every parameter."""
    rows = []
    n_params = draws.draws.shape[1]
    for j in range(n_params):
        x = draws.chain_matrix(j)
        flat = draws.draws[:, j]
        rhat = compute_rhat(x)
        ess = compute_ess(x)
        degenerate = not math.isfinite(rhat)
        q_lo, q_hi = np.quantile(flat, [0.025, 0.975])
        rows.append(
            ParamDiagnostics(
                name=draws.names[j],
                mean=float(flat.mean()),
                sd=float(flat.std(ddof=1)),
                q2_5=float(q_lo),
                q97_5=float(q_hi),
                rhat=rhat,
                ess=ess,
                ess_ratio=(ess / draws.n_draws) if math.isfinite(ess) else math.nan,
                degenerate=degenerate,
            )
        )
    return DiagnosticsReport(
        params=rows,
        n_draws=draws.n_draws,
        n_chains=draws.n_chains,
        divergences=list(draws.divergences),
    )


def gate_fit(
    report: DiagnosticsReport,
    rhat_max: float = RHAT_DEFAULT,
    ess_ratio_min: float = ESS_RATIO_DEFAULT,
) -> GateResult:
    """Pass/fail decision naming every parameter that misses a threshold."""
    failures = []
    for p in report.params:
        if p.degenerate:
            failures.append(f"{p.name}: degenerate (zero within-chain variance)")
            continue
        if p.rhat >= rhat_max:
            failures.append(f"{p.name}: rhat={p.rhat:.4f} >= {rhat_max}")
        if not (p.ess_ratio >= ess_ratio_min):
            failures.append(f"{p.name}: ess_ratio={p.ess_ratio:.4f} < {ess_ratio_min}")
    return GateResult(
        passed=not failures,
        failures=tuple(failures),
        rhat_max=rhat_max,
        ess_ratio_min=ess_ratio_min,
    )


def write_summary_csv(report: DiagnosticsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "mean", "sd", "q2.5", "q97.5", "rhat", "ess", "ess_ratio"])
        for p in report.params:
            writer.writerow(
                [p.name]
                + [repr(v) for v in (p.mean, p.sd, p.q2_5, p.q97_5)]
                + [repr(p.rhat), repr(p.ess), repr(p.ess_ratio)]
            )
