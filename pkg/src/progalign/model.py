"""Latent-onset progression model: log posterior and exact gradients.

Each subject carries an unobserved clinical-onset time ``T*`` that shifts
the observed time axis: the disease time of a visit at ``t`` is
``s = t - T*`` (zero at onset). Marker values on the normalized Gaussian
scale follow a linear mixed model over ``s``:

    y = F(s)' beta_k + X gamma_k + F(s)' u_ik + eps,   F(s) = (1, s)'

with non-negative fixed trajectory coefficients ``beta_k`` (degradation
over disease time), marker-specific residual noise, and random effects
independent across markers so that the shared time shift carries all
cross-marker correlation.

In anchored mode each ``T*`` is restricted to a window around what was
observed: ``(t_diag - eps_L, t_diag + eps_U)`` for diagnosed subjects and
``(t_last - eps_L, inf)`` for subjects last seen dementia-free, and
``ln(T* + eps_L)`` is Gaussian across subjects. The non-anchored variant
drops the windows and puts an unconstrained Gaussian on ``T*`` itself.

Sampling happens on an unconstrained vector ``z`` related to the natural
parameters by componentwise bijections (log / shifted-log / scaled
logistic / tanh); the posterior density includes the log-Jacobian of that
map and all gradients are closed-form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import (
    KIND_IDENTITY,
    KIND_LOG,
    KIND_LOGISTIC,
    KIND_SHIFTED_LOG,
    KIND_TANH,
)
from .data import CohortData, DiagnosisStatus
from .transform import NormalizedObservation

LOG2PI = math.log(2.0 * math.pi)


def latent_time(t, t_star):
    """Disease time of an observation: years relative to clinical onset."""
    return np.asarray(t, dtype=float) - np.asarray(t_star, dtype=float)


@dataclass(frozen=True)
class ModelSpec:
    """Structural choices and prior hyperparameters of the model."""

    n_markers: int
    random_slope: tuple[bool, ...]
    first_visit_effect: tuple[bool, ...]
    n_covariates: int
    eps_lower: float = 1.5
    eps_upper: float = 1.5
    anchored: bool = True
    time_basis: str = "linear"
    fixed_effect_sd: float = 10.0
    scale_prior_scale: float = 2.5
    onset_mean_prior_mean: float = 10.0
    onset_mean_prior_sd: float = 10.0

    def __post_init__(self):
        if self.time_basis != "linear":
            raise ValueError(f"unsupported time basis {self.time_basis!r}")
        if self.eps_lower <= 0 or self.eps_upper <= 0:
            raise ValueError("eps_lower and eps_upper must be positive")
        if len(self.random_slope) != self.n_markers:
            raise ValueError("random_slope length must equal n_markers")
        if len(self.first_visit_effect) != self.n_markers:
            raise ValueError("first_visit_effect length must equal n_markers")

    def covariate_count(self, k: int) -> int:
        return self.n_covariates + int(self.first_visit_effect[k])

    def u_dim(self, k: int) -> int:
        return 2 if self.random_slope[k] else 1


@dataclass
class ParameterValues:
    """Natural-scale parameters, structured per block."""

    beta: np.ndarray            # (K, 2) non-negative
    gamma: list[np.ndarray]     # per marker, length covariate_count(k)
    sigma_eps: np.ndarray       # (K,) positive
    sd_u: list[np.ndarray]      # per marker, (1,) or (2,), positive
    cor_u: list[float | None]   # per marker, None unless random slope
    u: list[np.ndarray]         # per marker, (N, u_dim(k))
    t_star: np.ndarray          # (N,)
    mu_onset: float             # mean of ln(T*+eps_L)  (of T* when non-anchored)
    sigma_onset: float          # its SD


class ParamLayout:
    """Flat-vector layout, parameter names, and constraining bijections.

    The unconstrained vector ``z`` and the natural vector ``theta`` share
    indices; every coordinate has a componentwise bijection with a
    tractable Jacobian, so the map round-trips exactly and every natural
    point has a unique preimage.
    """

    def __init__(self, spec: ModelSpec, n_subjects: int,
                 diagnosed: np.ndarray, t_event: np.ndarray):
        self.spec = spec
        self.n_subjects = int(n_subjects)
        K = spec.n_markers
        N = self.n_subjects

        pos = 0
        self.beta_slice = slice(pos, pos + 2 * K)
        pos += 2 * K
        self.gamma_slices: list[slice] = []
        for k in range(K):
            c = spec.covariate_count(k)
            self.gamma_slices.append(slice(pos, pos + c))
            pos += c
        self.sigma_slice = slice(pos, pos + K)
        pos += K
        self.sd_slices: list[slice] = []
        for k in range(K):
            d = spec.u_dim(k)
            self.sd_slices.append(slice(pos, pos + d))
            pos += d
        self.scale_slice = slice(self.sigma_slice.start, pos)  # sigma_eps + sd_u
        self.cor_index: list[int | None] = []
        cor_start = pos
        for k in range(K):
            if spec.random_slope[k]:
                self.cor_index.append(pos)
                pos += 1
            else:
                self.cor_index.append(None)
        self.cor_slice = slice(cor_start, pos)
        self.u_slices: list[slice] = []
        for k in range(K):
            d = spec.u_dim(k)
            self.u_slices.append(slice(pos, pos + N * d))
            pos += N * d
        self.t_star_slice = slice(pos, pos + N)
        pos += N
        self.mu_index = pos
        pos += 1
        self.sigma_onset_index = pos
        pos += 1
        self.size = pos

        self.names = self._build_names()
        self._build_bijections(diagnosed, t_event)

    def _build_names(self) -> list[str]:
        spec, N = self.spec, self.n_subjects
        names: list[str] = []
        for k in range(spec.n_markers):
            names += [f"beta[{k},0]", f"beta[{k},1]"]
        for k in range(spec.n_markers):
            names += [f"gamma[{k},{c}]" for c in range(spec.covariate_count(k))]
        names += [f"sigma_eps[{k}]" for k in range(spec.n_markers)]
        for k in range(spec.n_markers):
            names += [f"sd_u[{k},{d}]" for d in range(spec.u_dim(k))]
        for k in range(spec.n_markers):
            if spec.random_slope[k]:
                names.append(f"cor_u[{k}]")
        for k in range(spec.n_markers):
            for i in range(N):
                names += [f"u[{k},{i},{d}]" for d in range(spec.u_dim(k))]
        names += [f"T_star[{i}]" for i in range(N)]
        names += ["mu_T_eps", "sigma_T_eps"]
        assert len(names) == self.size
        return names

    def _build_bijections(self, diagnosed: np.ndarray, t_event: np.ndarray) -> None:
        spec = self.spec
        kind = np.zeros(self.size, dtype=np.uint8)
        lo = np.zeros(self.size)
        hi = np.zeros(self.size)

        kind[self.beta_slice] = KIND_LOG
        kind[self.scale_slice] = KIND_LOG
        kind[self.cor_slice] = KIND_TANH
        kind[self.sigma_onset_index] = KIND_LOG

        ts = np.arange(self.t_star_slice.start, self.t_star_slice.stop)
        if spec.anchored:
            diag = np.asarray(diagnosed, dtype=bool)
            ev = np.asarray(t_event, dtype=float)
            kind[ts[diag]] = KIND_LOGISTIC
            lo[ts[diag]] = ev[diag] - spec.eps_lower
            hi[ts[diag]] = ev[diag] + spec.eps_upper
            kind[ts[~diag]] = KIND_SHIFTED_LOG
            lo[ts[~diag]] = ev[~diag] - spec.eps_lower

        self._kind = kind
        self._lo = lo
        self._hi = hi
        self._idx_log = np.flatnonzero(kind == KIND_LOG)
        self._idx_shift = np.flatnonzero(kind == KIND_SHIFTED_LOG)
        self._idx_logis = np.flatnonzero(kind == KIND_LOGISTIC)
        self._idx_tanh = np.flatnonzero(kind == KIND_TANH)
        self._shift_lo = lo[self._idx_shift]
        self._logis_lo = lo[self._idx_logis]
        self._logis_hi = hi[self._idx_logis]
        self._logis_w = self._logis_hi - self._logis_lo

    # bijections ---------------------------------------------------------

    def constrain(self, z: np.ndarray) -> np.ndarray:
        z = np.ascontiguousarray(z, dtype=float)
        th = np.empty(self.size)
        _kernels.constrain(z, self._kind, self._lo, self._hi, th)
        return th

    def unconstrain(self, theta: np.ndarray) -> np.ndarray:
        z = np.array(theta, dtype=float, copy=True)
        z[self._idx_log] = np.log(theta[self._idx_log])
        z[self._idx_shift] = np.log(theta[self._idx_shift] - self._shift_lo)
        tl = theta[self._idx_logis]
        z[self._idx_logis] = np.log(tl - self._logis_lo) - np.log(self._logis_hi - tl)
        z[self._idx_tanh] = np.arctanh(theta[self._idx_tanh])
        return z

    def log_jacobian(self, theta: np.ndarray) -> float:
        dummy = _EMPTY
        return float(
            _kernels.logjac_and_chain(theta, self._kind, self._lo, self._hi,
                                      dummy, dummy, False)
        )

    def logjac_and_chain(self, theta, dth, djac, want_grad: bool) -> float:
        return float(
            _kernels.logjac_and_chain(theta, self._kind, self._lo, self._hi,
                                      dth, djac, want_grad)
        )

    # structured <-> flat ------------------------------------------------

    def pack(self, values: ParameterValues) -> np.ndarray:
        spec, N = self.spec, self.n_subjects
        th = np.empty(self.size)
        th[self.beta_slice] = np.asarray(values.beta, dtype=float).reshape(-1)
        for k in range(spec.n_markers):
            th[self.gamma_slices[k]] = np.asarray(values.gamma[k], dtype=float)
            th[self.sd_slices[k]] = np.asarray(values.sd_u[k], dtype=float)
            ci = self.cor_index[k]
            if ci is not None:
                th[ci] = float(values.cor_u[k])
            th[self.u_slices[k]] = np.asarray(values.u[k], dtype=float).reshape(-1)
        th[self.sigma_slice] = np.asarray(values.sigma_eps, dtype=float)
        th[self.t_star_slice] = np.asarray(values.t_star, dtype=float)
        th[self.mu_index] = values.mu_onset
        th[self.sigma_onset_index] = values.sigma_onset
        assert th[self.t_star_slice].shape == (N,)
        return th

    def unpack(self, theta: np.ndarray) -> ParameterValues:
        spec, N = self.spec, self.n_subjects
        return ParameterValues(
            beta=theta[self.beta_slice].reshape(spec.n_markers, 2).copy(),
            gamma=[theta[self.gamma_slices[k]].copy() for k in range(spec.n_markers)],
            sigma_eps=theta[self.sigma_slice].copy(),
            sd_u=[theta[self.sd_slices[k]].copy() for k in range(spec.n_markers)],
            cor_u=[
                float(theta[self.cor_index[k]]) if self.cor_index[k] is not None else None
                for k in range(spec.n_markers)
            ],
            u=[
                theta[self.u_slices[k]].reshape(N, spec.u_dim(k)).copy()
                for k in range(spec.n_markers)
            ],
            t_star=theta[self.t_star_slice].copy(),
            mu_onset=float(theta[self.mu_index]),
            sigma_onset=float(theta[self.sigma_onset_index]),
        )


_EMPTY = np.zeros(0)


@dataclass
class _MarkerBlock:
    """Precomputed per-marker observation arrays for fast likelihood work."""

    subj: np.ndarray            # (n,) int64
    t: np.ndarray               # (n,)
    y: np.ndarray               # (n,) normalized values
    x: np.ndarray               # (n, C_k) design incl. first-visit flag
    n: int = field(init=False)

    def __post_init__(self):
        self.n = len(self.y)


class ProgressionModel:
    """Unnormalized log posterior over the unconstrained vector ``z``.

    Pure function of its inputs; safe to evaluate from several chains at
    once. The evaluation is vectorized per marker with a fixed reduction
    order, so repeated calls are bit-identical.
    """

    def __init__(self, blocks: list[_MarkerBlock], spec: ModelSpec,
                 n_subjects: int, diagnosed: np.ndarray, t_event: np.ndarray):
        self.spec = spec
        self.n_subjects = int(n_subjects)
        self.blocks = blocks
        self.diagnosed = np.asarray(diagnosed, dtype=bool)
        self.t_event = np.asarray(t_event, dtype=float)
        self.layout = ParamLayout(spec, n_subjects, self.diagnosed, self.t_event)
        # random effects of subjects with no data for a marker have an exact
        # conditional (their prior); the sampler refreshes them by Gibbs
        self._untouched_rows = []
        for k, blk in enumerate(self.blocks):
            seen = np.zeros(self.n_subjects, dtype=bool)
            seen[blk.subj] = True
            self._untouched_rows.append(np.flatnonzero(~seen))
        self.has_gibbs_refresh = any(r.size for r in self._untouched_rows)

    @property
    def dim(self) -> int:
        return self.layout.size

    # natural-scale pieces ------------------------------------------------

    def _as_theta(self, params) -> np.ndarray:
        if isinstance(params, ParameterValues):
            return self.layout.pack(params)
        return np.asarray(params, dtype=float)

    def log_likelihood(self, params) -> float:
        ll, _ = self._likelihood(self._as_theta(params), want_grad=False)
        return ll

    def log_prior(self, params) -> float:
        lp, _ = self._prior(self._as_theta(params), want_grad=False)
        return lp

    def constrain(self, z: np.ndarray) -> np.ndarray:
        return self.layout.constrain(z)

    def unconstrain(self, theta: np.ndarray) -> np.ndarray:
        return self.layout.unconstrain(theta)

    # z-space density ------------------------------------------------------

    def log_density(self, z: np.ndarray) -> float:
        theta = self.layout.constrain(z)
        jac = self.layout.logjac_and_chain(theta, _EMPTY, _EMPTY, False)
        if not math.isfinite(jac):
            return -np.inf
        ll, _ = self._likelihood(theta, want_grad=False)
        lp, _ = self._prior(theta, want_grad=False)
        val = ll + lp + jac
        return val if math.isfinite(val) else -np.inf

    def log_density_and_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        theta = self.layout.constrain(z)
        dth = np.empty(self.dim)
        djac = np.empty(self.dim)
        jac = self.layout.logjac_and_chain(theta, dth, djac, True)
        if not math.isfinite(jac):
            return -np.inf, np.zeros(self.dim)
        ll, gl = self._likelihood(theta, want_grad=True)
        lp, gp = self._prior(theta, want_grad=True)
        val = ll + lp + jac
        if not math.isfinite(val):
            return -np.inf, np.zeros(self.dim)
        gl += gp
        gl *= dth
        gl += djac
        if not np.all(np.isfinite(gl)):
            return -np.inf, np.zeros(self.dim)
        return val, gl

    def gibbs_refresh(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Redraw random effects no observation touches from their exact
        conditional (the marker's random-effect prior). Leaves the posterior
        invariant; composed with the HMC transition by the sampler."""
        lay = self.layout
        z = z.copy()
        for k, rows in enumerate(self._untouched_rows):
            if rows.size == 0:
                continue
            sdl = lay.sd_slices[k]
            if self.spec.random_slope[k]:
                sd1 = math.exp(z[sdl.start])
                sd2 = math.exp(z[sdl.start + 1])
                rho = math.tanh(z[lay.cor_index[k]])
                noise = rng.standard_normal((rows.size, 2))
                u = z[lay.u_slices[k]].reshape(self.n_subjects, 2)
                u[rows, 0] = sd1 * noise[:, 0]
                u[rows, 1] = sd2 * (
                    rho * noise[:, 0] + math.sqrt(1.0 - rho * rho) * noise[:, 1]
                )
            else:
                sd1 = math.exp(z[sdl.start])
                u = z[lay.u_slices[k]].reshape(self.n_subjects, 1)
                u[rows, 0] = sd1 * rng.standard_normal(rows.size)
        return z

    # internals ------------------------------------------------------------

    def _likelihood(self, th: np.ndarray, want_grad: bool) -> tuple[float, np.ndarray]:
        lay = self.layout
        spec = self.spec
        N = self.n_subjects
        grad = np.zeros(lay.size)
        t_star = th[lay.t_star_slice]
        g_t = grad[lay.t_star_slice]
        ll = 0.0
        for k, blk in enumerate(self.blocks):
            if blk.n == 0:
                continue
            b = lay.beta_slice.start + 2 * k
            sig_i = lay.sigma_slice.start + k
            gsl = lay.gamma_slices[k]
            slope = spec.random_slope[k]
            u = th[lay.u_slices[k]].reshape(N, 2 if slope else 1)
            if want_grad:
                g_u = grad[lay.u_slices[k]].reshape(N, 2 if slope else 1)
                ll += _kernels.marker_loglik_grad(
                    blk.subj, blk.t, blk.y, blk.x,
                    th[b], th[b + 1], th[gsl], th[sig_i], u, t_star, slope,
                    grad[b : b + 2], grad[gsl], grad[sig_i : sig_i + 1], g_u, g_t,
                )
            else:
                ll += _kernels.marker_loglik(
                    blk.subj, blk.t, blk.y, blk.x,
                    th[b], th[b + 1], th[gsl], th[sig_i], u, t_star, slope,
                )
        return ll, grad

    def _prior(self, th: np.ndarray, want_grad: bool) -> tuple[float, np.ndarray]:
        lay = self.layout
        spec = self.spec
        N = self.n_subjects
        grad = np.zeros(lay.size)
        sd_fix = spec.fixed_effect_sd
        var_fix = sd_fix * sd_fix
        hc = spec.scale_prior_scale

        lp = 0.0

        # beta: half-normal(0, sd_fix) on each non-negative coefficient
        beta = th[lay.beta_slice]
        if np.any(beta < 0):
            return -np.inf, grad
        n_beta = beta.size
        lp += n_beta * (math.log(2.0) - 0.5 * math.log(2.0 * math.pi * var_fix))
        lp += -0.5 * float(np.dot(beta, beta)) / var_fix
        if want_grad:
            grad[lay.beta_slice] -= beta / var_fix

        # gamma: normal(0, sd_fix)
        g0 = lay.gamma_slices[0].start
        g1 = lay.gamma_slices[-1].stop
        gam = th[g0:g1]
        lp += -0.5 * gam.size * math.log(2.0 * math.pi * var_fix)
        lp += -0.5 * float(np.dot(gam, gam)) / var_fix
        if want_grad:
            grad[g0:g1] -= gam / var_fix

        # residual and random-effect scales + onset scale: half-Cauchy(0, hc)
        scales = th[lay.scale_slice]
        sig_on = float(th[lay.sigma_onset_index])
        if np.any(scales <= 0) or sig_on <= 0 or not math.isfinite(sig_on):
            return -np.inf, grad
        all_sc = np.append(scales, sig_on)
        lp += all_sc.size * math.log(2.0 / (math.pi * hc))
        with np.errstate(over="ignore"):
            lp += -float(np.sum(np.log1p((all_sc / hc) ** 2)))
            if want_grad:
                g_sc = -2.0 * all_sc / (hc * hc + all_sc * all_sc)
                grad[lay.scale_slice] += g_sc[:-1]
                grad[lay.sigma_onset_index] += g_sc[-1]

        # correlations: uniform(-1, 1)
        cors = th[lay.cor_slice]
        if np.any(np.abs(cors) >= 1.0):
            return -np.inf, grad
        lp += -cors.size * math.log(2.0)

        # random effects
        for k in range(spec.n_markers):
            usl = lay.u_slices[k]
            sdl = lay.sd_slices[k]
            g_sd = grad[sdl]
            if spec.random_slope[k]:
                u = th[usl].reshape(N, 2)
                g_u = grad[usl].reshape(N, 2)
                lp += _kernels.bivariate_u_prior(
                    u, th[sdl.start], th[sdl.start + 1], th[lay.cor_index[k]],
                    g_u, g_sd, grad[lay.cor_index[k] : lay.cor_index[k] + 1],
                    want_grad,
                )
            else:
                u = th[usl].reshape(N, 1)
                g_u = grad[usl].reshape(N, 1)
                lp += _kernels.iid_u_prior(u, th[sdl.start], g_u, g_sd, want_grad)

        # latent onset times and their population distribution
        t_star = th[lay.t_star_slice]
        g_t = grad[lay.t_star_slice]
        g_mu_sig = np.zeros(2)
        mu = float(th[lay.mu_index])
        if spec.anchored:
            lp += _kernels.onset_prior_anchored(
                t_star, spec.eps_lower, mu, sig_on, g_t, g_mu_sig, want_grad
            )
        else:
            lp += _kernels.onset_prior_gaussian(
                t_star, mu, sig_on, g_t, g_mu_sig, want_grad
            )
        if want_grad:
            grad[lay.mu_index] += g_mu_sig[0]
            grad[lay.sigma_onset_index] += g_mu_sig[1]

        # hyperprior on the onset-distribution mean
        m0 = spec.onset_mean_prior_mean
        s0 = spec.onset_mean_prior_sd
        lp += -0.5 * math.log(2.0 * math.pi * s0 * s0) - 0.5 * ((mu - m0) / s0) ** 2
        if want_grad:
            grad[lay.mu_index] -= (mu - m0) / (s0 * s0)

        return lp, grad


def make_model_spec(
    data: CohortData,
    random_slope: list[bool] | None = None,
    first_visit_effect: list[bool] | None = None,
    **kwargs,
) -> ModelSpec:
    """ModelSpec matching a cohort's marker/covariate structure."""
    K = data.n_markers
    return ModelSpec(
        n_markers=K,
        random_slope=tuple(random_slope if random_slope is not None else [False] * K),
        first_visit_effect=tuple(
            first_visit_effect if first_visit_effect is not None else [False] * K
        ),
        n_covariates=len(data.covariate_names),
        **kwargs,
    )


def build_model(
    data: CohortData,
    normalized: list[NormalizedObservation],
    spec: ModelSpec,
) -> ProgressionModel:
    """Assemble the posterior from a cohort and its normalized observations."""
    if spec.n_markers != data.n_markers:
        raise ValueError("spec marker count does not match the cohort")
    if spec.n_covariates != len(data.covariate_names):
        raise ValueError("spec covariate count does not match the cohort")
    index = data.subject_index()
    X = data.covariate_matrix()
    per_marker: list[list[NormalizedObservation]] = [[] for _ in range(spec.n_markers)]
    for o in normalized:
        per_marker[o.marker_id].append(o)
    blocks = []
    for k in range(spec.n_markers):
        rows = per_marker[k]
        subj = np.array([index[o.subject_id] for o in rows], dtype=np.int64)
        t = np.array([o.t for o in rows], dtype=float)
        y = np.array([o.normalized for o in rows], dtype=float)
        xk = np.empty((len(rows), spec.covariate_count(k)))
        if spec.n_covariates:
            xk[:, : spec.n_covariates] = X[subj]
        if spec.first_visit_effect[k]:
            xk[:, -1] = [float(o.is_first_visit) for o in rows]
        blocks.append(_MarkerBlock(subj=subj, t=t, y=y, x=xk))
    diagnosed = np.array(
        [s.status is DiagnosisStatus.DIAGNOSED for s in data.subjects], dtype=bool
    )
    t_event = np.array([s.t_event for s in data.subjects], dtype=float)
    return ProgressionModel(blocks, spec, data.n_subjects, diagnosed, t_event)


def gradient_check(model: ProgressionModel, z: np.ndarray,
                   coords: np.ndarray | None = None, h_rel: float = 1e-5) -> float:
    """Max relative error of the analytic gradient vs central differences.

    ``coords=None`` checks every coordinate. Relative error is guarded by
    ``max(|analytic|, |numeric|, 1)`` so near-zero components compare on an
    absolute scale.
    """
    _, grad = model.log_density_and_grad(z)
    if coords is None:
        coords = np.arange(model.dim)
    worst = 0.0
    for i in coords:
        h = h_rel * (1.0 + abs(z[i]))
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        fd = (model.log_density(zp) - model.log_density(zm)) / (2.0 * h)
        err = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1.0)
        worst = max(worst, err)
    return worst
