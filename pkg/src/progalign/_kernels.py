"""Compiled inner loops for the log-posterior evaluation.

Single-pass accumulation kernels; summation order is fixed, so repeated
evaluations are bit-identical. All functions are nopython-compiled with
IEEE semantics (no fastmath).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG2PI = math.log(2.0 * math.pi)

KIND_IDENTITY = 0
KIND_LOG = 1
KIND_SHIFTED_LOG = 2
KIND_LOGISTIC = 3
KIND_TANH = 4


@njit(cache=True)
def marker_loglik(subj, t, y, x, b0, b1, gamma, sigma, u, t_star, slope):
    """Gaussian log likelihood of one marker block (no gradient)."""
    n = y.size
    inv_var = 1.0 / (sigma * sigma)
    rss = 0.0
    ncov = x.shape[1]
    for i in range(n):
        si = subj[i]
        s = t[i] - t_star[si]
        mean = b0 + b1 * s + u[si, 0]
        if slope:
            mean += u[si, 1] * s
        for c in range(ncov):
            mean += gamma[c] * x[i, c]
        resid = y[i] - mean
        rss += resid * resid
    return -0.5 * rss * inv_var - n * math.log(sigma) - 0.5 * n * LOG2PI


@njit(cache=True)
def marker_loglik_grad(subj, t, y, x, b0, b1, gamma, sigma, u, t_star, slope,
                       g_beta, g_gamma, g_sigma, g_u, g_t):
    """Log likelihood of one marker block, accumulating gradients in place."""
    n = y.size
    inv_var = 1.0 / (sigma * sigma)
    rss = 0.0
    sum_r = 0.0
    sum_rs = 0.0
    ncov = x.shape[1]
    for i in range(n):
        si = subj[i]
        s = t[i] - t_star[si]
        mean = b0 + b1 * s + u[si, 0]
        if slope:
            mean += u[si, 1] * s
        for c in range(ncov):
            mean += gamma[c] * x[i, c]
        resid = y[i] - mean
        rss += resid * resid
        r = resid * inv_var
        sum_r += r
        sum_rs += r * s
        for c in range(ncov):
            g_gamma[c] += r * x[i, c]
        g_u[si, 0] += r
        if slope:
            g_u[si, 1] += r * s
            g_t[si] -= (b1 + u[si, 1]) * r
        else:
            g_t[si] -= b1 * r
    g_beta[0] += sum_r
    g_beta[1] += sum_rs
    g_sigma[0] += (rss * inv_var - n) / sigma
    return -0.5 * rss * inv_var - n * math.log(sigma) - 0.5 * n * LOG2PI


@njit(cache=True)
def iid_u_prior(u, sd, g_u, g_sd, want_grad):
    """N(0, sd^2) prior over a (N, 1) random-intercept matrix."""
    n = u.shape[0]
    inv_var = 1.0 / (sd * sd)
    ssq = 0.0
    for i in range(n):
        ssq += u[i, 0] * u[i, 0]
        if want_grad:
            g_u[i, 0] -= u[i, 0] * inv_var
    if want_grad:
        g_sd[0] += (-n + ssq * inv_var) / sd
    return -n * math.log(sd) - 0.5 * ssq * inv_var - 0.5 * n * LOG2PI


@njit(cache=True)
def bivariate_u_prior(u, sd1, sd2, rho, g_u, g_sd, g_rho, want_grad):
    """Correlated N(0, B) prior over a (N, 2) intercept/slope matrix."""
    n = u.shape[0]
    one_m = 1.0 - rho * rho
    qsum = 0.0
    aqa = 0.0
    bqb = 0.0
    ab = 0.0
    for i in range(n):
        a = u[i, 0] / sd1
        b = u[i, 1] / sd2
        qa = (a - rho * b) / one_m
        qb = (b - rho * a) / one_m
        qsum += a * qa + b * qb
        aqa += a * qa
        bqb += b * qb
        ab += a * b
        if want_grad:
            g_u[i, 0] -= qa / sd1
            g_u[i, 1] -= qb / sd2
    if want_grad:
        g_sd[0] += (-n + aqa) / sd1
        g_sd[1] += (-n + bqb) / sd2
        g_rho[0] += (n * rho + ab - rho * qsum) / one_m
    return (
        -n * (math.log(sd1) + math.log(sd2) + 0.5 * math.log(one_m))
        - 0.5 * qsum
        - n * LOG2PI
    )


@njit(cache=True)
def onset_prior_anchored(t_star, eps_lower, mu, sig, g_t, g_mu_sig, want_grad):
    """Shifted-lognormal prior: ln(T* + eps_L) ~ N(mu, sig^2), with the
    change-of-variable term. Returns -inf outside the support."""
    n = t_star.size
    inv_var = 1.0 / (sig * sig)
    sum_log = 0.0
    sum_d = 0.0
    sum_d2 = 0.0
    for i in range(n):
        shifted = t_star[i] + eps_lower
        if shifted <= 0.0:
            return -math.inf
        li = math.log(shifted)
        d = li - mu
        sum_log += li
        sum_d += d
        sum_d2 += d * d
        if want_grad:
            g_t[i] += (-1.0 - d * inv_var) / shifted
    if want_grad:
        g_mu_sig[0] += sum_d * inv_var
        g_mu_sig[1] += -n / sig + sum_d2 * inv_var / sig
    return -sum_log - 0.5 * sum_d2 * inv_var - n * math.log(sig) - 0.5 * n * LOG2PI


@njit(cache=True)
def onset_prior_gaussian(t_star, mu, sig, g_t, g_mu_sig, want_grad):
    """Unconstrained Gaussian prior on T* (non-anchored mode)."""
    n = t_star.size
    inv_var = 1.0 / (sig * sig)
    sum_d = 0.0
    sum_d2 = 0.0
    for i in range(n):
        d = t_star[i] - mu
        sum_d += d
        sum_d2 += d * d
        if want_grad:
            g_t[i] -= d * inv_var
    if want_grad:
        g_mu_sig[0] += sum_d * inv_var
        g_mu_sig[1] += -n / sig + sum_d2 * inv_var / sig
    return -0.5 * sum_d2 * inv_var - n * math.log(sig) - 0.5 * n * LOG2PI


@njit(cache=True)
def constrain(z, kind, lo, hi, out):
    for i in range(z.size):
        k = kind[i]
        if k == KIND_IDENTITY:
            out[i] = z[i]
        elif k == KIND_LOG:
            out[i] = math.exp(min(z[i], 700.0))
        elif k == KIND_SHIFTED_LOG:
            out[i] = lo[i] + math.exp(min(z[i], 700.0))
        elif k == KIND_LOGISTIC:
            zi = z[i]
            if zi >= 0.0:
                e = math.exp(-zi)
                sig = 1.0 / (1.0 + e)
            else:
                e = math.exp(zi)
                sig = e / (1.0 + e)
            out[i] = lo[i] + (hi[i] - lo[i]) * sig
        else:
            out[i] = math.tanh(z[i])


@njit(cache=True)
def logjac_and_chain(theta, kind, lo, hi, dth, djac, want_grad):
    """Log |d theta / d z| plus, optionally, the componentwise chain
    factors d theta/d z and d logjac/d z."""
    total = 0.0
    for i in range(theta.size):
        k = kind[i]
        if k == KIND_IDENTITY:
            if want_grad:
                dth[i] = 1.0
                djac[i] = 0.0
        elif k == KIND_LOG:
            v = theta[i]
            if v <= 0.0:
                return -math.inf
            total += math.log(v)
            if want_grad:
                dth[i] = v
                djac[i] = 1.0
        elif k == KIND_SHIFTED_LOG:
            v = theta[i] - lo[i]
            if v <= 0.0:
                return -math.inf
            total += math.log(v)
            if want_grad:
                dth[i] = v
                djac[i] = 1.0
        elif k == KIND_LOGISTIC:
            w = hi[i] - lo[i]
            a = theta[i] - lo[i]
            b = hi[i] - theta[i]
            if a <= 0.0 or b <= 0.0:
                return -math.inf
            total += math.log(a) + math.log(b) - math.log(w)
            if want_grad:
                dth[i] = a * b / w
                djac[i] = (b - a) / w
        else:
            v = theta[i]
            if v <= -1.0 or v >= 1.0:
                return -math.inf
            total += math.log1p(-v * v)
            if want_grad:
                dth[i] = 1.0 - v * v
                djac[i] = -2.0 * v
    return total
