"""Closed-form sampler calibration targets.

Small analytic densities with known moments, used to validate the sampler
before trusting it on a real posterior.
"""

from __future__ import annotations

import math

import numpy as np


class StandardGaussian:
    """Independent standard normals in ``dim`` dimensions."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._const = -0.5 * self.dim * math.log(2.0 * math.pi)

    def log_density_and_grad(self, z):
        z = np.asarray(z, dtype=float)
        return self._const - 0.5 * float(np.dot(z, z)), -z

    def log_density(self, z):
        return self.log_density_and_grad(z)[0]


class NealFunnel:
    """Neal's funnel: v ~ N(0, 3^2), x_i | v ~ N(0, e^v) for i < dim-1.

    Coordinate 0 is the log-scale v; its marginal mean is 0 and SD 3.
    The funnel's known metric is supplied by :meth:`inv_mass`: unit scale
    for the x block (a compromise between neck and mouth) and the prior
    variance for v.
    """

    def __init__(self, dim: int = 10):
        if dim < 2:
            raise ValueError("funnel needs at least 2 dimensions")
        self.dim = int(dim)

    def inv_mass(self) -> np.ndarray:
        m = np.ones(self.dim)
        m[0] = 9.0
        return m

    def log_density_and_grad(self, z):
        z = np.asarray(z, dtype=float)
        v = float(z[0])
        if not -700.0 < v < 700.0:
            return -math.inf, np.zeros_like(z)
        x = z[1:]
        n = x.size
        inv_ev = math.exp(-v)
        xsq = float(np.dot(x, x))
        logp = (
            -v * v / 18.0
            - 0.5 * math.log(18.0 * math.pi)
            - 0.5 * xsq * inv_ev
            - 0.5 * n * (math.log(2.0 * math.pi) + v)
        )
        if not math.isfinite(logp):
            return -math.inf, np.zeros_like(z)
        grad = np.empty_like(z)
        grad[0] = -v / 9.0 + 0.5 * xsq * inv_ev - 0.5 * n
        grad[1:] = x * (-inv_ev)
        return logp, grad

    def log_density(self, z):
        return self.log_density_and_grad(z)[0]
