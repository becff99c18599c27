"""Analytic log densities and gradient-call instrumentation.

Anything with a ``dim`` attribute and a ``logdensity_and_grad(theta)`` method
can be sampled; :class:`mile.posterior.PosteriorModel` is the BNN case.
"""

from __future__ import annotations

import numpy as np


class GaussianTarget:
    """Diagonal Gaussian ``N(mean, diag(scales**2))``; standard normal by default."""

    def __init__(self, dim: int, mean=None, scales=None):
        self.dim = int(dim)
        self.mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
        self.scales = np.ones(dim) if scales is None else np.asarray(scales, dtype=np.float64)
        self._prec = 1.0 / self.scales**2

    def logdensity_and_grad(self, theta):
        z = theta - self.mean
        g = -z * self._prec
        return 0.5 * float(z @ g), g


class FlatTarget:
    """Constant log density; zero gradient everywhere."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def logdensity_and_grad(self, theta):
        return 0.0, np.zeros(self.dim)


class GradientCounter:
    """Wraps a target and counts ``logdensity_and_grad`` calls."""

    def __init__(self, target):
        self.target = target
        self.dim = target.dim
        self.calls = 0

    def logdensity_and_grad(self, theta):
        self.calls += 1
        return self.target.logdensity_and_grad(theta)
