"""Unadjusted microcanonical Langevin transitions.

Position moves as ``d theta = u dt`` with ``u`` on the unit sphere. The
velocity follows the isokinetic drift towards ``grad log p``, integrated with
the two-gradient minimal-norm splitting, followed by a partial random refresh
of its direction.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from mile.posterior import NonFiniteError

# second-order minimal-norm splitting coefficient
MN2_LAMBDA = 0.1931833275037836


class ChainState(NamedTuple):
    position: np.ndarray
    velocity: np.ndarray
    logdensity: float
    grad: np.ndarray


class KernelParams(NamedTuple):
    step_size: float
    decoherence_length: float


class StepInfo(NamedTuple):
    energy_change: float
    is_finite: bool
    # gradient evaluations spent, including ones of a failed step
    grad_evals: int = 2


def random_unit_vector(dim: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(dim)
    return u / np.sqrt(u @ u)


def init_state(position, target, rng: np.random.Generator, velocity=None) -> ChainState:
    """Chain state at ``position`` with a uniformly random unit velocity.

    Costs one gradient evaluation.
    """
    position = np.array(position, dtype=np.float64)
    logdensity, grad = target.logdensity_and_grad(position)
    if velocity is None:
        velocity = random_unit_vector(position.size, rng)
    return ChainState(position, np.asarray(velocity, dtype=np.float64), float(logdensity), grad)


def velocity_drift_update(u: np.ndarray, grad: np.ndarray, delta_t: float, dim: int) -> tuple[np.ndarray, float]:
    """Exact solution of the velocity drift over time ``delta_t`` for fixed ``grad``.

    Returns the rotated unit velocity and the kinetic energy change
    ``(d - 1) * log(cosh(delta) + (e . u) sinh(delta))``, evaluated in a form
    that does not overflow for large ``delta``.
    """
    g_norm = math.sqrt(float(grad @ grad))
    if g_norm == 0.0:
        return u, 0.0
    e = grad / g_norm
    ue = float(e @ u)
    delta = delta_t * g_norm / (dim - 1)
    zeta = math.exp(-delta)
    # numerator and denominator both scaled by 2 exp(-delta)
    new_u = (1.0 - zeta) * (1.0 + zeta + ue * (1.0 - zeta)) * e + (2.0 * zeta) * u
    denom = (1.0 + ue) + (1.0 - ue) * zeta * zeta
    new_u /= math.sqrt(float(new_u @ new_u))
    kinetic_change = (dim - 1) * (delta - math.log(2.0) + math.log(denom))
    return new_u, kinetic_change


def mn2_step(state: ChainState, step_size: float, target) -> tuple[ChainState, StepInfo]:
    """One minimal-norm integration step of the deterministic dynamics.

    Velocity/position sub-steps use the weights ``(lam, 1/2, 1 - 2 lam, 1/2, lam)``
    times ``step_size``; the first velocity update reuses the cached gradient,
    so exactly two new gradients are evaluated. On any non-finite quantity the
    input state is returned unchanged with ``is_finite=False``.
    """
    x, u, logp0, g = state
    dim = x.size
    half = 0.5 * step_size
    calls = 0
    try:
        with np.errstate(all="ignore"):
            u, k1 = velocity_drift_update(u, g, MN2_LAMBDA * step_size, dim)
            x = x + half * u
            calls += 1
            _, g = target.logdensity_and_grad(x)
            u, k2 = velocity_drift_update(u, g, (1.0 - 2.0 * MN2_LAMBDA) * step_size, dim)
            x = x + half * u
            calls += 1
            logp, g = target.logdensity_and_grad(x)
            u, k3 = velocity_drift_update(u, g, MN2_LAMBDA * step_size, dim)
            energy_change = (k1 + k2 + k3) - (logp - logp0)
    except (NonFiniteError, FloatingPointError, ValueError, ZeroDivisionError):
        return state, StepInfo(math.nan, False, calls)
    if not (math.isfinite(energy_change) and math.isfinite(float(u @ u))
            and math.isfinite(float(g @ g))):
        return state, StepInfo(math.nan, False, calls)
    return ChainState(x, u, float(logp), g), StepInfo(energy_change, True, calls)


def partial_refresh(u: np.ndarray, step_size: float, decoherence_length: float, rng: np.random.Generator) -> np.ndarray:
    """Mix Gaussian noise into the velocity direction and renormalize.

    ``u' ~ u + nu z`` with ``nu = sqrt((exp(2 eps / L) - 1) / d)``; one
    standard normal vector is drawn from ``rng`` on every call.
    """
    dim = u.size
    z = rng.standard_normal(dim)
    nu = math.sqrt(math.expm1(2.0 * step_size / decoherence_length) / dim)
    v = u + nu * z
    return v / math.sqrt(float(v @ v))


def kernel_step(state: ChainState, params: KernelParams, target, rng: np.random.Generator) -> tuple[ChainState, StepInfo]:
    new_state, info = mn2_step(state, params.step_size, target)
    if not info.is_finite:
        return state, info
    u = partial_refresh(new_state.velocity, params.step_size, params.decoherence_length, rng)
    return new_state._replace(velocity=u), info
