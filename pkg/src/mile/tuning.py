"""Three-phase automatic tuning of the step size and decoherence length.

Phase I adapts the step size towards a scheduled energy error variance per
dimension (EEVPD) while the chain burns in. Phase II sets an initial
decoherence length from the spread of the parameters. Phase III refines it
from the autocorrelation time measured with FFTs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sp_fft

from mile.kernel import ChainState, KernelParams, kernel_step

logger = logging.getLogger(__name__)

# per-update cap on |log(eps'/eps)| before scaling by the trust parameter
STEP_CHANGE_CAP = 0.1
MAX_CONSECUTIVE_HALVINGS = 50


class ChainFailure(RuntimeError):
    """A chain produced non-finite values it cannot recover from."""


@dataclass(frozen=True)
class TuningConfig:
    phase1_steps: int = 40_000
    phase2_steps: int = 5_000
    phase3_steps: int = 5_000
    ev_schedule_start: float = 0.5
    ev_schedule_end: float = 0.1
    desired_ess_fraction: float = 0.1
    ess_floor: float = 100.0
    # None derives the window from the posterior sample budget
    eevpd_window_samples: float | None = 150.0
    trust_in_estimate: float = 1.5
    phase3_param_cap: int = 2_000
    phase3_sample_cap: int = 10_000
    phase3_L_factor: float = 0.4

    def __post_init__(self):
        for name in ("phase1_steps", "phase2_steps", "phase3_steps", "phase3_param_cap", "phase3_sample_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("desired_ess_fraction", "ess_floor", "trust_in_estimate", "phase3_L_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.ev_schedule_start >= self.ev_schedule_end > 0:
            raise ValueError("energy variance schedule needs start >= end > 0")
        if self.eevpd_window_samples is not None and not self.eevpd_window_samples >= 1:
            raise ValueError("eevpd_window_samples must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps + self.phase3_steps

    def window(self, n_posterior_samples: int | None = None) -> float:
        if self.eevpd_window_samples is not None:
            return float(self.eevpd_window_samples)
        n = 0 if n_posterior_samples is None else n_posterior_samples
        return max(self.desired_ess_fraction * n, self.ess_floor)


@dataclass
class TunedParams:
    step_size: float
    decoherence_length: float
    initial_decoherence_length: float = math.nan
    final_eevpd: float = math.nan
    halving_events: list[int] = field(default_factory=list)
    step_size_trace: np.ndarray | None = None
    energy_change_trace: np.ndarray | None = None
    phase2_variances: np.ndarray | None = None
    phase3_mean_ess: float = math.nan
    grad_evals: int = 0
    recovery_grad_evals: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def kernel_params(self) -> KernelParams:
        return KernelParams(self.step_size, self.decoherence_length)


def energy_variance_target(step: int, total: int, cfg: TuningConfig) -> float:
    """Linearly interpolated desired EEVPD at Phase-I step ``step`` of ``total``."""
    frac = step / total
    return cfg.ev_schedule_start + (cfg.ev_schedule_end - cfg.ev_schedule_start) * frac


def adapt_step_size(step_size: float, eevpd_estimate: float, target: float, trust: float) -> float:
    """Power-law step size correction towards the target EEVPD.

    The energy error variance of a second-order integrator scales as eps^6,
    so the multiplicative correction is ``(target / estimate)^(1/6)``, clamped
    to ``exp(+-trust * STEP_CHANGE_CAP)``.
    """
    cap = trust * STEP_CHANGE_CAP
    if eevpd_estimate <= 0.0:
        log_change = cap
    else:
        log_change = (math.log(target) - math.log(eevpd_estimate)) / 6.0
        log_change = min(max(log_change, -cap), cap)
    return step_size * math.exp(log_change)


@dataclass
class EEVPDEstimator:
    """Exponentially weighted variance of the per-step energy error, per dimension.

    Energy errors are recorded divided by ``step_size**3`` (their standard
    deviation scales as eps^3), so samples collected at different step sizes
    are pooled on a common scale and :meth:`estimate` rescales to the step
    size asked for. With a constant step size this is a plain exponentially
    weighted variance whose weights have effective sample size ``window``.
    """

    dim: int
    window: float
    weight: float = 0.0
    weighted_sum: float = 0.0
    weighted_sq_dev: float = 0.0

    @property
    def decay(self) -> float:
        return (self.window - 1.0) / (self.window + 1.0)

    @property
    def mean(self) -> float:
        return self.weighted_sum / self.weight if self.weight > 0 else 0.0

    def update(self, energy_change: float, step_size: float = 1.0) -> None:
        if not math.isfinite(energy_change):
            return
        z = energy_change / step_size**3
        a = self.decay
        # the first sample has no earlier mean to deviate from
        dev = z - self.mean if self.weight > 0 else 0.0
        self.weight = a * self.weight + 1.0
        self.weighted_sum = a * self.weighted_sum + z
        self.weighted_sq_dev = a * self.weighted_sq_dev + dev * dev

    def estimate(self, step_size: float = 1.0) -> float:
        if self.weight == 0.0:
            return math.nan
        return self.weighted_sq_dev / self.weight / self.dim * step_size**6


def update_eevpd_estimate(running: EEVPDEstimator, energy_change: float, dim: int, window: float,
                          step_size: float = 1.0) -> EEVPDEstimator:
    """Functional form of :meth:`EEVPDEstimator.update`; ``running=None`` starts fresh."""
    new = EEVPDEstimator(dim, window) if running is None else replace(running, dim=dim, window=window)
    new.update(energy_change, step_size)
    return new


def phase1_run(state: ChainState, target, cfg: TuningConfig, step_size: float, rng: np.random.Generator,
               decoherence_length: float | None = None, window: float | None = None,
               record: bool = True) -> tuple[ChainState, float, TunedParams]:
    """Burn-in with step size adaptation against the scheduled EEVPD.

    Non-finite steps are rolled back and halve the step size; more than
    ``MAX_CONSECUTIVE_HALVINGS`` in a row raise :class:`ChainFailure`.
    """
    dim = state.position.size
    L = math.sqrt(dim) if decoherence_length is None else decoherence_length
    est = EEVPDEstimator(dim, cfg.window() if window is None else window)
    total = cfg.phase1_steps
    eps_trace = np.empty(total) if record else None
    de_trace = np.empty(total) if record else None
    info = TunedParams(step_size=step_size, decoherence_length=L)
    trust = cfg.trust_in_estimate
    consecutive = 0
    i = 0
    while i < total:
        new_state, step = kernel_step(state, KernelParams(step_size, L), target, rng)
        if not step.is_finite:
            info.recovery_grad_evals += step.grad_evals
            info.halving_events.append(i)
            consecutive += 1
            if consecutive > MAX_CONSECUTIVE_HALVINGS:
                raise ChainFailure(f"phase I: more than {MAX_CONSECUTIVE_HALVINGS} consecutive step size halvings")
            step_size *= 0.5
            continue
        consecutive = 0
        info.grad_evals += 2
        est.update(step.energy_change, step_size)
        if record:
            eps_trace[i] = step_size
            de_trace[i] = step.energy_change
        step_size = adapt_step_size(step_size, est.estimate(step_size), energy_variance_target(i, total, cfg), trust)
        state = new_state
        i += 1
    info.step_size = step_size
    info.final_eevpd = est.estimate(step_size)
    info.step_size_trace = eps_trace
    info.energy_change_trace = de_trace
    return state, step_size, info


def _run_fixed(state, target, params, rng, steps, phase, on_step):
    for _ in range(steps):
        state, step = kernel_step(state, params, target, rng)
        if not step.is_finite:
            raise ChainFailure(f"{phase}: non-finite step after burn-in")
        on_step(state.position)
    return state


def phase2_run(state: ChainState, target, cfg: TuningConfig, step_size: float, rng: np.random.Generator,
               decoherence_length: float | None = None) -> tuple[ChainState, float, np.ndarray]:
    """Initial decoherence length ``sqrt(sum_i Var[theta_i])`` from a Welford pass.

    Returns the state, ``L0`` and the per-parameter variances.
    """
    dim = state.position.size
    L = math.sqrt(dim) if decoherence_length is None else decoherence_length
    count = 0
    mean = np.zeros(dim)
    m2 = np.zeros(dim)

    def accumulate(x):
        nonlocal count, mean, m2
        count += 1
        delta = x - mean
        mean += delta / count
        m2 += delta * (x - mean)

    state = _run_fixed(state, target, KernelParams(step_size, L), rng, cfg.phase2_steps, "phase II", accumulate)
    variances = m2 / max(count - 1, 1)
    total_var = float(variances.sum())
    if not total_var > 0.0 or not math.isfinite(total_var):
        logger.warning("phase II: zero parameter variance, falling back to L0 = sqrt(d)")
        return state, math.sqrt(dim), variances
    return state, math.sqrt(total_var), variances


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    centered = x - x.mean(axis=0)
    nfft = sp_fft.next_fast_len(2 * n, real=True)
    f = sp_fft.rfft(centered, n=nfft, axis=0)
    acov = sp_fft.irfft(f.real**2 + f.imag**2, n=nfft, axis=0)[:n]
    with np.errstate(invalid="ignore", divide="ignore"):
        return acov / acov[0]


def constant_columns(trace: np.ndarray) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    return np.all(trace == trace[:1], axis=0)


def ess_per_dimension(trace: np.ndarray) -> np.ndarray:
    """Effective sample size of every column of a ``steps x dims`` trace.

    Autocorrelations come from an FFT; the sum is truncated at the first
    non-positive pair ``rho[2t] + rho[2t+1]`` (Geyer's initial positive
    sequence). Constant columns get ``ESS = steps``.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim == 1:
        trace = trace[:, None]
    n = trace.shape[0]
    if n < 8:
        raise ValueError(f"need at least 8 steps to estimate ESS, got {n}")
    const = constant_columns(trace)
    rho = _autocorrelation(trace)
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    positive = np.cumprod(pairs > 0, axis=0).astype(bool)
    tau = -1.0 + 2.0 * np.where(positive, pairs, 0.0).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ess = n / tau
    ess[const] = n
    return ess


def phase3_run(state: ChainState, target, cfg: TuningConfig, step_size: float, L0: float,
               rng: np.random.Generator) -> tuple[ChainState, float, float]:
    """Refine the decoherence length from the measured autocorrelation time.

    Returns the state, the refined ``L`` and the mean ESS that produced it.
    """
    dim = state.position.size
    steps = cfg.phase3_steps
    if dim > cfg.phase3_param_cap:
        dims = np.sort(rng.choice(dim, size=cfg.phase3_param_cap, replace=False))
    else:
        dims = None
    stride = max(1, math.ceil(steps / cfg.phase3_sample_cap))
    n_rows = steps // stride
    width = dim if dims is None else dims.size
    trace = np.empty((n_rows, width))
    counter = 0

    def record(x):
        nonlocal counter
        counter += 1
        if counter % stride == 0 and counter // stride <= n_rows:
            trace[counter // stride - 1] = x if dims is None else x[dims]

    state = _run_fixed(state, target, KernelParams(step_size, L0), rng, steps, "phase III", record)
    try:
        mean_ess = float(np.mean(ess_per_dimension(trace)))
    except ValueError as exc:
        logger.warning("phase III: ESS estimate failed (%s), keeping L0", exc)
        return state, L0, math.nan
    if not math.isfinite(mean_ess) or mean_ess <= 0.0:
        logger.warning("phase III: ESS estimate not usable, keeping L0")
        return state, L0, mean_ess
    tau = steps / max(mean_ess, 1.0)
    L = cfg.phase3_L_factor * step_size * tau
    L = min(max(L, 0.1 * L0), 10.0 * L0)
    return state, L, mean_ess


def tune(state: ChainState, target, cfg: TuningConfig, step_size: float, rng: np.random.Generator,
         window: float | None = None, record: bool = True) -> tuple[ChainState, TunedParams]:
    """Run Phases I to III; the step size is frozen after Phase I."""
    state, step_size, info = phase1_run(state, target, cfg, step_size, rng, window=window, record=record)
    state, L0, variances = phase2_run(state, target, cfg, step_size, rng)
    info.grad_evals += 2 * cfg.phase2_steps
    state, L, mean_ess = phase3_run(state, target, cfg, step_size, L0, rng)
    info.grad_evals += 2 * cfg.phase3_steps
    info.initial_decoherence_length = L0
    info.decoherence_length = L
    info.phase2_variances = variances
    info.phase3_mean_ess = mean_ess
    return state, info
