"""Ensemble of tuned MCLMC chains warm-started from deep-ensemble members.

Each chain runs the three tuning phases from its member, then samples at a
fixed step size and decoherence length, keeping every ``thinning``-th
position. Chains are independent tasks; chain ``k`` draws its randomness
from ``SeedSequence([base_seed, k])`` so results do not depend on how the
chains are scheduled.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax
from threadpoolctl import threadpool_limits

from mile.kernel import init_state, kernel_step
from mile.optim import DeepEnsemble, TrainConfig
from mile.posterior import LOG_SCALE_MAX, LOG_SCALE_MIN, NonFiniteError, PosteriorModel, pointwise_log_density
from mile.targets import GradientCounter
from mile.tuning import ChainFailure, TunedParams, TuningConfig, tune

logger = logging.getLogger(__name__)

MAGIC = b"MILE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI5Q")


class AllChainsFailed(RuntimeError):
    """Every chain of a run failed, so there is nothing to predict with."""


class SampleFileError(ValueError):
    """A persisted sample file is malformed, truncated or of another version."""


@dataclass(frozen=True)
class RunConfig:
    chains: int = 12
    sampling_steps: int = 10_000
    thinning: int = 10
    tuning: TuningConfig = field(default_factory=TuningConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    base_seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.thinning < 1 or self.sampling_steps < 1:
            raise ValueError("sampling_steps and thinning must be >= 1")
        if self.sampling_steps % self.thinning:
            raise ValueError(f"sampling_steps={self.sampling_steps} is not divisible by thinning={self.thinning}")
        if self.base_seed < 0:
            raise ValueError("base_seed must be nonnegative")

    @property
    def n_retained(self) -> int:
        return self.sampling_steps // self.thinning

    @property
    def steps_per_chain(self) -> int:
        return self.tuning.total_steps + self.sampling_steps


@dataclass
class ChainReport:
    chain: int
    failed: bool = False
    reason: str = ""
    step_size: float = math.nan
    decoherence_length: float = math.nan
    initial_decoherence_length: float = math.nan
    final_eevpd: float = math.nan
    halvings: int = 0
    steps: int = 0
    retained: int = 0
    grad_evals: int = 0
    recovery_grad_evals: int = 0
    init_grad_evals: int = 0
    wallclock: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        out = asdict(self)
        if not timing:
            del out["wallclock"]
        return out


@dataclass
class PosteriorSamples:
    """Thinned draws of every chain, shaped ``(chains, samples, params)``.

    Failed chains keep the prefix they produced; the remaining rows are NaN.
    """

    samples: np.ndarray
    reports: list[ChainReport]
    thinning: int
    base_seed: int
    tuned: list[TunedParams | None] = field(default_factory=list)
    layer_widths: tuple[int, ...] | None = None

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def dim(self) -> int:
        return self.samples.shape[2]

    @property
    def failed(self) -> np.ndarray:
        return np.array([r.failed for r in self.reports], dtype=bool)

    @property
    def grad_evals(self) -> np.ndarray:
        return np.array([r.grad_evals for r in self.reports], dtype=np.int64)

    def successful(self) -> np.ndarray:
        """Samples of the chains that did not fail, ``(K_ok, S, d)``."""
        return self.samples[~self.failed]

    def flat(self) -> np.ndarray:
        """Successful draws stacked as ``(K_ok * S, d)``."""
        ok = self.successful()
        return ok.reshape(-1, self.dim)


def chain_seed(base_seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, chain])


def run_chain(member, model, cfg: RunConfig, chain: int = 0, step_size: float | None = None,
              record: bool = False) -> tuple[np.ndarray, ChainReport, TunedParams | None]:
    """Tune and sample one chain started at ``member``.

    The initial step size defaults to the training learning rate. Returns the
    ``S x d`` retained positions (NaN past the point of failure), the chain
    report and the tuning record (None if tuning failed).
    """
    member = np.array(member, dtype=np.float64)
    if not np.all(np.isfinite(member)):
        raise ValueError(f"chain {chain}: starting point is not finite")
    eps0 = cfg.training.learning_rate if step_size is None else step_size
    rng = np.random.default_rng(chain_seed(cfg.base_seed, chain))
    target = GradientCounter(model)
    n_keep = cfg.n_retained
    out = np.full((n_keep, member.size), np.nan)
    report = ChainReport(chain=chain)
    tuned = None
    start = time.perf_counter()
    try:
        try:
            state = init_state(member, target, rng)
        except (NonFiniteError, FloatingPointError) as exc:
            raise ChainFailure(f"log density not finite at the starting point: {exc}") from exc
        report.init_grad_evals = target.calls
        window = cfg.tuning.window(n_keep)
        state, tuned = tune(state, target, cfg.tuning, eps0, rng, window=window, record=record)
        report.step_size = tuned.step_size
        report.decoherence_length = tuned.decoherence_length
        report.initial_decoherence_length = tuned.initial_decoherence_length
        report.final_eevpd = tuned.final_eevpd
        report.halvings = len(tuned.halving_events)
        report.grad_evals = tuned.grad_evals
        report.recovery_grad_evals = tuned.recovery_grad_evals
        report.steps = cfg.tuning.total_steps
        params = tuned.kernel_params
        for i in range(1, cfg.sampling_steps + 1):
            state, info = kernel_step(state, params, target, rng)
            if not info.is_finite:
                report.recovery_grad_evals += info.grad_evals
                raise ChainFailure(f"sampling: non-finite step {i}")
            report.grad_evals += 2
            report.steps += 1
            if i % cfg.thinning == 0:
                out[report.retained] = state.position
                report.retained += 1
    except ChainFailure as exc:
        report.failed = True
        report.reason = str(exc)
        if tuned is None:
            # phase I bookkeeping is lost with the exception; recover it from the counter
            report.recovery_grad_evals = target.calls - report.init_grad_evals
        logger.warning("chain %d failed: %s", chain, exc)
    report.wallclock = time.perf_counter() - start
    if not report.failed:
        expected = report.init_grad_evals + report.grad_evals + report.recovery_grad_evals
        assert target.calls == expected, (target.calls, expected)
    return out, report, tuned


def _chain_task(args):
    member, model, cfg, k, record = args
    with threadpool_limits(limits=1):
        return run_chain(member, model, cfg, k, record=record)


def map_tasks(fn, tasks, workers: int = 1):
    """Ordered map, in-process or over a process pool of ``workers``."""
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_ensemble(ensemble: DeepEnsemble | list, model, cfg: RunConfig, workers: int = 1,
                 record: bool = False) -> PosteriorSamples:
    """Run one chain per ensemble member and stack the retained draws.

    Chain seeds follow the member ids, so permuting the ensemble permutes
    the chains' outputs the same way.

    Raises:
        ValueError: the number of members differs from ``cfg.chains``.
        AllChainsFailed: no chain survived.
    """
    if isinstance(ensemble, DeepEnsemble):
        members, ids = ensemble.members, ensemble.ids
    else:
        members = list(ensemble)
        ids = list(range(len(members)))
    if len(members) != cfg.chains:
        raise ValueError(f"{len(members)} members for {cfg.chains} chains")
    tasks = [(m, model, cfg, k, record) for k, m in zip(ids, members)]
    results = map_tasks(_chain_task, tasks, workers)
    samples = np.stack([r[0] for r in results])
    reports = [r[1] for r in results]
    tuned = [r[2] for r in results]
    widths = getattr(getattr(model, "arch", None), "layer_widths", None)
    result = PosteriorSamples(samples, reports, cfg.thinning, cfg.base_seed, tuned, widths)
    n_failed = int(result.failed.sum())
    if n_failed == cfg.chains:
        raise AllChainsFailed(f"all {cfg.chains} chains failed: {reports[0].reason}")
    if n_failed:
        logger.warning("%d of %d chains failed", n_failed, cfg.chains)
    return result


@dataclass
class PredictiveSummary:
    """Posterior predictive at a batch of test points.

    ``log_density`` is only set when targets were supplied. Regression keeps
    the per-draw location and scale, ``(draws, n)``; classification keeps the
    draw-averaged class probabilities ``(n, C)``.
    """

    kind: str
    point: np.ndarray
    n_draws: int
    log_density: np.ndarray | None = None
    locations: np.ndarray | None = None
    scales: np.ndarray | None = None
    probs: np.ndarray | None = None


def _draw_outputs(model: PosteriorModel, draws: np.ndarray, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    probe = model.with_data(x, np.zeros(x.shape[0], dtype=model.y.dtype))
    ws = probe._workspace()
    out = np.empty((draws.shape[0], x.shape[0], model.arch.output_dim))
    for i, theta in enumerate(draws):
        out[i] = ws.forward(theta)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite predictive outputs")
    return out


def predict_draws(model: PosteriorModel, draws: np.ndarray, x, y=None) -> PredictiveSummary:
    """Mixture predictive over the parameter vectors in ``draws`` (rows)."""
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    if draws.shape[0] == 0:
        raise AllChainsFailed("no posterior draws to predict with")
    out = _draw_outputs(model, draws, x)
    n_draws = draws.shape[0]
    log_density = None
    if y is not None:
        per_draw = np.stack([pointwise_log_density(model.likelihood, o, y) for o in out])
        log_density = logsumexp(per_draw, axis=0) - math.log(n_draws)
    if model.likelihood.kind == "gaussian":
        locations = out[:, :, 0]
        scales = np.exp(np.clip(out[:, :, 1], LOG_SCALE_MIN, LOG_SCALE_MAX))
        return PredictiveSummary("gaussian", locations.mean(axis=0), n_draws, log_density, locations, scales)
    probs = softmax(out, axis=2).mean(axis=0)
    return PredictiveSummary("categorical", probs, n_draws, log_density, probs=probs)


def predict(model: PosteriorModel, samples: PosteriorSamples, x, y=None) -> PredictiveSummary:
    """Predictive averaged over all successful chains and retained draws."""
    if samples.failed.all():
        raise AllChainsFailed("no successful chains")
    return predict_draws(model, samples.flat(), x, y)


def predict_ensemble(model: PosteriorModel, ensemble: DeepEnsemble, x, y=None) -> PredictiveSummary:
    """Deep-ensemble baseline: the members weighted equally."""
    return predict_draws(model, np.stack(ensemble.members), x, y)


def save_samples(path, samples: PosteriorSamples) -> None:
    """Write the binary sample file; wall-clock times are left out so reruns match byte for byte."""
    k, s, d = samples.samples.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, k, s, d, samples.thinning, samples.base_seed)
    data = np.ascontiguousarray(samples.samples, dtype="<f8").tobytes()
    meta = {
        "layer_widths": None if samples.layer_widths is None else list(samples.layer_widths),
        "chains": [r.to_dict(timing=False) for r in samples.reports],
    }
    text = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(data)
        f.write(text)
    tmp.replace(path)


def load_samples(path) -> PosteriorSamples:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SampleFileError(f"{path}: truncated header")
    magic, version, k, s, d, thinning, base_seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SampleFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SampleFileError(f"{path}: unsupported format version {version}")
    n_bytes = 8 * k * s * d
    end = _HEADER.size + n_bytes
    if len(raw) < end:
        raise SampleFileError(f"{path}: truncated sample block")
    data = np.frombuffer(raw, dtype="<f8", count=k * s * d, offset=_HEADER.size).astype(np.float64)
    try:
        meta = json.loads(raw[end:].decode())
        reports = [ChainReport(**e) for e in meta["chains"]]
        widths = meta["layer_widths"]
    except (UnicodeDecodeError, ValueError, TypeError, KeyError) as exc:
        raise SampleFileError(f"{path}: unreadable chain reports ({exc})") from exc
    if len(reports) != k:
        raise SampleFileError(f"{path}: {len(reports)} chain reports for {k} chains")
    return PosteriorSamples(data.reshape(k, s, d), reports, int(thinning), int(base_seed), [None] * k,
                            None if widths is None else tuple(widths))
