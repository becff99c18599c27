"""Deep-ensemble warm starts: AdamW with early stopping on validation NLL."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from mile.nn import MlpWorkspace, init_params
from mile.posterior import NonFiniteError, PosteriorModel, _loglik_and_grads, pointwise_log_density

logger = logging.getLogger(__name__)

MINIBATCH_THRESHOLD = 50_000
MINIBATCH_SIZE = 1024


class TrainingError(RuntimeError):
    """Optimization of an ensemble member diverged."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    max_epochs: int = 1000
    patience: int = 20
    ensemble_size: int = 12

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1 or self.ensemble_size < 1:
            raise ValueError("max_epochs, patience and ensemble_size must be >= 1")


@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        params = np.array(params, dtype=np.float64)
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0)


@dataclass
class DeepEnsemble:
    members: list[np.ndarray]
    val_losses: list[float]
    learning_rate: float
    epochs: list[int] = field(default_factory=list)
    # member identities; chain k of a run inherits ids[k] as its seed index
    ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(len(self.members)))
        if len(self.ids) != len(self.members):
            raise ValueError("one id per member")

    def permuted(self, order) -> "DeepEnsemble":
        pick = lambda xs: [xs[i] for i in order] if xs else []
        return DeepEnsemble(pick(self.members), pick(self.val_losses), self.learning_rate, pick(self.epochs),
                            pick(self.ids))

    def __len__(self):
        return len(self.members)


def adamw_step(state: AdamState, grad: np.ndarray, cfg: TrainConfig) -> AdamState:
    """One AdamW update of ``state`` given the loss gradient ``grad``.

    The decay ``theta -= lr * wd * theta`` is applied to the parameters
    directly and never enters the moment estimates.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient in AdamW step")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    params = state.params * (1.0 - cfg.learning_rate * cfg.weight_decay)
    params = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return AdamState(params, m, v, t)


def mean_nll(model: PosteriorModel, params: np.ndarray, x=None, y=None) -> float:
    x = model.x if x is None else x
    y = model.y if y is None else y
    if len(y) == 0:
        return 0.0
    out = model.outputs(params, x)
    return -float(np.mean(pointwise_log_density(model.likelihood, out, y)))


def _nll_grad(model: PosteriorModel, params, rows=None):
    """Mean negative log-likelihood and its gradient (no prior term)."""
    if rows is None:
        ws = model._workspace()
        y = model.y
    else:
        ws = MlpWorkspace(model.arch, model.x[rows])
        y = model.y[rows]
    out = ws.forward(params)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite network outputs")
    ll, g_out = _loglik_and_grads(model.likelihood, out, y)
    n = len(y)
    grad = ws.backward(params, g_out)
    grad *= -1.0 / n
    return -ll / n, grad


def train_member(model: PosteriorModel, val_data, cfg: TrainConfig, seed: int, member_index: int = 0) -> tuple[np.ndarray, float, int]:
    """Fit one member from a He-uniform init.

    Returns the parameters with the lowest validation NLL seen (the init
    included), that NLL, and the number of epochs run.
    """
    x_val, y_val = val_data
    rng = np.random.default_rng(seed)
    params = init_params(model.arch, seed)
    state = AdamState.zeros_like(params)
    best = state.params.copy()
    best_loss = mean_nll(model, best, x_val, y_val)
    stale = 0
    n = model.n_data
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if n > MINIBATCH_THRESHOLD:
            order = rng.permutation(n)
            batches = [order[i:i + MINIBATCH_SIZE] for i in range(0, n, MINIBATCH_SIZE)]
        else:
            batches = [None]
        try:
            # divergence is detected from the values; overflow warnings add nothing
            with np.errstate(over="ignore", invalid="ignore"):
                for rows in batches:
                    loss, grad = _nll_grad(model, state.params, rows)
                    if not math.isfinite(loss):
                        raise NonFiniteError("non-finite training loss")
                    state = adamw_step(state, grad, cfg)
                val_loss = mean_nll(model, state.params, x_val, y_val)
        except NonFiniteError as exc:
            raise TrainingError(f"member {member_index} diverged at epoch {epoch}: {exc}") from exc
        if not math.isfinite(val_loss):
            raise TrainingError(f"member {member_index} diverged at epoch {epoch}: non-finite validation loss")
        if val_loss < best_loss:
            best_loss = val_loss
            best = state.params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, best_loss, epoch


def _train_task(args):
    model, val_data, cfg, seed, k = args
    with threadpool_limits(limits=1):
        return train_member(model, val_data, cfg, seed, k)


def train_ensemble(model: PosteriorModel, val_data, cfg: TrainConfig, base_seed: int, workers: int = 1) -> DeepEnsemble:
    """Train ``cfg.ensemble_size`` members with seeds ``base_seed + k``."""
    tasks = [(model, val_data, cfg, base_seed + k, k) for k in range(cfg.ensemble_size)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_task, tasks))
    else:
        results = [_train_task(t) for t in tasks]
    members, losses, epochs = zip(*results)
    logger.info("trained %d members, val NLL %s", len(members), np.round(losses, 4))
    return DeepEnsemble(list(members), list(losses), cfg.learning_rate, list(epochs))
