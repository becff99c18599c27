"""Unnormalized BNN log posteriors and per-sample predictive densities."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import log_softmax

from mile.nn import DimensionError, MlpArchitecture, MlpWorkspace, _check_params, forward

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
# Gaussian log-scale head is clamped to this range before exponentiation
LOG_SCALE_MIN, LOG_SCALE_MAX = -10.0, 10.0


class NonFiniteError(FloatingPointError):
    """Raised when network outputs or densities stop being finite."""


@dataclass(frozen=True)
class Prior:
    """Isotropic Gaussian prior N(0, variance * I)."""

    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"prior variance must be positive, got {self.variance}")


@dataclass(frozen=True)
class Likelihood:
    """Observation model attached to the network outputs.

    ``gaussian``: two outputs read as (location, log-scale).
    ``categorical``: one logit per class.
    """

    kind: Literal["gaussian", "categorical"] = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown likelihood kind {self.kind!r}")

    def check_output_dim(self, m: int):
        if self.kind == "gaussian" and m != 2:
            raise DimensionError("a Gaussian distributional head needs exactly 2 outputs")
        if self.kind == "categorical" and m < 2:
            raise DimensionError("a categorical head needs at least 2 outputs")


def log_prior_and_grad(prior: Prior, params: np.ndarray) -> tuple[float, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    var = prior.variance
    d = params.size
    value = -0.5 * d * np.log(2.0 * np.pi * var) - 0.5 * float(params @ params) / var
    return value, -params / var


def _gaussian_terms(outputs, targets):
    mu = outputs[:, 0]
    raw = outputs[:, 1]
    s = np.clip(raw, LOG_SCALE_MIN, LOG_SCALE_MAX)
    inv_scale = np.exp(-s)
    r = (targets - mu) * inv_scale
    return s, raw, inv_scale, r


def _check_targets(lik, outputs, targets):
    targets = np.asarray(targets)
    if targets.shape != (outputs.shape[0],):
        raise DimensionError(
            f"expected {outputs.shape[0]} targets, got shape {targets.shape}"
        )
    if lik.kind == "categorical":
        if targets.size and (targets.min() < 0 or targets.max() >= outputs.shape[1]):
            raise ValueError("class labels must lie in [0, number of classes)")
        return targets.astype(np.intp, copy=False)
    return targets.astype(np.float64, copy=False)


def pointwise_log_density(lik: Likelihood, outputs: np.ndarray, targets) -> np.ndarray:
    """``log p(y_i | f(x_i))`` for every row."""
    outputs = np.asarray(outputs, dtype=np.float64)
    lik.check_output_dim(outputs.shape[1])
    targets = _check_targets(lik, outputs, targets)
    if not np.all(np.isfinite(outputs)):
        raise NonFiniteError("non-finite network outputs")
    if lik.kind == "gaussian":
        s, _, _, r = _gaussian_terms(outputs, targets)
        return -HALF_LOG_2PI - s - 0.5 * r * r
    logp = log_softmax(outputs, axis=1)
    return logp[np.arange(outputs.shape[0]), targets]


def log_likelihood_and_output_grads(lik: Likelihood, outputs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Summed log-likelihood and its gradient with respect to ``outputs``."""
    outputs = np.asarray(outputs, dtype=np.float64)
    lik.check_output_dim(outputs.shape[1])
    targets = _check_targets(lik, outputs, targets)
    if not np.all(np.isfinite(outputs)):
        raise NonFiniteError("non-finite network outputs")
    return _loglik_and_grads(lik, outputs, targets)


def _loglik_and_grads(lik, outputs, targets):
    n = outputs.shape[0]
    grads = np.empty_like(outputs)
    if lik.kind == "gaussian":
        s, raw, inv_scale, r = _gaussian_terms(outputs, targets)
        value = -n * HALF_LOG_2PI - s.sum() - 0.5 * float(r @ r)
        np.multiply(r, inv_scale, out=grads[:, 0])
        g_s = r * r - 1.0
        # clamped log-scales carry no gradient
        g_s[(raw < LOG_SCALE_MIN) | (raw > LOG_SCALE_MAX)] = 0.0
        grads[:, 1] = g_s
    else:
        logp = log_softmax(outputs, axis=1)
        rows = np.arange(n)
        value = float(logp[rows, targets].sum())
        np.exp(logp, out=grads)
        np.negative(grads, out=grads)
        grads[rows, targets] += 1.0
    if not np.isfinite(value):
        raise NonFiniteError("non-finite log-likelihood")
    return value, grads


class PosteriorModel:
    """``log p(theta | D)`` up to the evidence, for an MLP on fixed training data.

    Instances are immutable in spirit; the forward/backward buffers live in
    thread-local storage and are rebuilt after unpickling.
    """

    def __init__(self, arch: MlpArchitecture, prior: Prior, likelihood: Likelihood, x, y):
        likelihood.check_output_dim(arch.output_dim)
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != arch.input_dim:
            raise DimensionError(f"expected features of shape (n, {arch.input_dim}), got {x.shape}")
        y = _check_targets(likelihood, np.empty((x.shape[0], arch.output_dim)), y)
        self.arch = arch
        self.prior = prior
        self.likelihood = likelihood
        self.x = x
        self.y = np.ascontiguousarray(y)
        self.x.setflags(write=False)
        self.y.setflags(write=False)
        self._local = threading.local()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_local"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._local = threading.local()

    @property
    def dim(self) -> int:
        return self.arch.n_params

    @property
    def n_data(self) -> int:
        return self.x.shape[0]

    def _workspace(self) -> MlpWorkspace:
        ws = getattr(self._local, "ws", None)
        if ws is None:
            ws = self._local.ws = MlpWorkspace(self.arch, self.x)
        return ws

    def with_data(self, x, y) -> "PosteriorModel":
        return PosteriorModel(self.arch, self.prior, self.likelihood, x, y)

    def logdensity_and_grad(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        ws = self._workspace()
        outputs = ws.forward(params)
        if not np.all(np.isfinite(outputs)):
            raise NonFiniteError("non-finite network outputs")
        ll, out_grads = _loglik_and_grads(self.likelihood, outputs, self.y)
        grad = ws.backward(params, out_grads)
        var = self.prior.variance
        lp = -0.5 * params.size * np.log(2.0 * np.pi * var) - 0.5 * float(params @ params) / var
        grad -= params / var
        return ll + lp, grad

    def outputs(self, params: np.ndarray, x=None) -> np.ndarray:
        return forward(self.arch, params, self.x if x is None else x)


def log_posterior_and_grad(model: PosteriorModel, params: np.ndarray) -> tuple[float, np.ndarray]:
    params = _check_params(model.arch, params)
    return model.logdensity_and_grad(params)


def predictive_log_density(model: PosteriorModel, params: np.ndarray, x_star, y_star) -> float:
    """``log p(y* | x*, theta)`` for one test point."""
    x_star = np.asarray(x_star, dtype=np.float64).reshape(1, -1)
    out = forward(model.arch, params, x_star)
    return float(pointwise_log_density(model.likelihood, out, np.asarray([y_star]))[0])
