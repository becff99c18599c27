"""Microcanonical Langevin ensembles for Bayesian MLPs.

Deep-ensemble members are trained with AdamW, then each one starts an
unadjusted MCLMC chain with automatic step size and decoherence length
tuning. The pooled draws give the posterior predictive.
"""

from mile.data import DatasetSpec, load_and_split
from mile.diagnostics import chainwise_split_rhat, diagnose, layer_variances, pooled_ess
from mile.ensemble import (
    PosteriorSamples, RunConfig, load_samples, predict, predict_ensemble, run_chain, run_ensemble, save_samples,
)
from mile.kernel import ChainState, KernelParams, init_state, kernel_step, mn2_step
from mile.metrics import CoverageSpec, accuracy, calibration_error, credible_intervals, lppd, rmse
from mile.nn import MlpArchitecture, backprop, forward, init_params
from mile.optim import DeepEnsemble, TrainConfig, train_ensemble, train_member
from mile.posterior import Likelihood, PosteriorModel, Prior, log_posterior_and_grad
from mile.tuning import TunedParams, TuningConfig, ess_per_dimension, tune

__version__ = "0.1.0"
