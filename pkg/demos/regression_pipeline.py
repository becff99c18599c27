"""End to end: deep ensemble, MCLMC chains and predictive metrics on a small regression set.

Uses the yacht-shaped synthetic stand-in unless a CSV path is given (last
column is the target)::

    python3 demos/regression_pipeline.py [data.csv] [chains]

Budgets are the defaults (60k steps per chain), so expect a few seconds per
chain for a 16-16 network. The script reports the deep ensemble next to the
sampled posterior, plus the convergence diagnostics of the draws.
"""

import sys

from mile import CoverageSpec, DatasetSpec, RunConfig, TrainConfig, load_and_split, predict_ensemble, run_ensemble
from mile.data import split_and_standardize, standin
from mile.diagnostics import diagnose
from mile.metrics import evaluate, summarize
from mile.nn import MlpArchitecture
from mile.optim import train_ensemble
from mile.posterior import Likelihood, PosteriorModel, Prior

path = sys.argv[1] if len(sys.argv) > 1 else None
chains = int(sys.argv[2]) if len(sys.argv) > 2 else 4

if path:
    data = load_and_split(DatasetSpec(path), seed=0)
else:
    data = split_and_standardize(*standin("yacht"), "regression", seed=0)

arch = MlpArchitecture((data.n_features, 16, 16, 2))
model = PosteriorModel(arch, Prior(1.0), Likelihood("gaussian"), data.train.x, data.train.y)
cfg = RunConfig(chains=chains, training=TrainConfig(ensemble_size=chains))
print(f"{len(data.train)} training rows, {model.dim} parameters, {chains} chains")

ensemble = train_ensemble(model, (data.val.x, data.val.y), cfg.training, cfg.base_seed)
print(f"members stopped after {list(ensemble.epochs)} epochs")
samples = run_ensemble(ensemble, model, cfg)

de = summarize(predict_ensemble(model, ensemble, data.test.x, data.test.y), data.test.y)
mile = evaluate(model, samples, data.test.x, data.test.y, CoverageSpec())
print(f"{'':>6}{'LPPD':>9}{'RMSE':>9}{'CalE':>9}")
for name, m in (("DE", de), ("MILE", mile)):
    print(f"{name:>6}{m.lppd:>9.3f}{m.rmse:>9.4f}{m.calibration_error:>9.4f}")

for r in samples.reports:
    print(f"chain {r.chain}: eps={r.step_size:.4f} L={r.decoherence_length:.3f} grad evals {r.grad_evals}")
print(diagnose(samples.successful(), arch).to_text(), end="")
