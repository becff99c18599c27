"""Command line entry point: ``mile run | evaluate | diagnose | ablate``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mile.data import Dataset, DataError, load_and_split
from mile.diagnostics import DiagnosticsReport, diagnose
from mile.ensemble import (
    AllChainsFailed, PosteriorSamples, SampleFileError, load_samples, predict_ensemble, run_ensemble, save_samples,
)
from mile.manifest import ManifestError, RunManifest, read_manifest, standardization_section, write_manifest
from mile.metrics import MetricsReport, evaluate, summarize
from mile.nn import MlpArchitecture
from mile.optim import DeepEnsemble, TrainingError, train_ensemble
from mile.posterior import Likelihood, PosteriorModel, Prior

logger = logging.getLogger("mile")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_ALL_FAILED = 0, 1, 2, 3, 4
ABLATION_PARAMETERS = ("warmup_steps", "ev_schedule", "eevpd_window", "trust")

SAMPLES_FILE = "samples.mile"


@dataclass
class RunResult:
    manifest: RunManifest
    data: Dataset
    model: PosteriorModel
    ensemble: DeepEnsemble
    samples: PosteriorSamples
    metrics: MetricsReport
    de_metrics: MetricsReport
    diagnostics: DiagnosticsReport | None
    de_seconds: float
    sampling_seconds: float


def build_model(manifest: RunManifest, data: Dataset) -> PosteriorModel:
    out_dim = 2 if data.task == "regression" else data.n_classes
    arch = MlpArchitecture((data.n_features, *manifest.model.hidden, out_dim), manifest.model.activation)
    lik = Likelihood("gaussian" if data.task == "regression" else "categorical")
    return PosteriorModel(arch, Prior(manifest.model.prior_variance), lik, data.train.x, data.train.y)


def train_members(manifest: RunManifest, model: PosteriorModel, data: Dataset, workers: int = 1):
    start = time.perf_counter()
    ens = train_ensemble(model, (data.val.x, data.val.y), manifest.run.training, manifest.run.base_seed, workers)
    return ens, time.perf_counter() - start


def sample_and_score(manifest: RunManifest, model, data: Dataset, ensemble: DeepEnsemble, workers: int = 1,
                     with_diagnostics: bool = True):
    start = time.perf_counter()
    samples = run_ensemble(ensemble, model, manifest.run, workers)
    seconds = time.perf_counter() - start
    metrics = evaluate(model, samples, data.test.x, data.test.y, manifest.coverage, manifest.interval_seed)
    diag = None
    if with_diagnostics:
        diag = _diagnose(samples, model.arch)
    return samples, metrics, diag, seconds


def _diagnose(samples: PosteriorSamples, arch: MlpArchitecture) -> DiagnosticsReport | None:
    ok = samples.successful()
    if ok.shape[1] < 8:
        logger.warning("too few retained draws per chain for diagnostics")
        return None
    return diagnose(ok, arch)


def execute_run(manifest: RunManifest, workers: int = 1, data: Dataset | None = None) -> RunResult:
    """Train the ensemble, sample every chain and score the result (no file output)."""
    if manifest.run.training.ensemble_size != manifest.run.chains:
        raise ManifestError("training.ensemble_size must equal sampling.chains")
    data = load_and_split(manifest.dataset, manifest.split_seed) if data is None else data
    model = build_model(manifest, data)
    ensemble, de_seconds = train_members(manifest, model, data, workers)
    samples, metrics, diag, seconds = sample_and_score(manifest, model, data, ensemble, workers)
    de_metrics = summarize(predict_ensemble(model, ensemble, data.test.x, data.test.y), data.test.y,
                           manifest.coverage, manifest.interval_seed)
    manifest = manifest.replace(standardization=standardization_section(data.standardization))
    return RunResult(manifest, data, model, ensemble, samples, metrics, de_metrics, diag, de_seconds, seconds)


def chain_csv(samples: PosteriorSamples) -> str:
    buf = io.StringIO()
    rows = [r.to_dict(timing=False) for r in samples.reports]
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def grad_eval_line(samples: PosteriorSamples) -> str:
    ok = [r for r in samples.reports if not r.failed]
    counts = sorted({r.grad_evals for r in ok})
    init = sum(r.init_grad_evals for r in ok)
    recovery = sum(r.recovery_grad_evals for r in ok)
    return (f"gradient evaluations per successful chain: {', '.join(map(str, counts))} "
            f"({len(ok)}/{samples.n_chains} chains; separately logged: {init} initial, {recovery} recovery)")


def headline(result: RunResult) -> str:
    m = result.metrics
    score = ("RMSE", m.rmse) if m.rmse is not None else ("ACC", m.accuracy)
    name = Path(result.manifest.dataset.path).stem
    return (f"{'dataset':<16}{'LPPD':>10}{score[0]:>10}{'DE min':>10}{'sampling min':>14}\n"
            f"{name:<16}{m.lppd:>10.3f}{score[1]:>10.3f}{result.de_seconds / 60:>10.2f}"
            f"{result.sampling_seconds / 60:>14.2f}")


def write_outputs(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_samples(out / SAMPLES_FILE, result.samples)
    write_manifest(result.manifest.replace(output_dir=str(out)), out / "manifest.ini")
    (out / "metrics.txt").write_text(result.metrics.to_text())
    (out / "de_metrics.txt").write_text(result.de_metrics.to_text())
    if result.metrics.coverage:
        (out / "coverage.csv").write_text(result.metrics.coverage_csv())
    (out / "chains.csv").write_text(chain_csv(result.samples))
    if result.diagnostics is not None:
        (out / "diagnostics.txt").write_text(result.diagnostics.to_text())
        (out / "layers.csv").write_text(result.diagnostics.layer_csv())
    timing = [f"de_seconds = {result.de_seconds!r}", f"sampling_seconds = {result.sampling_seconds!r}"]
    timing += [f"chain_{r.chain}_seconds = {r.wallclock!r}" for r in result.samples.reports]
    (out / "timing.txt").write_text("\n".join(timing) + "\n")


def _resolve_workers(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("MILE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ManifestError(f"MILE_WORKERS={env!r} is not an integer") from exc
    return 1


def _apply_overrides(manifest: RunManifest, args) -> RunManifest:
    run = manifest.run
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["base_seed"] = args.seed
    if getattr(args, "chains", None) is not None:
        changes["chains"] = args.chains
        changes["training"] = dataclasses.replace(run.training, ensemble_size=args.chains)
    if getattr(args, "thinning", None) is not None:
        changes["thinning"] = args.thinning
    try:
        manifest = manifest.replace(run=dataclasses.replace(run, **changes))
    except ValueError as exc:
        raise ManifestError(str(exc)) from exc
    if getattr(args, "out", None) is not None:
        manifest = manifest.replace(output_dir=args.out)
    return manifest


def cmd_run(args) -> int:
    manifest = _apply_overrides(read_manifest(args.config), args)
    result = execute_run(manifest, _resolve_workers(args.workers))
    write_outputs(result, manifest.output_dir)
    print(headline(result))
    print(grad_eval_line(result.samples))
    return EXIT_OK


def _rebuild(manifest: RunManifest, samples_path):
    data = load_and_split(manifest.dataset, manifest.split_seed)
    model = build_model(manifest, data)
    samples = load_samples(samples_path)
    if samples.dim != model.dim:
        raise SampleFileError(f"sample dimension {samples.dim} does not match the model ({model.dim})")
    return data, model, samples


def cmd_evaluate(args) -> int:
    manifest = read_manifest(args.config)
    data, model, samples = _rebuild(manifest, args.samples)
    report = evaluate(model, samples, data.test.x, data.test.y, manifest.coverage, manifest.interval_seed)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(text)
        if report.coverage:
            (out / "coverage.csv").write_text(report.coverage_csv())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    samples = load_samples(args.samples)
    if samples.layer_widths is None:
        raise SampleFileError("sample file does not record the network layout")
    report = _diagnose(samples, MlpArchitecture(samples.layer_widths))
    if report is None:
        raise SampleFileError("not enough draws per chain for diagnostics")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.txt").write_text(report.to_text())
        (out / "layers.csv").write_text(report.layer_csv())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def parse_grid(parameter: str, text: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ManifestError("empty ablation grid")
    try:
        if parameter == "warmup_steps":
            return [int(float(t)) for t in items]
        if parameter == "ev_schedule":
            pairs = [tuple(float(v) for v in t.split(":")) for t in items]
            if any(len(p) != 2 for p in pairs):
                raise ValueError("schedule entries look like start:end")
            return pairs
        return [float(t) for t in items]
    except ValueError as exc:
        raise ManifestError(f"bad grid for {parameter}: {exc}") from exc


def ablated(manifest: RunManifest, parameter: str, value) -> RunManifest:
    tuning = manifest.run.tuning
    if parameter == "warmup_steps":
        tuning = dataclasses.replace(tuning, phase1_steps=value)
    elif parameter == "ev_schedule":
        tuning = dataclasses.replace(tuning, ev_schedule_start=value[0], ev_schedule_end=value[1])
    elif parameter == "eevpd_window":
        tuning = dataclasses.replace(tuning, eevpd_window_samples=value)
    elif parameter == "trust":
        tuning = dataclasses.replace(tuning, trust_in_estimate=value)
    else:
        raise ManifestError(f"cannot ablate {parameter!r}; choose from {ABLATION_PARAMETERS}")
    return manifest.with_run(tuning=tuning)


def run_ablation(manifest: RunManifest, parameter: str, grid, workers: int = 1) -> str:
    """One sampling run per grid value from a shared split and deep ensemble; returns CSV."""
    if parameter not in ABLATION_PARAMETERS:
        raise ManifestError(f"cannot ablate {parameter!r}; choose from {ABLATION_PARAMETERS}")
    data = load_and_split(manifest.dataset, manifest.split_seed)
    model = build_model(manifest, data)
    ensemble, _ = train_members(manifest, model, data, workers)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["parameter", "value", "status", "lppd", "rmse", "accuracy", "step_size", "decoherence_length",
                     "sampling_seconds"])
    for value in grid:
        label = f"{value[0]}:{value[1]}" if isinstance(value, tuple) else repr(value)
        try:
            cell = ablated(manifest, parameter, value)
            samples, metrics, _, seconds = sample_and_score(cell, model, data, ensemble, workers, False)
        except (AllChainsFailed, ValueError, FloatingPointError) as exc:
            logger.warning("ablation %s=%s failed: %s", parameter, label, exc)
            writer.writerow([parameter, label, f"failed: {exc}", "", "", "", "", "", ""])
            continue
        ok = [r for r in samples.reports if not r.failed]
        writer.writerow([
            parameter, label, "ok", repr(metrics.lppd),
            "" if metrics.rmse is None else repr(metrics.rmse),
            "" if metrics.accuracy is None else repr(metrics.accuracy),
            repr(float(np.mean([r.step_size for r in ok]))),
            repr(float(np.mean([r.decoherence_length for r in ok]))),
            f"{seconds:.3f}",
        ])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    manifest = _apply_overrides(read_manifest(args.config), args)
    grid = parse_grid(args.param, args.grid)
    text = run_ablation(manifest, args.param, grid, _resolve_workers(args.workers))
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablate_{args.param}.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mile", description="Ensembles of tuned MCLMC chains for Bayesian MLPs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run manifest (INI)")
        p.add_argument("--workers", type=int, default=None, help="worker processes (default: $MILE_WORKERS or 1)")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("run", help="train, sample and evaluate")
    common(p)
    p.add_argument("--seed", type=int, default=None, help="base seed of members and chains")
    p.add_argument("--chains", type=int, default=None, help="number of members and chains")
    p.add_argument("--thinning", type=int, default=None, help="keep every n-th sampling step")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="recompute metrics from a sample file")
    common(p)
    p.add_argument("samples", help="sample file written by run")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="recompute diagnostics from a sample file")
    common(p, config_required=False)
    p.add_argument("samples", help="sample file written by run")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="sweep one tuning hyperparameter")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--thinning", type=int, default=None)
    p.add_argument("--param", required=True, choices=ABLATION_PARAMETERS)
    p.add_argument("--grid", required=True, help="comma-separated values; ev_schedule uses start:end")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SampleFileError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AllChainsFailed as exc:
        print(f"all chains failed: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    except (TrainingError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
