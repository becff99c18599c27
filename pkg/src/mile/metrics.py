"""Predictive metrics: LPPD, RMSE, accuracy, interval coverage and calibration error."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from mile.ensemble import PosteriorSamples, PredictiveSummary, predict

MIN_DRAWS_FOR_INTERVALS = 20


@dataclass(frozen=True)
class CoverageSpec:
    """Nominal coverage levels and the weights of their squared gaps."""

    levels: tuple[float, ...] = (0.5, 0.75, 0.9, 0.95)
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        if not levels or not all(0.0 < v < 1.0 for v in levels):
            raise ValueError("coverage levels must lie strictly inside (0, 1)")
        weights = (1.0,) * len(levels) if self.weights is None else tuple(float(w) for w in self.weights)
        if len(weights) != len(levels) or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("need one nonnegative weight per level, not all zero")
        total = sum(weights)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "weights", tuple(w / total for w in weights))


def lppd_from_log_densities(per_draw_logp) -> float:
    """Mean over points of ``log mean_draws p``; input is ``draws x points``."""
    per_draw_logp = np.atleast_2d(np.asarray(per_draw_logp, dtype=np.float64))
    if per_draw_logp.shape[1] == 0:
        raise ValueError("empty test set")
    n_draws = per_draw_logp.shape[0]
    return float(np.mean(logsumexp(per_draw_logp, axis=0) - math.log(n_draws)))


def lppd(model, samples: PosteriorSamples, x, y) -> float:
    """Log pointwise predictive density over the successful chains' draws."""
    if len(y) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(model, samples, x, y).log_density))


def rmse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        raise ValueError("empty inputs")
    r = predictions - targets
    return float(np.sqrt(np.mean(r * r)))


def accuracy(probabilities, labels) -> float:
    """Fraction of rows whose most probable class is the label; ties go to the lowest index."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.ndim != 2 or probabilities.shape[0] != labels.shape[0]:
        raise ValueError("need an (n, classes) probability matrix and n labels")
    if labels.size == 0:
        raise ValueError("empty inputs")
    return float(np.mean(np.argmax(probabilities, axis=1) == labels))


def predictive_draws(locations, scales, seed: int = 0) -> np.ndarray:
    """One Gaussian draw per posterior sample and test point, ``draws x points``."""
    locations = np.atleast_2d(np.asarray(locations, dtype=np.float64))
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), locations.shape)
    if locations.shape[0] < MIN_DRAWS_FOR_INTERVALS:
        warnings.warn(
            f"only {locations.shape[0]} posterior draws; interval quantiles will be unstable",
            RuntimeWarning, stacklevel=2,
        )
    z = np.random.default_rng(seed).standard_normal(locations.shape)
    return locations + scales * z


def equal_tailed(draws, level: float) -> tuple[np.ndarray, np.ndarray]:
    alpha = 1.0 - level
    lo, hi = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
    return lo, hi


def credible_intervals(locations, scales, level: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Equal-tailed ``level`` predictive intervals from seeded per-sample draws."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return equal_tailed(predictive_draws(locations, scales, seed), level)


def calibration_error(intervals, targets, spec: CoverageSpec = CoverageSpec()) -> tuple[float, dict[float, float]]:
    """Weighted RMS gap between nominal and empirical coverage.

    Args:
        intervals: mapping from nominal level to ``(lower, upper)`` arrays.
        targets: observed values.
        spec: levels and weights.

    Returns:
        The calibration error and the empirical coverage per level.
    """
    targets = np.asarray(targets, dtype=np.float64)
    coverage = {}
    total = 0.0
    for level, w in zip(spec.levels, spec.weights):
        if level not in intervals:
            raise KeyError(f"no interval for level {level}")
        lo, hi = intervals[level]
        emp = float(np.mean((targets >= lo) & (targets <= hi)))
        coverage[level] = emp
        total += w * (emp - level) ** 2
    return math.sqrt(total), coverage


@dataclass
class MetricsReport:
    kind: str
    n_test: int
    n_draws: int
    lppd: float
    rmse: float | None = None
    accuracy: float | None = None
    calibration_error: float | None = None
    coverage: dict[float, float] = field(default_factory=dict)

    def items(self) -> list[tuple[str, object]]:
        out = [("kind", self.kind), ("n_test", self.n_test), ("n_draws", self.n_draws), ("lppd", self.lppd)]
        if self.rmse is not None:
            out.append(("rmse", self.rmse))
        if self.accuracy is not None:
            out.append(("accuracy", self.accuracy))
        if self.calibration_error is not None:
            out.append(("calibration_error", self.calibration_error))
        out.extend((f"coverage_{lvl}", cov) for lvl, cov in self.coverage.items())
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v if isinstance(v, (str, int)) else repr(float(v))}\n" for k, v in self.items())

    def coverage_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["nominal", "empirical"])
        for lvl, cov in self.coverage.items():
            writer.writerow([repr(lvl), repr(cov)])
        return buf.getvalue()


def summarize(summary: PredictiveSummary, y, spec: CoverageSpec = CoverageSpec(), seed: int = 0) -> MetricsReport:
    """Metrics of a predictive summary computed with targets ``y``."""
    if summary.log_density is None:
        raise ValueError("predictive summary was computed without targets")
    y = np.asarray(y)
    report = MetricsReport(summary.kind, int(y.size), summary.n_draws, float(np.mean(summary.log_density)))
    if summary.kind == "gaussian":
        report.rmse = rmse(summary.point, y)
        draws = predictive_draws(summary.locations, summary.scales, seed)
        intervals = {lvl: equal_tailed(draws, lvl) for lvl in spec.levels}
        report.calibration_error, report.coverage = calibration_error(intervals, y, spec)
    else:
        report.accuracy = accuracy(summary.probs, y)
    return report


def evaluate(model, samples: PosteriorSamples, x, y, spec: CoverageSpec = CoverageSpec(), seed: int = 0) -> MetricsReport:
    return summarize(predict(model, samples, x, y), y, spec, seed)
