"""Sample-quality diagnostics: ESS, chainwise split R-hat, layer variances."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from mile.nn import MlpArchitecture
from mile.tuning import constant_columns, ess_per_dimension

logger = logging.getLogger(__name__)

# reported in place of R-hat when a segment has zero variance
DEGENERATE_RHAT = -1.0
RHAT_THRESHOLDS = (1.01, 1.1)


def chainwise_split_rhat(trace, splits: int = 4) -> np.ndarray:
    """Potential scale reduction across ``splits`` contiguous segments of one chain.

    Args:
        trace: ``S x dims`` draws of a single chain. A trailing remainder that
            does not fill a segment is dropped.
        splits: number of segments.

    Returns:
        R-hat per dimension, or ``DEGENERATE_RHAT`` where the mean
        within-segment variance is zero.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim == 1:
        trace = trace[:, None]
    if splits < 2:
        raise ValueError("need at least 2 splits")
    n = trace.shape[0]
    if n < 2 * splits:
        raise ValueError(f"need at least {2 * splits} draws for {splits} splits, got {n}")
    seg = n // splits
    segments = trace[: seg * splits].reshape(splits, seg, -1)
    means = segments.mean(axis=1)
    within = segments.var(axis=1, ddof=1).mean(axis=0)
    between = seg * means.var(axis=0, ddof=1)
    out = np.full(trace.shape[1], DEGENERATE_RHAT)
    ok = within > 0
    out[ok] = np.sqrt((seg - 1) / seg + between[ok] / (seg * within[ok]))
    return out


@dataclass
class LayerVariance:
    layer: int
    n_params: int
    within: float
    between: float | None


def _layer_groups(arch: MlpArchitecture):
    groups: dict[int, list[np.ndarray]] = {}
    for sl in arch.slices():
        groups.setdefault(sl.layer, []).append(np.arange(sl.start, sl.stop))
    return {k: np.concatenate(v) for k, v in sorted(groups.items())}


def parameter_variances(chains) -> tuple[np.ndarray, np.ndarray | None]:
    """Within- and between-chain variance of every parameter.

    ``chains`` is ``K x S x d``. Within is the mean over chains of each chain's
    variance; between is the variance over chains of the chain means (None
    for a single chain).
    """
    chains = np.asarray(chains, dtype=np.float64)
    within = chains.var(axis=1, ddof=1).mean(axis=0)
    if chains.shape[0] < 2:
        return within, None
    between = chains.mean(axis=1).var(axis=0, ddof=1)
    return within, between


def layer_variances(chains, arch: MlpArchitecture) -> list[LayerVariance]:
    """Per-layer means of the within- and between-chain parameter variances."""
    within, between = parameter_variances(chains)
    if between is None:
        logger.warning("between-chain variance needs at least 2 chains")
    out = []
    for layer, idx in _layer_groups(arch).items():
        b = None if between is None else float(between[idx].mean())
        out.append(LayerVariance(layer, idx.size, float(within[idx].mean()), b))
    return out


@dataclass
class EssSummary:
    per_chain: np.ndarray
    total: np.ndarray
    constant: np.ndarray

    @property
    def n_chains(self) -> int:
        return self.per_chain.shape[0]


def pooled_ess(chains) -> EssSummary:
    """ESS of each chain's trace, clamped to the number of draws, and its sum over chains.

    Columns that are constant within a chain are flagged in ``constant``.
    """
    chains = np.asarray(chains, dtype=np.float64)
    if chains.ndim != 3 or chains.shape[0] < 1:
        raise ValueError("expected a chains x draws x params array with at least one chain")
    n = chains.shape[1]
    per_chain = np.stack([np.minimum(ess_per_dimension(c), n) for c in chains])
    constant = np.stack([constant_columns(c) for c in chains])
    return EssSummary(per_chain, per_chain.sum(axis=0), constant)


def _summary(values) -> dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"mean": float("nan"), "max": float("nan"), "q50": float("nan"), "q90": float("nan")}
    return {
        "mean": float(values.mean()),
        "max": float(values.max()),
        "q50": float(np.quantile(values, 0.5)),
        "q90": float(np.quantile(values, 0.9)),
    }


@dataclass
class DiagnosticsReport:
    ess: EssSummary
    rhat: np.ndarray
    layers: list[LayerVariance]
    layer_ess: list[float] = field(default_factory=list)
    layer_rhat: list[float] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        valid = self.rhat[self.rhat != DEGENERATE_RHAT]
        out = {"chains": self.ess.n_chains, "params": self.rhat.shape[1]}
        for name, value in _summary(self.ess.total).items():
            out[f"ess_total_{name}"] = value
        for name, value in _summary(valid).items():
            out[f"rhat_{name}"] = value
        for thr in RHAT_THRESHOLDS:
            out[f"rhat_frac_above_{thr}"] = float(np.mean(valid > thr)) if valid.size else float("nan")
        out["rhat_degenerate"] = int(np.sum(self.rhat == DEGENERATE_RHAT))
        out["ess_constant_columns"] = int(self.ess.constant.sum())
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.summary().items())

    def layer_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "n_params", "within_var", "between_var", "ess_mean", "rhat_mean"])
        for i, lv in enumerate(self.layers):
            writer.writerow([
                lv.layer, lv.n_params, _fmt(lv.within), "" if lv.between is None else _fmt(lv.between),
                _fmt(self.layer_ess[i]), _fmt(self.layer_rhat[i]),
            ])
        return buf.getvalue()


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def diagnose(chains, arch: MlpArchitecture, splits: int = 4) -> DiagnosticsReport:
    """All diagnostics for the ``K x S x d`` draws of the successful chains."""
    chains = np.asarray(chains, dtype=np.float64)
    ess = pooled_ess(chains)
    rhat = np.stack([chainwise_split_rhat(c, splits) for c in chains])
    layers = layer_variances(chains, arch)
    layer_ess, layer_rhat = [], []
    for idx in _layer_groups(arch).values():
        layer_ess.append(float(ess.total[idx].mean()))
        r = rhat[:, idx]
        r = r[r != DEGENERATE_RHAT]
        layer_rhat.append(float(r.mean()) if r.size else float("nan"))
    return DiagnosticsReport(ess, rhat, layers, layer_ess, layer_rhat)
