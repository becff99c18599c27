"""Run manifests: every setting of a run as an INI file with all defaults written out."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from mile.data import DatasetSpec, Standardization
from mile.ensemble import RunConfig
from mile.metrics import CoverageSpec
from mile.optim import TrainConfig
from mile.tuning import TuningConfig

_DELIMITER_NAMES = {"\t": "tab", " ": "space"}
_DELIMITERS = {v: k for k, v in _DELIMITER_NAMES.items()}


class ManifestError(ValueError):
    """The manifest is missing, malformed or holds an invalid setting."""


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (16, 16)
    activation: str = "relu"
    prior_variance: float = 1.0


@dataclass
class RunManifest:
    dataset: DatasetSpec
    run: RunConfig = field(default_factory=RunConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    coverage: CoverageSpec = field(default_factory=CoverageSpec)
    split_seed: int = 0
    interval_seed: int = 0
    output_dir: str = "mile-out"
    standardization: dict[str, str] | None = None

    def replace(self, **changes) -> "RunManifest":
        return dataclasses.replace(self, **changes)

    def with_run(self, **changes) -> "RunManifest":
        return self.replace(run=dataclasses.replace(self.run, **changes))


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse(text: str, like, name: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            kind = type(like[0]) if like else float
            return tuple(kind(t) for t in items)
    except ValueError as exc:
        raise ManifestError(f"bad value {text!r} for {name}") from exc
    return text


def _section(obj) -> dict[str, str]:
    return {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}


def _dataset_section(spec: DatasetSpec) -> dict[str, str]:
    out = _section(spec)
    out["delimiter"] = _DELIMITER_NAMES.get(spec.delimiter, spec.delimiter)
    return out


def standardization_section(std: Standardization) -> dict[str, str]:
    return {
        "feature_names": ", ".join(std.feature_names),
        "feature_mean": ", ".join(repr(float(v)) for v in std.feature_mean),
        "feature_scale": ", ".join(repr(float(v)) for v in std.feature_scale),
        "target_mean": repr(float(std.target_mean)),
        "target_scale": repr(float(std.target_scale)),
        "classes": ", ".join(std.classes),
    }


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def to_config(m: RunManifest) -> configparser.ConfigParser:
    cp = _parser()
    cp["dataset"] = _dataset_section(m.dataset)
    cp["split"] = {"seed": str(m.split_seed)}
    cp["model"] = _section(m.model)
    cp["training"] = _section(m.run.training)
    cp["tuning"] = _section(m.run.tuning)
    cp["sampling"] = {
        "chains": str(m.run.chains),
        "sampling_steps": str(m.run.sampling_steps),
        "thinning": str(m.run.thinning),
        "base_seed": str(m.run.base_seed),
    }
    cp["evaluation"] = {
        "coverage_levels": _fmt(m.coverage.levels),
        "coverage_weights": _fmt(m.coverage.weights),
        "interval_seed": str(m.interval_seed),
    }
    cp["output"] = {"dir": m.output_dir}
    if m.standardization is not None:
        cp["standardization"] = dict(m.standardization)
    return cp


def dumps(m: RunManifest) -> str:
    buf = io.StringIO()
    to_config(m).write(buf)
    return buf.getvalue()


def write_manifest(m: RunManifest, path) -> None:
    Path(path).write_text(dumps(m))


def _build(cls, section, name, overrides=None):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known if section is not None else set()
    if unknown:
        raise ManifestError(f"unknown keys in [{name}]: {sorted(unknown)}")
    kwargs = dict(overrides or {})
    for f in fields(cls):
        if section is None or f.name not in section or f.name in kwargs:
            continue
        like = getattr(defaults, f.name)
        raw = section[f.name]
        if like is None or raw.strip() == "auto":
            kwargs[f.name] = None if raw.strip() == "auto" else float(raw)
        else:
            kwargs[f.name] = _parse(raw, like, f"{name}.{f.name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"[{name}]: {exc}") from exc


def loads(text: str) -> RunManifest:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ManifestError(str(exc)) from exc
    if not cp.has_section("dataset") or "path" not in cp["dataset"]:
        raise ManifestError("manifest needs a [dataset] section with a path")
    ds = dict(cp["dataset"])
    ds_kwargs = {"path": ds.pop("path")}
    if "target" in ds:
        t = ds.pop("target").strip()
        ds_kwargs["target"] = int(t) if t.lstrip("-").isdigit() else t
    if "delimiter" in ds:
        d = ds.pop("delimiter")
        ds_kwargs["delimiter"] = _DELIMITERS.get(d.strip(), d.strip() or ",")
    if "header" in ds:
        ds_kwargs["header"] = _parse(ds.pop("header"), True, "dataset.header")
    if "task" in ds:
        ds_kwargs["task"] = ds.pop("task").strip()
    if ds:
        raise ManifestError(f"unknown keys in [dataset]: {sorted(ds)}")
    try:
        dataset = DatasetSpec(**ds_kwargs)
    except ValueError as exc:
        raise ManifestError(f"[dataset]: {exc}") from exc

    def sec(name):
        return cp[name] if cp.has_section(name) else None

    training = _build(TrainConfig, sec("training"), "training")
    tuning = _build(TuningConfig, sec("tuning"), "tuning")
    model = _build(ModelSpec, sec("model"), "model")
    sampling = sec("sampling")
    run_kwargs = {}
    if sampling is not None:
        unknown = set(sampling) - {"chains", "sampling_steps", "thinning", "base_seed"}
        if unknown:
            raise ManifestError(f"unknown keys in [sampling]: {sorted(unknown)}")
        for key in ("chains", "sampling_steps", "thinning", "base_seed"):
            if key in sampling:
                run_kwargs[key] = _parse(sampling[key], 0, f"sampling.{key}")
    try:
        run = RunConfig(tuning=tuning, training=training, **run_kwargs)
    except ValueError as exc:
        raise ManifestError(f"[sampling]: {exc}") from exc
    ev = sec("evaluation")
    cov_kwargs, interval_seed = {}, 0
    if ev is not None:
        if "coverage_levels" in ev:
            cov_kwargs["levels"] = _parse(ev["coverage_levels"], (0.5,), "evaluation.coverage_levels")
        if "coverage_weights" in ev and ev["coverage_weights"].strip() != "auto":
            cov_kwargs["weights"] = _parse(ev["coverage_weights"], (0.5,), "evaluation.coverage_weights")
        if "interval_seed" in ev:
            interval_seed = _parse(ev["interval_seed"], 0, "evaluation.interval_seed")
    try:
        coverage = CoverageSpec(**cov_kwargs)
    except ValueError as exc:
        raise ManifestError(f"[evaluation]: {exc}") from exc
    split_seed = _parse(cp["split"].get("seed", "0"), 0, "split.seed") if cp.has_section("split") else 0
    output_dir = cp["output"].get("dir", "mile-out") if cp.has_section("output") else "mile-out"
    std = dict(cp["standardization"]) if cp.has_section("standardization") else None
    if model.activation != "relu":
        raise ManifestError(f"unsupported activation {model.activation!r}")
    return RunManifest(dataset, run, model, coverage, split_seed, interval_seed, output_dir, std)


def read_manifest(path) -> RunManifest:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return loads(text)
