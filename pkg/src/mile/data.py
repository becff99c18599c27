"""Delimited-text datasets: parsing, seeded 70/10/20 splits and standardization.

Also provides synthetic regression stand-ins with the row and feature counts
of the small UCI benchmarks, for when the real files are not at hand.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
MIN_ROWS = 10


class DataError(ValueError):
    """The dataset file cannot be turned into a design matrix and targets."""


@dataclass(frozen=True)
class DatasetSpec:
    path: str
    target: str | int = -1
    task: Literal["regression", "classification"] = "regression"
    delimiter: str = ","
    header: bool = True

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")


@dataclass
class Standardization:
    feature_names: list[str]
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    target_mean: float = 0.0
    target_scale: float = 1.0
    classes: list[str] = field(default_factory=list)


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    standardization: Standardization
    task: str

    @property
    def n_features(self) -> int:
        return self.train.x.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.standardization.classes)


def _to_float(cell: str) -> float | None:
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def read_table(spec: DatasetSpec) -> tuple[list[str], list[list[str]]]:
    path = Path(spec.path)
    try:
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(f, delimiter=spec.delimiter, skipinitialspace=True) if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if spec.header:
        if not rows:
            raise DataError(f"{path}: empty file")
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    else:
        names = [f"col{j}" for j in range(len(rows[0]))] if rows else []
    width = len(names)
    first_line = 2 if spec.header else 1
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i + first_line} has {len(r)} fields, expected {width}")
    if len(rows) < MIN_ROWS:
        raise DataError(f"{path}: {len(rows)} data rows, need at least {MIN_ROWS}")
    return names, [[c.strip() for c in r] for r in rows]


def _target_index(spec: DatasetSpec, names: list[str]) -> int:
    t = spec.target
    if isinstance(t, str) and not t.lstrip("-").isdigit():
        if t not in names:
            raise DataError(f"target column {t!r} not among {names}")
        return names.index(t)
    j = int(t)
    if not -len(names) <= j < len(names):
        raise DataError(f"target column {j} out of range for {len(names)} columns")
    return j % len(names)


def _first_appearance(values: list[str]) -> list[str]:
    return list(dict.fromkeys(values))


def _encode_features(names, rows, cols, first_line):
    blocks, out_names = [], []
    for j in cols:
        cells = [r[j] for r in rows]
        parsed = [_to_float(c) for c in cells]
        if all(p is not None for p in parsed):
            blocks.append(np.array(parsed)[:, None])
            out_names.append(names[j])
            continue
        if any(p is not None for p in parsed) or any(c == "" for c in cells):
            i = next(i for i, p in enumerate(parsed) if p is None)
            raise DataError(f"cannot parse {cells[i]!r} at row {i + first_line}, column {j + 1} ({names[j]!r})")
        levels = _first_appearance(cells)
        logger.info("one-hot encoding column %r with %d levels", names[j], len(levels))
        index = {v: k for k, v in enumerate(levels)}
        onehot = np.zeros((len(cells), len(levels)))
        onehot[np.arange(len(cells)), [index[c] for c in cells]] = 1.0
        blocks.append(onehot)
        out_names.extend(f"{names[j]}={v}" for v in levels)
    return np.hstack(blocks), out_names


def _encode_targets(spec, names, rows, j, first_line):
    cells = [r[j] for r in rows]
    parsed = [_to_float(c) for c in cells]
    if spec.task == "regression":
        for i, p in enumerate(parsed):
            if p is None:
                raise DataError(f"cannot parse target {cells[i]!r} at row {i + first_line}, column {j + 1} ({names[j]!r})")
        return np.array(parsed), []
    if all(p is not None and float(p).is_integer() for p in parsed):
        levels = sorted(set(int(p) for p in parsed))
        index = {v: k for k, v in enumerate(levels)}
        return np.array([index[int(p)] for p in parsed], dtype=np.int64), [str(v) for v in levels]
    levels = _first_appearance(cells)
    index = {v: k for k, v in enumerate(levels)}
    return np.array([index[c] for c in cells], dtype=np.int64), levels


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


def split_and_standardize(x, y, task: str, seed: int, feature_names=None, classes=None) -> Dataset:
    """Seeded shuffle into train/val/test, then standardize with train statistics."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < MIN_ROWS:
        raise DataError(f"{n} rows, need at least {MIN_ROWS}")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(x.shape[1])]
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    parts = np.split(order, [n_train, n_train + n_val])
    train_x = x[parts[0]]
    mean = train_x.mean(axis=0)
    scale = train_x.std(axis=0)
    constant = ~(scale > 0)
    for j in np.flatnonzero(constant):
        logger.warning("feature %r is constant on the training split; using scale 1", names[j])
    scale[constant] = 1.0
    std = Standardization(names, mean, scale, classes=list(classes or []))
    if task == "regression":
        y = np.asarray(y, dtype=np.float64)
        t_mean = float(y[parts[0]].mean())
        t_scale = float(y[parts[0]].std())
        if not t_scale > 0:
            logger.warning("regression target is constant on the training split; using scale 1")
            t_scale = 1.0
        std.target_mean, std.target_scale = t_mean, t_scale
        y = (y - t_mean) / t_scale
    else:
        y = np.asarray(y, dtype=np.int64)
        if not std.classes:
            std.classes = [str(c) for c in range(int(y.max()) + 1)]
    splits = [Split((x[p] - mean) / scale, y[p]) for p in parts]
    return Dataset(*splits, std, task)


def load_and_split(spec: DatasetSpec, seed: int) -> Dataset:
    """Parse ``spec.path`` and return standardized train, validation and test splits.

    Raises:
        DataError: unreadable file, unparseable cell (row and column named),
            unknown target column or fewer than ``MIN_ROWS`` rows.
    """
    names, rows = read_table(spec)
    first_line = 2 if spec.header else 1
    j = _target_index(spec, names)
    cols = [c for c in range(len(names)) if c != j]
    if not cols:
        raise DataError("no feature columns left besides the target")
    x, feature_names = _encode_features(names, rows, cols, first_line)
    y, classes = _encode_targets(spec, names, rows, j, first_line)
    if spec.task == "classification" and len(classes) < 2:
        raise DataError("classification needs at least 2 classes")
    return split_and_standardize(x, y, spec.task, seed, feature_names, classes)


# rows and feature counts of the small UCI regression benchmarks
STANDIN_SHAPES = {"airfoil": (1503, 5), "concrete": (1030, 8), "energy": (768, 8), "yacht": (308, 6)}


def synthetic_regression(n: int, n_features: int, seed: int, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Smooth nonlinear regression data with heteroscedastic Gaussian noise.

    Features are uniform on [0, 1]; the response mixes sinusoids, pairwise
    products and a quadratic term so that a small MLP fits it well but not
    trivially.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, n_features))
    w = rng.normal(size=n_features)
    f = np.sin(3.0 * x @ (w / np.linalg.norm(w)))
    f += x[:, 0] * x[:, 1 % n_features] + 0.5 * (x[:, -1] - 0.5) ** 2
    f += 0.3 * np.cos(2.0 * np.pi * x[:, n_features // 2])
    sd = noise * f.std() * (0.5 + x[:, 0])
    return x, f + sd * rng.standard_normal(n)


def standin(name: str, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic data shaped like the named benchmark (not the real data)."""
    if name not in STANDIN_SHAPES:
        raise KeyError(f"no stand-in for {name!r}; known: {sorted(STANDIN_SHAPES)}")
    n, p = STANDIN_SHAPES[name]
    return synthetic_regression(n, p, seed)


def write_csv(path, x, y, feature_names=None, target_name: str = "y") -> None:
    x = np.asarray(x)
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(x.shape[1])]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([*names, target_name])
        for row, t in zip(x, y):
            writer.writerow([*(repr(float(v)) for v in row), t if isinstance(t, str) else repr(float(t))])
