"""Fully connected ReLU networks over a flat parameter vector.

Each layer ``l`` maps ``w[l-1]`` inputs to ``w[l]`` outputs. In the flat
vector a layer occupies ``(w[l-1] + 1) * w[l]`` consecutive entries: the
row-major weight matrix (inputs x outputs) followed by the bias. Read as one
block this is the augmented matrix ``[W; b]`` of shape ``(w[l-1] + 1, w[l])``,
which lets the forward pass fold the bias into a single matmul against
activations carrying a trailing column of ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not match the architecture."""


class LayerSlice(NamedTuple):
    layer: int
    kind: Literal["weight", "bias"]
    start: int
    stop: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths ``(p, hidden..., m)``; ReLU on hidden layers, affine output."""

    layer_widths: tuple[int, ...]
    activation: Literal["relu"] = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an architecture needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum((w[i] + 1) * w[i + 1] for i in range(self.n_layers))

    def block_offsets(self) -> list[int]:
        """Start offset of every layer block, plus the total size at the end."""
        w = self.layer_widths
        offsets = [0]
        for i in range(self.n_layers):
            offsets.append(offsets[-1] + (w[i] + 1) * w[i + 1])
        return offsets

    def slices(self) -> list[LayerSlice]:
        """Ordered, disjoint weight/bias ranges covering ``[0, n_params)``."""
        out = []
        offsets = self.block_offsets()
        w = self.layer_widths
        for i in range(self.n_layers):
            start = offsets[i]
            mid = start + w[i] * w[i + 1]
            out.append(LayerSlice(i, "weight", start, mid, (w[i], w[i + 1])))
            out.append(LayerSlice(i, "bias", mid, offsets[i + 1], (w[i + 1],)))
        return out


def unflatten(arch: MlpArchitecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` pairs (views, no copy)."""
    params = _check_params(arch, params)
    pairs = []
    sl = arch.slices()
    for i in range(arch.n_layers):
        ws, bs = sl[2 * i], sl[2 * i + 1]
        pairs.append(
            (params[ws.start:ws.stop].reshape(ws.shape), params[bs.start:bs.stop])
        )
    return pairs


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of :func:`unflatten`."""
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def init_params(arch: MlpArchitecture, seed: int) -> np.ndarray:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    w = arch.layer_widths
    for i in range(arch.n_layers):
        bound = np.sqrt(6.0 / w[i])
        W = rng.uniform(-bound, bound, size=(w[i], w[i + 1]))
        layers.append((W, np.zeros(w[i + 1])))
    return flatten(layers)


def _check_params(arch, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.n_params,):
        raise DimensionError(
            f"expected parameter vector of length {arch.n_params}, got shape {params.shape}"
        )
    return params


def _check_inputs(arch, inputs):
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != arch.input_dim:
        raise DimensionError(
            f"expected inputs of shape (n, {arch.input_dim}), got {inputs.shape}"
        )
    return inputs


class MlpWorkspace:
    """Preallocated buffers for repeated forward/backward passes on fixed inputs.

    Not safe to share between threads.
    """

    def __init__(self, arch: MlpArchitecture, inputs: np.ndarray):
        inputs = _check_inputs(arch, inputs)
        n = inputs.shape[0]
        w = arch.layer_widths
        self.arch = arch
        self.n = n
        self.offsets = arch.block_offsets()
        # acts[l] is the augmented input to layer l: (n, w[l] + 1), last column ones
        self.acts = [np.ones((n, w[l] + 1)) for l in range(arch.n_layers)]
        self.acts[0][:, :-1] = inputs
        self.pre = [np.empty((n, w[l + 1])) for l in range(arch.n_layers)]
        self.deltas = [np.empty((n, w[l + 1])) for l in range(arch.n_layers)]
        self.masks = [np.empty((n, w[l + 1]), dtype=bool) for l in range(arch.n_layers - 1)]

    def _blocks(self, vec):
        w = self.arch.layer_widths
        o = self.offsets
        return [vec[o[l]:o[l + 1]].reshape(w[l] + 1, w[l + 1]) for l in range(self.arch.n_layers)]

    def forward(self, params: np.ndarray) -> np.ndarray:
        """Network outputs, shape ``(n, m)``. Returns an internal buffer."""
        blocks = self._blocks(params)
        last = self.arch.n_layers - 1
        for l in range(last):
            np.matmul(self.acts[l], blocks[l], out=self.pre[l])
            np.maximum(self.pre[l], 0.0, out=self.acts[l + 1][:, :-1])
        np.matmul(self.acts[last], blocks[last], out=self.pre[last])
        return self.pre[last]

    def backward(self, params: np.ndarray, output_grads: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Vector-Jacobian product for the most recent :meth:`forward` call."""
        if out is None:
            out = np.empty(self.arch.n_params)
        blocks = self._blocks(params)
        grads = self._blocks(out)
        last = self.arch.n_layers - 1
        delta = self.deltas[last]
        delta[...] = output_grads
        for l in range(last, -1, -1):
            np.matmul(self.acts[l].T, delta, out=grads[l])
            if l > 0:
                below = self.deltas[l - 1]
                np.matmul(delta, blocks[l][:-1].T, out=below)
                # ReLU derivative, taken as 0 at exactly 0
                np.greater(self.pre[l - 1], 0.0, out=self.masks[l - 1])
                np.multiply(below, self.masks[l - 1], out=below)
                delta = below
        return out


def forward(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Evaluate ``f(x_i; theta)`` for every row of ``inputs``."""
    params = _check_params(arch, params)
    ws = MlpWorkspace(arch, inputs)
    return ws.forward(params).copy()


def backprop(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray, output_grads: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_i <f(x_i; theta), g_i>`` with respect to ``theta``."""
    params = _check_params(arch, params)
    ws = MlpWorkspace(arch, inputs)
    output_grads = np.asarray(output_grads, dtype=np.float64)
    if output_grads.shape != (ws.n, arch.output_dim):
        raise DimensionError(
            f"expected output_grads of shape {(ws.n, arch.output_dim)}, got {output_grads.shape}"
        )
    ws.forward(params)
    return ws.backward(params, output_grads)
