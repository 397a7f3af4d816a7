"""Small tanh MLPs with hand-written backprop, Adam, and a binary checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, NumericError

MAGIC = b"PTPM"
FORMAT_VERSION = 1


@dataclass
class Mlp:
    """Fully connected net: tanh on hidden layers, identity output.

    ``weights[i]`` has shape ``(layer_sizes[i], layer_sizes[i + 1])`` so a
    batch of row vectors multiplies from the left.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InputError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InputError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise InputError(f"layer {i} input size does not match layer {i - 1} output")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "Mlp":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Mlp":
        return Mlp([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(weights, biases)


@dataclass
class ForwardCache:
    params: Mlp
    inputs: list[np.ndarray]  # input to every layer, post-activation
    squeeze: bool


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=params.weights[0].dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise InputError(f"input of shape {x.shape} does not fit layer sizes {params.layer_sizes}")
    inputs = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
            inputs.append(h)
    y = h[0] if squeeze else h
    return y, ForwardCache(params, inputs, squeeze)


def backward(params: Mlp, cache: ForwardCache, dL_dy: np.ndarray) -> Gradients:
    """Gradients of a scalar loss, summed over the batch.

    The hidden activations are recovered from the cached tanh outputs, so the
    cache must come from a forward pass through these exact parameters.
    """
    if cache.params is not params:
        raise InputError("forward cache was produced by different parameters")
    g = np.asarray(dL_dy, dtype=params.weights[0].dtype)
    if cache.squeeze:
        g = g[None, :]
    n_out = params.weights[-1].shape[1]
    if g.shape != (cache.inputs[0].shape[0], n_out):
        raise InputError(f"upstream gradient shape {g.shape} does not match output")
    dws, dbs = [None] * len(params.weights), [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        inp = cache.inputs[i]
        dws[i] = inp.T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (1.0 - inp * inp)
    dx = g[0] if cache.squeeze else g
    return Gradients(dws, dbs, dx)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_update(
    arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam on a flat list of arrays. Inputs are left untouched."""
    if len(arrays) != len(grads) or len(arrays) != len(state.first_moment):
        raise InputError("parameter, gradient and moment lists differ in length")
    for p, g in zip(arrays, grads):
        if p.shape != g.shape:
            raise InputError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; parameters left unchanged")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * m_ + (1 - b1) * g for m_, g in zip(state.first_moment, grads)]
    v = [b2 * v_ + (1 - b2) * g * g for v_, g in zip(state.second_moment, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [p - state.lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps_adam) for p, m_, v_ in zip(arrays, m, v)]
    return new, AdamState(m, v, t, state.lr, b1, b2, state.eps_adam)


def adam_step(params: Mlp, grads: Gradients, state: AdamState) -> tuple[Mlp, AdamState]:
    new, state = adam_update(params.arrays(), grads.arrays(), state)
    return Mlp.from_arrays(new), state


def adam_for(params: Mlp, lr: float = 3e-4) -> AdamState:
    return AdamState.zeros_like(params.arrays(), lr=lr)


def polyak(target: Mlp, online: Mlp, rate: float) -> Mlp:
    """target <- (1 - rate) * target + rate * online."""
    return Mlp.from_arrays([(1 - rate) * t + rate * o for t, o in zip(target.arrays(), online.arrays())])


# --------------------------------------------------------------------------- checkpoints


def to_bytes(params: Mlp) -> bytes:
    sizes = params.layer_sizes
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
    body = b"".join(
        np.ascontiguousarray(w, dtype="<f4").tobytes() + np.ascontiguousarray(b, dtype="<f4").tobytes()
        for w, b in zip(params.weights, params.biases)
    )
    return head + body


def from_bytes(blob: bytes, dtype=np.float64) -> Mlp:
    if blob[:4] != MAGIC:
        raise InputError("not an MLP checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n}I", blob, 12)
    offset = 12 + 4 * n
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(blob, "<f4", fan_in * fan_out, offset).reshape(fan_in, fan_out)
        offset += 4 * fan_in * fan_out
        b = np.frombuffer(blob, "<f4", fan_out, offset)
        offset += 4 * fan_out
        weights.append(w.astype(dtype))
        biases.append(b.astype(dtype))
    if offset != len(blob):
        raise InputError("trailing bytes after the last layer")
    return Mlp(weights, biases)


def save_mlp(params: Mlp, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_mlp(path, dtype=np.float64) -> Mlp:
    return from_bytes(Path(path).read_bytes(), dtype)
