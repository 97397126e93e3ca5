"""Dense networks with hand-written backprop, positional encoding and Adam."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ._validation import ConfigError, UsageError


class TinyMLP:
    """ReLU multilayer perceptron with a linear output layer.

    ``forward`` returns ``(output, tape)``; the tape is what ``backward`` needs
    and is ``None`` when retention was not requested.
    """

    def __init__(self, widths: Sequence[int], seed: int = 0, zero_output: bool = True):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) <= 0:
            raise ConfigError(f"invalid layer widths {widths}")
        self.widths = widths
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_output:
                W = np.zeros((a, b))
            else:
                bound = np.sqrt(6.0 / a)
                W = rng.uniform(-bound, bound, size=(a, b))
            self.weights.append(W)
            self.biases.append(np.zeros(b))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def parameters(self) -> dict:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def load_parameters(self, params: dict) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.array(params[f"W{i}"], dtype=np.float64)
            self.biases[i] = np.array(params[f"b{i}"], dtype=np.float64)

    def forward(self, x, retain: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ConfigError(f"network expects (N, {self.n_in}) input, got {x.shape}")
        acts = [x]
        h = x
        n_layers = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, (acts if retain else None)

    __call__ = forward

    def backward(self, tape, grad_out):
        """Returns ``(param_grads, grad_input)`` for upstream ``grad_out``."""
        if tape is None:
            raise UsageError("backward needs the tape of a forward pass run with retain=True")
        acts = tape
        g = np.asarray(grad_out, dtype=np.float64)
        grads = {}
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


def scatter_add_rows(index, values, n: int):
    """Row-wise ``out[index[i]] += values[i]`` into an (n, C) zero array."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    values = np.asarray(values, dtype=np.float64)
    C = values.shape[-1] if values.ndim > 1 else 1
    values = values.reshape(index.shape[0], C)
    flat = (index[:, None] * C + np.arange(C)).reshape(-1)
    return np.bincount(flat, weights=values.reshape(-1), minlength=n * C).reshape(n, C)


def positional_encoding(x, octaves: int = 4):
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < octaves, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    feats = [x]
    for k in range(octaves):
        f = (2.0 ** k) * np.pi
        feats.append(np.sin(f * x))
        feats.append(np.cos(f * x))
    return np.concatenate(feats, axis=-1)


def positional_encoding_backward(x, grad, octaves: int = 4):
    d = x.shape[-1]
    g = grad[..., :d].copy()
    for k in range(octaves):
        f = (2.0 ** k) * np.pi
        off = d + 2 * k * d
        g += grad[..., off:off + d] * f * np.cos(f * x)
        g -= grad[..., off + d:off + 2 * d] * f * np.sin(f * x)
    return g


def pe_width(dim: int, octaves: int = 4) -> int:
    return dim * (1 + 2 * octaves)


class Adam:
    """Adam over a flat namespace of arrays with per-parameter learning rates."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-15):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        for name, g in grads.items():
            lr = lrs[name]
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            m, v = self.m[name], self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if lr == 0.0:
                continue
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def remap(self, name: str, source: np.ndarray) -> None:
        """Re-row a per-point state: row i takes old row ``source[i]``, or zeros if -1."""
        if name not in self.m:
            return
        source = np.asarray(source)
        fresh = source < 0
        for store in (self.m, self.v):
            old = store[name]
            rows = np.zeros((source.shape[0],) + old.shape[1:])
            rows[~fresh] = old[source[~fresh]]
            store[name] = rows

    def state(self) -> dict:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"t/{name}"] = np.array(self.t[name], dtype=np.int64)
        return out

    def load_state(self, state: dict) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, val in state.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.m[name] = np.array(val, dtype=np.float64)
            elif kind == "v":
                self.v[name] = np.array(val, dtype=np.float64)
            elif kind == "t":
                self.t[name] = int(val)


def exponential_lr(step: int, total: int, lr_init: float, final_ratio: float) -> float:
    if total <= 0:
        return lr_init
    t = min(max(step / total, 0.0), 1.0)
    return float(lr_init * np.exp(t * np.log(final_ratio)))
