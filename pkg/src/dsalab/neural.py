"""Dense feed-forward networks with hand-written backprop and Adam.

Batches are row-major: ``x`` has shape (batch, features) and a layer computes
``f(x @ W.T + b)`` with ``W`` of shape (out, in).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Shape mismatch or a cache that does not belong to the current parameters."""


def _relu(a):
    return np.maximum(a, 0.0)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


ACTIVATIONS = {
    "relu": (_relu, lambda a, h: (a > 0).astype(a.dtype)),
    "sigmoid": (_sigmoid, lambda a, h: h * (1.0 - h)),
    "identity": (lambda a: a, lambda a, h: np.ones_like(a)),
}


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ContractError("bias must match the weight matrix's output width")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass
class Network:
    layers: list[DenseLayer]
    dropout_rate: float = 0.0
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ContractError("inconsistent layer widths")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]


def init_network(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
                 dropout_rate: float = 0.0) -> Network:
    """He-uniform weights for relu layers, Xavier-uniform otherwise; zero biases."""
    if len(activations) != len(sizes) - 1:
        raise ContractError("one activation per layer")
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        if act == "relu":
            limit = math.sqrt(6.0 / n_in)
        else:
            limit = math.sqrt(6.0 / (n_in + n_out))
        layers.append(DenseLayer(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), act))
    return Network(layers, dropout_rate)


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # h_0 = x, ..., h_L
    pre: list[np.ndarray]
    masks: list[np.ndarray | None]
    version: int

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def forward(net: Network, x: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardCache:
    """Layer-by-layer forward pass; inverted dropout on hidden outputs when training."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.n_in:
        raise ContractError(f"input width {x.shape[1]} != network input width {net.n_in}")
    drop = training and net.dropout_rate > 0
    if drop and rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    acts, pre, masks = [x], [], []
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        a = h @ layer.W.T + layer.b
        h = ACTIVATIONS[layer.activation][0](a)
        mask = None
        if drop and i < last:
            keep = 1.0 - net.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        pre.append(a)
        masks.append(mask)
        acts.append(h)
    return ForwardCache(acts, pre, masks, net.version)


@dataclass
class Gradients:
    params: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per layer
    input: np.ndarray

    def flat(self) -> list[np.ndarray]:
        return [g for pair in self.params for g in pair]


def backward(net: Network, upstream: np.ndarray, cache: ForwardCache) -> Gradients:
    """Reverse-mode gradients of a scalar loss given dL/d(output)."""
    if cache.version != net.version or len(cache.pre) != len(net.layers):
        raise ContractError("stale forward cache")
    g = np.asarray(upstream, dtype=float).reshape(cache.output.shape)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        h = cache.activations[i + 1] if cache.masks[i] is None else ACTIVATIONS[layer.activation][0](cache.pre[i])
        g = g * ACTIVATIONS[layer.activation][1](cache.pre[i], h)
        grads[i] = (g.T @ cache.activations[i], g.sum(axis=0))
        g = g @ layer.W
    return Gradients(grads, g)


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    return forward(net, x, training=False).output


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_network(cls, net: Network, learning_rate: float = 1e-3, **kw) -> "AdamState":
        params = net.params()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], learning_rate, **kw)


def adam_step(state: AdamState, net: Network, grads: Gradients) -> None:
    """Bias-corrected Adam update applied to ``net`` in place."""
    flat = grads.flat()
    params = net.params()
    if len(flat) != len(params) or len(state.m) != len(params):
        raise ContractError("gradient/parameter mismatch")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, flat, state.m, state.v):
        if g.shape != p.shape:
            raise ContractError("gradient shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.version += 1


# --------------------------------------------------------------------------
# Checkpoints


def network_to_dict(net: Network) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "dropout_rate": net.dropout_rate,
        "layers": [
            {
                "shape": list(layer.W.shape),
                "activation": layer.activation,
                "weights": layer.W.ravel().tolist(),
                "bias": layer.b.tolist(),
            }
            for layer in net.layers
        ],
    }


def network_from_dict(doc: dict) -> Network:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    layers = [
        DenseLayer(np.array(rec["weights"], dtype=float).reshape(rec["shape"]),
                   np.array(rec["bias"], dtype=float), rec["activation"])
        for rec in doc["layers"]
    ]
    return Network(layers, doc["dropout_rate"])
