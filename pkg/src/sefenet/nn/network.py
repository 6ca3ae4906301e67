"""Running a layer stack: parameter stores, forward/backward passes, loss, counting."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import layers as L
from .layers import LayerSpec, ShapeError

__all__ = [
    "ParamStore",
    "Cache",
    "layer_names",
    "infer_shapes",
    "init_params",
    "forward",
    "backward",
    "loss_softmax_xent",
    "count_params",
]


@dataclass
class ParamStore:
    """Trainable arrays per layer name plus batch-norm running statistics."""

    params: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    state: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def copy(self) -> "ParamStore":
        return ParamStore(copy.deepcopy(self.params), copy.deepcopy(self.state))

    def astype(self, dtype) -> "ParamStore":
        cast = lambda d: {k: {n: a.astype(dtype) for n, a in v.items()} for k, v in d.items()}
        return ParamStore(cast(self.params), cast(self.state))

    def n_trainable(self) -> int:
        return sum(a.size for v in self.params.values() for a in v.values())

    def apply_state(self, updates: dict) -> None:
        for name, upd in updates.items():
            self.state[name] = upd

    def equals(self, other: "ParamStore") -> bool:
        def same(a, b):
            return a.keys() == b.keys() and all(
                a[k].keys() == b[k].keys() and all(np.array_equal(a[k][n], b[k][n]) for n in a[k])
                for k in a
            )
        return same(self.params, other.params) and same(self.state, other.state)


def layer_names(stack: Sequence[LayerSpec]) -> list[str]:
    """Unique per-layer keys: the given name, else ``<index>_<kind>``."""
    names = [spec.name or f"{i:02d}_{spec.kind}" for i, spec in enumerate(stack)]
    if len(set(names)) != len(names):
        raise ValueError(f"layer names are not unique: {names}")
    return names


def infer_shapes(stack: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-example output shape after every layer."""
    shapes = []
    shape = tuple(input_shape)
    for i, spec in enumerate(stack):
        shape = L.output_shape(spec, shape, i)
        shapes.append(shape)
    return shapes


def _param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        out = {"weight": (spec.out_channels, spec.in_channels // spec.groups, kh, kw)}
        if spec.bias:
            out["bias"] = (spec.out_channels,)
        return out
    if spec.kind == "dense":
        out = {"weight": (spec.out_features, spec.in_features)}
        if spec.bias:
            out["bias"] = (spec.out_features,)
        return out
    if spec.kind == "batch_norm":
        return {"gamma": (spec.in_channels,), "beta": (spec.in_channels,)}
    return {}


def count_params(stack: Sequence[LayerSpec]) -> tuple[list[int], int]:
    """Trainable parameter count per layer and in total (running stats excluded)."""
    per_layer = [sum(math.prod(s) for s in _param_shapes(spec).values()) for spec in stack]
    return per_layer, sum(per_layer)


def _followed_by_relu_family(stack, i) -> bool:
    for spec in stack[i + 1:]:
        if spec.kind in ("conv2d", "dense"):
            return False
        if spec.kind == "activation":
            return spec.func in ("elu", "relu")
    return False


def init_params(stack: Sequence[LayerSpec], seed: int = 0, dtype=np.float64) -> ParamStore:
    """Variance-scaled uniform weights, zero biases, unit/zero batch-norm affine."""
    names = layer_names(stack)
    store = ParamStore()
    for i, (name, spec) in enumerate(zip(names, stack)):
        shapes = _param_shapes(spec)
        if not shapes:
            continue
        rng = np.random.default_rng([int(seed), i])
        p = {}
        if spec.kind == "batch_norm":
            p["gamma"] = np.ones(shapes["gamma"], dtype=dtype)
            p["beta"] = np.zeros(shapes["beta"], dtype=dtype)
            store.state[name] = {
                "running_mean": np.zeros(spec.in_channels, dtype=dtype),
                "running_var": np.ones(spec.in_channels, dtype=dtype),
            }
        else:
            wshape = shapes["weight"]
            fan_in = math.prod(wshape[1:])
            var = (2.0 if _followed_by_relu_family(stack, i) else 1.0) / fan_in
            limit = math.sqrt(3.0 * var)
            p["weight"] = rng.uniform(-limit, limit, wshape).astype(dtype)
            if "bias" in shapes:
                p["bias"] = np.zeros(shapes["bias"], dtype=dtype)
        store.params[name] = p
    return store


@dataclass
class Cache:
    stack: tuple[LayerSpec, ...]
    names: list[str]
    params: ParamStore
    train: bool
    entries: list
    output_shape: tuple[int, ...]
    state_updates: dict = field(default_factory=dict)


def forward(stack, params: ParamStore, x: np.ndarray, mode: str = "eval", rng_seed: int = 0):
    """Run ``x`` through the stack; returns ``(output, cache)``.

    Batch-norm running statistics are not mutated here: train-mode updates
    are returned in ``cache.state_updates`` for the caller to commit.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    stack = tuple(stack)
    names = layer_names(stack)
    entries = []
    updates = {}
    for i, (name, spec) in enumerate(zip(names, stack)):
        expected = L.output_shape(spec, x.shape[1:], i)  # raises ShapeError with layer context
        p = params.params.get(name, {})
        kind = spec.kind
        if kind == "conv2d":
            x, c = L.conv_forward(spec, p, x)
        elif kind == "batch_norm":
            x, c, upd = L.bn_forward(spec, p, params.state[name], x, train)
            if upd is not None:
                updates[name] = upd
        elif kind == "activation":
            x, c = L.act_forward(spec, x)
        elif kind in ("max_pool", "avg_pool"):
            x, c = L.pool_forward(spec, x)
        elif kind == "dropout":
            x, c = L.dropout_forward(spec, x, train, np.random.default_rng([int(rng_seed), i]))
        elif kind == "flatten":
            c = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind == "dense":
            x, c = L.dense_forward(spec, p, x)
        else:
            raise ValueError(f"layer {i} ({spec.label}): {kind} is a loss, not a forward layer")
        if x.shape[1:] != expected:
            raise ShapeError(f"layer {i} ({spec.label}): expected output {expected}, got {x.shape[1:]}")
        entries.append(c)
    return x, Cache(stack, names, params, train, entries, x.shape, updates)


def backward(cache: Cache, upstream: np.ndarray, need_input_grad: bool = True):
    """Gradients w.r.t. the stack input and every trainable parameter.

    With ``need_input_grad=False`` the input gradient of layer 0 is skipped
    and ``None`` is returned in its place.
    """
    if upstream.shape != cache.output_shape:
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} does not match forward output {cache.output_shape}"
        )
    grads = {}
    g = upstream
    for i in range(len(cache.stack) - 1, -1, -1):
        spec, name, c = cache.stack[i], cache.names[i], cache.entries[i]
        p = cache.params.params.get(name, {})
        kind = spec.kind
        if kind == "conv2d":
            g, grads[name] = L.conv_backward(spec, p, c, g, need_input_grad or i > 0)
        elif kind == "batch_norm":
            g, grads[name] = L.bn_backward(spec, p, c, g)
        elif kind == "activation":
            g = L.act_backward(spec, c, g)
        elif kind in ("max_pool", "avg_pool"):
            g = L.pool_backward(spec, c, g)
        elif kind == "dropout":
            if c is not None:
                g = g * c
        elif kind == "flatten":
            g = g.reshape(c)
        elif kind == "dense":
            g, grads[name] = L.dense_backward(spec, p, c, g)
    return g, grads


def loss_softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient ``(softmax - onehot) / batch``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
