"""Layer specifications and their forward/backward kernels.

Tensors are ``(batch, feature_channels, electrodes, time)``; ``flatten``
turns them into ``(batch, features)`` for ``dense``. Kernels are plain
numpy and dtype-agnostic (float64 for gradient checks, float32 for speed).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = (
    "conv2d",
    "batch_norm",
    "activation",
    "max_pool",
    "avg_pool",
    "dropout",
    "flatten",
    "dense",
    "softmax_xent",
)
ACTIVATIONS = ("elu", "relu", "square", "safelog")

SAFELOG_EPS = 1e-6
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
ELU_ALPHA = 1.0


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: Optional[tuple[int, int]] = None
    padding: str = "valid"
    groups: int = 1
    bias: bool = True
    func: str = ""
    rate: float = 0.0
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ValueError(f"{self.label}: kernel dims must be positive, got {self.kernel}")
        if self.stride is not None and min(self.stride) < 1:
            raise ValueError(f"{self.label}: stride must be positive, got {self.stride}")
        if self.kind == "conv2d":
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"{self.label}: conv channels must be positive")
            if self.in_channels % self.groups or self.out_channels % self.groups:
                raise ValueError(f"{self.label}: channels not divisible by groups={self.groups}")
            if self.padding not in ("valid", "same"):
                raise ValueError(f"{self.label}: padding must be 'valid' or 'same'")
        elif self.kind == "batch_norm" and self.in_channels < 1:
            raise ValueError(f"{self.label}: batch_norm needs a positive channel count")
        elif self.kind == "activation" and self.func not in ACTIVATIONS:
            raise ValueError(f"{self.label}: unknown activation {self.func!r}")
        elif self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ValueError(f"{self.label}: dropout rate must be in [0, 1), got {self.rate}")
        elif self.kind == "dense" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError(f"{self.label}: dense sizes must be positive")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def pool_stride(self) -> tuple[int, int]:
        return self.stride if self.stride is not None else self.kernel

    def renamed(self, name: str) -> "LayerSpec":
        return replace(self, name=name)


def conv2d(in_channels, out_channels, kernel, *, bias=True, padding="valid", groups=1, name=""):
    return LayerSpec("conv2d", name, in_channels=in_channels, out_channels=out_channels,
                     kernel=tuple(kernel), padding=padding, groups=groups, bias=bias)


def batch_norm(channels, name=""):
    return LayerSpec("batch_norm", name, in_channels=channels, out_channels=channels)


def activation(func, name=""):
    return LayerSpec("activation", name, func=func)


def max_pool(kernel, stride=None, name=""):
    return LayerSpec("max_pool", name, kernel=tuple(kernel),
                     stride=None if stride is None else tuple(stride))


def avg_pool(kernel, stride=None, name=""):
    return LayerSpec("avg_pool", name, kernel=tuple(kernel),
                     stride=None if stride is None else tuple(stride))


def dropout(rate, name=""):
    return LayerSpec("dropout", name, rate=rate)


def flatten(name=""):
    return LayerSpec("flatten", name)


def dense(in_features, out_features, *, bias=True, name=""):
    return LayerSpec("dense", name, in_features=in_features, out_features=out_features, bias=bias)


# ---------------------------------------------------------------- shapes

def _same_pad(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k // 2


def _conv_pads(spec: LayerSpec):
    if spec.padding == "same":
        return _same_pad(spec.kernel[0]), _same_pad(spec.kernel[1])
    return (0, 0), (0, 0)


def output_shape(spec: LayerSpec, shape: tuple[int, ...], index: int = 0) -> tuple[int, ...]:
    """Shape after ``spec`` for a per-example input ``shape`` (no batch axis)."""
    where = f"layer {index} ({spec.label})"
    if spec.kind in ("conv2d", "batch_norm", "max_pool", "avg_pool") and len(shape) != 3:
        raise ShapeError(f"{where}: expected a 3-d feature map, got shape {shape}")
    if spec.kind == "conv2d":
        c, h, w = shape
        if c != spec.in_channels:
            raise ShapeError(f"{where}: expected {spec.in_channels} input channels, got {c}")
        (pt, pb), (pl, pr) = _conv_pads(spec)
        kh, kw = spec.kernel
        sh, sw = spec.stride or (1, 1)
        ho = (h + pt + pb - kh) // sh + 1
        wo = (w + pl + pr - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{where}: kernel {spec.kernel} does not fit input {(h, w)}")
        return (spec.out_channels, ho, wo)
    if spec.kind == "batch_norm":
        if shape[0] != spec.in_channels:
            raise ShapeError(f"{where}: expected {spec.in_channels} channels, got {shape[0]}")
        return shape
    if spec.kind in ("max_pool", "avg_pool"):
        c, h, w = shape
        kh, kw = spec.kernel
        sh, sw = spec.pool_stride
        if h < kh or w < kw:
            raise ShapeError(f"{where}: pool window {spec.kernel} larger than input {(h, w)}")
        return (c, (h - kh) // sh + 1, (w - kw) // sw + 1)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1 or shape[0] != spec.in_features:
            raise ShapeError(f"{where}: expected ({spec.in_features},) features, got {shape}")
        return (spec.out_features,)
    return shape


# ---------------------------------------------------------------- conv

def _pad(x, spec):
    (pt, pb), (pl, pr) = _conv_pads(spec)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return x


def _im2col(xp, spec):
    """Windows as a ``(groups, Cg*kh*kw, N*Ho*Wo)`` matrix (channel-first columns)."""
    kh, kw = spec.kernel
    sh, sw = spec.stride or (1, 1)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, ho, wo = win.shape[:4]
    g = spec.groups
    cols = win.reshape(n, g, c // g, ho, wo, kh, kw).transpose(1, 2, 5, 6, 0, 3, 4)
    return cols.reshape(g, (c // g) * kh * kw, n * ho * wo), (n, ho, wo)


def conv_forward(spec, p, x):
    xp = _pad(x, spec)
    cols, (n, ho, wo) = _im2col(xp, spec)
    g = spec.groups
    og = spec.out_channels // g
    out = np.matmul(p["weight"].reshape(g, og, -1), cols)  # (g, og, N*Ho*Wo)
    out = out.reshape(g * og, n, ho, wo).transpose(1, 0, 2, 3)
    if spec.bias:
        out = out + p["bias"][None, :, None, None]
    return np.ascontiguousarray(out), (cols, xp.shape, x.shape)


def conv_backward(spec, p, cache, dout, need_input_grad=True):
    cols, xp_shape, x_shape = cache
    kh, kw = spec.kernel
    sh, sw = spec.stride or (1, 1)
    w = p["weight"]
    g = spec.groups
    cg, og = spec.in_channels // g, spec.out_channels // g
    n, _, ho, wo = dout.shape
    dout_c = dout.transpose(1, 0, 2, 3).reshape(g, og, n * ho * wo)
    grads = {"weight": np.matmul(dout_c, cols.transpose(0, 2, 1)).reshape(w.shape)}
    if spec.bias:
        grads["bias"] = dout.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grads

    # Column gradients come out tap-major and channel-first, so each tap's
    # contribution is one contiguous block; a single transpose restores N-first.
    w_t = np.ascontiguousarray(w.reshape(g, og, cg, kh * kw).transpose(0, 3, 2, 1))  # (g, taps, cg, og)
    dcols = np.matmul(w_t, dout_c[:, None]).reshape(g, kh, kw, cg, n, ho, wo)
    hp, wp = xp_shape[2], xp_shape[3]
    dxp = np.zeros((g, cg, n, hp, wp), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[..., i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, i, j]
    dxp = dxp.transpose(2, 0, 1, 3, 4).reshape(n, g * cg, hp, wp)
    (pt, _), (pl, _) = _conv_pads(spec)
    dx = dxp[:, :, pt:pt + x_shape[2], pl:pl + x_shape[3]]
    return dx, grads


# ---------------------------------------------------------------- batch norm

def bn_forward(spec, p, state, x, train):
    gamma = p["gamma"][None, :, None, None]
    beta = p["beta"][None, :, None, None]
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * m / max(m - 1, 1)
        new_state = {
            "running_mean": (1 - BN_MOMENTUM) * state["running_mean"] + BN_MOMENTUM * mean,
            "running_var": (1 - BN_MOMENTUM) * state["running_var"] + BN_MOMENTUM * unbiased,
        }
        return gamma * xhat + beta, (True, xhat, inv_std), new_state
    inv_std = 1.0 / np.sqrt(state["running_var"] + BN_EPS)
    xhat = (x - state["running_mean"][None, :, None, None]) * inv_std[None, :, None, None]
    return gamma * xhat + beta, (False, xhat, inv_std), None


def bn_backward(spec, p, cache, dout):
    train, xhat, inv_std = cache
    grads = {"gamma": (dout * xhat).sum(axis=(0, 2, 3)), "beta": dout.sum(axis=(0, 2, 3))}
    dxhat = dout * p["gamma"][None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], grads
    m = dout.size // dout.shape[1]
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
    return dx, grads


# ---------------------------------------------------------------- activations

def act_forward(spec, x):
    f = spec.func
    if f == "elu":
        neg = np.expm1(np.minimum(x, 0)) * ELU_ALPHA
        return np.where(x > 0, x, neg), x
    if f == "relu":
        return np.maximum(x, 0), x
    if f == "square":
        return x * x, x
    return np.log(np.maximum(x, SAFELOG_EPS)), x


def act_backward(spec, x, dout):
    f = spec.func
    if f == "elu":
        return dout * np.where(x > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(x, 0)))
    if f == "relu":
        return dout * (x > 0)
    if f == "square":
        return dout * 2 * x
    return dout * np.where(x > SAFELOG_EPS, 1.0 / np.maximum(x, SAFELOG_EPS), 0.0)


# ---------------------------------------------------------------- pooling

def pool_forward(spec, x):
    kh, kw = spec.kernel
    sh, sw = spec.pool_stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    if spec.kind == "avg_pool":
        return win.mean(axis=(4, 5)), (x.shape, None)
    flat = win.reshape(*win.shape[:4], kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def pool_backward(spec, cache, dout):
    x_shape, arg = cache
    kh, kw = spec.kernel
    sh, sw = spec.pool_stride
    _, _, ho, wo = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            if spec.kind == "avg_pool":
                contrib = dout / (kh * kw)
            else:
                contrib = dout * (arg == i * kw + j)
            dx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += contrib
    return dx


# ---------------------------------------------------------------- dropout / dense

def dropout_forward(spec, x, train, rng):
    if not train or spec.rate == 0:
        return x, None
    keep = rng.random(x.shape) >= spec.rate
    mask = keep.astype(x.dtype) / (1.0 - spec.rate)
    return x * mask, mask


def dense_forward(spec, p, x):
    out = x @ p["weight"].T
    if spec.bias:
        out = out + p["bias"]
    return out, x


def dense_backward(spec, p, x, dout):
    grads = {"weight": dout.T @ x}
    if spec.bias:
        grads["bias"] = dout.sum(axis=0)
    return dout @ p["weight"], grads
