"""Layers, parameter initialization, and optimizers on top of the tensor core.

Parameters live in a flat ``dict[str, Tensor]``; every helper takes the dict
plus a name prefix so whole submodules can be frozen, saved, or swapped by
prefix. All iteration over parameter dicts is in sorted-name order to keep
training byte-reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, matmul, conv2d


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def init_linear(params: dict, name: str, din: int, dout: int,
                rng: np.random.Generator, zero: bool = False):
    w = np.zeros((din, dout), dtype=np.float32) if zero else he_normal(rng, (din, dout), din)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    if x.ndim == 2:
        return matmul(x, w) + b
    lead = x.shape[:-1]
    flat = x.reshape((int(np.prod(lead)), x.shape[-1]))
    return (matmul(flat, w) + b).reshape(lead + (w.shape[1],))


def init_mlp(params: dict, name: str, din: int, dhidden: int, dout: int,
             rng: np.random.Generator, zero_last: bool = False):
    init_linear(params, f"{name}.fc1", din, dhidden, rng)
    init_linear(params, f"{name}.fc2", dhidden, dout, rng, zero=zero_last)


def mlp(x: Tensor, params: dict, name: str) -> Tensor:
    return linear(linear(x, params, f"{name}.fc1").gelu(), params, f"{name}.fc2")


def init_layernorm(params: dict, name: str, dim: int):
    params[f"{name}.scale"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    params[f"{name}.shift"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)


def _normalize_moments(x: np.ndarray, axis, eps: float):
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return centered * inv, inv


def _norm_backward(g_hat, xhat, inv, axis):
    # d/dx of xhat = (x - mean) * inv with biased variance
    mean_g = g_hat.mean(axis=axis, keepdims=True)
    mean_gx = (g_hat * xhat).mean(axis=axis, keepdims=True)
    return inv * (g_hat - mean_g - xhat * mean_gx)


def layernorm(x: Tensor, params: dict, name: str, eps: float = 1e-5) -> Tensor:
    """Fused per-row normalization over the last axis with affine params."""
    gamma = params[f"{name}.scale"]
    beta = params[f"{name}.shift"]
    xhat, inv = _normalize_moments(x.data, -1, eps)
    out = xhat * gamma.data + beta.data

    def bwd(g):
        grads = []
        if x.requires_grad:
            grads.append((x, _norm_backward(g * gamma.data, xhat, inv, -1)))
        if gamma.requires_grad:
            red = tuple(range(g.ndim - 1))
            grads.append((gamma, (g * xhat).sum(axis=red)))
            grads.append((beta, g.sum(axis=red)))
        return tuple(grads)

    return Tensor._make(out.astype(x.dtype), (x, gamma, beta), bwd)


def init_groupnorm(params: dict, name: str, channels: int):
    params[f"{name}.scale"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
    params[f"{name}.shift"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)


def norm_groups(channels: int, want: int) -> int:
    """Largest divisor of ``channels`` <= ``want`` keeping >= 4 channels per
    group. Norm statistics over tiny groups destroy the signal outright
    (a group of one normalizes to exactly zero), so group size wins over
    group count when channels are scarce.
    """
    for g in range(min(want, channels), 1, -1):
        if channels % g == 0 and channels // g >= 4:
            return g
    return 1


def groupnorm(x: Tensor, params: dict, name: str, groups: int = 4,
              eps: float = 1e-5) -> Tensor:
    """Channel-group normalization computed independently at each position.

    Statistics are taken over the channels of a group at each (b, h, w)
    separately, never across space, so a one-pixel input change can only
    affect features inside that pixel's convolutional receptive field.
    Fused forward/backward (single op on the tape).
    """
    b, c, h, w = x.shape
    groups = norm_groups(c, groups)
    gamma = params[f"{name}.scale"]
    beta = params[f"{name}.shift"]
    xg = x.data.reshape(b, groups, c // groups, h, w)
    xhat, inv = _normalize_moments(xg, 2, eps)
    out = xhat.reshape(b, c, h, w) * gamma.data.reshape(1, c, 1, 1) \
        + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        grads = []
        if x.requires_grad:
            g_hat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(xg.shape)
            dx = _norm_backward(g_hat, xhat, inv, 2)
            grads.append((x, dx.reshape(b, c, h, w)))
        if gamma.requires_grad:
            grads.append((gamma, (g * xhat.reshape(b, c, h, w)).sum(axis=(0, 2, 3))))
            grads.append((beta, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return Tensor._make(out.astype(x.dtype), (x, gamma, beta), bwd)


def init_conv(params: dict, name: str, cin: int, cout: int, k: int,
              rng: np.random.Generator):
    params[f"{name}.w"] = Tensor(he_normal(rng, (cout, cin, k, k), cin * k * k),
                                 requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)


def conv_block(x: Tensor, params: dict, name: str, stride: int = 2,
               padding: int = 1, groups: int = 4) -> Tensor:
    h = conv2d(x, params[f"{name}.w"], params[f"{name}.b"],
               stride=stride, padding=padding)
    return groupnorm(h, params, f"{name}.gn", groups=groups).gelu()


def init_conv_block(params: dict, name: str, cin: int, cout: int,
                    rng: np.random.Generator, k: int = 3):
    init_conv(params, name, cin, cout, k, rng)
    init_groupnorm(params, f"{name}.gn", cout)


def depth_to_space(x: Tensor, s: int) -> Tensor:
    """(B, s*s, h, w) -> (B, 1, h*s, w*s) block rearrangement."""
    b, c, h, w = x.shape
    assert c == s * s
    r = x.reshape((b, s, s, h, w)).transpose(0, 3, 1, 4, 2)
    return r.reshape((b, 1, h * s, w * s))


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


def cast_params(params: dict, dtype) -> dict:
    """Copy a parameter dict to another float dtype (f64 verification path)."""
    out = {}
    for k, p in params.items():
        q = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
        out[k] = q
    return out


def trainable(params: dict) -> dict:
    return {k: v for k, v in params.items() if v.requires_grad}


class Adam:
    """Standard Adam with bias correction, deterministic update order."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = trainable(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float):
        from . import _kernels
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            _kernels.adam_step(p.data, np.ascontiguousarray(p.grad),
                               self.m[name], self.v[name], lr,
                               self.beta1, self.beta2, self.eps, b1c, b2c)


class SGDMomentum:
    def __init__(self, params: dict, momentum: float = 0.9):
        self.params = trainable(params)
        self.momentum = momentum
        self.vel = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float):
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            v = self.vel[name]
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


def make_optimizer(kind: str, params: dict):
    if kind == "adam-style":
        return Adam(params)
    if kind == "sgd-momentum":
        return SGDMomentum(params)
    raise ValueError(f"unknown optimizer {kind!r}")


def lr_at(step: int, base_lr: float, warmup: int, total: int,
          schedule: str = "cosine") -> float:
    """Linear warmup to base_lr, then cosine decay to ~0 (or constant)."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if schedule == "constant":
        return base_lr
    if schedule != "cosine":
        raise ValueError(f"unknown schedule {schedule!r}")
    span = max(total - warmup, 1)
    progress = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
