"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

The training loop spends most of its time in a handful of fusable kernels
(GELU, row softmax, the heatmap convex combination, the Adam update). The
Cython extension ``mvpolicy._core`` implements single-pass float32 versions;
this module selects it at import time and falls back to the numpy
reference implementations below, which are also the only path for float64
(the gradient-verification dtype) and for non-contiguous inputs.

Set MVPOLICY_NO_NATIVE=1 to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

try:
    from . import _core as _native
except ImportError:  # extension not built; numpy fallback
    _native = None

if os.environ.get("MVPOLICY_NO_NATIVE"):
    _native = None


def backend_name() -> str:
    return "native" if _native is not None else "numpy"


def _use_native(*arrays) -> bool:
    return _native is not None and all(
        a.dtype == np.float32 and a.flags.c_contiguous for a in arrays)


# -- GELU ----------------------------------------------------------------------


def np_gelu_fwd(x: np.ndarray) -> np.ndarray:
    return (x * (0.5 * (1.0 + _erf(x * _INV_SQRT2)))).astype(x.dtype)


def np_gelu_bwd(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (g * (cdf + x * pdf)).astype(x.dtype)


# The scalar-loop native GELU loses to scipy's vectorized erf (see
# benchmarks/bench_kernels.py), so GELU always takes the numpy path; the
# native kernel stays only for the benchmark comparison.


def gelu_fwd_cached(x: np.ndarray):
    """-> (gelu(x), cdf) with the erf half cached for the backward pass."""
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    return (x * cdf).astype(x.dtype), cdf


def gelu_bwd_cached(x: np.ndarray, cdf: np.ndarray, g: np.ndarray) -> np.ndarray:
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (g * (cdf + x * pdf)).astype(x.dtype)


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    return np_gelu_fwd(x)


def gelu_bwd(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np_gelu_bwd(x, g)


def native_gelu_fwd(x: np.ndarray) -> np.ndarray:
    """Benchmark-only access to the compiled GELU."""
    if _native is None:
        raise RuntimeError("native kernels unavailable")
    out = np.empty_like(x)
    _native.gelu_fwd(x.reshape(-1), out.reshape(-1))
    return out


# -- softmax over the last axis ---------------------------------------------------


def np_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_softmax_rows_bwd(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    dot = (g * p).sum(axis=-1, keepdims=True)
    return p * (g - dot)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    if _use_native(x):
        out = np.empty_like(x)
        k = x.shape[-1]
        _native.softmax_rows(x.reshape(-1, k), out.reshape(-1, k))
        return out
    return np_softmax_rows(x)


def softmax_rows_bwd(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    if _use_native(p, g):
        dx = np.empty_like(p)
        k = p.shape[-1]
        _native.softmax_rows_bwd(p.reshape(-1, k), g.reshape(-1, k),
                                 dx.reshape(-1, k))
        return dx
    return np_softmax_rows_bwd(p, g)


# -- heatmap convex combination -----------------------------------------------------


def np_convex_fwd(patch: np.ndarray, wlogits: np.ndarray):
    b, h, w, pp = patch.shape
    wsoft = np_softmax_rows(wlogits)
    wr = wsoft.reshape(b, h, w, pp, 3, 3)
    pad = np.pad(patch, ((0, 0), (1, 1), (1, 1), (0, 0)))
    sb, sh, sw, sp = pad.strides
    neigh = np.lib.stride_tricks.as_strided(
        pad, (b, h, w, 3, 3, pp), (sb, sh, sw, sh, sw, sp), writeable=False)
    out = np.einsum("bijdep,bijpde->bijp", neigh, wr, optimize=True)
    return out.astype(patch.dtype), wsoft


def np_convex_bwd(g: np.ndarray, wsoft: np.ndarray, patch: np.ndarray,
                  need_dpatch: bool, need_dw: bool):
    b, h, w, pp = patch.shape
    wr = wsoft.reshape(b, h, w, pp, 3, 3)
    dpatch = dwl = None
    if need_dpatch:
        gpad = np.zeros((b, h + 2, w + 2, pp), dtype=patch.dtype)
        for di in range(3):
            for dj in range(3):
                gpad[:, di:di + h, dj:dj + w] += g * wr[..., di, dj]
        dpatch = gpad[:, 1:1 + h, 1:1 + w]
    if need_dw:
        pad = np.pad(patch, ((0, 0), (1, 1), (1, 1), (0, 0)))
        sb, sh, sw, sp = pad.strides
        neigh = np.lib.stride_tricks.as_strided(
            pad, (b, h, w, 3, 3, pp), (sb, sh, sw, sh, sw, sp), writeable=False)
        dws = np.einsum("bijp,bijdep->bijpde", g, neigh,
                        optimize=True).reshape(b, h, w, pp, 9)
        dot = (dws * wsoft).sum(axis=-1, keepdims=True)
        dwl = (wsoft * (dws - dot)).astype(patch.dtype)
    return dpatch, dwl


def convex_fwd(patch: np.ndarray, wlogits: np.ndarray):
    if _use_native(patch, wlogits):
        out = np.empty_like(patch)
        wsoft = np.empty_like(wlogits)
        _native.convex_fwd(patch, wlogits, out, wsoft)
        return out, wsoft
    return np_convex_fwd(patch, wlogits)


def convex_bwd(g: np.ndarray, wsoft: np.ndarray, patch: np.ndarray,
               need_dpatch: bool, need_dw: bool):
    if _use_native(g, wsoft, patch):
        dpatch = np.zeros_like(patch) if need_dpatch else None
        dwl = np.empty_like(wsoft) if need_dw else None
        _native.convex_bwd(g, wsoft, patch,
                           dpatch if need_dpatch else None,
                           dwl if need_dw else None)
        return dpatch, dwl
    return np_convex_bwd(g, wsoft, patch, need_dpatch, need_dw)


# -- Adam update -----------------------------------------------------------------


def np_adam_step(p, g, m, v, lr, b1, b2, eps, b1c, b2c):
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    p -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)


def adam_step(p, g, m, v, lr, b1, b2, eps, b1c, b2c):
    if _use_native(p, g, m, v):
        _native.adam_step(p.reshape(-1), g.reshape(-1), m.reshape(-1),
                          v.reshape(-1), lr, b1, b2, eps, b1c, b2c)
        return
    np_adam_step(p, g, m, v, lr, b1, b2, eps, b1c, b2c)
