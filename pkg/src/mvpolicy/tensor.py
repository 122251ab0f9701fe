"""Dense tensors with reverse-mode automatic differentiation.

Values are row-major numpy arrays (float32 for training, float64 for
verification). Every operation that touches a gradient-requiring tensor
records itself on the implicit tape (the DAG of parent links); calling
``backward`` on a scalar loss walks the tape in reverse topological order
and accumulates gradients into the ``grad`` field of every reachable leaf
with ``requires_grad`` set. Gradients accumulate across repeated backward
calls until explicitly cleared.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "FormatError",
    "tensor",
    "concat",
    "stack",
    "matmul",
    "softmax",
    "softmax_ce",
    "bce_with_logit",
    "conv2d",
    "upsample_nearest2",
    "avgpool2",
    "take_rows",
    "grad_check",
    "GradReport",
    "write_tensor",
    "read_tensor",
    "save_tensor_file",
    "load_tensor_file",
    "save_container",
    "load_container",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Incompatible tensor shapes for the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated (e.g. non-scalar loss)."""


class FormatError(ValueError):
    """Malformed serialized tensor data."""


def _broadcast_shape(sa, sb):
    """Trailing-dimension broadcast of two shapes, or raise ShapeError."""
    out = []
    for da, db in zip(reversed((1,) * max(0, len(sb) - len(sa)) + sa),
                      reversed((1,) * max(0, len(sa) - len(sb)) + sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible")
        out.append(max(da, db))
    return tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing -----------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen and p._backward is not None:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf: land the gradient
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        if self._backward is None and self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            self.grad += np.ones_like(self.data)

    # -- elementwise arithmetic ----------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise ContractError(
                    f"mixed dtypes {self.data.dtype} and {other.data.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data + other.data, (self, other),
            lambda g: ((self, _unbroadcast(g, sa)), (other, _unbroadcast(g, sb))))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: ((self, -g),))

    def __sub__(self, other):
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data - other.data, (self, other),
            lambda g: ((self, _unbroadcast(g, sa)), (other, _unbroadcast(-g, sb))))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data * other.data, (self, other),
            lambda g: ((self, _unbroadcast(g * other.data, sa)),
                       (other, _unbroadcast(g * self.data, sb))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data / other.data, (self, other),
            lambda g: ((self, _unbroadcast(g / other.data, sa)),
                       (other, _unbroadcast(-g * self.data / (other.data ** 2), sb))))

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("pow exponent must be a Python scalar")
        e = float(exponent)
        out = self.data ** e
        return Tensor._make(
            out, (self,),
            lambda g: ((self, g * e * self.data ** (e - 1.0)),))

    # -- unary math -----------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: ((self, g * out),))

    def log(self):
        return Tensor._make(np.log(self.data), (self,),
                            lambda g: ((self, g / self.data),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: ((self, g * 0.5 / out),))

    def abs(self):
        return Tensor._make(np.abs(self.data), (self,),
                            lambda g: ((self, g * np.sign(self.data)),))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._make(out, (self,), lambda g: ((self, g * out * (1.0 - out)),))

    def gelu(self):
        """Exact erf-based GELU: x/2 * (1 + erf(x/sqrt 2))."""
        from . import _kernels
        x = self.data
        out, cdf = _kernels.gelu_fwd_cached(x)

        def bwd(g):
            return ((self, _kernels.gelu_bwd_cached(x, cdf, g)),)

        return Tensor._make(out, (self,), bwd)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            if axis is None:
                return ((self, np.broadcast_to(g, shape).copy()),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return ((self, np.broadcast_to(g, shape).copy()),)

        return Tensor._make(np.asarray(out), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else (
            np.prod([self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
        return self.sum(axis=axis, keepdims=keepdims) * float(1.0 / n)

    # -- shape manipulation -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: ((self, g.reshape(old)),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda g: ((self, g.transpose(inv)),))

    def __getitem__(self, key):
        out = self.data[key]
        shape = self.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[key] = g
            return ((self, full),)

        return Tensor._make(out, (self,), bwd)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return tuple(pieces)

    return Tensor._make(out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else axis + t.ndim + 1, 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics (ndim >= 2 each side)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        _broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = a.data @ b.data
    sa, sb = a.shape, b.shape

    def bwd(g):
        grads = []
        if a.requires_grad:
            grads.append((a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)))
        if b.requires_grad:
            grads.append((b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)))
        return tuple(grads)

    return Tensor._make(out, (a, b), bwd)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    from . import _kernels
    if axis in (-1, t.ndim - 1):
        p = _kernels.softmax_rows(np.ascontiguousarray(t.data))

        def bwd(g):
            return ((t, _kernels.softmax_rows_bwd(p, np.ascontiguousarray(g))),)

        return Tensor._make(p, (t,), bwd)

    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return ((t, p * (g - dot)),)

    return Tensor._make(p, (t,), bwd)


def softmax_ce(logits: Tensor, targets, row_weights=None) -> Tensor:
    """Cross entropy of row-wise softmax against integer targets.

    ``logits`` is rank 2 (rows are independent classifications) and the
    result is the weighted mean over rows of -log softmax(logits)[target]
    (uniform weights by default). Numerically stabilized by row-max
    subtraction.
    """
    if logits.ndim != 2:
        raise ContractError(f"softmax_ce expects rank-2 logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if idx.shape != (n,):
        raise ContractError(f"expected {n} targets, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(f"target index out of range for {k} classes")
    if row_weights is None:
        w = np.full(n, 1.0 / max(n, 1), dtype=logits.data.dtype)
    else:
        w = np.asarray(row_weights, dtype=logits.data.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(n), idx]
    out = np.asarray((losses * w).sum(), dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), idx] -= 1.0
        return ((logits, g * p * w[:, None]),)

    return Tensor._make(out, (logits,), bwd)


def softmax_ce_dense(logits: Tensor, target_dist, row_weights=None) -> Tensor:
    """Cross entropy against dense per-row target distributions.

    Rows whose target distribution sums to zero contribute nothing (used
    for masked-out rows). Gradient per row: w * (softmax - q).
    """
    if logits.ndim != 2:
        raise ContractError(f"softmax_ce_dense expects rank-2 logits, got {logits.shape}")
    q = np.asarray(target_dist, dtype=logits.data.dtype)
    if q.shape != logits.shape:
        raise ShapeError(f"target distribution {q.shape} != logits {logits.shape}")
    n = logits.shape[0]
    if row_weights is None:
        w = np.full(n, 1.0 / max(n, 1), dtype=logits.data.dtype)
    else:
        w = np.asarray(row_weights, dtype=logits.data.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    qsum = q.sum(axis=1)
    losses = -(q * logp).sum(axis=1)
    out = np.asarray((losses * w).sum(), dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(logp)
        return ((logits, g * (p * qsum[:, None] - q) * w[:, None]),)

    return Tensor._make(out, (logits,), bwd)


def bce_with_logit(logit: Tensor, target) -> Tensor:
    """Mean binary cross entropy on raw logits, stable for large |x|."""
    t = np.asarray(target, dtype=logit.data.dtype)
    x = logit.data
    losses = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(losses.mean(), dtype=x.dtype)
    n = max(x.size, 1)

    def bwd(g):
        p = 1.0 / (1.0 + np.exp(-x))
        return ((logit, g * (p - t) / n),)

    return Tensor._make(out, (logit,), bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo),
        (sb, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    # (b, ho, wo, c*kh*kw), contiguous for the GEMM
    return np.ascontiguousarray(windows.transpose(0, 4, 5, 1, 2, 3)).reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW input and (out, in, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    bn, cin, h, ww_ = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww_ + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(cout, -1)
    out2 = cols @ w2.T
    out = out2.reshape(bn, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(bn * ho * wo, cout)
        grads = []
        if w.requires_grad:
            grads.append((w, (g2.T @ cols).reshape(w.shape)))
        if x.requires_grad:
            gcols = g2 @ w2
            g6 = gcols.reshape(bn, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki:ki + stride * ho:stride,
                        kj:kj + stride * wo:stride] += g6[:, :, ki, kj]
            gx = gxp[:, :, padding:padding + h, padding:padding + ww_] if padding else gxp
            grads.append((x, gx))
        if b is not None and b.requires_grad:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the trailing two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    sh = x.shape

    def bwd(g):
        g = g.reshape(sh[:-2] + (sh[-2], 2, sh[-1], 2))
        return ((x, g.sum(axis=(-3, -1))),)

    return Tensor._make(out, (x,), bwd)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 mean pooling of the trailing two axes (extents must be even)."""
    sh = x.shape
    if sh[-1] % 2 or sh[-2] % 2:
        raise ShapeError(f"avgpool2 needs even trailing extents, got {sh}")
    r = x.data.reshape(sh[:-2] + (sh[-2] // 2, 2, sh[-1] // 2, 2))
    out = r.mean(axis=(-3, -1))

    def bwd(g):
        g4 = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return ((x, g4),)

    return Tensor._make(out, (x,), bwd)


def take_rows(t: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 (embedding-style lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    out = t.data[idx]

    def bwd(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *t.shape[1:]))
        return ((t, full),)

    return Tensor._make(out, (t,), bwd)


# -- gradient verification ------------------------------------------------------


@dataclass
class GradInputReport:
    max_rel_err: float
    checked: int
    zero_flagged: int


@dataclass
class GradReport:
    """Per-input comparison of reverse-mode gradients vs central differences."""
    inputs: list[GradInputReport] = field(default_factory=list)
    tol: float = 1e-6

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.max_rel_err <= self.tol for r in self.inputs)


def grad_check(f, inputs, h: float = 1e-5, tol: float = 1e-6,
               zero_thresh: float = 1e-12, floor: float = 1e-3) -> GradReport:
    """Check the reverse-mode gradient of scalar-valued ``f`` on ``inputs``.

    Each input element is perturbed by +-h and the central difference
    (f(x+h) - f(x-h)) / 2h is compared to the autodiff gradient. The
    relative error denominator is floored at ``floor`` so that elements
    with near-zero gradients are judged against finite-difference roundoff
    (~1e-11 absolute at h=1e-5) rather than blowing up the ratio. Elements
    where both gradients vanish below ``zero_thresh`` are flagged as
    zero-gradient (dead branch) and skipped from the error statistic.
    Inputs should be float64 tensors; f must be deterministic.
    """
    xs = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
                 requires_grad=True) for t in inputs]
    out = f(*xs)
    if out.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    report = GradReport(tol=tol)
    for x in xs:
        ad = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        max_err = 0.0
        zero_flagged = 0
        checked = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*xs).data)
            flat[i] = orig - h
            fm = float(f(*xs).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            a = ad.reshape(-1)[i]
            if abs(a) < zero_thresh and abs(fd) < zero_thresh:
                zero_flagged += 1
                continue
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            max_err = max(max_err, err)
            checked += 1
        report.inputs.append(GradInputReport(max_err, checked, zero_flagged))
    return report


# -- binary serialization --------------------------------------------------------

_MAGIC = b"SPTN"
_CONTAINER_MAGIC = b"SPTC"
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2,
               np.dtype(np.uint8): 3, np.dtype(np.int64): 4}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensor(fh, arr: np.ndarray):
    """Little-endian record: magic, u8 dtype tag, u8 rank, u64 extents, raw data."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor record")
    return buf


def read_tensor(fh) -> np.ndarray:
    if _read_exact(fh, 4) != _MAGIC:
        raise FormatError("bad tensor magic")
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def save_tensor_file(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_container(path, tensors: dict):
    """Write a named collection of arrays (sorted by name for stable bytes)."""
    with open(path, "wb") as fh:
        fh.write(_CONTAINER_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            arr = tensors[name]
            write_tensor(fh, arr.data if isinstance(arr, Tensor) else np.asarray(arr))


def load_container(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _CONTAINER_MAGIC:
            raise FormatError("bad container magic")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            out[name] = read_tensor(fh)
    return out
