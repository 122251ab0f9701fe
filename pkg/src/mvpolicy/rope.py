"""Rotary positional encoding over three spatial axes.

Each token carries a 3D point; each axis owns D/3 of the feature
dimensions, split into 2-wide rotation pairs. Pair p of an axis is rotated
by angle omega_p * u where u is that axis coordinate and
omega_k = lambda^(-2k/d) with d = D/3. Tokens flagged invalid (no reliable
3D point) pass through with the identity encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError

__all__ = ["DimensionError", "FrequencyBank", "PositionGrid",
           "build_frequencies", "axial_sincos", "apply_rope"]


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyBank:
    d: int              # per-axis dimension, D / 3
    lam: float          # base wavelength
    omegas: np.ndarray  # d/2 frequencies, omega_0 = 1, strictly decreasing

    @property
    def feature_dim(self) -> int:
        return 3 * self.d


@dataclass(frozen=True)
class PositionGrid:
    """Per-token 3D coordinates (meters) with a validity mask."""
    coords: np.ndarray  # (..., 3)
    valid: np.ndarray   # (...,) bool

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if c.shape[-1] != 3 or c.shape[:-1] != v.shape:
            raise ShapeError(f"coords {c.shape} and valid {v.shape} do not align")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "valid", v)

    @classmethod
    def all_valid(cls, coords) -> "PositionGrid":
        coords = np.asarray(coords, dtype=np.float64)
        return cls(coords, np.ones(coords.shape[:-1], dtype=bool))

    def shifted(self, delta) -> "PositionGrid":
        return PositionGrid(self.coords + np.asarray(delta, dtype=np.float64),
                            self.valid)


def build_frequencies(feature_dim: int, lam: float = 10000.0) -> FrequencyBank:
    if feature_dim % 6 != 0:
        raise DimensionError(
            f"feature dimension must be divisible by 6 (three axes of "
            f"rotation pairs), got {feature_dim}")
    d = feature_dim // 3
    # scalar pow per element: the frequency table is tiny and this keeps
    # each omega_k equal to the literal formula evaluation
    omegas = np.array([lam ** (-2.0 * k / d) for k in range(d // 2)])
    return FrequencyBank(d=d, lam=lam, omegas=omegas)


def axial_sincos(points: PositionGrid, bank: FrequencyBank,
                 scale: float = 1.0, dtype=np.float32):
    """Axis-major (cos, sin) tables, one angle per rotation pair.

    Output shape is points.shape[:-1] + (3*d,): the first d entries come
    from x, then y, then z; within an axis, pair p occupies slots (2p, 2p+1)
    and both slots carry the same angle. Invalid tokens get cos=1, sin=0.
    """
    u = points.coords * scale
    angles = u[..., :, None] * bank.omegas  # (..., 3, d/2)
    cos = np.repeat(np.cos(angles), 2, axis=-1).reshape(u.shape[:-1] + (3 * bank.d,))
    sin = np.repeat(np.sin(angles), 2, axis=-1).reshape(u.shape[:-1] + (3 * bank.d,))
    invalid = ~points.valid
    if invalid.any():
        cos[invalid] = 1.0
        sin[invalid] = 0.0
    return cos.astype(dtype), sin.astype(dtype)


def _rotate_arrays(f: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """out[2i]   = f[2i]   cos - f[2i+1] sin
       out[2i+1] = f[2i+1] cos + f[2i]   sin  (cos/sin duplicated per pair)"""
    out = f * cos
    out[..., 0::2] -= f[..., 1::2] * sin[..., 0::2]
    out[..., 1::2] += f[..., 0::2] * sin[..., 1::2]
    return out


def rope_rotate(features: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Fused pairwise rotation with precomputed (cos, sin) tables.

    The backward pass is the inverse rotation of the output gradient
    (rotations are orthogonal), so no intermediate pair tensors are built.
    """
    out = _rotate_arrays(features.data, cos, sin)

    def bwd(g):
        return ((features, _rotate_arrays(g, cos, -sin)),)

    return Tensor._make(out, (features,), bwd)


def _rot_pairs(features: Tensor) -> Tensor:
    """(f0, f1) -> (-f1, f0) on consecutive feature pairs."""
    shape = features.shape
    ones = np.zeros(shape, dtype=features.dtype)
    return rope_rotate(features, ones, np.ones(shape, dtype=features.dtype))


def apply_rope(features: Tensor, points: PositionGrid, bank: FrequencyBank,
               scale: float = 1.0) -> Tensor:
    """Rotate feature pairs by their token's per-axis positional angles.

    Differentiable in ``features``; positions are fixed inputs. Leading
    dimensions of features and points must match.
    """
    if features.shape[-1] != bank.feature_dim:
        raise ShapeError(
            f"features last dim {features.shape[-1]} != encoding dim "
            f"{bank.feature_dim}")
    if features.shape[:-1] != points.coords.shape[:-1]:
        raise ShapeError(
            f"feature tokens {features.shape[:-1]} do not match position "
            f"tokens {points.coords.shape[:-1]}")
    cos, sin = axial_sincos(points, bank, scale=scale, dtype=features.dtype)
    return rope_rotate(features, cos, sin)
