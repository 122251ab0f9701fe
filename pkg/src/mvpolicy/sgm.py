"""Gated fusion of the frozen expert's geometric prior with raw-depth features.

Per fusion scale, a small MLP looks at both feature streams and emits a
sigmoid gate G in (0, 1) per cell and channel; the fused map is the convex
combination G * raw + (1 - G) * expert, so the gate decides how much of the
fine-but-noisy raw depth signal to keep at each location. Fused maps from
all scales are brought to the token grid (nearest upsampling for coarser
scales, mean pooling for finer ones) and summed.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .encoders import FeatureMap
from .tensor import ShapeError, Tensor, avgpool2, concat, upsample_nearest2

__all__ = ["init_gates", "gate", "fuse", "sgm_forward"]


def init_gates(params: dict, prefix: str, scale_channels, rng: np.random.Generator):
    """One gating MLP per fusion scale; zero-init output so G starts at 0.5."""
    for i, c in enumerate(scale_channels):
        nn.init_mlp(params, f"{prefix}.gate{i}", 2 * c, c, c, rng, zero_last=True)


def gate(expert: FeatureMap, raw: FeatureMap, params: dict, name: str) -> FeatureMap:
    """Per-cell, per-channel mixing weights in the open interval (0, 1)."""
    if expert.data.shape != raw.data.shape or expert.stride != raw.stride:
        raise ShapeError(
            f"gate inputs disagree: {expert.data.shape}@{expert.stride} vs "
            f"{raw.data.shape}@{raw.stride}")
    b, c, h, w = expert.data.shape
    both = concat([expert.data, raw.data], axis=1)
    flat = both.transpose(0, 2, 3, 1).reshape((b * h * w, 2 * c))
    g = nn.mlp(flat, params, name).sigmoid()
    g = g.reshape((b, h, w, c)).transpose(0, 3, 1, 2)
    return FeatureMap(g, stride=expert.stride)


def fuse(expert: FeatureMap, raw: FeatureMap, g: FeatureMap) -> FeatureMap:
    """Convex combination with the gate weighting the raw-depth branch."""
    if not (expert.data.shape == raw.data.shape == g.data.shape):
        raise ShapeError(
            f"fuse inputs disagree: {expert.data.shape}, {raw.data.shape}, "
            f"{g.data.shape}")
    fused = g.data * raw.data + (1.0 - g.data) * expert.data
    return FeatureMap(fused, stride=expert.stride)


def _to_stride(fm: FeatureMap, target_stride: int) -> FeatureMap:
    data, stride = fm.data, fm.stride
    while stride > target_stride:
        data = upsample_nearest2(data)
        stride //= 2
    while stride < target_stride:
        data = avgpool2(data)
        stride *= 2
    return FeatureMap(data, stride)


def sgm_forward(expert_stages, raw_stages, params: dict, prefix: str,
                fusion_strides, token_stride: int):
    """Gate+fuse independently at each configured scale, then merge.

    The coarser fused maps are nearest-upsampled and summed into the finest
    fusion scale; the sum is then pooled (if needed) onto the token grid.
    Returns the merged FeatureMap plus the per-scale gates for inspection.
    """
    by_stride_e = {fm.stride: fm for fm in expert_stages}
    by_stride_r = {fm.stride: fm for fm in raw_stages}
    fused, gates = [], []
    for i, s in enumerate(sorted(fusion_strides)):
        if s not in by_stride_e or s not in by_stride_r:
            raise ShapeError(f"no encoder stage at stride {s}")
        g = gate(by_stride_e[s], by_stride_r[s], params, f"{prefix}.gate{i}")
        gates.append(g)
        fused.append(fuse(by_stride_e[s], by_stride_r[s], g))
    finest = min(fm.stride for fm in fused)
    total: Tensor | None = None
    for fm in fused:
        aligned = _to_stride(fm, finest)
        total = aligned.data if total is None else total + aligned.data
    merged = _to_stride(FeatureMap(total, finest), token_stride)
    return merged, gates
