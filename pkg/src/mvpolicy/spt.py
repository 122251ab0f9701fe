"""Spatial transformer: proprioception injection, rotary-position attention,
view-level then scene-level interaction.

Spatial tokens carry 3D points recovered from depth and the camera model;
rotary encoding of those points is applied to queries and keys inside every
attention layer (default), which makes attention logits between spatial
tokens a function of relative position only. The literal alternative of
rotating the token features once before the stack is available via
``rope_mode="features"``. Text tokens sit at the origin and therefore
receive the identity rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .rope import (FrequencyBank, PositionGrid, axial_sincos,
                   build_frequencies, rope_rotate)
from .tensor import ShapeError, Tensor, concat, matmul, softmax

__all__ = ["SptConfig", "init_proprio", "inject_proprio",
           "init_attention_stack", "attention_block", "init_spt", "spt_forward"]


@dataclass(frozen=True)
class SptConfig:
    dim: int
    heads: int = 4
    view_layers: int = 2
    scene_layers: int = 2
    ffn_mult: int = 4
    use_rope: bool = True
    rope_lambda: float = 10000.0
    rope_scale: float = 1.0
    rope_mode: str = "qk"  # "qk" (every layer) or "features" (once, up front)
    # learned absolute cell embeddings, used when use_rope is False
    abs_tokens: int = 0

    def __post_init__(self):
        if self.dim % 6 != 0:
            raise ShapeError(f"token dim must be divisible by 6, got {self.dim}")
        if self.dim % self.heads != 0 or (self.dim // self.heads) % 2 != 0:
            raise ShapeError(
                f"token dim {self.dim} must split into even-sized heads")
        if self.rope_mode not in ("qk", "features"):
            raise ValueError(f"unknown rope_mode {self.rope_mode!r}")

    def bank(self) -> FrequencyBank:
        return build_frequencies(self.dim, self.rope_lambda)


def init_proprio(params: dict, prefix: str, proprio_dim: int, hidden: int,
                 dim: int, rng: np.random.Generator):
    nn.init_mlp(params, f"{prefix}.proprio", proprio_dim, hidden, dim, rng,
                zero_last=True)


def inject_proprio(tokens: Tensor, proprio: Tensor, params: dict,
                   prefix: str) -> Tensor:
    """Add one MLP-projected proprioception vector to every spatial token."""
    b = tokens.shape[0]
    vec = nn.mlp(proprio, params, f"{prefix}.proprio")
    if vec.shape[-1] != tokens.shape[-1]:
        raise ShapeError(
            f"proprio projection dim {vec.shape[-1]} != token dim {tokens.shape[-1]}")
    return tokens + vec.reshape((b,) + (1,) * (tokens.ndim - 2) + (vec.shape[-1],))


def _init_block(params: dict, name: str, dim: int, ffn_mult: int,
                rng: np.random.Generator):
    nn.init_layernorm(params, f"{name}.ln1", dim)
    for proj in ("q", "k", "v"):
        nn.init_linear(params, f"{name}.{proj}", dim, dim, rng)
    nn.init_linear(params, f"{name}.out", dim, dim, rng, zero=True)
    nn.init_layernorm(params, f"{name}.ln2", dim)
    nn.init_mlp(params, f"{name}.ffn", dim, ffn_mult * dim, dim, rng,
                zero_last=True)


def init_attention_stack(params: dict, prefix: str, layers: int, cfg: SptConfig,
                         rng: np.random.Generator):
    for i in range(layers):
        _init_block(params, f"{prefix}{i}", cfg.dim, cfg.ffn_mult, rng)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    return t.reshape((b, n, heads, d // heads)).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape((b, n, h * dh))


def _rope_qk(t: Tensor, cos: np.ndarray, sin: np.ndarray, heads: int) -> Tensor:
    """Rotate (B, H, N, dh) queries/keys with per-token (B, N, D) tables."""
    b, n, d = cos.shape
    dh = d // heads
    cos_h = np.ascontiguousarray(cos.reshape(b, n, heads, dh).transpose(0, 2, 1, 3))
    sin_h = np.ascontiguousarray(sin.reshape(b, n, heads, dh).transpose(0, 2, 1, 3))
    return rope_rotate(t, cos_h, sin_h)


def attention_block(tokens: Tensor, params: dict, name: str, cfg: SptConfig,
                    cos: np.ndarray | None = None, sin: np.ndarray | None = None,
                    return_weights: bool = False):
    """Pre-norm multi-head self-attention + FFN, both residual.

    ``cos``/``sin`` are the rotary tables for the token positions; when
    provided (rope_mode "qk"), queries and keys are rotated before the dot
    product so logits depend on relative 3D offsets.
    """
    x = tokens
    h = nn.layernorm(x, params, f"{name}.ln1")
    q = _split_heads(nn.linear(h, params, f"{name}.q"), cfg.heads)
    k = _split_heads(nn.linear(h, params, f"{name}.k"), cfg.heads)
    v = _split_heads(nn.linear(h, params, f"{name}.v"), cfg.heads)
    if cos is not None:
        q = _rope_qk(q, cos, sin, cfg.heads)
        k = _rope_qk(k, cos, sin, cfg.heads)
    dh = cfg.dim // cfg.heads
    logits = matmul(q, k.transpose(0, 1, 3, 2)) * float(1.0 / np.sqrt(dh))
    attn = softmax(logits, axis=-1)
    ctx = _merge_heads(matmul(attn, v))
    x = x + nn.linear(ctx, params, f"{name}.out")
    x = x + nn.mlp(nn.layernorm(x, params, f"{name}.ln2"), params, f"{name}.ffn")
    if return_weights:
        return x, attn
    return x


def init_spt(params: dict, prefix: str, cfg: SptConfig, proprio_dim: int,
             rng: np.random.Generator, proprio_hidden: int = 64):
    init_proprio(params, prefix, proprio_dim, proprio_hidden, cfg.dim, rng)
    init_attention_stack(params, f"{prefix}.view", cfg.view_layers, cfg, rng)
    init_attention_stack(params, f"{prefix}.scene", cfg.scene_layers, cfg, rng)
    if not cfg.use_rope:
        if cfg.abs_tokens <= 0:
            raise ShapeError("abs_tokens must be set when rotary encoding is off")
        params[f"{prefix}.abs_embed"] = Tensor(
            (rng.standard_normal((cfg.abs_tokens, cfg.dim)) * 0.02).astype(np.float32),
            requires_grad=True)


def _tables(positions: PositionGrid, cfg: SptConfig, dtype):
    cos, sin = axial_sincos(positions, cfg.bank(), scale=cfg.rope_scale, dtype=dtype)
    return cos, sin


def spt_forward(view_tokens: Tensor, text_tokens: Tensor | None,
                positions: PositionGrid, proprio: Tensor, params: dict,
                prefix: str, cfg: SptConfig) -> Tensor:
    """Two-stage refinement of spatial tokens.

    view_tokens: (B, V, N, D) with positions matching (B, V, N); stage one
    attends within each view (shared layer parameters, so view order is
    immaterial); stage two attends over all views' tokens concatenated with
    the text tokens (B, T, D). Returns (B, V*N + T, D) refined tokens with
    the spatial block order preserved.
    """
    b, v, n, d = view_tokens.shape
    if d != cfg.dim:
        raise ShapeError(f"token dim {d} != configured {cfg.dim}")
    if positions.coords.shape[:3] != (b, v, n):
        raise ShapeError(
            f"positions {positions.coords.shape} do not match tokens "
            f"{view_tokens.shape}")

    tokens = inject_proprio(view_tokens, proprio, params, prefix)

    if not cfg.use_rope:
        tokens = tokens + params[f"{prefix}.abs_embed"].reshape((1, v, n, d))
        cos_flat = sin_flat = None
    elif cfg.rope_mode == "features":
        cos, sin = _tables(positions, cfg, tokens.dtype)
        tokens = rope_rotate(tokens, cos.reshape(b, v, n, d),
                             sin.reshape(b, v, n, d))
        cos_flat = sin_flat = None
    else:
        cos, sin = _tables(positions, cfg, tokens.dtype)
        cos_flat, sin_flat = cos.reshape(b * v, n, d), sin.reshape(b * v, n, d)

    # stage one: intra-view attention, views folded into the batch axis
    x = tokens.reshape((b * v, n, d))
    for i in range(cfg.view_layers):
        x = attention_block(x, params, f"{prefix}.view{i}", cfg,
                            cos_flat, sin_flat)
    x = x.reshape((b, v * n, d))

    # stage two: all views plus text
    if text_tokens is not None and text_tokens.shape[1] > 0:
        t = text_tokens.shape[1]
        x = concat([x, text_tokens], axis=1)
    else:
        t = 0
    if cfg.use_rope and cfg.rope_mode == "qk":
        scene_coords = np.concatenate(
            [positions.coords.reshape(b, v * n, 3),
             np.zeros((b, t, 3))], axis=1)
        scene_valid = np.concatenate(
            [positions.valid.reshape(b, v * n),
             np.ones((b, t), dtype=bool)], axis=1)
        cos_s, sin_s = _tables(PositionGrid(scene_coords, scene_valid), cfg, x.dtype)
    else:
        cos_s = sin_s = None
    for i in range(cfg.scene_layers):
        x = attention_block(x, params, f"{prefix}.scene{i}", cfg, cos_s, sin_s)
    return x
