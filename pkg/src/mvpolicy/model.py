"""Full policy: encoders -> gated geometric fusion -> spatial transformer ->
action heads, with the three architecture switches used by the ablation
grid.

Switches (each removes exactly one component):

* decouple=False  one shared trunk consumes RGB and depth stacked
                  channel-wise (semantics and geometry entangled),
* use_sgm=False   the geometric stream is the raw-depth features alone,
                  no expert prior and no gate,
* use_spt=False   rotary 3D position encoding replaced by a learned
                  absolute embedding per (view, cell).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .action_head import (RotationBins, decode_heatmap, init_heatmap_decoder,
                          init_rotation_gripper, predict_rotation_gripper)
from .encoders import (ConfigurationError, DepthNormalizer, TrunkSpec,
                       encode_depth, encode_semantic, expert_infer,
                       init_depth_encoder, init_semantic, init_trunk,
                       trunk_forward)
from .rope import PositionGrid
from .sgm import init_gates, sgm_forward
from .spt import SptConfig, init_spt, spt_forward
from .tensor import Tensor, concat

__all__ = ["ModelConfig", "init_policy", "policy_forward", "PolicyOutputs"]


@dataclass(frozen=True)
class ModelConfig:
    views: int = 3
    image_hw: tuple = (128, 128)
    vocab_size: int = 16
    text_dim: int = 96
    sem_channels: tuple = (24, 96, 96)
    dep_channels: tuple = (24, 96, 96)
    stage_strides: tuple | None = None   # per-stage downsampling, default 2 each
    fusion_strides: tuple = (4, 8)
    heads: int = 4
    view_layers: int = 2
    scene_layers: int = 2
    ffn_mult: int = 4
    bins_per_axis: int = 72
    proprio_dim: int = 5
    d_min: float = 0.3
    d_max: float = 1.8
    rope_lambda: float = 10000.0
    rope_scale: float = 1.0
    rope_mode: str = "qk"
    decouple: bool = True
    use_sgm: bool = True
    use_spt: bool = True

    def __post_init__(self):
        if self.use_sgm and not self.decouple:
            raise ConfigurationError(
                "gated expert fusion requires decoupled encoders")
        if self.use_sgm:
            cum = self.dep_spec().cumulative_strides()
            by_stride = {cum[i]: c for i, c in enumerate(self.dep_channels)}
            chans = {by_stride.get(s) for s in self.fusion_strides}
            if None in chans:
                raise ConfigurationError(
                    f"fusion strides {self.fusion_strides} must match encoder "
                    f"stages (available: {sorted(by_stride)})")
            if len(chans) != 1:
                raise ConfigurationError(
                    "encoder stages at the fusion strides must share one "
                    f"channel count, got {chans}")

    @property
    def token_stride(self) -> int:
        spec = self.dep_spec() if self.decouple else self.sem_spec()
        return spec.stride

    @property
    def dim(self) -> int:
        if self.decouple:
            return self.sem_channels[-1] + self.dep_channels[-1]
        return self.sem_channels[-1]

    @property
    def grid_hw(self) -> tuple:
        s = self.token_stride
        return self.image_hw[0] // s, self.image_hw[1] // s

    @property
    def tokens_per_view(self) -> int:
        h, w = self.grid_hw
        return h * w

    def spt(self) -> SptConfig:
        return SptConfig(
            dim=self.dim, heads=self.heads, view_layers=self.view_layers,
            scene_layers=self.scene_layers, ffn_mult=self.ffn_mult,
            use_rope=self.use_spt, rope_lambda=self.rope_lambda,
            rope_scale=self.rope_scale, rope_mode=self.rope_mode,
            abs_tokens=0 if self.use_spt else self.views * self.tokens_per_view)

    def bins(self) -> RotationBins:
        return RotationBins(self.bins_per_axis)

    def normalizer(self) -> DepthNormalizer:
        return DepthNormalizer(self.d_min, self.d_max)

    def _strides(self):
        return None if self.stage_strides is None else tuple(self.stage_strides)

    def sem_spec(self) -> TrunkSpec:
        cin = 3 if self.decouple else 5
        return TrunkSpec(in_channels=cin, stage_channels=tuple(self.sem_channels),
                         stage_strides=self._strides())

    def dep_spec(self) -> TrunkSpec:
        return TrunkSpec(in_channels=2, stage_channels=tuple(self.dep_channels),
                         stage_strides=self._strides())

    def expert_spec(self) -> TrunkSpec:
        return TrunkSpec(in_channels=3, stage_channels=tuple(self.dep_channels),
                         stage_strides=self._strides())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("image_hw", "sem_channels", "dep_channels", "fusion_strides",
                    "stage_strides"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PolicyOutputs:
    heat_logits: Tensor          # (B, V, H, W)
    rot_logits: Tensor           # (B, 3, bins)
    grip_logits: Tensor          # (B,)
    argmax_cells: np.ndarray     # (B, V, 2)
    spatial_tokens: Tensor       # (B, V, h, w, D)
    gates: list = field(default_factory=list)


def init_policy(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10]))
    params: dict = {}
    init_semantic(params, "sem", cfg.sem_spec(), cfg.vocab_size, cfg.text_dim, rng)
    if cfg.decouple:
        init_depth_encoder(params, "dep", cfg.dep_spec(), rng)
    if cfg.use_sgm:
        channels = []
        cum = cfg.dep_spec().cumulative_strides()
        by_stride = {cum[i]: c for i, c in enumerate(cfg.dep_channels)}
        for s in sorted(cfg.fusion_strides):
            if s not in by_stride:
                raise ConfigurationError(f"no depth-encoder stage at stride {s}")
            channels.append(by_stride[s])
        init_gates(params, "sgm", channels, rng)
    nn.init_linear(params, "text_proj", cfg.text_dim, cfg.dim, rng)
    init_spt(params, "spt", cfg.spt(), cfg.proprio_dim, rng)
    init_heatmap_decoder(params, "head", cfg.dim, cfg.token_stride, rng)
    init_rotation_gripper(params, "head", cfg.dim, cfg.views,
                          cfg.bins_per_axis, rng)
    return params


def _check_expert(expert_params, cfg: ModelConfig):
    if expert_params is None:
        raise ConfigurationError("gated fusion enabled but no expert given")


def expert_stage_arrays(expert_params: dict, cfg: ModelConfig,
                        rgb: np.ndarray) -> dict:
    """Frozen-expert features for one episode's views.

    rgb: (V, 3, H, W) float32 in [0, 1]. Returns {stride: (V, C, h, w)}
    for the fusion strides. Since the expert is frozen and episode images
    are static, these arrays can be cached and reused across every
    training step that touches the episode.
    """
    stages = expert_infer(Tensor(np.ascontiguousarray(rgb)), expert_params,
                          cfg.expert_spec())
    wanted = set(cfg.fusion_strides)
    return {fm.stride: fm.data.data for fm in stages if fm.stride in wanted}


def policy_forward(params: dict, expert: dict | None, cfg: ModelConfig,
                   rgb: np.ndarray, depth: np.ndarray, instruction: np.ndarray,
                   proprio: np.ndarray, positions: PositionGrid) -> PolicyOutputs:
    """Run the policy on a batch.

    rgb: (B, V, 3, H, W) floats in [0, 1]; depth: (B, V, H, W) meters with
    0 = invalid; instruction: (B, T) token ids; proprio: (B, d_p);
    positions: PositionGrid with coords (B, V, N, 3) for the token cells
    (precomputed from observed depth and the sample's cameras).

    ``expert`` is either the frozen expert's parameter dict (features are
    computed on the fly) or a {stride: (B, V, C, h, w)} dict of
    precomputed frozen features (the training loop caches these per
    episode).
    """
    b, v = rgb.shape[:2]
    hh, ww = cfg.image_hw
    grid_h, grid_w = cfg.grid_hw
    n = cfg.tokens_per_view
    norm = cfg.normalizer()
    depth2 = norm.normalize(depth)                      # (B, V, 2, H, W)

    rgb_bv = Tensor(np.ascontiguousarray(
        rgb.reshape(b * v, 3, hh, ww), dtype=np.float32))
    dep_bv = np.ascontiguousarray(depth2.reshape(b * v, 2, hh, ww))
    ids_bv = np.repeat(np.asarray(instruction, dtype=np.int64), v, axis=0)

    if cfg.decouple:
        sem_stages, f_text_bv = encode_semantic(rgb_bv, ids_bv, params, cfg.sem_spec())
        f_sem = sem_stages[-1]
        if cfg.use_sgm:
            _check_expert(expert, cfg)
            dep_stages = encode_depth(Tensor(dep_bv), params, cfg.dep_spec())
            if isinstance(expert, dict) and all(
                    isinstance(k, str) for k in expert):
                exp_stages = expert_infer(rgb_bv, expert, cfg.expert_spec())
            else:
                from .encoders import FeatureMap
                exp_stages = [
                    FeatureMap(Tensor(np.ascontiguousarray(
                        arr.reshape((b * v,) + arr.shape[2:]))), stride)
                    for stride, arr in sorted(expert.items())]
            f_geo, gates = sgm_forward(exp_stages, dep_stages, params, "sgm",
                                       cfg.fusion_strides, cfg.token_stride)
        else:
            dep_stages = encode_depth(Tensor(dep_bv), params, cfg.dep_spec())
            f_geo, gates = dep_stages[-1], []
        h_map = concat([f_sem.data, f_geo.data], axis=1)   # (BV, D, h, w)
    else:
        stacked = Tensor(np.concatenate([rgb_bv.data, dep_bv], axis=1))
        sem_stages, f_text_bv = encode_semantic(stacked, ids_bv, params, cfg.sem_spec())
        h_map = sem_stages[-1].data
        gates = []

    tokens = h_map.transpose(0, 2, 3, 1).reshape((b, v, n, cfg.dim))
    f_text = f_text_bv.reshape((b, v) + f_text_bv.shape[1:])[:, 0]
    text_tokens = nn.linear(f_text, params, "text_proj")

    refined = spt_forward(tokens, text_tokens, positions,
                          Tensor(np.asarray(proprio, dtype=np.float32)),
                          params, "spt", cfg.spt())
    spatial = refined[:, :v * n, :].reshape((b, v, grid_h, grid_w, cfg.dim))

    heat = decode_heatmap(spatial.reshape((b * v, grid_h, grid_w, cfg.dim)),
                          params, "head", cfg.token_stride)
    heat = heat.reshape((b, v, hh, ww))

    flat = heat.data.reshape(b, v, -1)
    amax = flat.argmax(axis=-1)
    cells = np.stack([(amax // ww) // cfg.token_stride,
                      (amax % ww) // cfg.token_stride], axis=-1)
    rot, grip = predict_rotation_gripper(spatial, cells, params, "head",
                                         cfg.bins_per_axis)
    return PolicyOutputs(heat_logits=heat, rot_logits=rot, grip_logits=grip,
                         argmax_cells=cells, spatial_tokens=spatial, gates=gates)
