"""Feature extractors over the raw observation streams.

Three encoders share one small strided-conv trunk architecture but never
share parameters:

* semantic: RGB plus the embedded instruction -> language-modulated
  feature grid and per-token text features,
* depth: normalized raw depth (fine-grained but noise-sensitive),
* expert: a frozen RGB->depth regressor pretrained on clean renders whose
  trunk features serve as a noise-robust geometric prior.

A trunk stage halves resolution, so stage i has stride 2^(i+1). Feature
grids are NCHW tensors wrapped with their pixel stride so that every grid
cell can be mapped back to a 3D point (cell-center pixel, median cell
depth, camera unprojection).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .camera import CameraModel, unproject_map
from .rope import PositionGrid
from .tensor import Tensor, conv2d, take_rows

__all__ = [
    "VocabularyError", "DataError", "ConfigurationError",
    "TrunkSpec", "FeatureMap", "DepthNormalizer",
    "init_trunk", "trunk_forward",
    "init_semantic", "encode_semantic",
    "init_depth_encoder", "encode_depth",
    "expert_infer", "pretrain_expert", "freeze", "cell_position_grid",
]


class VocabularyError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrunkSpec:
    in_channels: int
    stage_channels: tuple = (24, 96, 96)
    stage_strides: tuple | None = None   # default: 2 per stage
    groups: int = 4

    def strides(self) -> tuple:
        if self.stage_strides is None:
            return (2,) * len(self.stage_channels)
        return tuple(self.stage_strides)

    def kernel(self, i: int) -> int:
        # a stride-4 stage needs a 5-wide kernel to cover its footprint
        return 5 if self.strides()[i] == 4 else 3

    def cumulative_strides(self) -> tuple:
        out, s = [], 1
        for st in self.strides():
            s *= st
            out.append(s)
        return tuple(out)

    @property
    def stride(self) -> int:
        return self.cumulative_strides()[-1]


@dataclass
class FeatureMap:
    """An h x w grid of feature vectors plus its source-pixel stride."""
    data: Tensor  # NCHW
    stride: int

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def grid_hw(self) -> tuple:
        return self.data.shape[2], self.data.shape[3]

    def tokens(self) -> Tensor:
        """(B, h*w, C) view of the grid, row-major cells."""
        b, c, h, w = self.data.shape
        return self.data.transpose(0, 2, 3, 1).reshape((b, h * w, c))


@dataclass(frozen=True)
class DepthNormalizer:
    """Maps metric depth into [0, 1] plus a validity channel."""
    d_min: float = 0.3
    d_max: float = 1.8

    def normalize(self, depth: np.ndarray) -> np.ndarray:
        """(..., H, W) depth -> (..., 2, H, W) normalized value + validity."""
        d = np.asarray(depth, dtype=np.float32)
        valid = (d > 0).astype(np.float32)
        scaled = np.clip((d - self.d_min) / (self.d_max - self.d_min), 0.0, 1.0)
        return np.stack([scaled * valid, valid], axis=-3)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * (self.d_max - self.d_min) + self.d_min


def init_trunk(params: dict, prefix: str, spec: TrunkSpec, rng: np.random.Generator):
    cin = spec.in_channels
    for i, cout in enumerate(spec.stage_channels):
        nn.init_conv_block(params, f"{prefix}.stage{i}", cin, cout, rng,
                           k=spec.kernel(i))
        cin = cout


def trunk_forward(x: Tensor, params: dict, prefix: str, spec: TrunkSpec,
                  inject: Tensor | None = None, inject_stage: int | None = None):
    """Run the strided trunk; returns one FeatureMap per stage.

    ``inject``, when given, is a (B, C_stage) vector added to the named
    stage's input features (broadcast over space).
    """
    stages = []
    h = x
    cumulative = spec.cumulative_strides()
    for i in range(len(spec.stage_channels)):
        if inject is not None and inject_stage == i:
            b, c = inject.shape
            h = h + inject.reshape((b, c, 1, 1))
        h = nn.conv_block(h, params, f"{prefix}.stage{i}",
                          stride=spec.strides()[i],
                          padding=spec.kernel(i) // 2, groups=spec.groups)
        stages.append(FeatureMap(h, stride=cumulative[i]))
    return stages


# -- semantic stream ---------------------------------------------------------


def init_semantic(params: dict, prefix: str, spec: TrunkSpec, vocab_size: int,
                  text_dim: int, rng: np.random.Generator):
    init_trunk(params, f"{prefix}.trunk", spec, rng)
    scale = 1.0 / np.sqrt(text_dim)
    params[f"{prefix}.tok_embed"] = Tensor(
        (rng.standard_normal((vocab_size, text_dim)) * scale).astype(np.float32),
        requires_grad=True)
    # pooled text vector modulates the input of the penultimate stage
    stage = max(len(spec.stage_channels) - 2, 0)
    cin = spec.in_channels if stage == 0 else spec.stage_channels[stage - 1]
    nn.init_linear(params, f"{prefix}.text_inject", text_dim, cin, rng, zero=True)


def encode_semantic(rgb: Tensor, instruction: np.ndarray, params: dict,
                    spec: TrunkSpec, prefix: str = "sem"):
    """RGB + instruction -> (per-stage feature maps, per-token text features).

    ``instruction`` is a (B, T) int array of token ids. Raises
    VocabularyError for ids outside the embedding table.
    """
    ids = np.asarray(instruction, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    table = params[f"{prefix}.tok_embed"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(
            f"token id out of range for vocabulary of {table.shape[0]}")
    b, t = ids.shape
    f_text = take_rows(table, ids.reshape(-1)).reshape((b, t, table.shape[1]))
    pooled = f_text.mean(axis=1)
    inject = nn.linear(pooled, params, f"{prefix}.text_inject")
    stage = max(len(spec.stage_channels) - 2, 0)
    stages = trunk_forward(rgb, params, f"{prefix}.trunk", spec,
                           inject=inject, inject_stage=stage)
    return stages, f_text


# -- raw depth stream -----------------------------------------------------------


def init_depth_encoder(params: dict, prefix: str, spec: TrunkSpec,
                       rng: np.random.Generator):
    init_trunk(params, f"{prefix}.trunk", spec, rng)


def encode_depth(depth_2ch: Tensor, params: dict, spec: TrunkSpec,
                 prefix: str = "dep"):
    """Normalized depth + validity channels -> per-stage feature maps."""
    return trunk_forward(depth_2ch, params, f"{prefix}.trunk", spec)


# -- frozen depth expert -----------------------------------------------------------


def freeze(params: dict) -> dict:
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    return params


def expert_infer(rgb: Tensor, expert_params: dict, spec: TrunkSpec,
                 prefix: str = "expert"):
    """Frozen expert features for the geometric prior.

    The caller must have produced ``expert_params`` via pretrain_expert (or
    loaded them from its checkpoint); all tensors in it are frozen so no
    tape edges are created.
    """
    if not expert_params:
        raise ConfigurationError("expert parameters are empty; pretrain first")
    if any(p.requires_grad for p in expert_params.values()):
        raise ConfigurationError("expert parameters must be frozen")
    return trunk_forward(rgb, expert_params, f"{prefix}.trunk", spec)


def _expert_decode(stages, params: dict, spec: TrunkSpec, prefix: str):
    top = stages[-1]
    s = top.stride
    logits = conv2d(top.data, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])
    return nn.depth_to_space(logits, s)


def pretrain_expert(dataset, config: dict, rng_seed: int = 0):
    """Train the RGB -> depth regressor on clean data, then freeze it.

    ``dataset`` is a list of (rgb u8/float HxWx3, clean metric depth HxW)
    pairs. Returns (frozen params, manifest dict). The manifest records the
    seed, step count, and held-out depth RMSE in meters. L1 loss on valid
    pixels, in normalized depth units.
    """
    if not dataset:
        raise DataError("expert pretraining dataset is empty")
    strides = config.get("stage_strides")
    spec = TrunkSpec(in_channels=3,
                     stage_channels=tuple(config.get("stage_channels", (24, 96, 96))),
                     stage_strides=None if strides is None else tuple(strides))
    normalizer = DepthNormalizer(config.get("d_min", 0.3), config.get("d_max", 1.8))
    steps = int(config.get("steps", 400))
    batch = int(config.get("batch", 8))
    lr = float(config.get("lr", 1e-3))
    holdout = max(1, len(dataset) // 6)

    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0xE9]))
    params: dict = {}
    init_trunk(params, "expert.trunk", spec, rng)
    s = spec.stride
    nn.init_conv(params, "expert.head", spec.stage_channels[-1], s * s, 1, rng)

    rgbs = np.stack([
        np.asarray(r, dtype=np.float32) / (255.0 if np.asarray(r).dtype == np.uint8 else 1.0)
        for r, _ in dataset])
    rgbs = rgbs.transpose(0, 3, 1, 2)
    depths = np.stack([np.asarray(d, dtype=np.float32) for _, d in dataset])
    train_idx = np.arange(holdout, len(dataset))
    opt = nn.Adam(params)
    losses = []
    for step in range(steps):
        pick = rng.choice(train_idx, size=min(batch, train_idx.size), replace=False)
        x = Tensor(rgbs[pick])
        target = normalizer.normalize(depths[pick])
        stages = trunk_forward(x, params, "expert.trunk", spec)
        pred = _expert_decode(stages, params, spec, "expert")
        tgt = Tensor(target[:, :1])
        valid = Tensor(target[:, 1:])
        masked = (pred - tgt) * valid
        loss = masked.abs().sum() / max(float(target[:, 1].sum()), 1.0)
        nn.zero_grads(params)
        loss.backward()
        losses.append(loss.item())
        opt.step(nn.lr_at(step, lr, warmup=min(50, steps // 4), total=steps))
    # held-out RMSE in meters on valid pixels
    sq_sum, count = 0.0, 0.0
    for i in range(holdout):
        x = Tensor(rgbs[i:i + 1])
        stages = trunk_forward(x, params, "expert.trunk", spec)
        pred_n = _expert_decode(stages, params, spec, "expert").data[0, 0]
        truth = depths[i]
        valid = truth > 0
        pred_m = normalizer.denormalize(pred_n)
        sq_sum += float(((pred_m - truth) ** 2)[valid].sum())
        count += float(valid.sum())
    rmse = float(np.sqrt(sq_sum / max(count, 1.0)))
    freeze(params)
    manifest = {
        "seed": rng_seed,
        "steps": steps,
        "holdout_rmse_m": rmse,
        "stage_channels": list(spec.stage_channels),
        "stage_strides": list(spec.strides()),
        "d_min": normalizer.d_min,
        "d_max": normalizer.d_max,
        "final_loss": losses[-1] if losses else None,
        "loss_curve": losses,
    }
    return params, manifest


def save_expert(path_params, path_manifest, params: dict, manifest: dict):
    from .tensor import save_container
    save_container(path_params, {k: v.data for k, v in params.items()})
    with open(path_manifest, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_expert(path_params, path_manifest):
    from .tensor import load_container
    raw = load_container(path_params)
    params = {k: Tensor(v) for k, v in raw.items()}
    freeze(params)
    with open(path_manifest) as fh:
        manifest = json.load(fh)
    return params, manifest


# -- grid cell geometry --------------------------------------------------------


def _cell_median_depth(depths: np.ndarray, stride: int) -> np.ndarray:
    """(N, H, W) depth -> (N, h, w) median of valid pixels per cell (0 if none)."""
    n, hh, ww = depths.shape
    h, w = hh // stride, ww // stride
    blocks = depths[:, :h * stride, :w * stride].reshape(n, h, stride, w, stride)
    blocks = blocks.transpose(0, 1, 3, 2, 4).reshape(n, h, w, stride * stride)
    masked = np.where(blocks > 0, blocks, np.nan)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN cells
        med = np.nanmedian(masked, axis=-1)
    valid = np.isfinite(med) & (med > 0)
    return np.where(valid, med, 0.0)


def _coarse_camera(cam: CameraModel, stride: int) -> CameraModel:
    k = cam.intrinsics
    return CameraModel(
        type(k)(k.fx / stride, k.fy / stride, k.cx / stride, k.cy / stride),
        cam.extrinsics, cam.width // stride, cam.height // stride)


def cell_position_grid(depth: np.ndarray, cam: CameraModel, stride: int) -> PositionGrid:
    """3D point per feature cell: cell-center pixel + median valid depth.

    Cells whose pixels are all invalid get an invalid (identity-encoded)
    position. The median over the cell makes positions robust to
    scattered per-pixel depth corruption.
    """
    med = _cell_median_depth(np.asarray(depth, dtype=np.float64)[None], stride)[0]
    pts, pvalid = unproject_map(med, _coarse_camera(cam, stride))
    return PositionGrid(pts, pvalid)


def positions_from_cell_depth(med: np.ndarray, cams: list,
                              stride: int) -> PositionGrid:
    """(N, h, w) per-cell median depths + N full-res cameras -> positions."""
    pts = np.zeros(med.shape + (3,))
    valid = np.zeros(med.shape, dtype=bool)
    for i, cam in enumerate(cams):
        p, v = unproject_map(med[i], _coarse_camera(cam, stride))
        pts[i] = p
        valid[i] = v
    return PositionGrid(pts, valid)


def cell_position_grids(depths: np.ndarray, cams: list, stride: int) -> PositionGrid:
    """Batched cell positions: (N, H, W) depths + N cameras -> (N, h, w) grid."""
    med = _cell_median_depth(np.asarray(depths, dtype=np.float64), stride)
    return positions_from_cell_depth(med, cams, stride)
