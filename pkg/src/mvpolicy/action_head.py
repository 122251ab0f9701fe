"""Action decoding: per-view heatmaps, 3D lift of the argmax, rotation bins,
gripper state, and the combined imitation loss.

The heatmap decoder projects each token cell to an s x s patch of logits and
refines it with a learned convex combination over the 3x3 neighboring
cells' patches (weights softmax-normalized per output pixel), producing
full-resolution logits. Translation is read out by lifting each view's
argmax pixel with its observed depth through the camera model and averaging
candidates across views weighted by per-view peak confidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .camera import CameraModel, project, unproject
from .tensor import (Tensor, softmax, softmax_ce, softmax_ce_dense,
                     bce_with_logit, concat, take_rows)

__all__ = [
    "Action", "RotationBins", "NoValidCandidateError", "UnsupervisableSampleError",
    "init_heatmap_decoder", "decode_heatmap", "select_translation",
    "init_rotation_gripper", "predict_rotation_gripper",
    "visible_views", "action_loss", "LossWeights",
]

TWO_PI = 2.0 * np.pi


class NoValidCandidateError(ValueError):
    pass


class UnsupervisableSampleError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    """End-effector target: base-frame translation, extrinsic-XYZ Euler
    rotation in [-pi, pi), and a binary gripper state (1.0 = open)."""
    translation: np.ndarray
    rotation: np.ndarray
    gripper: float

    def __post_init__(self):
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=np.float64))
        if self.translation.shape != (3,) or self.rotation.shape != (3,):
            raise ValueError("translation and rotation must be 3-vectors")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation, [self.gripper]])


@dataclass(frozen=True)
class RotationBins:
    bins_per_axis: int = 72

    def __post_init__(self):
        if self.bins_per_axis < 2:
            raise ValueError("need at least 2 rotation bins")

    @property
    def width(self) -> float:
        return TWO_PI / self.bins_per_axis

    def encode(self, theta) -> np.ndarray:
        """Angle in [-pi, pi) -> bin index; -pi maps to bin 0."""
        t = np.asarray(theta, dtype=np.float64)
        idx = np.floor((t + np.pi) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.bins_per_axis - 1)

    def decode(self, idx) -> np.ndarray:
        """Bin index -> bin-center angle (minimizes worst-case error)."""
        return -np.pi + (np.asarray(idx, dtype=np.float64) + 0.5) * self.width


def wrap_angle(theta):
    """Wrap to [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=np.float64) + np.pi, TWO_PI) - np.pi


# -- heatmap decoder ("convex upsampling") --------------------------------------


def init_heatmap_decoder(params: dict, prefix: str, dim: int, stride: int,
                         rng: np.random.Generator):
    s2 = stride * stride
    nn.init_linear(params, f"{prefix}.patch", dim, s2, rng)
    nn.init_linear(params, f"{prefix}.weights", dim, s2 * 9, rng, zero=True)


def _convex_combine(patch: Tensor, wlogits: Tensor) -> Tensor:
    """Fused neighborhood mix: out[c, o] = sum_k softmax(w)[c, o, k] * patch[c+k, o].

    patch: (B, h, w, P); wlogits: (B, h, w, P, 9) with k enumerating the
    3x3 cell offsets row-major; out-of-grid neighbors contribute zero.
    """
    from . import _kernels
    p = np.ascontiguousarray(patch.data)
    wl = np.ascontiguousarray(wlogits.data)
    out, wsoft = _kernels.convex_fwd(p, wl)

    def bwd(g):
        dpatch, dwl = _kernels.convex_bwd(
            np.ascontiguousarray(g), wsoft, p,
            patch.requires_grad, wlogits.requires_grad)
        grads = []
        if patch.requires_grad:
            grads.append((patch, dpatch))
        if wlogits.requires_grad:
            grads.append((wlogits, dwl))
        return tuple(grads)

    return Tensor._make(out, (patch, wlogits), bwd)


def decode_heatmap(tokens: Tensor, params: dict, prefix: str, stride: int):
    """(B, h, w, D) token grid -> (B, h*stride, w*stride) logits.

    Each cell emits an s*s logit patch; output pixel (cell c, offset o) is
    the convex combination over the 3x3 neighborhood of c of the neighbors'
    patch values at o, with per-pixel weights predicted from c itself.
    """
    b, h, w, d = tokens.shape
    s2 = stride * stride
    patch = nn.linear(tokens, params, f"{prefix}.patch")            # (B,h,w,s2)
    wlog = nn.linear(tokens, params, f"{prefix}.weights")           # (B,h,w,s2*9)
    out = _convex_combine(patch, wlog.reshape((b, h, w, s2, 9)))
    full = out.reshape((b, h, w, stride, stride))
    full = full.transpose(0, 1, 3, 2, 4).reshape((b, h * stride, w * stride))
    return full


def heatmap_convex_weights(tokens: Tensor, params: dict, prefix: str,
                           stride: int) -> np.ndarray:
    """The per-output-pixel combination weights (for tests/inspection)."""
    b, h, w, _ = tokens.shape
    s2 = stride * stride
    wlog = nn.linear(tokens, params, f"{prefix}.weights")
    return softmax(wlog.reshape((b, h, w, s2, 9)), axis=-1).data


# -- translation readout -----------------------------------------------------------


def select_translation(heat_logits: np.ndarray, depths: np.ndarray,
                       cameras: list[CameraModel]):
    """Lift per-view argmax pixels to 3D and average across views.

    heat_logits/depths are (V, H, W). Views whose argmax pixel has invalid
    depth are dropped; remaining candidates are averaged with weights equal
    to each view's peak softmax probability. Ties inside one view resolve
    to the smallest (row, col) in lexicographic order. Raises
    NoValidCandidateError when every view drops out.
    """
    v, hh, ww = heat_logits.shape
    candidates, weights = [], []
    info = []
    for view in range(v):
        flat = heat_logits[view].reshape(-1).astype(np.float64)
        flat = flat - flat.max()
        p = np.exp(flat)
        p /= p.sum()
        amax = int(np.argmax(p))  # first max = lexicographic smallest (row, col)
        i, j = divmod(amax, ww)
        d = float(depths[view, i, j])
        info.append((i, j, d, float(p[amax])))
        if d <= 0:
            continue
        candidates.append(unproject((j + 0.5, i + 0.5), d, cameras[view]))
        weights.append(float(p[amax]))
    if not candidates:
        raise NoValidCandidateError(
            f"no view produced a valid-depth argmax pixel: {info}")
    wsum = float(sum(weights))
    point = sum(w * c for w, c in zip(weights, candidates)) / wsum
    return point, info


# -- rotation / gripper head ----------------------------------------------------------


def init_rotation_gripper(params: dict, prefix: str, dim: int, views: int,
                          bins: int, rng: np.random.Generator, hidden: int = 128):
    nn.init_mlp(params, f"{prefix}.rotgrip", dim * views, hidden, 3 * bins + 1, rng)


def local_token_features(tokens: Tensor, argmax_cells: np.ndarray) -> Tensor:
    """Mean token over the 3x3 cell neighborhood of each view's argmax cell.

    tokens: (B, V, h, w, D); argmax_cells: (B, V, 2) int cell coordinates.
    Neighborhoods are clamped at grid borders. Returns (B, V*D).
    """
    b, v, h, w, d = tokens.shape
    flat = tokens.reshape((b * v * h * w, d))
    offsets = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)])
    ci = np.clip(argmax_cells[..., 0][..., None] + offsets[:, 0], 0, h - 1)
    cj = np.clip(argmax_cells[..., 1][..., None] + offsets[:, 1], 0, w - 1)
    base = (np.arange(b)[:, None, None] * v + np.arange(v)[None, :, None]) * (h * w)
    idx = (base + ci * w + cj).reshape(-1)  # (B*V*9,)
    gathered = take_rows(flat, idx).reshape((b, v, 9, d))
    return gathered.mean(axis=2).reshape((b, v * d))


def predict_rotation_gripper(tokens: Tensor, argmax_cells: np.ndarray,
                             params: dict, prefix: str, bins: int):
    """-> (rotation logits (B, 3, bins), gripper logit (B,))."""
    feats = local_token_features(tokens, argmax_cells)
    out = nn.mlp(feats, params, f"{prefix}.rotgrip")
    b = out.shape[0]
    rot = out[:, :3 * bins].reshape((b, 3, bins))
    grip = out[:, 3 * bins]
    return rot, grip


# -- supervision ---------------------------------------------------------------


def visible_views(point, cameras: list[CameraModel], depths: np.ndarray,
                  margin: float = 0.035):
    """Per-view visibility of a 3D point against rendered/observed depth.

    A view counts when the point projects inside the image with positive
    depth and nothing sits more than ``margin`` meters in front of it along
    the ray (depth-buffer occlusion test). Returns (flags, pixel list).
    """
    flags, pixels = [], []
    for view, cam in enumerate(cameras):
        try:
            (x, y), d = project(point, cam)
        except ValueError:
            flags.append(False)
            pixels.append(None)
            continue
        j, i = int(np.floor(x)), int(np.floor(y))
        if not (0 <= i < cam.height and 0 <= j < cam.width):
            flags.append(False)
            pixels.append(None)
            continue
        scene_d = float(depths[view, i, j])
        occluded = scene_d > 0 and scene_d < d - margin
        flags.append(not occluded)
        pixels.append((i, j))
    return np.array(flags, dtype=bool), pixels


@dataclass(frozen=True)
class LossWeights:
    heatmap: float = 1.0
    rotation: float = 1.0
    gripper: float = 1.0


def _gaussian_window(i0: int, j0: int, hh: int, ww: int, sigma: float):
    """Sparse normalized Gaussian blob around (i0, j0), truncated at 3 sigma."""
    r = max(1, int(np.ceil(3 * sigma)))
    ii = np.arange(max(0, i0 - r), min(hh, i0 + r + 1))
    jj = np.arange(max(0, j0 - r), min(ww, j0 + r + 1))
    gi = np.exp(-0.5 * ((ii - i0) / sigma) ** 2)
    gj = np.exp(-0.5 * ((jj - j0) / sigma) ** 2)
    blob = gi[:, None] * gj[None, :]
    blob /= blob.sum()
    idx = (ii[:, None] * ww + jj[None, :]).reshape(-1)
    return idx, blob.reshape(-1)


def action_loss(heat_logits: Tensor, rot_logits: Tensor, grip_logits: Tensor,
                targets: list[Action], cameras, clean_depths: np.ndarray,
                bins: RotationBins, weights: LossWeights = LossWeights(),
                occlusion_margin: float = 0.035, heatmap_sigma_px: float = 0.0):
    """Three-part supervision: heatmap CE + per-axis rotation CE + gripper BCE.

    heat_logits: (B, V, H, W); rot_logits: (B, 3, bins); grip_logits: (B,).
    ``cameras`` is one camera list per sample (augmentation can differ per
    sample); ``clean_depths`` is (B, V, H, W) pre-noise depth used only for
    the visibility test. Heatmap CE averages over each sample's visible
    views, then over samples; samples whose target is visible in zero views
    raise UnsupervisableSampleError. ``heatmap_sigma_px`` > 0 switches the
    per-view target from a hard one-hot pixel to a truncated Gaussian blob
    (label smoothing toggle).
    """
    b, v, hh, ww = heat_logits.shape
    rows = heat_logits.reshape((b * v, hh * ww))
    row_targets = np.zeros(b * v, dtype=np.int64)
    row_weights = np.zeros(b * v, dtype=np.float64)
    soft = heatmap_sigma_px > 0
    q = np.zeros((b * v, hh * ww), dtype=np.float32) if soft else None
    for s, act in enumerate(targets):
        flags, pixels = visible_views(act.translation, cameras[s],
                                      clean_depths[s], margin=occlusion_margin)
        n_vis = int(flags.sum())
        if n_vis == 0:
            raise UnsupervisableSampleError(
                f"sample {s}: target {act.translation} visible in no view")
        for view in range(v):
            if flags[view]:
                i, j = pixels[view]
                row_targets[s * v + view] = i * ww + j
                row_weights[s * v + view] = 1.0 / (n_vis * b)
                if soft:
                    idx, blob = _gaussian_window(i, j, hh, ww, heatmap_sigma_px)
                    q[s * v + view, idx] = blob
    if soft:
        heat_ce = softmax_ce_dense(rows, q, row_weights)
    else:
        heat_ce = softmax_ce(rows, row_targets, row_weights)

    rot_targets = np.stack([bins.encode(act.rotation) for act in targets])
    rot_ce = None
    for axis in range(3):
        ce = softmax_ce(rot_logits[:, axis, :], rot_targets[:, axis])
        rot_ce = ce if rot_ce is None else rot_ce + ce

    grip_targets = np.array([act.gripper for act in targets], dtype=np.float32)
    grip_bce = bce_with_logit(grip_logits, grip_targets)

    total = (weights.heatmap * heat_ce + weights.rotation * rot_ce
             + weights.gripper * grip_bce)
    parts = {"heatmap": heat_ce.item(), "rotation": rot_ce.item(),
             "gripper": grip_bce.item()}
    return total, parts
