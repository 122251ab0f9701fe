"""Episodes, keyframe datasets, sensor-noise injection, and augmentation.

An episode is one static scene observed by the camera rig plus two
keyframes: approach the target's top surface with the gripper open, then
close the gripper there. Keyframe translations are always points on the
target's visible surface so that the heatmap argmax + observed-depth
readout can recover them exactly; a floating waypoint would lift to the
surface behind it. The rendered images are identical for both keyframes
(nothing moves until the grasp), so the proprioceptive state (gripper
position, open fraction, normalized timestep) is what tells the policy
which keyframe action is expected.

Noise injection corrupts a configurable fraction of valid depth pixels
with Gaussian displacement along the viewing ray; clean depth is always
kept alongside so the frozen expert can be trained on clean data and
robustness sweeps stay replayable.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .action_head import Action, visible_views, wrap_angle
from .camera import CameraModel, Extrinsics, load_rig, save_rig
from .env import PALETTE, SceneObject, SceneSpec, default_rig, render_view, rotz
from .tensor import FormatError, load_container, save_container

__all__ = [
    "VOCAB", "tokenize", "TaskSpec", "TASKS", "NoiseSpec", "Episode",
    "PlacementError", "generate_episode", "inject_noise", "augment",
    "write_dataset", "read_dataset", "GRIPPER_HOME", "WORKSPACE",
]

VOCAB = ["<pad>", "reach", "pick", "push", "the",
         "red", "green", "blue", "yellow", "purple",
         "sphere", "box", "cylinder", "button"]
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
MAX_TOKENS = 4

GRIPPER_HOME = np.array([0.0, -0.35, 0.40])
# the approach keyframe hovers at the grasp point itself (see module note)
APPROACH_TIME, GRASP_TIME = 0.0, 0.5
# generous bounds for augmentation rejection: x, y, z min/max
WORKSPACE = np.array([[-0.50, 0.50], [-0.50, 0.50], [-0.02, 0.60]])


class PlacementError(RuntimeError):
    pass


def tokenize(instruction: str) -> np.ndarray:
    words = instruction.strip().split()
    if not words:
        raise ValueError("instruction must be non-empty")
    try:
        ids = [_WORD_TO_ID[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} not in vocabulary") from None
    ids = ids[:MAX_TOKENS] + [0] * (MAX_TOKENS - len(ids))
    return np.asarray(ids, dtype=np.int64)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    verb: str
    shape: str          # sphere | box | button
    colors: tuple       # allowed target colors

    def instruction(self, color: str) -> str:
        return f"{self.verb} the {color} {self.shape}"


TASKS = {
    "reach-sphere": TaskSpec("reach-sphere", "reach", "sphere", ("red", "purple")),
    "pick-box": TaskSpec("pick-box", "pick", "box", ("green", "blue")),
    "push-button": TaskSpec("push-button", "push", "button", ("blue", "red")),
    # held out for few-shot adaptation: a color/shape pairing never seen above
    "pick-red-box": TaskSpec("pick-red-box", "pick", "box", ("red",)),
}

_NOISE_LEVELS = {
    "none": (0.0, 0.0),
    "light": (0.20, 0.05),
    "middle": (0.50, 0.10),
    "heavy": (0.80, 0.10),
}


@dataclass(frozen=True)
class NoiseSpec:
    level: str
    fraction: float
    sigma: float
    seed: int | None = None

    @classmethod
    def from_level(cls, level: str, seed: int | None = None) -> "NoiseSpec":
        if level not in _NOISE_LEVELS:
            raise ValueError(f"unknown noise level {level!r}")
        frac, sigma = _NOISE_LEVELS[level]
        return cls(level=level, fraction=frac, sigma=sigma, seed=seed)


@dataclass
class Episode:
    task: str
    seed: int
    scene: SceneSpec
    cameras: list
    rgb: np.ndarray          # (V, H, W, 3) uint8
    depth: np.ndarray        # (V, H, W) float32, clean
    proprio: np.ndarray      # (K, 5) float32
    actions: list            # K Actions
    instruction: str

    @property
    def token_ids(self) -> np.ndarray:
        return tokenize(self.instruction)

    def keyframes(self):
        return [(self.proprio[k], self.actions[k])
                for k in range(len(self.actions))]


def _grasp_yaw(rng: np.random.Generator, obj_kind: str) -> float:
    if obj_kind != "box":
        return 0.0
    return float(np.deg2rad(rng.choice([-30.0, 0.0, 30.0])))


def _sample_object(rng, kind, color, table_half, margin=0.09, yaw=0.0):
    lim = table_half - margin
    x, y = rng.uniform(-lim, lim, size=2)
    if kind == "sphere":
        r = rng.uniform(0.028, 0.038)
        return SceneObject("sphere", color, (float(r),), (float(x), float(y), float(r)))
    if kind == "box":
        sx = rng.uniform(0.070, 0.100)
        sy = rng.uniform(0.028, 0.040)
        sz = rng.uniform(0.040, 0.060)
        return SceneObject("box", color, (float(sx), float(sy), float(sz)),
                           (float(x), float(y), float(sz / 2)), yaw=yaw)
    r = rng.uniform(0.028, 0.036)
    h = rng.uniform(0.016, 0.022)
    return SceneObject("cylinder", color, (float(r), float(h)),
                       (float(x), float(y), float(h / 2)))


_SHAPE_KIND = {"sphere": "sphere", "box": "box", "button": "cylinder",
               "cylinder": "cylinder"}


def _sample_scene(task: TaskSpec, rng: np.random.Generator,
                  table_half: float = 0.30) -> SceneSpec:
    color = str(rng.choice(list(task.colors)))
    kind = _SHAPE_KIND[task.shape]
    target = _sample_object(rng, kind, color, table_half,
                            yaw=_grasp_yaw(rng, kind))
    objects = [target]
    for _ in range(int(rng.integers(1, 3))):
        for _attempt in range(40):
            d_kind = str(rng.choice(["sphere", "box", "cylinder"]))
            d_color = str(rng.choice(list(PALETTE)))
            if (d_kind, d_color) == (kind, color):
                continue
            cand = _sample_object(rng, d_kind, d_color, table_half,
                                  yaw=_grasp_yaw(rng, d_kind))
            positions = np.array([o.position for o in objects])
            dist = np.linalg.norm(positions[:, :2] - np.array(cand.position)[:2],
                                  axis=-1)
            if (dist > 0.14).all():
                objects.append(cand)
                break
    instruction = task.instruction(color)
    return SceneSpec(table_half=table_half, objects=tuple(objects),
                     target_index=0, instruction=instruction)


def generate_episode(task: TaskSpec, cameras: list, seed: int,
                     max_retries: int = 50) -> Episode:
    """Deterministic episode for (task, seed): scene, renders, two keyframes."""
    rng = np.random.default_rng(np.random.SeedSequence([hash_name(task.name), seed]))
    for _ in range(max_retries):
        scene = _sample_scene(task, rng)
        rgbs, depths = [], []
        for cam in cameras:
            rgb, depth = render_view(scene, cam)
            rgbs.append((np.clip(rgb, 0, 1) * 255).astype(np.uint8))
            depths.append(depth.astype(np.float32))
        depth_arr = np.stack(depths)
        target = scene.target()
        grasp = target.top_point
        yaw = target.yaw if target.kind == "box" else 0.0
        actions = [Action(grasp, (0.0, 0.0, yaw), 1.0),
                   Action(grasp, (0.0, 0.0, yaw), 0.0)]
        visible = [visible_views(a.translation, cameras, depth_arr)[0].any()
                   for a in actions]
        if not all(visible):
            continue
        proprio = np.stack([
            np.concatenate([GRIPPER_HOME, [1.0, APPROACH_TIME]]),
            np.concatenate([grasp, [1.0, GRASP_TIME]]),
        ]).astype(np.float32)
        return Episode(task=task.name, seed=seed, scene=scene,
                       cameras=list(cameras), rgb=np.stack(rgbs),
                       depth=depth_arr, proprio=proprio, actions=actions,
                       instruction=scene.instruction)
    raise PlacementError(
        f"could not place a supervisable scene for {task.name} seed {seed}")


def hash_name(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def inject_noise(depth: np.ndarray, spec: NoiseSpec,
                 seed: int | None = None) -> np.ndarray:
    """Corrupt a Bernoulli(fraction) subset of valid pixels with N(0, sigma^2)
    displacement along the ray; corrupted values are resampled until
    positive. Deterministic per (spec, seed); level "none" is the identity.
    """
    d = np.asarray(depth, dtype=np.float32).copy()
    if spec.level == "none" or spec.fraction == 0.0:
        return d
    use_seed = seed if seed is not None else spec.seed
    if use_seed is None:
        raise ValueError("noise injection needs a seed for replayability")
    rng = np.random.default_rng(np.random.SeedSequence([use_seed, 0x401]))
    valid = d > 0
    mask = valid & (rng.uniform(size=d.shape) < spec.fraction)
    noise = rng.normal(0.0, spec.sigma, size=d.shape).astype(np.float32)
    out = np.where(mask, d + noise, d)
    bad = mask & (out <= 0)
    while bad.any():
        out[bad] = d[bad] + rng.normal(0.0, spec.sigma,
                                       size=int(bad.sum())).astype(np.float32)
        bad = mask & (out <= 0)
    return out


def _transform_extrinsics(ext: Extrinsics, rot: np.ndarray,
                          shift: np.ndarray) -> Extrinsics:
    t_mat = np.eye(4)
    t_mat[:3, :3] = rot
    t_mat[:3, 3] = shift
    return Extrinsics(t_mat @ ext.matrix)


def augment(episode: Episode, rng: np.random.Generator,
            max_shift: float = 0.125, max_rot_deg: float = 45.0,
            max_retries: int = 20) -> Episode:
    """Rigidly move the world (cameras and all ground truth) relative to the
    robot base: translation up to +-max_shift per axis, rotation up to
    +-max_rot_deg about z. Images and depth are untouched because the rig
    moves together with the scene. Resamples if a transformed keyframe
    leaves the workspace bounds.
    """
    for _ in range(max_retries):
        shift = rng.uniform(-max_shift, max_shift, size=3)
        psi = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
        rot = rotz(psi)
        new_actions = []
        ok = True
        for act in episode.actions:
            t = rot @ act.translation + shift
            if ((t < WORKSPACE[:, 0]) | (t > WORKSPACE[:, 1])).any():
                ok = False
                break
            new_actions.append(Action(t, (act.rotation[0], act.rotation[1],
                                          float(wrap_angle(act.rotation[2] + psi))),
                                      act.gripper))
        if not ok:
            continue
        new_cams = [CameraModel(c.intrinsics,
                                _transform_extrinsics(c.extrinsics, rot, shift),
                                c.width, c.height)
                    for c in episode.cameras]
        new_proprio = episode.proprio.copy()
        new_proprio[:, :3] = episode.proprio[:, :3] @ rot.T + shift
        return replace(episode, cameras=new_cams, actions=new_actions,
                       proprio=new_proprio)
    raise PlacementError("augmentation could not keep the episode in bounds")


# -- on-disk datasets ------------------------------------------------------------


def _episode_blob(ep: Episode) -> dict:
    pose = np.stack([np.concatenate([a.translation, a.rotation])
                     for a in ep.actions]).astype(np.float32)
    grip = np.array([int(a.gripper > 0.5) for a in ep.actions], dtype=np.uint8)
    return {
        "rgb": ep.rgb,
        "depth": ep.depth,
        "proprio": ep.proprio,
        "action_pose": pose,
        "action_grip": grip,
        "instruction": ep.token_ids,
    }


def write_dataset(out_dir, episodes: list, cameras: list, gen_spec: dict):
    """Directory layout: cameras.txt, manifest.json, ep_XXXXX.bin.

    Episode files are written to a temp name then renamed so readers never
    observe partial files. The manifest records the generator seed, a hash
    of the generation spec, and per-episode metadata.
    """
    os.makedirs(out_dir, exist_ok=True)
    cam_file = os.path.join(out_dir, "cameras.txt")
    save_rig(cam_file, cameras)
    entries = []
    for idx, ep in enumerate(episodes):
        name = f"ep_{idx:05d}.bin"
        tmp = os.path.join(out_dir, name + ".tmp")
        save_container(tmp, _episode_blob(ep))
        os.replace(tmp, os.path.join(out_dir, name))
        entries.append({"file": name, "task": ep.task, "seed": ep.seed,
                        "instruction": ep.instruction,
                        "scene": ep.scene.to_dict()})
    manifest = {
        "camera_file": "cameras.txt",
        "spec_hash": hashlib.sha256(
            json.dumps(gen_spec, sort_keys=True).encode()).hexdigest()[:16],
        "generation_spec": gen_spec,
        "episodes": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_dataset(out_dir) -> tuple:
    """-> (episodes, cameras, manifest). Bit-exact round trip of f32 fields."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    cameras = load_rig(os.path.join(out_dir, manifest["camera_file"]))
    episodes = []
    for entry in manifest["episodes"]:
        blob = load_container(os.path.join(out_dir, entry["file"]))
        required = {"rgb", "depth", "proprio", "action_pose", "action_grip",
                    "instruction"}
        if not required <= set(blob):
            raise FormatError(f"episode {entry['file']} missing fields")
        actions = [Action(blob["action_pose"][k, :3],
                          blob["action_pose"][k, 3:6],
                          float(blob["action_grip"][k]))
                   for k in range(blob["action_pose"].shape[0])]
        episodes.append(Episode(
            task=entry["task"], seed=entry["seed"],
            scene=SceneSpec.from_dict(entry["scene"]), cameras=list(cameras),
            rgb=blob["rgb"], depth=blob["depth"], proprio=blob["proprio"],
            actions=actions, instruction=entry["instruction"]))
    return episodes, cameras, manifest
