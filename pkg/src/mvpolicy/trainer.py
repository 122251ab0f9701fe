"""Behavior-cloning trainer, evaluation harness, robustness sweeps.

Training iterates minibatches of keyframes (augmented rigid world moves,
optional depth noise), runs the policy forward, applies the three-part
action loss, and steps Adam (or SGD) under a linear-warmup cosine (or
constant) schedule. Everything is seeded and single-threaded so reruns are
byte-identical.

Evaluation corrupts observations at a requested noise level, runs
inference, and scores pose success: translation within tau_t, every
rotation axis within tau_r, and the gripper bit correct.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import __version__, nn
from .action_head import (Action, LossWeights, action_loss, select_translation,
                          wrap_angle)
from .data import Episode, NoiseSpec, augment as augment_episode, inject_noise
from .encoders import (_cell_median_depth, cell_position_grids,
                       positions_from_cell_depth)
from .model import expert_stage_arrays
from .model import ModelConfig, init_policy, policy_forward
from .rope import PositionGrid
from .tensor import Tensor, load_container, save_container

__all__ = [
    "TrainConfig", "TrainingDiverged", "ProtocolError", "Checkpoint",
    "EvalRow", "EvalReport", "train", "finetune", "evaluate", "noise_sweep",
    "config_hash", "save_checkpoint", "load_checkpoint", "CSV_HEADER",
    "write_csv", "bar_chart_svg",
]

CSV_HEADER = "task,level,seed,success,trans_err_m,rot_err_deg,grip_acc,config_hash,version"


class TrainingDiverged(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 5000
    warmup_steps: int = 200
    base_lr: float = 1e-3
    schedule: str = "cosine"            # cosine | constant
    optimizer: str = "adam-style"       # adam-style | sgd-momentum
    seed: int = 0
    train_noise: str = "none"
    augment: bool = True
    log_every: int = 100
    tau_translation: float = 0.02       # meters
    tau_rotation_deg: float = 7.5       # per axis
    loss_weights: tuple = (1.0, 1.0, 1.0)
    heatmap_sigma_px: float = 0.0       # 0 = hard one-hot heatmap targets
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup must not exceed total steps")
        if self.base_lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def config_hash(cfg: TrainConfig) -> str:
    import hashlib
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def artifact_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except Exception:
        pass
    return f"v{__version__}"


# -- batches -------------------------------------------------------------------


class FeatureCache:
    """Per-episode caches of step-invariant quantities.

    Episode images never change during training (noise touches only depth,
    augmentation only moves the rig), so the frozen expert's features and
    the per-cell median of the clean depth can be computed once per episode
    and reused every step. Keyed by (task, episode seed).
    """

    def __init__(self, mcfg: ModelConfig, expert_params: dict | None):
        self.mcfg = mcfg
        self.expert_params = expert_params
        self._expert: dict = {}
        self._median: dict = {}

    def expert_for(self, ep: Episode):
        if self.expert_params is None:
            return None
        key = (ep.task, ep.seed)
        if key not in self._expert:
            rgb = ep.rgb.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
            self._expert[key] = expert_stage_arrays(self.expert_params,
                                                    self.mcfg, rgb)
        return self._expert[key]

    def median_for(self, ep: Episode) -> np.ndarray:
        key = (ep.task, ep.seed)
        if key not in self._median:
            self._median[key] = _cell_median_depth(
                ep.depth.astype(np.float64), self.mcfg.token_stride)
        return self._median[key]


def build_batch(samples, cfg: ModelConfig, noise: NoiseSpec,
                rng: np.random.Generator | None, use_augment: bool,
                noise_seeds=None, cache: FeatureCache | None = None):
    """samples: list of (Episode, keyframe index) -> model inputs + targets.

    Depth noise (when requested) corrupts the observation the policy sees,
    including the positions grid and the depth used to lift translations;
    clean depth rides along for the visibility test only.
    """
    b = len(samples)
    v = cfg.views
    hh, ww = cfg.image_hw
    gh, gw = cfg.grid_hw
    rgb = np.zeros((b, v, 3, hh, ww), dtype=np.float32)
    obs_depth = np.zeros((b, v, hh, ww), dtype=np.float32)
    clean_depth = np.zeros((b, v, hh, ww), dtype=np.float32)
    proprio = np.zeros((b, cfg.proprio_dim), dtype=np.float32)
    tokens = np.zeros((b, 4), dtype=np.int64)
    cameras, targets = [], []
    expert_feats = None
    cached_median = noise.level == "none" and cache is not None
    medians = np.zeros((b, v, gh, gw)) if cached_median else None
    for s, (ep, k) in enumerate(samples):
        orig = ep
        if use_augment:
            ep = augment_episode(ep, rng)
        d = ep.depth
        if noise.level != "none":
            seed = int(noise_seeds[s]) if noise_seeds is not None \
                else int(rng.integers(0, 2**31 - 1))
            d = inject_noise(d, noise, seed=seed)
        rgb[s] = ep.rgb.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        obs_depth[s] = d
        clean_depth[s] = ep.depth
        proprio[s] = ep.proprio[k]
        tokens[s] = ep.token_ids
        cameras.append(ep.cameras)
        targets.append(ep.actions[k])
        if cache is not None:
            feats = cache.expert_for(orig)
            if feats is not None:
                if expert_feats is None:
                    expert_feats = {
                        st: np.zeros((b, v) + a.shape[1:], dtype=a.dtype)
                        for st, a in feats.items()}
                for st, a in feats.items():
                    expert_feats[st][s] = a
        if cached_median:
            medians[s] = cache.median_for(orig)
    all_cams = [cam for cams in cameras for cam in cams]
    if cached_median:
        grids = positions_from_cell_depth(medians.reshape(b * v, gh, gw),
                                          all_cams, cfg.token_stride)
    else:
        grids = cell_position_grids(obs_depth.reshape(b * v, hh, ww), all_cams,
                                    cfg.token_stride)
    positions = PositionGrid(grids.coords.reshape(b, v, gh * gw, 3),
                             grids.valid.reshape(b, v, gh * gw))
    return {
        "rgb": rgb, "obs_depth": obs_depth, "clean_depth": clean_depth,
        "proprio": proprio, "tokens": tokens, "positions": positions,
        "cameras": cameras, "targets": targets, "expert_feats": expert_feats,
    }


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict                 # name -> Tensor (trainable policy weights)
    config: TrainConfig
    steps_done: int
    final_loss: float
    tag: str = "full"


def save_checkpoint(path_prefix, ck: Checkpoint):
    save_container(str(path_prefix) + ".bin",
                   {k: v.data for k, v in ck.params.items()})
    meta = {"config": ck.config.to_dict(), "steps_done": ck.steps_done,
            "final_loss": ck.final_loss, "tag": ck.tag,
            "config_hash": config_hash(ck.config)}
    with open(str(path_prefix) + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_checkpoint(path_prefix) -> Checkpoint:
    raw = load_container(str(path_prefix) + ".bin")
    with open(str(path_prefix) + ".json") as fh:
        meta = json.load(fh)
    params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
    return Checkpoint(params=params, config=TrainConfig.from_dict(meta["config"]),
                      steps_done=meta["steps_done"],
                      final_loss=meta["final_loss"], tag=meta.get("tag", "full"))


# -- training ------------------------------------------------------------------


def train(config: TrainConfig, episodes: list, expert_params: dict | None,
          init_from: dict | None = None, tag: str = "full",
          log=print) -> Checkpoint:
    """Behavior cloning over all (episode, keyframe) pairs.

    ``init_from`` warm-starts from an existing parameter dict (few-shot
    fine-tuning); otherwise parameters are freshly initialized from the
    config seed. Aborts with TrainingDiverged on a non-finite loss.
    """
    mcfg = config.model
    if mcfg.use_sgm and expert_params is None:
        raise ValueError("config enables gated fusion but no expert was given")
    if init_from is not None:
        params = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in init_from.items()}
    else:
        params = init_policy(mcfg, config.seed)
    samples = [(ep, k) for ep in episodes for k in range(len(ep.actions))]
    if not samples:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7E41]))
    opt = nn.make_optimizer(config.optimizer, params)
    noise = NoiseSpec.from_level(config.train_noise)
    lw = LossWeights(*config.loss_weights)
    cache = FeatureCache(mcfg, expert_params if mcfg.use_sgm else None)
    loss_val = float("nan")
    for step in range(config.total_steps):
        pick = rng.integers(0, len(samples), size=config.batch_size)
        batch = build_batch([samples[i] for i in pick], mcfg, noise, rng,
                            use_augment=config.augment, cache=cache)
        expert_arg = batch["expert_feats"] if batch["expert_feats"] is not None \
            else expert_params
        out = policy_forward(params, expert_arg, mcfg, batch["rgb"],
                             batch["obs_depth"], batch["tokens"],
                             batch["proprio"], batch["positions"])
        loss, parts = action_loss(out.heat_logits, out.rot_logits,
                                  out.grip_logits, batch["targets"],
                                  batch["cameras"], batch["clean_depth"],
                                  mcfg.bins(), weights=lw,
                                  heatmap_sigma_px=config.heatmap_sigma_px)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise TrainingDiverged(
                f"non-finite loss at step {step}, batch ids {pick.tolist()}")
        nn.zero_grads(params)
        loss.backward()
        opt.step(nn.lr_at(step, config.base_lr, config.warmup_steps,
                          config.total_steps, config.schedule))
        if log is not None and (step % config.log_every == 0
                                or step == config.total_steps - 1):
            log(f"step {step:5d} loss {loss_val:.4f} "
                f"(heat {parts['heatmap']:.3f} rot {parts['rotation']:.3f} "
                f"grip {parts['gripper']:.3f})")
    return Checkpoint(params=params, config=config,
                      steps_done=config.total_steps, final_loss=loss_val,
                      tag=tag)


def finetune(checkpoint: Checkpoint, episodes: list, config: TrainConfig,
             expert_params: dict | None, tag: str = "finetuned",
             log=print) -> Checkpoint:
    """Continue training from a checkpoint's weights on a small dataset."""
    if config.total_steps == 0:
        params = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in checkpoint.params.items()}
        return Checkpoint(params=params, config=config, steps_done=0,
                          final_loss=checkpoint.final_loss, tag=tag)
    return train(config, episodes, expert_params,
                 init_from=checkpoint.params, tag=tag, log=log)


# -- inference and evaluation -----------------------------------------------------


def predict_action(params: dict, expert_params: dict | None, mcfg: ModelConfig,
                   batch: dict, sample: int, outputs) -> Action | None:
    """Decode one sample's action; None when no view yields a liftable pixel
    (counted as a failed sample by the evaluator)."""
    from .action_head import NoValidCandidateError
    heat = outputs.heat_logits.data[sample]
    depth = batch["obs_depth"][sample]
    cams = batch["cameras"][sample]
    try:
        point, _ = select_translation(heat, depth, cams)
    except NoValidCandidateError:
        return None
    bins = mcfg.bins()
    rot_idx = outputs.rot_logits.data[sample].argmax(axis=-1)
    rotation = bins.decode(rot_idx)
    grip = 1.0 if outputs.grip_logits.data[sample] > 0 else 0.0
    return Action(point, rotation, grip)


@dataclass
class EvalRow:
    task: str
    level: str
    seed: int
    success: float
    trans_err_m: float
    rot_err_deg: float
    grip_acc: float

    def csv(self, cfg_hash: str, version: str) -> str:
        return (f"{self.task},{self.level},{self.seed},{self.success:.6f},"
                f"{self.trans_err_m:.6f},{self.rot_err_deg:.6f},"
                f"{self.grip_acc:.6f},{cfg_hash},{version}")


@dataclass
class EvalReport:
    rows: list
    config_hash: str
    version: str
    eval_seed: int

    def mean_success(self, task: str | None = None,
                     level: str | None = None) -> float:
        vals = [r.success for r in self.rows
                if (task is None or r.task == task)
                and (level is None or r.level == level)]
        return float(np.mean(vals)) if vals else float("nan")

    def csv_lines(self) -> list:
        return [CSV_HEADER] + [r.csv(self.config_hash, self.version)
                               for r in self.rows]


def evaluate(ck: Checkpoint, episodes: list, expert_params: dict | None,
             noise: NoiseSpec, eval_seed: int = 0,
             train_seeds: set | None = None, chunk: int = 16) -> EvalReport:
    """Score pose accuracy per keyframe, grouped into per-task rows.

    Observations are corrupted at the requested noise level with seeds
    derived from (eval_seed, episode index) so reruns are byte-identical.
    ``train_seeds`` guards the protocol: evaluation episodes must be
    disjoint from the training set.
    """
    mcfg = ck.config.model
    if train_seeds is not None:
        overlap = {(e.task, e.seed) for e in episodes} & train_seeds
        if overlap:
            raise ProtocolError(f"evaluation episodes overlap training: {overlap}")
    from .data import hash_name
    samples = [(ep, k) for ep in episodes for k in range(len(ep.actions))]
    stats: dict = {}
    cache = FeatureCache(mcfg, expert_params if mcfg.use_sgm else None)
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        seeds = [int(np.random.SeedSequence(
            [eval_seed, hash_name(f"{ep.task}:{ep.seed}:{k}")]
        ).generate_state(1)[0] & 0x7FFFFFFF) for (ep, k) in part]
        batch = build_batch(part, mcfg, noise, None, use_augment=False,
                            noise_seeds=seeds, cache=cache)
        expert_arg = batch["expert_feats"] if batch["expert_feats"] is not None \
            else expert_params
        out = policy_forward(ck.params, expert_arg, mcfg, batch["rgb"],
                             batch["obs_depth"], batch["tokens"],
                             batch["proprio"], batch["positions"])
        for i, (ep, k) in enumerate(part):
            pred = predict_action(ck.params, expert_params, mcfg, batch, i, out)
            truth = ep.actions[k]
            if pred is None:
                # no liftable pixel in any view: failed sample, errors
                # undefined (excluded from the means)
                stats.setdefault(ep.task, []).append(
                    (False, float("nan"), float("nan"), False))
                continue
            terr = float(np.linalg.norm(pred.translation - truth.translation))
            rerr_axes = np.abs(wrap_angle(pred.rotation - truth.rotation))
            rerr = float(np.rad2deg(rerr_axes.max()))
            gok = pred.gripper == truth.gripper
            success = (terr <= ck.config.tau_translation
                       and np.rad2deg(rerr_axes).max() <= ck.config.tau_rotation_deg
                       and gok)
            rec = stats.setdefault(ep.task, [])
            rec.append((success, terr, rerr, gok))
    rows = []
    for task in sorted(stats):
        arr = stats[task]
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            trans_mean = float(np.nanmean([a[1] for a in arr]))
            rot_mean = float(np.nanmean([a[2] for a in arr]))
        rows.append(EvalRow(
            task=task, level=noise.level, seed=eval_seed,
            success=float(np.mean([a[0] for a in arr])),
            trans_err_m=trans_mean,
            rot_err_deg=rot_mean,
            grip_acc=float(np.mean([float(a[3]) for a in arr]))))
    return EvalReport(rows=rows, config_hash=config_hash(ck.config),
                      version=artifact_version(), eval_seed=eval_seed)


def write_csv(path, reports: list):
    lines = [CSV_HEADER]
    for rep in reports:
        lines.extend(rep.csv_lines()[1:])
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def noise_sweep(tagged_checkpoints: dict, episodes: list,
                expert_by_tag: dict, levels: list, eval_seeds,
                out_dir=None) -> dict:
    """Success grid over (checkpoint tag, noise level), aggregated over seeds.

    ``eval_seeds`` is either one list shared by every checkpoint or a
    per-tag dict, in which case all entries must agree (protocol guard:
    comparing rows evaluated on different seeds is meaningless). Returns
    {tag: {level: mean success}} and optionally writes a CSV plus an SVG
    bar chart.
    """
    if isinstance(eval_seeds, dict):
        per_tag = {tag: tuple(v) for tag, v in eval_seeds.items()}
        if len(set(per_tag.values())) > 1:
            raise ProtocolError(
                f"eval seeds differ across checkpoints: {per_tag}")
        seeds = list(next(iter(per_tag.values())))
    else:
        seeds = list(eval_seeds)
    grid: dict = {}
    reports = []
    for tag in sorted(tagged_checkpoints):
        ck = tagged_checkpoints[tag]
        expert = expert_by_tag.get(tag)
        grid[tag] = {}
        for level in levels:
            successes = []
            for s in seeds:
                rep = evaluate(ck, episodes, expert, NoiseSpec.from_level(level),
                               eval_seed=s)
                reports.append(rep)
                successes.append(rep.mean_success())
            grid[tag][level] = float(np.mean(successes))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "noise_sweep.csv"), reports)
        with open(os.path.join(out_dir, "noise_sweep.svg"), "w") as fh:
            fh.write(bar_chart_svg(grid, levels))
    return grid


def bar_chart_svg(grid: dict, levels: list, width: int = 640,
                  height: int = 360) -> str:
    """Deterministic standalone SVG: grouped success bars per noise level."""
    tags = sorted(grid)
    margin, axis_h = 50, 40
    plot_w, plot_h = width - 2 * margin, height - margin - axis_h
    n_groups, n_bars = len(levels), max(len(tags), 1)
    group_w = plot_w / max(n_groups, 1)
    bar_w = group_w * 0.8 / n_bars
    colors = ["#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - axis_h}" x2="{width - margin}" '
        f'y2="{height - axis_h}" stroke="black"/>',
        f'<line x1="{margin}" y1="{height - axis_h}" x2="{margin}" '
        f'y2="{margin}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = height - axis_h - frac * plot_h
        parts.append(f'<text x="{margin - 8}" y="{y + 4}" text-anchor="end" '
                     f'font-size="11">{frac:.2f}</text>')
        parts.append(f'<line x1="{margin}" y1="{y}" x2="{width - margin}" '
                     f'y2="{y}" stroke="#dddddd"/>')
    for gi, level in enumerate(levels):
        gx = margin + gi * group_w + group_w * 0.1
        for bi, tag in enumerate(tags):
            val = grid[tag].get(level, 0.0)
            bh = val * plot_h
            x = gx + bi * bar_w
            y = height - axis_h - bh
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.92:.1f}" '
                f'height="{bh:.1f}" fill="{colors[bi % len(colors)]}"/>')
        parts.append(
            f'<text x="{margin + gi * group_w + group_w / 2:.1f}" '
            f'y="{height - axis_h + 16}" text-anchor="middle" '
            f'font-size="12">{level}</text>')
    for bi, tag in enumerate(tags):
        x = margin + 10 + bi * 130
        parts.append(f'<rect x="{x}" y="{height - 18}" width="12" height="12" '
                     f'fill="{colors[bi % len(colors)]}"/>')
        parts.append(f'<text x="{x + 16}" y="{height - 8}" '
                     f'font-size="11">{tag}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
