"""Command-line surface: data generation, training, evaluation, sweeps.

Exit codes: 0 success, 2 configuration error (bad flags/config/ablation
combination), 3 data error (missing or malformed datasets/checkpoints).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .data import (TASKS, NoiseSpec, PlacementError, generate_episode,
                   read_dataset, write_dataset)
from .encoders import (ConfigurationError, DataError, load_expert,
                       pretrain_expert, save_expert)
from .env import default_rig
from .model import ModelConfig
from .tensor import FormatError
from .trainer import (Checkpoint, CSV_HEADER, ProtocolError, TrainConfig,
                      TrainingDiverged, evaluate, finetune, load_checkpoint,
                      noise_sweep, save_checkpoint, train, write_csv)

TRAIN_TASKS = ["reach-sphere", "pick-box", "push-button"]


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--config", help="JSON training config file")
    p.add_argument("--noise", default="none",
                   choices=["none", "light", "middle", "heavy"])
    p.add_argument("--ablate", action="append", default=[],
                   choices=["decouple", "sgm", "spt"],
                   help="remove one architecture component (repeatable)")
    p.add_argument("--views", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mvpolicy",
        description="multi-view RGB-D manipulation policy workbench")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="render a seeded episode dataset")
    _add_common(g)
    g.add_argument("--tasks", nargs="+", default=TRAIN_TASKS,
                   choices=sorted(TASKS))
    g.add_argument("--episodes-per-task", type=int, default=100)
    g.add_argument("--seed-offset", type=int, default=0,
                   help="base episode seed (train/eval splits)")
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--focal", type=float, default=150.0)

    e = sub.add_parser("pretrain-expert", help="train + freeze the depth expert")
    _add_common(e)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--steps", type=int, default=600)

    t = sub.add_parser("train", help="behavior-clone a policy")
    _add_common(t)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--expert", help="expert checkpoint prefix (needed with SGM)")
    t.add_argument("--tag", default="full")

    v = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data-dir", required=True)
    v.add_argument("--expert")

    s = sub.add_parser("noise-sweep", help="success grid over noise levels")
    _add_common(s)
    s.add_argument("--checkpoints", nargs="+", required=True,
                   metavar="TAG=PREFIX")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--expert")
    s.add_argument("--levels", nargs="+", default=["none", "heavy"],
                   choices=["none", "light", "middle", "heavy"])
    s.add_argument("--eval-seeds", nargs="+", type=int, default=[0, 1, 2])

    f = sub.add_parser("finetune", help="adapt a checkpoint to a small dataset")
    _add_common(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data-dir", required=True)
    f.add_argument("--expert")
    f.add_argument("--tag", default="finetuned")

    c = sub.add_parser("grad-check", help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)

    r = sub.add_parser("report", help="aggregate evaluation CSVs")
    r.add_argument("csv", nargs="+")
    return ap


def _train_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = TrainConfig()
    model = cfg.model
    updates = {}
    if args.views != model.views:
        updates["views"] = args.views
    if "decouple" in args.ablate:
        updates["decouple"] = False
        updates["use_sgm"] = False if "sgm" in args.ablate else model.use_sgm
    if "sgm" in args.ablate:
        updates["use_sgm"] = False
    if "spt" in args.ablate:
        updates["use_spt"] = False
    if updates:
        model = ModelConfig.from_dict({**model.to_dict(), **updates})
    from dataclasses import replace
    cfg = replace(cfg, model=model, seed=args.seed,
                  train_noise=args.noise if args.noise != "none" else cfg.train_noise)
    return cfg


def _load_expert_arg(args, needed: bool):
    if not args.expert:
        if needed:
            raise ConfigurationError(
                "this configuration fuses expert features; pass --expert")
        return None
    return load_expert(args.expert + ".bin", args.expert + ".json")[0]


def cmd_gen_data(args) -> int:
    rig = default_rig(args.resolution, args.resolution, focal=args.focal,
                      views=args.views)
    episodes = []
    for task_name in args.tasks:
        task = TASKS[task_name]
        for i in range(args.episodes_per_task):
            ep_seed = args.seed_offset + i
            episodes.append(generate_episode(task, rig, seed=ep_seed))
    gen_spec = {
        "tasks": list(args.tasks), "episodes_per_task": args.episodes_per_task,
        "seed": args.seed, "seed_offset": args.seed_offset,
        "resolution": args.resolution, "focal": args.focal,
        "views": args.views,
    }
    write_dataset(args.out_dir, episodes, rig, gen_spec)
    print(f"wrote {len(episodes)} episodes to {args.out_dir}")
    return 0


def cmd_pretrain_expert(args) -> int:
    episodes, _, _ = read_dataset(args.data_dir)
    pairs = []
    for ep in episodes:
        for view in range(ep.rgb.shape[0]):
            pairs.append((ep.rgb[view], ep.depth[view]))
    cfg = _train_config(args)
    mcfg = cfg.model
    config = {"stage_channels": mcfg.dep_channels,
              "stage_strides": mcfg.stage_strides,
              "steps": args.steps, "d_min": mcfg.d_min, "d_max": mcfg.d_max}
    params, manifest = pretrain_expert(pairs, config, rng_seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    prefix = os.path.join(args.out_dir, "expert")
    save_expert(prefix + ".bin", prefix + ".json", params, manifest)
    print(f"expert held-out RMSE {manifest['holdout_rmse_m']:.4f} m -> {prefix}")
    return 0


def cmd_train(args) -> int:
    episodes, _, _ = read_dataset(args.data_dir)
    cfg = _train_config(args)
    expert = _load_expert_arg(args, needed=cfg.model.use_sgm)
    ck = train(cfg, episodes, expert, tag=args.tag)
    os.makedirs(args.out_dir, exist_ok=True)
    prefix = os.path.join(args.out_dir, f"policy_{args.tag}_seed{cfg.seed}")
    save_checkpoint(prefix, ck)
    print(f"final loss {ck.final_loss:.4f} -> {prefix}")
    return 0


def cmd_eval(args) -> int:
    episodes, _, _ = read_dataset(args.data_dir)
    ck = load_checkpoint(args.checkpoint)
    expert = _load_expert_arg(args, needed=ck.config.model.use_sgm)
    rep = evaluate(ck, episodes, expert, NoiseSpec.from_level(args.noise),
                   eval_seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, f"eval_{args.noise}_seed{args.seed}.csv")
    write_csv(out, [rep])
    for row in rep.rows:
        print(f"{row.task:16s} {args.noise:6s} success {row.success:.3f} "
              f"trans {row.trans_err_m:.4f} m rot {row.rot_err_deg:.2f} deg "
              f"grip {row.grip_acc:.3f}")
    print(f"mean success {rep.mean_success():.3f} -> {out}")
    return 0


def cmd_noise_sweep(args) -> int:
    episodes, _, _ = read_dataset(args.data_dir)
    tagged = {}
    experts = {}
    for item in args.checkpoints:
        if "=" not in item:
            raise ConfigurationError(f"expected TAG=PREFIX, got {item!r}")
        tag, prefix = item.split("=", 1)
        tagged[tag] = load_checkpoint(prefix)
        if tagged[tag].config.model.use_sgm:
            experts[tag] = _load_expert_arg(args, needed=True)
    grid = noise_sweep(tagged, episodes, experts, args.levels, args.eval_seeds,
                       out_dir=args.out_dir)
    for tag in sorted(grid):
        cells = "  ".join(f"{lv}={grid[tag][lv]:.3f}" for lv in args.levels)
        print(f"{tag:16s} {cells}")
    return 0


def cmd_finetune(args) -> int:
    episodes, _, _ = read_dataset(args.data_dir)
    base = load_checkpoint(args.checkpoint)
    cfg = _train_config(args)
    expert = _load_expert_arg(args, needed=cfg.model.use_sgm)
    ck = finetune(base, episodes, cfg, expert, tag=args.tag)
    os.makedirs(args.out_dir, exist_ok=True)
    prefix = os.path.join(args.out_dir, f"policy_{args.tag}_seed{cfg.seed}")
    save_checkpoint(prefix, ck)
    print(f"final loss {ck.final_loss:.4f} -> {prefix}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_grad_suite
    results = run_grad_suite(seeds=args.seeds, tol=args.tol, log=print)
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        with open(path) as fh:
            lines = fh.read().strip().splitlines()
        if not lines or lines[0] != CSV_HEADER:
            raise FormatError(f"{path}: unexpected CSV header")
        for line in lines[1:]:
            parts = line.split(",")
            rows.append((parts[0], parts[1], float(parts[3])))
    agg: dict = {}
    for task, level, success in rows:
        agg.setdefault((task, level), []).append(success)
    print(f"{'task':18s} {'level':8s} {'n':>3s} {'success':>9s} {'std':>7s}")
    for (task, level) in sorted(agg):
        vals = np.array(agg[(task, level)])
        print(f"{task:18s} {level:8s} {len(vals):3d} {vals.mean():9.3f} "
              f"{vals.std():7.3f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-expert": cmd_pretrain_expert,
    "train": cmd_train,
    "eval": cmd_eval,
    "noise-sweep": cmd_noise_sweep,
    "finetune": cmd_finetune,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.cmd](args)
    except (DataError, FormatError, PlacementError, FileNotFoundError,
            TrainingDiverged) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, ProtocolError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
