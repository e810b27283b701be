"""Command-line entry points.

Every command accepts ``--config PATH`` (JSON object), repeatable
``--set key=value`` overrides, ``--out DIR`` and ``--seed N``. Unknown keys are
rejected before any work starts, and the effective configuration is written to
``<out>/config.json``. Failures print one JSON line ``{"error": ..., "message": ...}``
to stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from contrail import tensor as T
from contrail.checkpoint import (from_train_state, load_checkpoint, restore_policy, restore_train_state,
                                 save_checkpoint, strip_training_heads)
from contrail.cil import write_similarity_csv
from contrail.dataset import load_episodes, save_episodes
from contrail.render import render_views
from contrail.tabletop import TASKS, observe
from contrail.trainer import (METRIC_COLUMNS, TrainConfig, build_replay, embedding_separation, evaluate_policy,
                              collect_q_vl, generate_episodes, mean_success, new_train_state, train)
from contrail.act import Lattice

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
EXTRA_KEYS = {"data": "", "n_per_task": 10}
ALIASES = {"lambda": "lam"}
DEFAULT_EVAL_EPISODES = 25


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config handling

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def effective_config(config_path, overrides, seed) -> dict:
    """File values, then ``--set`` overrides, then ``--seed``; unknown keys raise ``KeyError``."""
    cfg: dict = {}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        loaded = json.loads(p.read_text())
        if not isinstance(loaded, dict):
            raise ValueError(f"{p}: config must be a JSON object")
        cfg.update(loaded)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v.strip())
    cfg = {ALIASES.get(k, k): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - TRAIN_KEYS - set(EXTRA_KEYS))
    if unknown:
        raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def split_config(cfg: dict) -> tuple[TrainConfig, dict]:
    extra = {k: cfg.get(k, v) for k, v in EXTRA_KEYS.items()}
    tc = TrainConfig.from_dict({k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    return tc, extra


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, cfg: dict) -> None:
    (out / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")


def _episodes_for(extra: dict, seed: int):
    if extra["data"]:
        return load_episodes(extra["data"])
    return generate_episodes(int(extra["n_per_task"]), seed)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = effective_config(args.config, args.set, args.seed)
    n = int(args.n_per_task if args.n_per_task is not None else cfg.get("n_per_task", EXTRA_KEYS["n_per_task"]))
    if n < 1:
        raise ValueError(f"n_per_task must be >= 1, got {n}")
    cfg["n_per_task"] = n
    out = _out_dir(args)
    _echo_config(out, cfg)
    seed = int(cfg.get("seed", 0))
    episodes = generate_episodes(n, seed)
    path = out / "episodes.bin"
    save_episodes(path, episodes)
    counts: dict[str, int] = {}
    for ep in episodes:
        counts[ep.task.name] = counts.get(ep.task.name, 0) + int(ep.success)
    for name, c in counts.items():
        print(f"{name}\t{c}")
    print(f"total\t{sum(counts.values())}\t{path}")
    return 0


def _run_training(cfg: dict, out: Path, metrics_name: str, resume: str | None = None, quiet=False):
    tc, extra = split_config(cfg)
    replay = build_replay(_episodes_for(extra, tc.seed))
    if resume:
        state = restore_train_state(load_checkpoint(resume))
        if state.cfg.to_dict() != tc.to_dict():
            state.cfg = tc
    else:
        state = new_train_state(tc)
    log = None if quiet else (lambda m: print(m, flush=True))
    train(state, replay, out / metrics_name, log=log)
    save_checkpoint(out / "checkpoint.ckpt", from_train_state(state))
    (out / "evals.json").write_text(json.dumps(state.evals, sort_keys=True, indent=2) + "\n")
    return state


def cmd_train(args) -> int:
    cfg = effective_config(args.config, args.set, args.seed)
    split_config(cfg)  # validate before any work
    out = _out_dir(args)
    _echo_config(out, cfg)
    _run_training(cfg, out, "metrics.csv", resume=args.resume)
    print(f"checkpoint\t{out / 'checkpoint.ckpt'}")
    return 0


def _format_value(v) -> str:
    return str(v).replace("/", "_")


def cmd_ablate(args) -> int:
    """One training run per value of ``--sweep key=v1,v2,...``; metric files carry the value in their name."""
    cfg = effective_config(args.config, args.set, args.seed)
    if "=" not in args.sweep:
        raise ValueError("--sweep expects key=v1,v2,...")
    key, values = args.sweep.split("=", 1)
    key = ALIASES.get(key.strip(), key.strip())
    if key not in TRAIN_KEYS:
        raise KeyError(f"unknown config key(s): {key}")
    values = [_parse_value(v) for v in values.split(",") if v != ""]
    if not values:
        raise ValueError("--sweep needs at least one value")
    runs = []
    for v in values:
        split_config({**cfg, key: v})
    out = _out_dir(args)
    _echo_config(out, {**cfg, "sweep": {key: values}})
    label = "lambda" if key == "lam" else key
    for v in values:
        run_cfg = {**cfg, key: v}
        sub = out / f"{label}{_format_value(v)}"
        sub.mkdir(parents=True, exist_ok=True)
        _echo_config(sub, run_cfg)
        state = _run_training(run_cfg, sub, f"metrics_{label}{_format_value(v)}.csv", quiet=True)
        final = state.history[-1]
        runs.append({label: v, "final_total": final["total"], "final_bc": final["bc"],
                     "evals": state.evals})
        print(f"{label}={v}\ttotal={final['total']:.6f}\tbc={final['bc']:.6f}", flush=True)
    (out / "summary.json").write_text(json.dumps(runs, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_eval(args) -> int:
    cfg = effective_config(args.config, args.set, args.seed)
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    out = _out_dir(args)
    _echo_config(out, cfg)
    ckpt = load_checkpoint(args.checkpoint)
    policy = restore_policy(ckpt)
    tc = ckpt.config
    seed = int(cfg.get("seed", tc.seed))
    rates = evaluate_policy(policy, TASKS, args.episodes, seed, Lattice(tc.lattice, tc.grid * tc.patch),
                            tc.eval_max_steps)
    result = {"per_task": rates, "aggregate": mean_success(rates), "episodes_per_task": args.episodes,
              "seed": seed}
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    (out / "eval.json").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_separation(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    policy = restore_policy(ckpt)
    out = _out_dir(args)
    x, labels = collect_q_vl(policy, TASKS, args.episodes, ckpt.config.seed if args.seed is None else args.seed)
    score = embedding_separation(x, labels)
    (out / "separation.json").write_text(json.dumps({"silhouette": score}) + "\n")
    print(f"silhouette\t{score:.6f}")
    return 0


def probe_similarity(policy, episode, instructions) -> np.ndarray:
    """Frames x instructions cosine similarities between projected state and text embeddings."""
    if not instructions:
        raise ValueError("instruction list is empty")
    res = policy.cfg.resolution
    views = np.stack([render_views(observe(s), res).images for s, _ in episode.keyframes])
    with T.no_tape():
        out = policy.forward(views, policy.text_batch([episode.instruction] * len(views)))
        state = policy.cil.embed_state(out.fused.q_v).data
        text = policy.cil.embed_text(policy.text_batch(instructions).sentence).data
    sim = state.astype(np.float64) @ text.astype(np.float64).T
    return np.clip(sim, -1.0, 1.0)


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.meta.get("stripped"):
        raise ValueError("probe-similarity needs the contrastive heads; checkpoint is stripped")
    if not args.instruction:
        raise ValueError("instruction list is empty")
    policy = restore_policy(ckpt)
    out = _out_dir(args)
    if args.data:
        episodes = load_episodes(args.data)
    else:
        episodes = generate_episodes(1, ckpt.config.seed if args.seed is None else args.seed)
    if not 0 <= args.episode < len(episodes):
        raise ValueError(f"episode index {args.episode} out of range (0..{len(episodes) - 1})")
    ep = episodes[args.episode]
    sim = probe_similarity(policy, ep, args.instruction)
    path = out / "similarity.csv"
    write_similarity_csv(path, sim, args.instruction, [f"keyframe{k}" for k in range(len(sim))])
    print(f"similarity\t{path}")
    return 0


def cmd_strip(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    path = out / "checkpoint.stripped.ckpt"
    save_checkpoint(path, strip_training_heads(ckpt))
    print(f"checkpoint\t{path}")
    return 0


def cmd_export(args) -> int:
    """Plot data as CSV: per-step losses and the periodic evaluation curve."""
    ckpt = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    with open(out / "losses.csv", "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in ckpt.meta["history"]:
            fh.write(",".join(repr(row[c]) for c in METRIC_COLUMNS) + "\n")
    with open(out / "evals.csv", "w") as fh:
        names = [t.name for t in TASKS]
        fh.write(",".join(["step", "mean"] + names) + "\n")
        for ev in ckpt.meta["evals"]:
            fh.write(",".join([str(ev["step"]), repr(ev["mean"])] + [repr(ev["success"][n]) for n in names]) + "\n")
    print(f"export\t{out}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrail", description="Contrastive imitation learning on a toy tabletop.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = common(sub.add_parser("gen-data", help="generate expert demonstrations"))
    p.add_argument("--n-per-task", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a policy"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("ablate", help="one training run per swept value"))
    p.add_argument("--sweep", required=True, metavar="KEY=V1,V2,...")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("eval", help="closed-loop success rates"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=DEFAULT_EVAL_EPISODES)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("separation", help="silhouette score of post-fusion query embeddings"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(func=cmd_separation)

    p = common(sub.add_parser("probe-similarity", help="state/instruction cosine matrix along an episode"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="episode file (default: generate one episode per task)")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--instruction", action="append", default=[])
    p.set_defaults(func=cmd_probe)

    p = common(sub.add_parser("strip", help="remove training-only heads from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_strip)

    p = common(sub.add_parser("export", help="write plot data (CSV) from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyError as exc:
        return _fail("KeyError", str(exc.args[0]) if exc.args else str(exc), 1)
    except (CliError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
