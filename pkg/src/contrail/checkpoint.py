"""Checkpoint files.

Container kind ``CHECKPNT``, version 1. Arrays: ``param/<name>`` for every
model parameter and ``opt/m/<name>``, ``opt/v/<name>`` for optimizer moments.
Header meta: training config, step, optimizer step count, metrics history,
periodic evaluations and a ``stripped`` flag.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from contrail.container import read_container, write_container
from contrail.policy import TRAINING_PREFIX, Policy
from contrail.trainer import TrainConfig, TrainState, make_optimizer

KIND = b"CHECKPNT"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    @property
    def step(self) -> int:
        return int(self.meta["step"])


def from_train_state(state: TrainState) -> Checkpoint:
    return Checkpoint(
        params={k: t.data for k, t in state.policy.named_parameters()},
        opt=state.opt.state(),
        meta={"config": state.cfg.to_dict(), "step": state.step, "opt_t": state.opt.t,
              "history": state.history, "evals": state.evals, "stripped": False},
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"opt/{k}", v) for k, v in ckpt.opt.items()]
    write_container(path, KIND, VERSION, ckpt.meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    version, meta, arrays, order = read_container(path, KIND)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = {n[len("param/"):]: arrays[n] for n in order if n.startswith("param/")}
    opt = {n[len("opt/"):]: arrays[n] for n in order if n.startswith("opt/")}
    return Checkpoint(params, opt, meta)


def _is_training_only(name: str) -> bool:
    return name.startswith(TRAINING_PREFIX)


def strip_training_heads(ckpt: Checkpoint) -> Checkpoint:
    """Drop the contrastive heads (and their optimizer moments); inference is unaffected."""
    params = {k: v for k, v in ckpt.params.items() if not _is_training_only(k)}
    opt = {k: v for k, v in ckpt.opt.items() if not _is_training_only(k.split("/", 1)[1])}
    return Checkpoint(params, opt, {**ckpt.meta, "stripped": True})


def restore_policy(ckpt: Checkpoint) -> Policy:
    """Policy with the checkpoint's weights; a missing inference parameter raises ``KeyError``."""
    cfg = ckpt.config
    policy = Policy(cfg.model, seed=cfg.seed)
    policy.load_state_dict(ckpt.params)
    return policy


def restore_train_state(ckpt: Checkpoint) -> TrainState:
    if ckpt.meta.get("stripped"):
        raise ValueError("cannot resume training from a stripped checkpoint")
    cfg = ckpt.config
    policy = Policy(cfg.model, seed=cfg.seed)
    policy.load_state_dict(ckpt.params, strict_training=True)
    opt = make_optimizer(policy, cfg)
    opt.load_state(int(ckpt.meta["opt_t"]), ckpt.opt)
    return TrainState(policy, opt, cfg, ckpt.step, list(ckpt.meta["history"]), list(ckpt.meta["evals"]))
