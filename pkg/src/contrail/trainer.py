"""Keyframe replay buffer, optimization loop, schedule, evaluation and embedding separation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from sklearn.metrics import silhouette_score

from contrail import tensor as T
from contrail.act import BCWeights, Lattice, bc_losses, decode_action, ground_truth
from contrail.cil import COMPONENTS, ContrastiveConfig, combined_objective, contrastive_terms
from contrail.policy import ModelConfig, Policy
from contrail.render import PointCloud, augment, render_views
from contrail.tabletop import (TASKS, Action, Episode, SceneState, TaskSpec, check_success, observe,
                               sample_task, scripted_expert, step, task_index)

METRIC_COLUMNS = ("step", "lr", "bc", "sl", "slg", "total")
OPTIMIZERS = ("adam", "lamb")
GOAL_MODES = ("next", "future")


# ---------------------------------------------------------------- seeds

def scene_seed(seed: int, task: int, index: int, split: str) -> int:
    """Scene seeds: even for training, odd for evaluation, so the two sets never meet."""
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    return 2 * ((seed * 64 + task) * 1_000_003 + index) + (split == "eval")


def generate_episodes(n_per_task: int, seed: int, tasks=TASKS) -> list[Episode]:
    if n_per_task < 1:
        raise ValueError(f"n_per_task must be >= 1, got {n_per_task}")
    out = []
    for task in tasks:
        ti = task_index(task)
        for i in range(n_per_task):
            s = scene_seed(seed, ti, i, "train")
            _, state, _ = sample_task(s, task)
            out.append(scripted_expert(task, state, s))
    return out


# ---------------------------------------------------------------- replay buffer

@dataclass
class Transition:
    state: PointCloud
    instruction: str
    task_id: int
    action: Action
    goal_state: PointCloud
    episode: int
    frame: int
    goal_frame: int
    terminal: bool  # goal is the frame itself
    futures: tuple = ()  # clouds of the strictly later keyframes, for ``goal="future"``


def build_replay(episodes: list[Episode]) -> list[Transition]:
    """One transition per keyframe of every successful episode; the goal is the next keyframe.

    The final keyframe has no successor and uses itself as goal (``terminal``).
    """
    out = []
    for e, ep in enumerate(episodes):
        if not ep.success:
            continue
        clouds = [observe(s) for s, _ in ep.keyframes]
        n = len(clouds)
        for k, (_, action) in enumerate(ep.keyframes):
            g = min(k + 1, n - 1)
            out.append(Transition(clouds[k], ep.instruction, task_index(ep.task), action,
                                  clouds[g], e, k, g, g == k, tuple(clouds[k + 1:])))
    if not out:
        raise ValueError("build_replay: no successful episodes")
    return out


# ---------------------------------------------------------------- config and schedule

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1200
    batch_size: int = 8
    base_lr: float = 3e-3
    warmup_steps: int = 40
    lam: float = 0.5
    tau: float = 0.5
    components: str = "both"
    seed: int = 0
    grid: int = 8
    patch: int = 2
    d: int = 32
    heads: int = 1
    hidden: int = 64
    embed_dim: int = 32
    lattice: int = 24
    augment: bool = True
    optimizer: str = "adam"
    weight_decay: float = 0.0
    eval_fractions: tuple = (0.25,)
    eval_episodes: int = 10
    eval_max_steps: int = 6
    dtype: str = "float32"
    heat_sigma: float = 0.0  # Gaussian pixel-target width; 0 = one-hot
    goal: str = "next"  # next | future (uniform over strictly later keyframes)
    stop_at: int = 0  # halt after this many steps (0 = run to the end); the schedule still spans ``steps``

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must satisfy 0 <= warmup_steps < steps")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.components not in COMPONENTS:
            raise ValueError(f"components must be one of {COMPONENTS}")
        if self.heat_sigma < 0:
            raise ValueError("heat_sigma must be >= 0")
        if self.goal not in GOAL_MODES:
            raise ValueError(f"goal must be one of {GOAL_MODES}")
        if not 0 <= self.stop_at <= self.steps:
            raise ValueError("stop_at must lie in [0, steps]")
        object.__setattr__(self, "eval_fractions", tuple(float(f) for f in self.eval_fractions))
        ContrastiveConfig(self.tau, self.lam, self.embed_dim, self.components)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(grid=self.grid, patch=self.patch, d=self.d, heads=self.heads,
                           hidden=self.hidden, embed_dim=self.embed_dim, dtype=self.dtype)

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau, self.lam, self.embed_dim, self.components)

    @property
    def eval_steps(self) -> tuple[int, ...]:
        return tuple(sorted({max(1, round(f * self.steps)) for f in self.eval_fractions}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_fractions"] = list(self.eval_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        d = dict(d)
        if "eval_fractions" in d:
            d["eval_fractions"] = tuple(d["eval_fractions"])
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup (rate base*(k+1)/w at warmup step k), then cosine decay reaching 0 at ``steps``."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    w = cfg.warmup_steps
    if step < w:
        return cfg.base_lr * (step + 1) / w
    frac = (step - w) / (cfg.steps - w)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------- optimizers

class Adam:
    """Adam, or LAMB (per-tensor trust ratio) when ``layerwise`` is set.

    Parameters that received no gradient in a step are treated as having a
    zero gradient.
    """

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, layerwise=False):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay, self.layerwise = weight_decay, layerwise
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            if self.layerwise:
                wn, un = np.linalg.norm(p.data), np.linalg.norm(upd)
                if wn > 0 and un > 0:
                    upd = upd * (wn / un)
            p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        for k in self.params:
            if f"m/{k}" in arrays:
                # moments are stored as float64; keep the parameter's compute dtype
                self.m[k] = arrays[f"m/{k}"].astype(self.m[k].dtype)
                self.v[k] = arrays[f"v/{k}"].astype(self.v[k].dtype)


def make_optimizer(policy: Policy, cfg: TrainConfig) -> Adam:
    return Adam(policy.named_parameters(), weight_decay=cfg.weight_decay, layerwise=cfg.optimizer == "lamb")


# ---------------------------------------------------------------- training

@dataclass
class Batch:
    views: np.ndarray
    goal_views: np.ndarray
    instructions: list[str]
    task_id: np.ndarray
    anchor: np.ndarray
    gts: list


def assemble_batch(items: list[Transition], resolution: int, aug_seeds=None) -> Batch:
    """Render each transition, applying a seeded rigid perturbation when ``aug_seeds`` is given."""
    views, goals, gts = [], [], []
    for i, tr in enumerate(items):
        cloud, action, goal = tr.state, tr.action, tr.goal_state
        if aug_seeds is not None:
            cloud, (action,), (goal,) = augment(cloud, [action], aug_seeds[i], [goal])
        views.append(render_views(cloud, resolution).images)
        goals.append(render_views(goal, resolution).images)
        gts.append(ground_truth(action, resolution))
    return Batch(np.stack(views), np.stack(goals), [t.instruction for t in items],
                 np.array([t.task_id for t in items]), np.array([not t.terminal for t in items]), gts)


def sample_batch(replay: list[Transition], cfg: TrainConfig, step_index: int) -> Batch:
    """Uniform sample with replacement; a pure function of (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step_index])
    idx = rng.integers(0, len(replay), size=cfg.batch_size)
    items = [replay[i] for i in idx]
    if cfg.goal == "future":
        items = [_future_goal(t, rng) for t in items]
    aug = [[cfg.seed, step_index, i] for i in range(cfg.batch_size)] if cfg.augment else None
    return assemble_batch(items, cfg.grid * cfg.patch, aug)


def _future_goal(t: Transition, rng: np.random.Generator) -> Transition:
    if not t.futures:
        return t
    j = int(rng.integers(len(t.futures)))
    return replace(t, goal_state=t.futures[j], goal_frame=t.frame + 1 + j)


def _cl_active(cfg: TrainConfig) -> bool:
    return cfg.lam < 1.0 and cfg.components != "none"


def train_step(policy: Policy, opt: Adam, batch: Batch, cfg: TrainConfig, step_index: int,
               weights: BCWeights = BCWeights()) -> dict:
    """Forward, combined loss, backward and one optimizer update; returns the metrics row."""
    ccfg = cfg.contrastive
    lr = lr_schedule(step_index, cfg)
    opt.zero_grad()
    text = policy.text_batch(batch.instructions)
    try:
        with T.Tape() as tape:
            out = policy.forward(batch.views, text)
            bc, parts = bc_losses(out.heat, out.logits, batch.gts, weights, cfg.heat_sigma)
            if _cl_active(cfg):
                emb = policy.embed(out, text, batch.goal_views, batch.task_id, batch.anchor)
                sl, slg = contrastive_terms(emb, ccfg)
            else:
                # logged only: no gradient may reach the contrastive heads
                with T.no_tape():
                    emb = policy.embed(out, text, batch.goal_views, batch.task_id, batch.anchor)
                    sl, slg = contrastive_terms(emb, ccfg)
            if cfg.components == "sl":
                slg = T.scale(slg, 0.0)
            elif cfg.components == "none":
                sl, slg = T.scale(sl, 0.0), T.scale(slg, 0.0)
            total = combined_objective(bc, emb, replace(ccfg, components="both"), (sl, slg))
    except FloatingPointError as exc:
        raise FloatingPointError(f"step {step_index}: non-finite value in forward pass ({exc})") from exc
    row = {"step": step_index, "lr": lr, "bc": bc.item(), "sl": sl.item(), "slg": slg.item(), "total": total.item()}
    row.update({f"bc_{k}": v.item() for k, v in parts.items()})
    if not all(math.isfinite(v) for v in row.values()):
        raise FloatingPointError(f"step {step_index}: non-finite loss {row}")
    if total.requires_grad:
        tape.backward(total)
    opt.step(lr)
    return row


def format_metrics_row(row: dict) -> str:
    return ",".join(str(row["step"]) if c == "step" else repr(float(row[c])) for c in METRIC_COLUMNS)


@dataclass
class TrainState:
    policy: Policy
    opt: Adam
    cfg: TrainConfig
    step: int = 0
    history: list = None
    evals: list = None

    def __post_init__(self):
        self.history = [] if self.history is None else self.history
        self.evals = [] if self.evals is None else self.evals


def new_train_state(cfg: TrainConfig) -> TrainState:
    policy = Policy(cfg.model, seed=cfg.seed)
    return TrainState(policy, make_optimizer(policy, cfg), cfg)


def train(state: TrainState, replay: list[Transition], metrics_path=None, log=None,
          checkpoint_hook=None) -> TrainState:
    """Run from ``state.step`` to ``stop_at`` (or ``steps``), appending metrics rows and periodic evals."""
    cfg = state.cfg
    end = cfg.stop_at or cfg.steps
    fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        fresh = not metrics_path.exists() or state.step == 0
        fh = open(metrics_path, "w" if fresh else "a")
        if fresh:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
    lattice = Lattice(cfg.lattice, cfg.grid * cfg.patch)
    try:
        while state.step < end:
            k = state.step
            batch = sample_batch(replay, cfg, k)
            row = train_step(state.policy, state.opt, batch, cfg, k)
            state.history.append(row)
            state.step += 1
            if fh is not None:
                fh.write(format_metrics_row(row) + "\n")
                fh.flush()
            if log is not None and (k % 50 == 0 or state.step == end):
                log(f"step {k} lr {row['lr']:.2e} bc {row['bc']:.4f} sl {row['sl']:.4f} "
                    f"slg {row['slg']:.4f} total {row['total']:.4f} | trans {row['bc_translation']:.3f} "
                    f"rot {row['bc_rotation']:.3f} grip {row['bc_gripper']:.3f} coll {row['bc_collision']:.3f}")
            if state.step in cfg.eval_steps and cfg.eval_episodes > 0:
                rates = evaluate_policy(state.policy, TASKS, cfg.eval_episodes, cfg.seed, lattice,
                                        cfg.eval_max_steps)
                state.evals.append({"step": state.step, "success": rates, "mean": mean_success(rates)})
                if log is not None:
                    log(f"eval at step {state.step}: mean success {mean_success(rates):.3f}")
            if checkpoint_hook is not None:
                checkpoint_hook(state)
    finally:
        if fh is not None:
            fh.close()
    return state


# ---------------------------------------------------------------- evaluation

def mean_success(rates: dict) -> float:
    return float(np.mean(list(rates.values())))


def eval_scenes(tasks, n_episodes: int, seed: int) -> list[tuple[TaskSpec, SceneState]]:
    out = []
    for task in tasks:
        ti = task_index(task)
        for i in range(n_episodes):
            _, state, _ = sample_task(scene_seed(seed, ti, i, "eval"), task)
            out.append((task, state))
    return out


def predict_actions(policy: Policy, states: list[SceneState], instructions: list[str],
                    lattice: Lattice) -> list[Action]:
    """Greedy actions for a batch of scenes; contrastive heads are never touched."""
    res = policy.cfg.resolution
    views = np.stack([render_views(observe(s), res).images for s in states])
    with T.no_tape():
        out = policy.forward(views, policy.text_batch(instructions))
    probs = out.heat.probs
    logits = out.logits.logits.data
    return [decode_action(probs[i], logits[i], lattice) for i in range(len(states))]


def run_closed_loop(scenes, act_fn, max_steps: int, chunk: int = 32) -> list[int]:
    """Roll out ``act_fn(scene_indices, states, tasks, k) -> actions`` until success or ``max_steps``."""
    results = []
    for c in range(0, len(scenes), chunk):
        idx = list(range(c, min(c + chunk, len(scenes))))
        states = {i: scenes[i][1] for i in idx}
        done = {i: 0 for i in idx}
        for k in range(max_steps):
            live = [i for i in idx if not done[i]]
            if not live:
                break
            acts = act_fn(live, [states[i] for i in live], [scenes[i][0] for i in live], k)
            for i, a in zip(live, acts):
                states[i] = step(states[i], a)
                done[i] = check_success(states[i], scenes[i][0])
        results.extend(done[i] for i in idx)
    return results


def _rates(scenes, results) -> dict[str, float]:
    per: dict[str, list[int]] = {}
    for (task, _), r in zip(scenes, results):
        per.setdefault(task.name, []).append(r)
    return {k: float(np.mean(v)) for k, v in per.items()}


def evaluate_policy(policy: Policy, tasks, n_episodes: int, seed: int, lattice: Lattice | None = None,
                    max_steps: int = 6) -> dict[str, float]:
    """Per-task success rates on evaluation scenes (binary success, timeouts fail)."""
    lattice = lattice or Lattice(24, policy.cfg.resolution)
    scenes = eval_scenes(tasks, n_episodes, seed)

    def act(_idx, states, tasks_, _k):
        return predict_actions(policy, states, [t.instruction() for t in tasks_], lattice)

    return _rates(scenes, run_closed_loop(scenes, act, max_steps))


def evaluate_expert(tasks, n_episodes: int, seed: int, max_steps: int = 6) -> dict[str, float]:
    """The scripted expert's keyframe actions piped through the same closed loop."""
    scenes = eval_scenes(tasks, n_episodes, seed)
    plans = [[a for _, a in scripted_expert(t, s).keyframes] for t, s in scenes]

    def act(idx, states, _tasks, k):
        # past the end of a plan, hold the last pose
        return [plans[i][min(k, len(plans[i]) - 1)] if plans[i] else
                Action(s.gripper_pos, s.gripper_quat, s.gripper_open, 0) for i, s in zip(idx, states)]

    return _rates(scenes, run_closed_loop(scenes, act, max_steps))


# ---------------------------------------------------------------- embedding separation

def embedding_separation(embeddings: np.ndarray, labels) -> float:
    """Silhouette score with cosine distance; all-identical points score 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("embedding_separation: need at least two tasks")
    if np.any(counts < 2):
        raise ValueError("embedding_separation: need at least two samples per task")
    if np.all(x == x[0]):
        return 0.0
    return float(silhouette_score(x, labels, metric="cosine"))


def collect_q_vl(policy: Policy, tasks, n_per_task: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened post-fusion query embeddings on initial evaluation scenes, with task labels."""
    scenes = eval_scenes(tasks, n_per_task, seed)
    res = policy.cfg.resolution
    views = np.stack([render_views(observe(s), res).images for _, s in scenes])
    with T.no_tape():
        out = policy.forward(views, policy.text_batch([t.instruction() for t, _ in scenes]))
    q = out.fused.q_vl.data
    return q.reshape(q.shape[0], -1), np.array([task_index(t) for t, _ in scenes])

