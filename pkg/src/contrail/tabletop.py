"""Kinematic tabletop world with templated language tasks and a scripted expert.

Dynamics are teleport-style: the gripper jumps to the commanded pose carrying
any held object rigidly, then applies the commanded gripper state. Closing
within ``GRASP_RADIUS`` of a block grasps the nearest one; opening drops the
held block onto the support below it (pad top or table). A button counts as
pressed when the gripper ends a step within ``PRESS_RADIUS`` horizontally and
no higher than ``PRESS_SLACK`` above its top face.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from contrail.geometry import quat_from_yaw, quat_mul, quat_conj, quat_normalize, quat_to_matrix, yaw_of
from contrail.render import WORKSPACE_HI, WORKSPACE_LO, PointCloud

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.10, 0.20, 0.85),
}
TABLE_COLOR = (0.45, 0.40, 0.35)
PAD_COLOR = (0.92, 0.92, 0.92)
GRIPPER_OPEN_COLOR = (1.00, 0.90, 0.20)
GRIPPER_CLOSED_COLOR = (0.10, 0.10, 0.10)

BLOCK_SIZE = 0.06
BUTTON_SIZE = 0.07
BUTTON_HEIGHT = 0.03
PAD_SIZE = 0.16
PAD_HEIGHT = 0.02
TARGET_RADIUS = 0.07

GRASP_RADIUS = 0.07
PRESS_RADIUS = 0.06
PRESS_SLACK = 0.05
APPROACH_HEIGHT = 0.15
HOME = np.array([0.0, 0.0, 0.30])
PLACE_XY = 0.16  # objects are placed with |x|, |y| <= PLACE_XY
MAX_PLACEMENT_TRIES = 1000
POINT_BUDGET = 4096  # upper bound on observe() cloud size

FAMILIES = ("push-to-target", "pick-and-place", "press-button")


@dataclass(frozen=True)
class TaskSpec:
    family: str
    variant: tuple[str, ...]
    instruction_template: str

    @property
    def name(self) -> str:
        return f"{self.family}/{'-'.join(self.variant)}"

    def instruction(self) -> str:
        return self.instruction_template.format(*self.variant)


TASKS: tuple[TaskSpec, ...] = (
    TaskSpec("push-to-target", ("red", "green"), "push the {} block to the {} target"),
    TaskSpec("push-to-target", ("green", "blue"), "push the {} block to the {} target"),
    TaskSpec("push-to-target", ("blue", "red"), "push the {} block to the {} target"),
    TaskSpec("pick-and-place", ("red",), "pick up the {} block and place it on the pad"),
    TaskSpec("pick-and-place", ("green",), "pick up the {} block and place it on the pad"),
    TaskSpec("pick-and-place", ("blue",), "pick up the {} block and place it on the pad"),
    TaskSpec("press-button", ("red",), "press the {} button"),
    TaskSpec("press-button", ("green",), "press the {} button"),
    TaskSpec("press-button", ("blue",), "press the {} button"),
)


def task_index(task: TaskSpec) -> int:
    return TASKS.index(task)


@dataclass
class SceneObject:
    id: str
    shape: str  # block | button | target | pad
    color: tuple[float, float, float]
    position: np.ndarray
    quat: np.ndarray
    size: float

    @property
    def height(self) -> float:
        return {"block": BLOCK_SIZE, "button": BUTTON_HEIGHT, "pad": PAD_HEIGHT, "target": 0.0}[self.shape]


@dataclass
class SceneState:
    objects: list[SceneObject]
    gripper_pos: np.ndarray
    gripper_quat: np.ndarray
    gripper_open: int = 1
    held: str | None = None
    pressed: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def obj(self, oid: str) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def copy(self) -> "SceneState":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class Action:
    translation: np.ndarray
    rotation: np.ndarray
    gripper_open: int
    collision_allowed: int

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation,
                               [float(self.gripper_open), float(self.collision_allowed)]])

    @classmethod
    def from_vector(cls, v) -> "Action":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3].copy(), v[3:7].copy(), int(round(v[7])), int(round(v[8])))


@dataclass
class Episode:
    task: TaskSpec
    instruction: str
    keyframes: list[tuple[SceneState, Action]]
    success: bool
    seed: int = 0


# ---------------------------------------------------------------- sampling

_FOOTPRINT = {"block": 0.045, "button": 0.05, "target": TARGET_RADIUS, "pad": 0.115}


def _scene_layout(task: TaskSpec) -> list[tuple[str, str, str]]:
    """(id, shape, color name) for each object of this family."""
    blocks = [(f"{c}_block", "block", c) for c in COLORS]
    if task.family == "push-to-target":
        return blocks + [(f"{task.variant[1]}_target", "target", task.variant[1])]
    if task.family == "pick-and-place":
        return blocks + [("pad", "pad", "")]
    return [(f"{c}_button", "button", c) for c in COLORS]


def sample_task(seed: int, task: TaskSpec | None = None) -> tuple[TaskSpec, SceneState, str]:
    """Deterministic scene for ``seed``; the task is drawn from the seed unless given."""
    rng = np.random.default_rng(seed)
    if task is None:
        task = TASKS[int(rng.integers(len(TASKS)))]
    layout = _scene_layout(task)
    for _ in range(MAX_PLACEMENT_TRIES):
        xy = rng.uniform(-PLACE_XY, PLACE_XY, size=(len(layout), 2))
        yaws = rng.uniform(-math.pi / 4, math.pi / 4, size=len(layout))
        ok = True
        for i in range(len(layout)):
            for j in range(i):
                need = _FOOTPRINT[layout[i][1]] + _FOOTPRINT[layout[j][1]] + 0.03
                if np.linalg.norm(xy[i] - xy[j]) < need:
                    ok = False
        if ok:
            break
    else:
        raise RuntimeError(f"sample_task: no collision-free layout for seed {seed}")
    objects = []
    for (oid, shape, cname), p, yaw in zip(layout, xy, yaws):
        if shape == "block":
            z, size, color = BLOCK_SIZE / 2, BLOCK_SIZE, COLORS[cname]
        elif shape == "button":
            z, size, color = BUTTON_HEIGHT / 2, BUTTON_SIZE, COLORS[cname]
            yaw = 0.0
        elif shape == "target":
            z, size, color = 0.001, 2 * TARGET_RADIUS, COLORS[cname]
            yaw = 0.0
        else:
            z, size, color = PAD_HEIGHT / 2, PAD_SIZE, PAD_COLOR
            yaw = 0.0
        objects.append(SceneObject(oid, shape, color, np.array([p[0], p[1], z]), quat_from_yaw(yaw), size))
    state = SceneState(objects, HOME.copy(), quat_from_yaw(0.0), 1)
    return task, state, task.instruction()


# ---------------------------------------------------------------- dynamics

def _support_height(state: SceneState, xy: np.ndarray, ignore: str) -> float:
    top = 0.0
    for o in state.objects:
        if o.id == ignore or o.shape != "pad":
            continue
        if np.all(np.abs(xy - o.position[:2]) <= o.size / 2):
            top = max(top, o.position[2] + PAD_HEIGHT / 2)
    return top


def step(state: SceneState, action: Action) -> SceneState:
    new = state.copy()
    target = np.asarray(action.translation, dtype=np.float64)
    clamped = np.clip(target, WORKSPACE_LO, WORKSPACE_HI)
    new.metadata = {"clamped": bool(np.any(clamped != target))}
    q_old, q_new = state.gripper_quat, quat_normalize(action.rotation)
    if new.held is not None:
        o = new.obj(new.held)
        rel = quat_to_matrix(q_new) @ quat_to_matrix(q_old).T
        o.position = clamped + rel @ (o.position - state.gripper_pos)
        o.quat = quat_normalize(quat_mul(quat_mul(q_new, quat_conj(q_old)), o.quat))
    new.gripper_pos = clamped
    new.gripper_quat = q_new

    for o in new.objects:
        if o.shape == "button" and o.id not in new.pressed:
            horiz = np.linalg.norm(clamped[:2] - o.position[:2])
            if horiz <= PRESS_RADIUS and clamped[2] <= o.position[2] + BUTTON_HEIGHT / 2 + PRESS_SLACK:
                new.pressed = new.pressed + (o.id,)

    if action.gripper_open and new.held is not None:
        o = new.obj(new.held)
        o.position[2] = _support_height(new, o.position[:2], o.id) + BLOCK_SIZE / 2
        o.quat = quat_from_yaw(yaw_of(o.quat))
        new.held = None
    elif not action.gripper_open and state.gripper_open and new.held is None:
        best, best_d = None, GRASP_RADIUS
        for o in new.objects:
            if o.shape == "block":
                d = float(np.linalg.norm(o.position - clamped))
                if d <= best_d:
                    best, best_d = o, d
        if best is not None:
            new.held = best.id
    new.gripper_open = int(action.gripper_open)
    return new


def check_success(state: SceneState, task: TaskSpec) -> int:
    if task.family == "press-button":
        return int(f"{task.variant[0]}_button" in state.pressed)
    block = state.obj(f"{task.variant[0]}_block")
    if task.family == "push-to-target":
        tgt = state.obj(f"{task.variant[1]}_target")
        near = np.linalg.norm(block.position[:2] - tgt.position[:2]) <= TARGET_RADIUS
        return int(near and block.position[2] <= BLOCK_SIZE)
    pad = state.obj("pad")
    on = np.all(np.abs(block.position[:2] - pad.position[:2]) <= PAD_SIZE / 2)
    rest = abs(block.position[2] - (pad.position[2] + PAD_HEIGHT / 2 + BLOCK_SIZE / 2)) < 1e-9
    return int(on and rest and state.held != block.id)


# ---------------------------------------------------------------- expert

def scripted_expert(task: TaskSpec, state: SceneState, seed: int = 0) -> Episode:
    """Waypoint demonstration, replayed through ``step`` to set ``success``."""
    if task.family == "press-button":
        b = state.obj(f"{task.variant[0]}_button")
        top = b.position[2] + BUTTON_HEIGHT / 2
        q = quat_from_yaw(0.0)
        plan = [
            Action([*b.position[:2], APPROACH_HEIGHT], q, 0, 0),
            Action([*b.position[:2], top], q, 0, 1),
        ]
    else:
        blk = state.obj(f"{task.variant[0]}_block")
        q = quat_from_yaw(yaw_of(blk.quat))
        if task.family == "push-to-target":
            tgt = state.obj(f"{task.variant[1]}_target")
            plan = [
                Action(blk.position.copy(), q, 0, 1),
                Action([*tgt.position[:2], blk.position[2]], q, 0, 1),
                Action([*tgt.position[:2], blk.position[2] + 0.07], q, 1, 0),
            ]
        else:
            pad = state.obj("pad")
            plan = [
                Action([*blk.position[:2], APPROACH_HEIGHT], q, 1, 0),
                Action(blk.position.copy(), q, 0, 1),
                Action([*pad.position[:2], APPROACH_HEIGHT], q, 0, 0),
                Action([*pad.position[:2], APPROACH_HEIGHT], q, 1, 0),
            ]
    keyframes, s = [], state
    for a in plan:
        if np.any(a.translation < WORKSPACE_LO) or np.any(a.translation > WORKSPACE_HI):
            return Episode(task, task.instruction(), keyframes, False, seed)
        keyframes.append((s, a))
        s = step(s, a)
    return Episode(task, task.instruction(), keyframes, bool(check_success(s, task)), seed)


def replay(episode: Episode) -> SceneState:
    s = episode.keyframes[0][0]
    for _, a in episode.keyframes:
        s = step(s, a)
    return s


# ---------------------------------------------------------------- observation

def _grid(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n - 0.5


def _box_surface(dx: float, dy: float, dz: float, n: int) -> np.ndarray:
    """Points on the 6 faces of an axis-aligned box centered at the origin."""
    u, v = np.meshgrid(_grid(n), _grid(n), indexing="ij")
    u, v = u.ravel(), v.ravel()
    faces = []
    for sgn in (-0.5, 0.5):
        faces.append(np.stack([u * dx, v * dy, np.full_like(u, sgn * dz)], 1))
        faces.append(np.stack([u * dx, np.full_like(u, sgn * dy), v * dz], 1))
        faces.append(np.stack([np.full_like(u, sgn * dx), u * dy, v * dz], 1))
    return np.concatenate(faces)


_TABLE_N = 24
_FACE_N = 4


def _object_points(o: SceneObject) -> np.ndarray:
    if o.shape == "target":
        u, v = np.meshgrid(_grid(8), _grid(8), indexing="ij")
        local = np.stack([u.ravel() * o.size, v.ravel() * o.size, np.zeros(u.size)], 1)
        local = local[np.linalg.norm(local[:, :2], axis=1) <= o.size / 2]
    elif o.shape == "pad":
        local = _box_surface(o.size, o.size, PAD_HEIGHT, 6)
    elif o.shape == "button":
        local = _box_surface(o.size, o.size, BUTTON_HEIGHT, _FACE_N)
    else:
        local = _box_surface(o.size, o.size, o.size, _FACE_N)
    return local @ quat_to_matrix(o.quat).T + o.position


def _gripper_points(state: SceneState) -> np.ndarray:
    r = quat_to_matrix(state.gripper_quat)
    half = 0.03 if state.gripper_open else 0.012
    zs = np.linspace(0.0, 0.05, 6)
    fingers = [np.stack([np.full(6, s * half), np.zeros(6), zs], 1) for s in (-1, 1)]
    palm = np.stack([np.linspace(-half, half, 5), np.zeros(5), np.full(5, 0.05)], 1)
    stem = np.stack([np.zeros(4), np.zeros(4), np.linspace(0.06, 0.09, 4)], 1)
    local = np.concatenate(fingers + [palm, stem])
    return local @ r.T + state.gripper_pos


def observe(state: SceneState) -> PointCloud:
    """Surface-sampled colored cloud of table, objects and gripper, clipped to the workspace."""
    u, v = np.meshgrid(_grid(_TABLE_N), _grid(_TABLE_N), indexing="ij")
    span = WORKSPACE_HI[:2] - WORKSPACE_LO[:2]
    center = (WORKSPACE_HI[:2] + WORKSPACE_LO[:2]) / 2
    table = np.stack([u.ravel() * span[0] + center[0], v.ravel() * span[1] + center[1],
                      np.zeros(u.size)], 1)
    pts = [table]
    cols = [np.tile(TABLE_COLOR, (len(table), 1))]
    for o in state.objects:
        p = _object_points(o)
        pts.append(p)
        cols.append(np.tile(o.color, (len(p), 1)))
    g = _gripper_points(state)
    pts.append(g)
    cols.append(np.tile(GRIPPER_OPEN_COLOR if state.gripper_open else GRIPPER_CLOSED_COLOR, (len(g), 1)))
    cloud = PointCloud(np.concatenate(pts), np.concatenate(cols)).clipped()
    assert len(cloud.points) <= POINT_BUDGET
    return cloud
