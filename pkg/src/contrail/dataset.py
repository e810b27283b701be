"""Episode dataset file.

Layout (container kind ``EPISODES``, version 1): the JSON header holds one
record per episode (task name, variant, instruction, seed, success flag and
the full scene state of every keyframe); the array section holds, for episode
``e`` and keyframe ``k``, ``e{e}/k{k}/points`` (N, 3), ``e{e}/k{k}/colors``
(N, 3) and ``e{e}/k{k}/action`` (9,) = translation, quaternion (w, x, y, z),
gripper-open, collision-allowed. All numbers are little-endian float64.
"""
from __future__ import annotations

import numpy as np

from contrail.container import read_container, write_container
from contrail.tabletop import TASKS, Action, Episode, SceneObject, SceneState, observe

KIND = b"EPISODES"
VERSION = 1
_BY_NAME = {t.name: t for t in TASKS}


def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def state_to_dict(s: SceneState) -> dict:
    return {
        "objects": [{"id": o.id, "shape": o.shape, "color": list(o.color), "position": _floats(o.position),
                     "quat": _floats(o.quat), "size": float(o.size)} for o in s.objects],
        "gripper_pos": _floats(s.gripper_pos),
        "gripper_quat": _floats(s.gripper_quat),
        "gripper_open": int(s.gripper_open),
        "held": s.held,
        "pressed": list(s.pressed),
        "metadata": {k: v for k, v in s.metadata.items()},
    }


def state_from_dict(d: dict) -> SceneState:
    objs = [SceneObject(o["id"], o["shape"], tuple(o["color"]), np.array(o["position"]),
                        np.array(o["quat"]), o["size"]) for o in d["objects"]]
    return SceneState(objs, np.array(d["gripper_pos"]), np.array(d["gripper_quat"]), d["gripper_open"],
                      d["held"], tuple(d["pressed"]), dict(d["metadata"]))


def save_episodes(path, episodes: list[Episode]) -> None:
    records, arrays = [], []
    for e, ep in enumerate(episodes):
        records.append({"task": ep.task.name, "family": ep.task.family, "variant": list(ep.task.variant),
                        "instruction": ep.instruction, "seed": int(ep.seed), "success": bool(ep.success),
                        "states": [state_to_dict(s) for s, _ in ep.keyframes]})
        for k, (s, a) in enumerate(ep.keyframes):
            cloud = observe(s)
            arrays += [(f"e{e}/k{k}/points", cloud.points), (f"e{e}/k{k}/colors", cloud.colors),
                       (f"e{e}/k{k}/action", a.as_vector())]
    write_container(path, KIND, VERSION, {"episodes": records}, arrays)


def load_episodes(path) -> list[Episode]:
    version, meta, arrays, _ = read_container(path, KIND)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported episode file version {version}")
    out = []
    for e, rec in enumerate(meta["episodes"]):
        task = _BY_NAME[rec["task"]]
        kfs = [(state_from_dict(sd), Action.from_vector(arrays[f"e{e}/k{k}/action"]))
               for k, sd in enumerate(rec["states"])]
        out.append(Episode(task, rec["instruction"], kfs, rec["success"], rec["seed"]))
    return out
