"""Orthographic five-view rendering of colored point clouds, plus SE(3) augmentation.

Each view maps normalized workspace coordinates ``n = (p - lo) / (hi - lo)``
to (row, col, depth) in [0, 1] by picking one axis for each, optionally flipped
(``1 - n``). Row/col are scaled to pixel units, so pixel (i, j) covers
``[i, i+1) x [j, j+1)`` and its center is ``(i + 0.5, j + 0.5)``.

====== ========== ========== ===========
view   row        col        depth
====== ========== ========== ===========
front  1 - n_z    1 - n_y    1 - n_x
left   1 - n_z    n_x        1 - n_y
right  1 - n_z    1 - n_x    n_y
behind 1 - n_z    n_y        n_x
top    n_x        n_y        1 - n_z
====== ========== ========== ===========

Image channels, in order: R, G, B, depth, x, y, z. Depth is the distance from
the camera-side face of the workspace box divided by the box extent along the
view axis. Background pixels hold RGB 0, depth 0 and xyz at the box center.
A splat covers exactly one pixel; the nearest point wins, equal depths go to
the smaller point index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from contrail import kernels
from contrail.geometry import quat_from_yaw, quat_mul, quat_normalize, rot_z

WORKSPACE_LO = np.array([-0.3, -0.3, -0.2])
WORKSPACE_HI = np.array([0.3, 0.3, 0.4])
VIEW_IDS = ("front", "left", "right", "behind", "top")
CHANNELS = ("r", "g", "b", "depth", "x", "y", "z")

AUG_TRANSLATION = 0.125
AUG_YAW_DEG = 45.0
AUG_MAX_TRIES = 100


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors differ in length")

    def __len__(self) -> int:
        return len(self.points)

    def clipped(self, lo=WORKSPACE_LO, hi=WORKSPACE_HI) -> "PointCloud":
        keep = np.all((self.points >= lo) & (self.points <= hi), axis=1)
        return PointCloud(self.points[keep], self.colors[keep])


@dataclass(frozen=True)
class ViewCamera:
    view_id: str
    row_axis: int
    row_flip: bool
    col_axis: int
    col_flip: bool
    depth_axis: int
    depth_flip: bool
    lo: tuple[float, float, float] = tuple(WORKSPACE_LO)
    hi: tuple[float, float, float] = tuple(WORKSPACE_HI)

    def _norm(self, p: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return (p - lo) / (hi - lo)

    def normalized(self, p: np.ndarray) -> np.ndarray:
        """(..., 3) world points to (..., 3) normalized (row, col, depth)."""
        n = self._norm(np.asarray(p, dtype=np.float64))
        out = []
        for ax, flip in ((self.row_axis, self.row_flip), (self.col_axis, self.col_flip),
                         (self.depth_axis, self.depth_flip)):
            out.append(1.0 - n[..., ax] if flip else n[..., ax])
        return np.stack(out, axis=-1)

    def affine(self, resolution: int) -> tuple[np.ndarray, np.ndarray]:
        """(A, b) with (row, col) = A @ p + b in pixel units."""
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        a = np.zeros((2, 3))
        b = np.zeros(2)
        for k, (ax, flip) in enumerate(((self.row_axis, self.row_flip), (self.col_axis, self.col_flip))):
            s = resolution / (hi[ax] - lo[ax])
            if flip:
                a[k, ax] = -s
                b[k] = resolution + s * lo[ax]
            else:
                a[k, ax] = s
                b[k] = -s * lo[ax]
        return a, b


CAMERAS: tuple[ViewCamera, ...] = (
    ViewCamera("front", 2, True, 1, True, 0, True),
    ViewCamera("left", 2, True, 0, False, 1, True),
    ViewCamera("right", 2, True, 0, True, 1, False),
    ViewCamera("behind", 2, True, 1, False, 0, False),
    ViewCamera("top", 0, False, 1, False, 2, True),
)


def project_point(camera: ViewCamera, xyz, resolution: int) -> tuple[np.ndarray, bool]:
    """Continuous (row, col) in pixel units; out-of-bounds input is clamped and flagged."""
    p = np.asarray(xyz, dtype=np.float64)
    lo, hi = np.asarray(camera.lo), np.asarray(camera.hi)
    clamped = np.clip(p, lo, hi)
    flagged = bool(np.any(clamped != p))
    n = camera.normalized(clamped)
    return n[..., :2] * resolution, flagged


def unproject(camera: ViewCamera, row: float, col: float, depth: float, resolution: int) -> np.ndarray:
    """World point at continuous pixel (row, col) and normalized depth."""
    lo, hi = np.asarray(camera.lo), np.asarray(camera.hi)
    n = np.zeros(3)
    for val, ax, flip in ((row / resolution, camera.row_axis, camera.row_flip),
                          (col / resolution, camera.col_axis, camera.col_flip),
                          (depth, camera.depth_axis, camera.depth_flip)):
        n[ax] = 1.0 - val if flip else val
    return lo + n * (hi - lo)


def pixel_of(camera: ViewCamera, xyz, resolution: int) -> tuple[int, int]:
    """Integer pixel containing ``xyz`` (the pixel whose center is nearest)."""
    rc, _ = project_point(camera, xyz, resolution)
    r, c = np.minimum(np.floor(rc).astype(int), resolution - 1)
    return int(r), int(c)


@dataclass
class VirtualViews:
    images: np.ndarray  # (5, 7, H, W)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]


def render_views(cloud: PointCloud, resolution: int,
                 cameras: Sequence[ViewCamera] = CAMERAS) -> VirtualViews:
    if len(cloud) == 0:
        raise ValueError("render_views: empty point cloud")
    pts, cols = cloud.points, cloud.colors
    center = (np.asarray(cameras[0].lo) + np.asarray(cameras[0].hi)) / 2
    images = np.zeros((len(cameras), 7, resolution, resolution))
    for v, cam in enumerate(cameras):
        n = cam.normalized(pts)
        rc = np.minimum(np.floor(n[:, :2] * resolution).astype(np.int64), resolution - 1)
        rc = np.maximum(rc, 0)
        pix = rc[:, 0] * resolution + rc[:, 1]
        win = kernels.zbuffer_winners(pix, n[:, 2], resolution * resolution)
        img = images[v].reshape(7, -1)
        fg = win >= 0
        idx = win[fg]
        img[0:3, fg] = cols[idx].T
        img[3, fg] = n[idx, 2]
        img[4:7, fg] = pts[idx].T
        img[4:7, ~fg] = center[:, None]
    return VirtualViews(images)


def write_pgm_views(views: VirtualViews, out_dir, prefix: str = "view") -> list[Path]:
    """Dump every (view, channel) plane as 8-bit binary PGM.

    Files are named ``{prefix}_{view}_{channel}.pgm`` with channels ordered
    r, g, b, depth, x, y, z. Color and depth planes map [0, 1] to 0..255; xyz
    planes map the workspace range of their axis to 0..255.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for v, vid in enumerate(VIEW_IDS[:len(views.images)]):
        for c, ch in enumerate(CHANNELS):
            plane = views.images[v, c]
            if c >= 4:
                ax = c - 4
                plane = (plane - WORKSPACE_LO[ax]) / (WORKSPACE_HI[ax] - WORKSPACE_LO[ax])
            px = np.clip(np.round(plane * 255), 0, 255).astype(np.uint8)
            h, w = px.shape
            path = out_dir / f"{prefix}_{vid}_{ch}.pgm"
            path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())
            paths.append(path)
    return paths


# ---------------------------------------------------------------- augmentation

def apply_rigid(cloud: PointCloud, actions: Sequence, t, yaw: float):
    """Rotate about the world z axis by ``yaw`` then translate by ``t``."""
    r = rot_z(yaw)
    t = np.asarray(t, dtype=np.float64)
    q = quat_from_yaw(yaw)
    pts = cloud.points @ r.T + t
    new_actions = [replace(a, translation=r @ a.translation + t,
                           rotation=quat_normalize(quat_mul(q, a.rotation))) for a in actions]
    return PointCloud(pts, cloud.colors.copy()), new_actions


def sample_augmentation(rng: np.random.Generator, actions: Sequence) -> tuple[np.ndarray, float]:
    """Draw (t, yaw) keeping every action translation inside the workspace; identity after too many tries."""
    for _ in range(AUG_MAX_TRIES):
        t = rng.uniform(-AUG_TRANSLATION, AUG_TRANSLATION, size=3)
        yaw = math.radians(rng.uniform(-AUG_YAW_DEG, AUG_YAW_DEG))
        r = rot_z(yaw)
        ok = all(np.all(r @ a.translation + t >= WORKSPACE_LO) and
                 np.all(r @ a.translation + t <= WORKSPACE_HI) for a in actions)
        if ok:
            return t, yaw
    return np.zeros(3), 0.0


def augment(cloud: PointCloud, actions: Sequence, seed, clouds_extra: Sequence[PointCloud] = ()):
    """Random rigid perturbation applied identically to the cloud and the action labels.

    ``clouds_extra`` (for instance the goal observation) receive the same
    transform. Returns (cloud, actions) or (cloud, actions, extras).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t, yaw = sample_augmentation(rng, actions)
    c, acts = apply_rigid(cloud, actions, t, yaw)
    c = c.clipped()
    if not clouds_extra:
        return c, acts
    extras = [apply_rigid(e, [], t, yaw)[0].clipped() for e in clouds_extra]
    return c, acts, extras
