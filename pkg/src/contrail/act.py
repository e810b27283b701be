"""Action decoding: per-view heatmaps, pooled action features, the 220-way head,
Euler binning, lattice back-projection, and the behavior-cloning losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from contrail import kernels
from contrail import tensor as T
from contrail.encode import N_VIEWS
from contrail.geometry import euler_xyz_from_quat, quat_from_euler_xyz
from contrail.nn import Linear, Module
from contrail.render import CAMERAS, WORKSPACE_HI, WORKSPACE_LO, pixel_of
from contrail.tensor import Tensor

BIN_DEG = 5.0
N_BINS = int(360 / BIN_DEG)           # 72 per axis
ROT_DIM = 3 * N_BINS                  # 216
GRIP_DIM = 2
COLL_DIM = 2
HEAD_DIM = ROT_DIM + GRIP_DIM + COLL_DIM
assert HEAD_DIM == 220


# ---------------------------------------------------------------- rotation bins

def euler_bin(q) -> tuple[int, int, int]:
    ang = np.degrees(euler_xyz_from_quat(q))
    return tuple(int(min(N_BINS - 1, math.floor((a % 360.0) / BIN_DEG))) for a in ang)


def euler_unbin(bins) -> np.ndarray:
    ang = [math.radians(int(b) * BIN_DEG + BIN_DEG / 2) for b in bins]
    return quat_from_euler_xyz(ang)


# ---------------------------------------------------------------- ground truth

@dataclass
class GroundTruthAction:
    translation: np.ndarray
    euler_bins: np.ndarray   # (3,)
    gripper: int
    collision: int
    pixels: np.ndarray       # (5, 2) row, col


def ground_truth(action, resolution: int, cameras=CAMERAS) -> GroundTruthAction:
    pix = np.array([pixel_of(cam, action.translation, resolution) for cam in cameras])
    return GroundTruthAction(np.asarray(action.translation, dtype=np.float64).copy(),
                             np.array(euler_bin(action.rotation)), int(action.gripper_open),
                             int(action.collision_allowed), pix)


# ---------------------------------------------------------------- heatmaps

@dataclass
class HeatmapSet:
    log_probs: Tensor  # (B, 5, H*W)
    resolution: int

    @property
    def probs(self) -> np.ndarray:
        b = self.log_probs.shape[0]
        r = self.resolution
        return np.exp(self.log_probs.data).reshape(b, N_VIEWS, r, r)


class HeatmapDecoder(Module):
    """Token grid -> 2D convolution -> bilinear upsampling -> per-view softmax."""

    def __init__(self, rng, d: int, grid: int, resolution: int, kernel: int = 3):
        super().__init__()
        self.grid, self.resolution = grid, resolution
        fan = d * kernel * kernel
        self.w = self.param("w", rng.normal(0.0, 1.0 / math.sqrt(fan), size=(1, d, kernel, kernel)))
        self.b = self.param("b", np.zeros(1))

    def logits(self, context_v: Tensor) -> Tensor:
        b, n, d = context_v.shape
        g = self.grid
        if n != N_VIEWS * g * g:
            raise ValueError(f"decode_heatmaps: {n} tokens do not form {N_VIEWS} {g}x{g} grids")
        x = T.transpose(T.reshape(context_v, (b * N_VIEWS, g, g, d)), (0, 3, 1, 2))
        y = T.conv2d(x, self.w, self.b)                      # (B*5, 1, G, G)
        y = T.upsample_bilinear(y, (self.resolution, self.resolution))
        return T.reshape(y, (b, N_VIEWS, self.resolution * self.resolution))

    def __call__(self, context_v: Tensor) -> HeatmapSet:
        return HeatmapSet(T.log_softmax(self.logits(context_v)), self.resolution)


def pooled_token_weights(heat: HeatmapSet, grid: int) -> Tensor:
    """Heatmap mass per token cell (P x P sum-pool), divided by the view count; sums to 1."""
    b = heat.log_probs.shape[0]
    r = heat.resolution
    p = r // grid
    h = T.reshape(T.exp(heat.log_probs), (b, N_VIEWS, grid, p, grid, p))
    w = T.sum(h, axis=(3, 5))
    return T.scale(T.reshape(w, (b, 1, N_VIEWS * grid * grid)), 1.0 / N_VIEWS)


def action_features(context_v: Tensor, weights: Tensor) -> Tensor:
    """[sum over tokens of weight * token, elementwise max over tokens]: (B, 2d).

    ``weights`` is (B, 1, N) token-resolution heatmap mass, e.g. from
    :func:`pooled_token_weights`.
    """
    b, n, d = context_v.shape
    weighted = T.reshape(T.matmul(weights, context_v), (b, d))
    pooled = T.max(context_v, axis=1)
    return T.concat([weighted, pooled], axis=1)


@dataclass
class ActionLogits:
    logits: Tensor  # (B, 220)

    @property
    def rotation(self) -> Tensor:
        b = self.logits.shape[0]
        return T.reshape(T.slice_axis(self.logits, 1, 0, ROT_DIM), (b, 3, N_BINS))

    @property
    def gripper(self) -> Tensor:
        return T.slice_axis(self.logits, 1, ROT_DIM, ROT_DIM + GRIP_DIM)

    @property
    def collision(self) -> Tensor:
        return T.slice_axis(self.logits, 1, ROT_DIM + GRIP_DIM, HEAD_DIM)


class ActionHead(Module):
    def __init__(self, rng, d: int):
        super().__init__()
        self.fc = self.child("fc", Linear(rng, 2 * d, HEAD_DIM))
        if self.fc.w.shape[1] != ROT_DIM + GRIP_DIM + COLL_DIM:
            raise AssertionError("action head width must be 216 + 2 + 2")

    def __call__(self, f: Tensor) -> ActionLogits:
        return ActionLogits(self.fc(f))


# ---------------------------------------------------------------- translation decoding

class Lattice:
    """Cell-centered L x L x L grid over the workspace, flattened in (i, j, k) order."""

    def __init__(self, size: int, resolution: int, cameras=CAMERAS, lo=WORKSPACE_LO, hi=WORKSPACE_HI):
        self.size, self.resolution = size, resolution
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        axes = [lo[a] + (np.arange(size) + 0.5) * (hi[a] - lo[a]) / size for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        self.points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], 1)
        self.cell = (hi - lo) / size
        rows, cols = [], []
        for cam in cameras:
            a, b = cam.affine(resolution)
            rc = self.points @ a.T + b
            rows.append(rc[:, 0])
            cols.append(rc[:, 1])
        self.rows = np.ascontiguousarray(rows)
        self.cols = np.ascontiguousarray(cols)


def lattice_scores(heat: np.ndarray, lattice: Lattice) -> np.ndarray:
    return kernels.lattice_scores(np.ascontiguousarray(heat, dtype=np.float64), lattice.rows, lattice.cols)


def translation_decode(heat: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Lattice point with the highest summed heatmap score; ties go to the lowest index."""
    scores = lattice_scores(heat, lattice)
    return lattice.points[int(np.argmax(scores))].copy()


# ---------------------------------------------------------------- losses

@dataclass
class BCWeights:
    translation: float = 1.0
    rotation: float = 1.0
    gripper: float = 1.0
    collision: float = 1.0


def _stack_gt(gts, resolution: int):
    pix = np.stack([g.pixels for g in gts])
    if np.any(pix < 0) or np.any(pix >= resolution):
        raise ValueError("bc_losses: ground-truth pixel outside the image")
    flat = pix[..., 0] * resolution + pix[..., 1]
    bins = np.stack([g.euler_bins for g in gts])
    grip = np.array([g.gripper for g in gts])
    coll = np.array([g.collision for g in gts])
    return flat, bins, grip, coll


def soft_pixel_targets(pixels: np.ndarray, resolution: int, sigma: float) -> np.ndarray:
    """(B, 5, H*W) Gaussian target distributions centered on the ground-truth pixels."""
    ax = np.arange(resolution)
    dr = ax[None, None, :] - pixels[..., 0:1]
    dc = ax[None, None, :] - pixels[..., 1:2]
    g = np.exp(-(dr[..., :, None] ** 2 + dc[..., None, :] ** 2) / (2.0 * sigma * sigma))
    g = g.reshape(*pixels.shape[:2], resolution * resolution)
    return g / g.sum(axis=-1, keepdims=True)


def bc_losses(heat: HeatmapSet, logits: ActionLogits, gts, weights: BCWeights = BCWeights(),
              heat_sigma: float = 0.0):
    """Cross-entropy terms averaged over the batch; returns (total, parts dict of Tensors).

    With ``heat_sigma > 0`` the per-view pixel target is a Gaussian of that
    width (in pixels) around the ground-truth pixel instead of a one-hot.
    """
    flat, bins, grip, coll = _stack_gt(gts, heat.resolution)
    if heat_sigma > 0:
        target = soft_pixel_targets(np.stack([g.pixels for g in gts]), heat.resolution, heat_sigma)
        target = Tensor(target.astype(heat.log_probs.data.dtype))
        per_view = T.sum(T.mul(heat.log_probs, target), axis=-1)
        trans = T.scale(T.mean(per_view), -1.0)
    else:
        trans = T.scale(T.mean(T.gather(heat.log_probs, flat)), -1.0)
    rot = T.scale(T.mean(T.gather(T.log_softmax(logits.rotation), bins)), -1.0)
    gr = T.scale(T.mean(T.gather(T.log_softmax(logits.gripper), grip)), -1.0)
    co = T.scale(T.mean(T.gather(T.log_softmax(logits.collision), coll)), -1.0)
    total = T.add(T.add(T.scale(trans, weights.translation), T.scale(rot, weights.rotation)),
                  T.add(T.scale(gr, weights.gripper), T.scale(co, weights.collision)))
    return total, {"translation": trans, "rotation": rot, "gripper": gr, "collision": co}


def decode_action(heat: np.ndarray, logits: np.ndarray, lattice: Lattice):
    """Greedy action from one sample's heatmaps (5, H, W) and head logits (220,)."""
    from contrail.tabletop import Action

    trans = translation_decode(heat, lattice)
    bins = logits[:ROT_DIM].reshape(3, N_BINS).argmax(axis=1)
    grip = int(np.argmax(logits[ROT_DIM:ROT_DIM + GRIP_DIM]))
    coll = int(np.argmax(logits[ROT_DIM + GRIP_DIM:]))
    return Action(trans, euler_unbin(bins), grip, coll)
