"""Contrastive alignment objectives and their projection heads.

Both contrastive objectives are exposed as losses to minimize, i.e. the
negated log-ratio sums. Each is the sum of two directions (anchor->positive
and positive->anchor), each averaged over the batch anchors.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from contrail import tensor as T
from contrail.nn import Linear, Module
from contrail.tensor import Tensor

COMPONENTS = ("both", "sl", "none")


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    lam: float = 0.5
    embed_dim: int = 32
    components: str = "both"  # both | sl (state-language only) | none

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.components not in COMPONENTS:
            raise ValueError(f"components must be one of {COMPONENTS}")


@dataclass
class EmbeddingBatch:
    state: Tensor   # (N, e) from q_v
    text: Tensor    # (N, e) from the sentence feature
    joint: Tensor   # (N, e) from q_vl
    goal: Tensor    # (N, e) from pooled goal visual features
    task_id: np.ndarray
    anchor: np.ndarray | None = field(default=None)  # rows usable as goal positives

    def __post_init__(self):
        self.task_id = np.asarray(self.task_id)
        if self.anchor is None:
            self.anchor = np.ones(len(self.task_id), dtype=bool)


def similarity(a, b, tau: float) -> float:
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return math.exp(float(np.dot(a, b)) / tau)


def _check_unit(name: str, x: Tensor) -> None:
    n = np.linalg.norm(x.data, axis=-1)
    if not np.all(np.abs(n - 1.0) < 1e-6):
        raise ValueError(f"{name}: embedding rows must be unit-normalized")


def _info_nce(a: Tensor, b: Tensor, tau: float, allowed: np.ndarray, anchors: np.ndarray) -> Tensor:
    """-(mean_i log softmax_row(S)[i,i] + mean_i log softmax_col(S)[i,i]) over valid anchors."""
    n = a.shape[0]
    s = T.scale(T.matmul(a, T.transpose(b)), 1.0 / tau)
    diag = np.arange(n)
    w = anchors.astype(np.float64)
    count = w.sum()
    if count == 0:
        return T.scale(T.sum(s), 0.0)
    w = Tensor(w / count)
    row = T.gather(T.log_softmax(s, mask=allowed), diag)
    col = T.gather(T.log_softmax(T.transpose(s), mask=allowed.T), diag)
    return T.scale(T.add(T.sum(T.mul(row, w)), T.sum(T.mul(col, w))), -1.0)


def loss_s_l(batch: EmbeddingBatch, cfg: ContrastiveConfig) -> Tensor:
    """State-language loss; negatives are all other batch rows."""
    _check_unit("loss_s_l", batch.state)
    _check_unit("loss_s_l", batch.text)
    n = batch.state.shape[0]
    allowed = np.ones((n, n), dtype=bool)
    return _info_nce(batch.state, batch.text, cfg.tau, allowed, np.ones(n, dtype=bool))


def goal_negative_mask(task_id: np.ndarray) -> np.ndarray:
    """Entry (i, j) is kept when j == i or rows i, j belong to different tasks."""
    t = np.asarray(task_id)
    return (t[:, None] != t[None, :]) | np.eye(len(t), dtype=bool)


def loss_slg(batch: EmbeddingBatch, cfg: ContrastiveConfig) -> Tensor:
    """(state, language)-goal loss; same-task rows are excluded from the negatives."""
    _check_unit("loss_slg", batch.joint)
    _check_unit("loss_slg", batch.goal)
    return _info_nce(batch.joint, batch.goal, cfg.tau, goal_negative_mask(batch.task_id),
                     np.asarray(batch.anchor, dtype=bool))


def contrastive_terms(batch: EmbeddingBatch, cfg: ContrastiveConfig) -> tuple[Tensor, Tensor]:
    return loss_s_l(batch, cfg), loss_slg(batch, cfg)


def combined_objective(bc_loss: Tensor, batch: EmbeddingBatch | None, cfg: ContrastiveConfig,
                       terms: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """lam * bc + (1 - lam) * (L_sl + L_slg), with disabled components contributing 0."""
    lam = cfg.lam
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if terms is None:
        terms = contrastive_terms(batch, cfg)
    sl, slg = terms
    if cfg.components == "none":
        cl = T.scale(T.add(sl, slg), 0.0)
    elif cfg.components == "sl":
        cl = T.add(sl, T.scale(slg, 0.0))
    else:
        cl = T.add(sl, slg)
    return T.add(T.scale(bc_loss, lam), T.scale(cl, 1.0 - lam))


class ContrastiveHeads(Module):
    """Training-only projections into the shared embedding space."""

    def __init__(self, rng, d: int, d_lang: int, embed_dim: int, n_queries: int):
        super().__init__()
        self.state = self.child("state", Linear(rng, n_queries * d, embed_dim))
        self.text = self.child("text", Linear(rng, d_lang, embed_dim))
        self.joint = self.child("joint", Linear(rng, n_queries * d, embed_dim))
        self.goal = self.child("goal", Linear(rng, d, embed_dim))

    def embed_state(self, q_v: Tensor) -> Tensor:
        b = q_v.shape[0]
        return T.l2_normalize(self.state(T.reshape(q_v, (b, -1))))

    def embed_text(self, sentence: np.ndarray | Tensor) -> Tensor:
        s = sentence if isinstance(sentence, Tensor) else Tensor(sentence)
        return T.l2_normalize(self.text(s))

    def embed_joint(self, q_vl: Tensor) -> Tensor:
        b = q_vl.shape[0]
        return T.l2_normalize(self.joint(T.reshape(q_vl, (b, -1))))

    def embed_goal(self, goal_tokens: Tensor) -> Tensor:
        return T.l2_normalize(self.goal(T.mean(goal_tokens, axis=1)))


def write_similarity_csv(path, matrix: np.ndarray, instructions, frame_labels=None) -> None:
    """Frames x instructions cosine-similarity matrix as CSV with a header row."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + list(instructions))
        for i, row in enumerate(matrix):
            label = frame_labels[i] if frame_labels is not None else i
            w.writerow([label] + [f"{v:.12g}" for v in row])
