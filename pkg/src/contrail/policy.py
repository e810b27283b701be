"""The full policy: encoders, MVQ-Former + fusion, action decoder, contrastive heads.

Parameter names are prefixed ``encode.``, ``mvq.``, ``act.`` (needed at
inference) and ``cil.`` (training-only projection heads).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from contrail.act import ActionHead, ActionLogits, HeatmapDecoder, HeatmapSet, action_features, pooled_token_weights
from contrail.cil import ContrastiveHeads, EmbeddingBatch
from contrail.encode import N_VIEWS, LangEmbedder, PatchEmbed, TextBatch, VisualEncoder
from contrail.mvq import FUSION_LAYERS, MVQ_LAYERS, N_QUERIES, Fusion, FusedContext, MVQFormer
from contrail.nn import Linear, Module
from contrail.tensor import Tensor

INFERENCE_PREFIXES = ("encode.", "mvq.", "act.")
TRAINING_PREFIX = "cil."


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 8
    patch: int = 2
    d: int = 32
    d_lang: int = 32
    heads: int = 1
    hidden: int = 64
    embed_dim: int = 32
    text_len: int = 12
    conv_kernel: int = 3
    lang_seed: int = 1234
    dtype: str = "float64"  # compute precision; float32 roughly halves step time

    @property
    def resolution(self) -> int:
        return self.grid * self.patch

    def to_dict(self) -> dict:
        return asdict(self)


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.patch = self.child("patch", PatchEmbed(rng, cfg.grid, cfg.patch, cfg.d))
        self.visual = self.child("visual", VisualEncoder(rng, cfg.d, cfg.heads, cfg.hidden))
        self.text_proj = self.child("text_proj", Linear(rng, cfg.d_lang, cfg.d))


class MVQ(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.former = self.child("former", MVQFormer(rng, cfg.d, cfg.heads, cfg.hidden))
        self.fusion = self.child("fusion", Fusion(rng, cfg.d, cfg.heads, cfg.hidden))


class Act(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.decoder = self.child("decoder", HeatmapDecoder(rng, cfg.d, cfg.grid, cfg.resolution, cfg.conv_kernel))
        self.head = self.child("head", ActionHead(rng, cfg.d))


@dataclass
class PolicyOutput:
    fused: FusedContext
    heat: HeatmapSet
    logits: ActionLogits
    embeddings: EmbeddingBatch | None = None


class Policy(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encode = self.child("encode", Encoder(rng, cfg))
        self.mvq = self.child("mvq", MVQ(rng, cfg))
        self.act = self.child("act", Act(rng, cfg))
        self.cil = self.child("cil", ContrastiveHeads(rng, cfg.d, cfg.d_lang, cfg.embed_dim, N_QUERIES))
        self.lang = LangEmbedder(cfg.d_lang, seed=cfg.lang_seed)
        self.dtype = np.dtype(cfg.dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"dtype must be float32 or float64, got {cfg.dtype}")
        self.cast(self.dtype)
        self.check_structure()

    def check_structure(self) -> None:
        assert N_VIEWS == 5 and N_QUERIES == 5
        assert len(self.mvq.former.blocks) == MVQ_LAYERS == 2
        assert len(self.mvq.fusion.blocks) == FUSION_LAYERS == 4
        assert self.mvq.former.queries.shape == (5, self.cfg.d)
        assert self.act.head.fc.w.shape == (2 * self.cfg.d, 220)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, params: dict[str, np.ndarray], strict_training: bool = False) -> None:
        own = dict(self.named_parameters())
        for name, t in own.items():
            if name not in params:
                if name.startswith(TRAINING_PREFIX) and not strict_training:
                    continue
                raise KeyError(f"missing parameter: {name}")
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype)

    def text_batch(self, instructions) -> TextBatch:
        tb = self.lang.batch(list(instructions), self.cfg.text_len)
        return TextBatch(tb.tokens.astype(self.dtype), tb.mask, tb.sentence.astype(self.dtype))

    def encode_views(self, views: np.ndarray):
        return self.encode.visual(self.encode.patch(np.asarray(views, dtype=self.dtype)))

    def forward(self, views: np.ndarray, text: TextBatch, goal_views: np.ndarray | None = None,
                task_id=None, anchor=None) -> PolicyOutput:
        """Full pass; contrastive embeddings are added when ``goal_views`` is given."""
        visual = self.encode_views(views)
        q_v = self.mvq.former(visual)
        txt = self.encode.text_proj(Tensor(text.tokens))
        fused = self.mvq.fusion(q_v, visual, txt, text.mask)
        heat = self.act.decoder(fused.context_v)
        weights = pooled_token_weights(heat, self.cfg.grid)
        logits = self.act.head(action_features(fused.context_v, weights))
        out = PolicyOutput(fused, heat, logits)
        if goal_views is not None:
            out.embeddings = self.embed(out, text, goal_views, task_id, anchor)
        return out

    def embed(self, out: PolicyOutput, text: TextBatch, goal_views: np.ndarray,
              task_id=None, anchor=None) -> EmbeddingBatch:
        goal = self.encode_views(goal_views)
        n = goal_views.shape[0]
        return EmbeddingBatch(
            state=self.cil.embed_state(out.fused.q_v),
            text=self.cil.embed_text(text.sentence),
            joint=self.cil.embed_joint(out.fused.q_vl),
            goal=self.cil.embed_goal(goal.tokens),
            task_id=np.arange(n) if task_id is None else task_id,
            anchor=anchor,
        )

    def inference_parameter_count(self) -> int:
        return int(sum(t.size for n, t in self.named_parameters() if not n.startswith(TRAINING_PREFIX)))

    def mvq_parameter_count(self) -> int:
        return self.mvq.num_parameters()
