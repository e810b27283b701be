"""Multi-view querying transformer and the vision-language fusion stack."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from contrail import tensor as T
from contrail.encode import N_VIEWS, PatchTokens
from contrail.nn import CrossAttentionBlock, Module, SelfAttentionBlock
from contrail.tensor import Tensor

N_QUERIES = N_VIEWS
MVQ_LAYERS = 2
FUSION_LAYERS = 4


@dataclass
class FusedContext:
    q_v: Tensor        # (B, 5, d) queries before fusion
    q_vl: Tensor       # (B, 5, d) queries after fusion
    context_v: Tensor  # (B, 5*G*G, d) visual tokens after fusion
    text: Tensor       # (B, L, d) text positions after fusion (unused downstream)


class MVQFormer(Module):
    """Five learnable queries, one per view, refined by cross-attention to the visual tokens."""

    def __init__(self, rng, d: int, heads: int, hidden: int, layers: int = MVQ_LAYERS):
        super().__init__()
        self.queries = self.param("queries", rng.normal(0.0, 1.0, size=(N_QUERIES, d)))
        self.blocks = [self.child(f"cross{i}", CrossAttentionBlock(rng, d, heads, hidden))
                       for i in range(layers)]

    def __call__(self, visual: PatchTokens) -> Tensor:
        x = visual.tokens
        if x.ndim != 3 or x.shape[-1] != self.queries.shape[-1]:
            raise ValueError(f"mvq_former: shape mismatch {x.shape} vs queries {self.queries.shape}")
        q = T.add(Tensor(np.zeros((x.shape[0],) + self.queries.shape, dtype=x.data.dtype)), self.queries)
        for blk in self.blocks:
            q = blk(q, x)
        return q


class Fusion(Module):
    """Unmasked self-attention over [queries; visual tokens; text tokens] (padding keys excluded)."""

    def __init__(self, rng, d: int, heads: int, hidden: int, layers: int = FUSION_LAYERS):
        super().__init__()
        self.blocks = [self.child(f"block{i}", SelfAttentionBlock(rng, d, heads, hidden))
                       for i in range(layers)]

    def __call__(self, q_v: Tensor, visual: PatchTokens, text: Tensor,
                 text_mask: np.ndarray | None = None) -> FusedContext:
        b, nq, d = q_v.shape
        nv = visual.tokens.shape[1]
        nt = text.shape[1]
        if visual.tokens.shape[0] != b or text.shape[0] != b or visual.tokens.shape[2] != d or text.shape[2] != d:
            raise ValueError(f"fuse: shape mismatch {q_v.shape}, {visual.tokens.shape}, {text.shape}")
        x = T.concat([q_v, visual.tokens, text], axis=1)
        key_mask = None
        if text_mask is not None:
            key_mask = np.concatenate([np.ones((b, nq + nv), dtype=bool), np.asarray(text_mask, dtype=bool)], 1)
        for blk in self.blocks:
            x = blk(x, key_mask)
        return FusedContext(
            q_v=q_v,
            q_vl=T.slice_axis(x, 1, 0, nq),
            context_v=T.slice_axis(x, 1, nq, nq + nv),
            text=T.slice_axis(x, 1, nq + nv, nq + nv + nt),
        )
