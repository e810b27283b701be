"""Visual patch-token encoder and the frozen language embedder."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from contrail import tensor as T
from contrail.nn import Linear, Module, SelfAttentionBlock
from contrail.tensor import Tensor

N_VIEWS = 5
N_CHANNELS = 7

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
EOS = "<eos>"


@dataclass
class TextTokens:
    token_embeddings: np.ndarray  # (T, d_l)
    sentence_feature: np.ndarray  # (d_l,)
    tokens: tuple[str, ...]


@dataclass
class TextBatch:
    """Padded text for a batch: (B, L, d_l) tokens, (B, L) validity mask, (B, d_l) sentences."""
    tokens: np.ndarray
    mask: np.ndarray
    sentence: np.ndarray


class LangEmbedder:
    """Frozen, deterministic stand-in for a pretrained text encoder.

    Tokens are lowercase words and single punctuation marks followed by an
    end-of-sequence token. Each token hashes (BLAKE2b) to a row of a seeded
    Gaussian table; a fixed sinusoidal position row is added; a fixed causal
    mixing layer ``h_t = tanh((e_t + mean(e_0..e_t)) @ M)`` lets later rows see
    earlier ones, so the last (EOS) row summarizes the sentence.
    """

    def __init__(self, dim: int = 32, vocab: int = 4096, max_len: int = 32, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.dim, self.vocab, self.max_len = dim, vocab, max_len
        self.table = rng.normal(0.0, 1.0, size=(vocab, dim))
        pos = np.arange(max_len)[:, None] / (10000.0 ** (np.arange(0, dim, 2) / dim))[None, :]
        self.positions = np.zeros((max_len, dim))
        self.positions[:, 0::2] = np.sin(pos)
        self.positions[:, 1::2] = np.cos(pos[:, : dim // 2])
        self.mix = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
        for a in (self.table, self.positions, self.mix):
            a.setflags(write=False)
        self._cache: dict[str, TextTokens] = {}

    def tokenize(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower()) + [EOS]

    def token_id(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.vocab

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.table, self.positions, self.mix):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def embed(self, text: str) -> TextTokens:
        if not text or not text.strip():
            raise ValueError("embed_text: empty instruction")
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        toks = self.tokenize(text)
        if len(toks) > self.max_len:
            raise ValueError(f"embed_text: {len(toks)} tokens exceeds max_len {self.max_len}")
        e = self.table[[self.token_id(t) for t in toks]] + self.positions[: len(toks)]
        running = np.cumsum(e, axis=0) / np.arange(1, len(toks) + 1)[:, None]
        h = np.tanh((e + running) @ self.mix)
        out = TextTokens(h, h[-1].copy(), tuple(toks))
        self._cache[text] = out
        return out

    def batch(self, texts, length: int) -> TextBatch:
        toks = np.zeros((len(texts), length, self.dim))
        mask = np.zeros((len(texts), length), dtype=bool)
        sent = np.zeros((len(texts), self.dim))
        for i, s in enumerate(texts):
            tt = self.embed(s)
            n = len(tt.tokens)
            if n > length:
                raise ValueError(f"instruction has {n} tokens, text_len is {length}")
            toks[i, :n] = tt.token_embeddings
            mask[i, :n] = True
            sent[i] = tt.sentence_feature
        return TextBatch(toks, mask, sent)


_default_embedder: LangEmbedder | None = None


def embed_text(instruction: str, embedder: LangEmbedder | None = None) -> TextTokens:
    global _default_embedder
    if embedder is None:
        if _default_embedder is None:
            _default_embedder = LangEmbedder()
        embedder = _default_embedder
    return embedder.embed(instruction)


@dataclass
class PatchTokens:
    tokens: Tensor          # (B, 5*G*G, d)
    grid: int

    @property
    def view_ids(self) -> np.ndarray:
        return np.repeat(np.arange(N_VIEWS), self.grid * self.grid)

    def origin(self, index: int) -> tuple[int, int, int]:
        """(view, grid row, grid col) of a token index."""
        g2 = self.grid * self.grid
        view, cell = divmod(index, g2)
        return view, cell // self.grid, cell % self.grid


def patchify(views: np.ndarray, grid: int, patch: int) -> np.ndarray:
    """(B, 5, 7, H, W) -> (B, 5*G*G, P*P*7), patches in row-major grid order per view."""
    b, v, c, h, w = views.shape
    if h != grid * patch or w != grid * patch:
        raise ValueError(f"patch_embed: resolution {h}x{w} is not grid {grid} x patch {patch}")
    x = views.reshape(b, v, c, grid, patch, grid, patch)
    x = x.transpose(0, 1, 3, 5, 4, 6, 2)
    return x.reshape(b, v * grid * grid, patch * patch * c)


class PatchEmbed(Module):
    """Linear projection of each P x P x 7 patch plus a learned (view, cell) position vector."""

    def __init__(self, rng, grid: int, patch: int, d: int):
        super().__init__()
        self.grid, self.patch = grid, patch
        self.proj = self.child("proj", Linear(rng, patch * patch * N_CHANNELS, d))
        self.pos = self.param("pos", rng.normal(0.0, 0.02, size=(N_VIEWS * grid * grid, d)))

    def __call__(self, views: np.ndarray, with_position: bool = True) -> PatchTokens:
        x = self.proj(Tensor(patchify(views, self.grid, self.patch)))
        if with_position:
            x = T.add(x, self.pos)
        return PatchTokens(x, self.grid)


def within_view_mask(grid: int) -> np.ndarray:
    ids = np.repeat(np.arange(N_VIEWS), grid * grid)
    return ids[:, None] == ids[None, :]


class VisualEncoder(Module):
    """Two self-attention layers in which tokens only see tokens of their own view."""

    def __init__(self, rng, d: int, heads: int, hidden: int, layers: int = 2):
        super().__init__()
        self.blocks = [self.child(f"block{i}", SelfAttentionBlock(rng, d, heads, hidden))
                       for i in range(layers)]

    def __call__(self, tokens: PatchTokens, masked: bool = False) -> PatchTokens:
        """``masked=True`` runs full attention with a block-diagonal mask (reference path)."""
        x = tokens.tokens
        b, n, d = x.shape
        g2 = tokens.grid * tokens.grid
        if masked:
            mask = within_view_mask(tokens.grid)
            for blk in self.blocks:
                x = blk(x, attn_mask=mask)
            return PatchTokens(x, tokens.grid)
        x = T.reshape(x, (b * N_VIEWS, g2, d))
        for blk in self.blocks:
            x = blk(x)
        return PatchTokens(T.reshape(x, (b, n, d)), tokens.grid)
