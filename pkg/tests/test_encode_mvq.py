import numpy as np
import pytest

from contrail import tensor as T
from contrail.encode import (
    EOS, N_CHANNELS, N_VIEWS, LangEmbedder, PatchEmbed, PatchTokens, VisualEncoder, embed_text, patchify, within_view_mask,
)
from contrail.mvq import FUSION_LAYERS, MVQ_LAYERS, N_QUERIES, Fusion, MVQFormer
from contrail.policy import ModelConfig, Policy
from contrail.tensor import Tensor, finite_diff_check
from contrail.trainer import TrainConfig, build_replay, generate_episodes, new_train_state, sample_batch, train_step

D = 8


def views(seed, g=2, p=2, b=1):
    r = g * p
    return np.random.default_rng(seed).normal(size=(b, N_VIEWS, N_CHANNELS, r, r))


# ---------------------------------------------------------------- language

def test_embed_text_deterministic():
    a = LangEmbedder().embed("press the red button")
    b = LangEmbedder().embed("press the red button")
    np.testing.assert_array_equal(a.token_embeddings, b.token_embeddings)
    assert a.tokens == ("press", "the", "red", "button", EOS)


def test_sentence_feature_is_last_row():
    t = embed_text("push the red block to the green target")
    np.testing.assert_array_equal(t.sentence_feature, t.token_embeddings[-1])


def test_color_words_change_embeddings():
    a = embed_text("push the red block to the green target")
    b = embed_text("push the blue block to the green target")
    color = a.tokens.index("red")
    np.testing.assert_array_equal(a.token_embeddings[:color], b.token_embeddings[:color])
    assert not np.array_equal(a.token_embeddings[color], b.token_embeddings[color])


@pytest.mark.parametrize("text", ["", "   "])
def test_empty_instruction_rejected(text):
    with pytest.raises(ValueError):
        embed_text(text)


def test_punctuation_tokens():
    assert LangEmbedder().tokenize("Press, the RED button!") == ["press", ",", "the", "red", "button", "!", EOS]


def test_batch_padding():
    tb = LangEmbedder().batch(["press the red button", "pick up the red block and place it on the pad"], 12)
    assert tb.tokens.shape == (2, 12, 32)
    assert tb.mask[0].sum() == 5 and tb.mask[1].sum() == 12
    assert np.all(tb.tokens[0, 5:] == 0)
    with pytest.raises(ValueError):
        LangEmbedder().batch(["pick up the red block and place it on the pad"], 4)


def test_language_tables_frozen_by_training():
    cfg = TrainConfig(steps=3, warmup_steps=1, grid=2, patch=2, d=8, hidden=8, embed_dim=4, augment=False)
    st = new_train_state(cfg)
    before = st.policy.lang.checksum()
    replay = build_replay(generate_episodes(1, 0))
    for s in range(3):
        train_step(st.policy, st.opt, sample_batch(replay, cfg, s), cfg, s)
    assert st.policy.lang.checksum() == before
    assert not st.policy.lang.table.flags.writeable


# ---------------------------------------------------------------- patch embedding

def test_patch_embed_shape():
    pe = PatchEmbed(np.random.default_rng(0), grid=2, patch=1, d=D)
    out = pe(views(0, g=2, p=1))
    assert out.tokens.shape == (1, 5 * 4, D)
    assert out.view_ids.tolist() == [v for v in range(5) for _ in range(4)]


def test_patch_embed_rejects_bad_resolution():
    pe = PatchEmbed(np.random.default_rng(0), grid=2, patch=2, d=D)
    with pytest.raises(ValueError):
        pe(np.zeros((1, 5, 7, 5, 5)))


def test_background_tokens_equal_before_position():
    pe = PatchEmbed(np.random.default_rng(0), grid=2, patch=2, d=D)
    bg = np.zeros((1, 5, 7, 4, 4))
    tok = pe(bg, with_position=False).tokens.data[0]
    np.testing.assert_array_equal(tok, np.broadcast_to(tok[0], tok.shape))


def test_view_permutation_permutes_token_blocks():
    v = views(3)
    perm = [2, 0, 4, 1, 3]
    a = patchify(v, 2, 2)
    b = patchify(v[:, perm], 2, 2)
    for new, old in enumerate(perm):
        np.testing.assert_array_equal(b[:, new * 4:(new + 1) * 4], a[:, old * 4:(old + 1) * 4])


def test_patchify_layout():
    v = np.arange(1 * 5 * 7 * 4 * 4, dtype=float).reshape(1, 5, 7, 4, 4)
    p = patchify(v, 2, 2)
    # token 1 of view 0 is the top-right 2x2 patch; feature order (row, col, channel)
    np.testing.assert_array_equal(p[0, 1, :7], v[0, 0, :, 0, 2])
    np.testing.assert_array_equal(p[0, 1, 7:14], v[0, 0, :, 0, 3])


# ---------------------------------------------------------------- visual encoder

def encoder_pair(seed=0):
    rng = np.random.default_rng(seed)
    return PatchEmbed(rng, 2, 2, D), VisualEncoder(rng, D, 1, 16)


def test_masked_attention_weights_vanish_across_views():
    pe, enc = encoder_pair()
    enc(pe(views(1)), masked=True)
    w = enc.blocks[0].attn.last_weights[0, 0]
    assert np.all(w[~within_view_mask(2)] == 0.0)


def test_batched_and_masked_paths_agree():
    pe, enc = encoder_pair()
    tok = pe(views(2, b=2))
    a = enc(tok).tokens.data
    b = enc(tok, masked=True).tokens.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_changing_one_view_changes_only_its_tokens():
    pe, enc = encoder_pair()
    v = views(4)
    w = v.copy()
    w[0, 3] = np.random.default_rng(9).normal(size=w[0, 3].shape)
    a, b = enc(pe(v)).tokens.data[0], enc(pe(w)).tokens.data[0]
    changed = np.any(a != b, axis=1)
    assert changed.tolist() == [i // 4 == 3 for i in range(20)]


def test_within_view_locality_by_autodiff():
    pe, enc = encoder_pair()
    x = Tensor(pe(views(5)).tokens.data, requires_grad=True)
    with T.Tape() as tape:
        out = enc(PatchTokens(x, 2), masked=True).tokens
        y = T.sum(T.slice_axis(out, 1, 0, 4))  # tokens of view 0
    tape.backward(y)
    assert np.all(x.grad[0, 4:] == 0.0) and np.any(x.grad[0, :4] != 0.0)


def test_goal_encoding_shares_weights():
    pol = Policy(ModelConfig(grid=2, patch=2, d=D, hidden=16, embed_dim=4))
    v = views(6, b=2)
    a = pol.encode_views(v).tokens.data
    b = pol.encode_views(v.copy()).tokens.data
    assert a.tobytes() == b.tobytes()
    names = [n for n, _ in pol.named_parameters() if n.startswith("encode.visual")]
    assert names and not any("goal" in n for n, _ in pol.named_parameters() if not n.startswith("cil."))


# ---------------------------------------------------------------- MVQ-Former and fusion

def former(seed=0):
    return MVQFormer(np.random.default_rng(seed), D, 1, 16)


def test_structure_constants():
    assert N_QUERIES == 5 and MVQ_LAYERS == 2 and FUSION_LAYERS == 4
    f = former()
    assert f.queries.shape == (5, D) and len(f.blocks) == 2
    assert len(Fusion(np.random.default_rng(0), D, 1, 16).blocks) == 4


def test_mvq_shape_and_errors():
    pe, enc = encoder_pair()
    q = former()(enc(pe(views(0, b=3))))
    assert q.shape == (3, 5, D)
    with pytest.raises(ValueError):
        former()(PatchTokens(Tensor(np.zeros((1, 20, D + 1))), 2))


def test_identical_tokens_give_identical_attention_output():
    f = former()
    kv = Tensor(np.tile(np.random.default_rng(1).normal(size=D), (1, 20, 1)))
    blk = f.blocks[0]
    q = T.add(Tensor(np.zeros((1, 5, D))), f.queries)
    att = blk.attn(blk.ln_q(q), blk.ln_kv(kv)).data[0]
    np.testing.assert_allclose(att, np.broadcast_to(att[0], att.shape), atol=1e-12)


def test_zero_visual_stream_output_independent_of_scene():
    f = former()
    a = f(PatchTokens(Tensor(np.zeros((1, 20, D))), 2)).data
    b = f(PatchTokens(Tensor(np.zeros((2, 20, D))), 2)).data
    np.testing.assert_array_equal(a[0], b[1])


def test_mvq_query_gradient():
    f = former()
    vis = PatchTokens(Tensor(np.random.default_rng(2).normal(size=(1, 20, D))), 2)
    w = np.random.default_rng(3).normal(size=(1, 5, D))

    def fn(x):
        f.queries = x
        return T.sum(T.mul(f(vis), Tensor(w)))

    g = np.random.default_rng(4)
    for _ in range(10):
        assert finite_diff_check(fn, g.normal(size=(5, D))) < 1e-4


def _fuse_setup(seed=0, g=2):
    rng = np.random.default_rng(seed)
    fu = Fusion(rng, D, 1, 16)
    q = Tensor(rng.normal(size=(1, 5, D)))
    vis = PatchTokens(Tensor(rng.normal(size=(1, 5 * g * g, D))), g)
    txt = rng.normal(size=(1, 6, D))
    return fu, q, vis, txt


def test_fusion_partitions():
    fu, q, vis, txt = _fuse_setup()
    out = fu(q, vis, Tensor(txt))
    assert out.q_vl.shape == (1, 5, D) and out.context_v.shape == (1, 20, D) and out.text.shape == (1, 6, D)
    assert out.q_v is q


def test_fusion_text_permutation_invariance():
    fu, q, vis, txt = _fuse_setup(1)
    a = fu(q, vis, Tensor(txt))
    b = fu(q, vis, Tensor(txt[:, [3, 1, 5, 0, 2, 4]]))
    np.testing.assert_allclose(a.q_vl.data, b.q_vl.data, atol=1e-12)
    np.testing.assert_allclose(a.context_v.data, b.context_v.data, atol=1e-12)


def test_fusion_padding_keys_ignored():
    fu, q, vis, txt = _fuse_setup(2)
    mask = np.array([[True] * 4 + [False] * 2])
    noisy = txt.copy()
    noisy[:, 4:] = 99.0
    a = fu(q, vis, Tensor(txt), mask).q_vl.data
    b = fu(q, vis, Tensor(noisy), mask).q_vl.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_language_reaches_q_vl_not_q_v():
    pol = Policy(ModelConfig(grid=2, patch=2, d=D, hidden=16, embed_dim=4))
    v = views(7)
    a = pol.forward(v, pol.text_batch(["press the red button"]))
    b = pol.forward(v, pol.text_batch(["press the blue button"]))
    assert a.fused.q_v.data.tobytes() == b.fused.q_v.data.tobytes()
    assert np.max(np.abs(a.fused.q_vl.data - b.fused.q_vl.data)) > 1e-6


def test_q_vl_gradient_reaches_text():
    fu, q, vis, txt = _fuse_setup(3)
    t = Tensor(txt, requires_grad=True)
    with T.Tape() as tape:
        out = fu(q, vis, t)
        y = T.sum(out.q_vl)
    tape.backward(y)
    assert np.any(t.grad != 0)


def test_mvq_parameter_count_stable():
    cfg = ModelConfig()
    a, b = Policy(cfg, seed=0), Policy(cfg, seed=1)
    d, h = cfg.d, cfg.hidden
    attn, ln, ffn = 4 * (d * d + d), 2 * d, 2 * d * h + h + d
    cross = 3 * ln + attn + ffn
    self_block = 2 * ln + attn + ffn
    expected = 5 * d + MVQ_LAYERS * cross + FUSION_LAYERS * self_block
    assert a.mvq_parameter_count() == b.mvq_parameter_count() == expected
