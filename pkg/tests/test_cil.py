import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrail import tensor as T
from contrail.cil import (
    ContrastiveConfig, EmbeddingBatch, combined_objective, goal_negative_mask, loss_s_l, loss_slg, similarity,
    write_similarity_csv,
)
from contrail.tensor import Tensor, finite_diff_check

CFG = ContrastiveConfig(tau=0.1)


def unit(g, n, e=6):
    x = g.normal(size=(n, e))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def batch(g, n, tasks=None, e=6, anchor=None):
    tasks = np.arange(n) if tasks is None else np.asarray(tasks)
    return EmbeddingBatch(Tensor(unit(g, n, e)), Tensor(unit(g, n, e)), Tensor(unit(g, n, e)),
                          Tensor(unit(g, n, e)), tasks, anchor)


def brute_sl(s, l, tau):
    # scalar double loop over the formula, both directions, each averaged over anchors
    n = len(s)
    f = [[math.exp(sum(s[i][k] * l[j][k] for k in range(len(s[i]))) / tau) for j in range(n)] for i in range(n)]
    fwd = sum(math.log(f[i][i] / sum(f[i][j] for j in range(n))) for i in range(n)) / n
    bwd = sum(math.log(f[i][i] / sum(f[j][i] for j in range(n))) for i in range(n)) / n
    return -(fwd + bwd)


def brute_slg(d, g, tasks, tau, anchors):
    n = len(d)
    f = [[math.exp(sum(d[i][k] * g[j][k] for k in range(len(d[i]))) / tau) for j in range(n)] for i in range(n)]
    idx = [i for i in range(n) if anchors[i]]
    if not idx:
        return 0.0
    fwd = bwd = 0.0
    for i in idx:
        neg_g = [j for j in range(n) if tasks[j] != tasks[i]]
        fwd += math.log(f[i][i] / (f[i][i] + sum(f[i][j] for j in neg_g)))
        bwd += math.log(f[i][i] / (f[i][i] + sum(f[j][i] for j in neg_g)))
    return -(fwd + bwd) / len(idx)


# ---------------------------------------------------------------- similarity and config

def test_similarity_examples():
    assert similarity([1.0, 0.0], [1.0, 0.0], 1.0) == pytest.approx(math.e)
    assert similarity([1.0, 0.0], [0.0, 1.0], 1.0) == 1.0
    assert similarity([1.0, 0.0], [0.6, 0.8], 0.1) == pytest.approx(403.4287934927351, rel=1e-12)
    assert similarity([0.6, 0.8], [1.0, 0.0], 0.1) == similarity([1.0, 0.0], [0.6, 0.8], 0.1)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_similarity_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        similarity([1.0], [1.0], tau)


@pytest.mark.parametrize("kw", [{"tau": 0.0}, {"lam": -0.1}, {"lam": 1.5}, {"components": "goal"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ContrastiveConfig(**kw)


def test_non_unit_rows_rejected():
    g = np.random.default_rng(0)
    b = batch(g, 3)
    b.state = Tensor(b.state.data * 2)
    with pytest.raises(ValueError):
        loss_s_l(b, CFG)


# ---------------------------------------------------------------- closed forms

def test_single_row_losses_are_zero():
    b = batch(np.random.default_rng(1), 1)
    assert loss_s_l(b, CFG).item() == 0.0
    assert loss_slg(b, CFG).item() == 0.0


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_identical_embeddings_give_two_log_n(n):
    v = unit(np.random.default_rng(n), 1)
    same = Tensor(np.repeat(v, n, axis=0))
    b = EmbeddingBatch(same, same, same, same, np.arange(n))
    assert loss_s_l(b, CFG).item() == pytest.approx(2 * math.log(n), abs=1e-12)
    assert loss_slg(b, CFG).item() == pytest.approx(2 * math.log(n), abs=1e-12)


def test_two_log_two_value():
    v = Tensor(np.tile([[1.0, 0.0]], (2, 1)))
    b = EmbeddingBatch(v, v, v, v, [0, 1])
    assert loss_s_l(b, CFG).item() == pytest.approx(1.386294, abs=1e-6)


def test_single_task_batch_goal_loss_is_zero():
    b = batch(np.random.default_rng(2), 6, tasks=[4] * 6)
    assert loss_slg(b, CFG).item() == 0.0


def test_goal_mask():
    m = goal_negative_mask(np.array([0, 0, 1]))
    np.testing.assert_array_equal(m, [[1, 0, 1], [0, 1, 1], [1, 1, 1]])


# ---------------------------------------------------------------- brute-force oracle

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_sl_matches_scalar_formula(seed, n):
    g = np.random.default_rng(seed)
    b = batch(g, n)
    want = brute_sl(b.state.data.tolist(), b.text.data.tolist(), CFG.tau)
    assert abs(loss_s_l(b, CFG).item() - want) <= 1e-12 * max(1.0, abs(want))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 4))
def test_slg_matches_scalar_formula(seed, n, n_tasks):
    g = np.random.default_rng(seed)
    tasks = g.integers(0, n_tasks, size=n)
    anchors = g.random(n) < 0.8
    b = batch(g, n, tasks, anchor=anchors)
    want = brute_slg(b.joint.data.tolist(), b.goal.data.tolist(), tasks.tolist(), CFG.tau, anchors.tolist())
    assert abs(loss_slg(b, CFG).item() - want) <= 1e-12 * max(1.0, abs(want))


def test_slg_two_task_example():
    g = np.random.default_rng(9)
    b = batch(g, 4, tasks=[0, 0, 1, 1])
    want = brute_slg(b.joint.data.tolist(), b.goal.data.tolist(), [0, 0, 1, 1], CFG.tau, [True] * 4)
    assert loss_slg(b, CFG).item() == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------- invariances

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_permutation_invariance(seed, n):
    g = np.random.default_rng(seed)
    b = batch(g, n, g.integers(0, 3, size=n))
    p = g.permutation(n)
    pb = EmbeddingBatch(*(Tensor(x.data[p]) for x in (b.state, b.text, b.joint, b.goal)), b.task_id[p], b.anchor[p])
    assert abs(loss_s_l(b, CFG).item() - loss_s_l(pb, CFG).item()) <= 1e-12
    assert abs(loss_slg(b, CFG).item() - loss_slg(pb, CFG).item()) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_joint_rotation_invariance(seed, n):
    g = np.random.default_rng(seed)
    b = batch(g, n, g.integers(0, 3, size=n))
    q, _ = np.linalg.qr(g.normal(size=(6, 6)))
    rb = EmbeddingBatch(*(Tensor(x.data @ q) for x in (b.state, b.text, b.joint, b.goal)), b.task_id, b.anchor)
    assert abs(loss_s_l(b, CFG).item() - loss_s_l(rb, CFG).item()) <= 1e-9
    assert abs(loss_slg(b, CFG).item() - loss_slg(rb, CFG).item()) <= 1e-9


def test_monotone_alignment():
    # row 0 of each side gets a private 2D plane; turning it changes only the positive dot product
    g = np.random.default_rng(5)
    n, r = 4, 0.8
    base_s, base_l = unit(g, n, 3), unit(g, n, 3)
    prev = None
    for theta in np.linspace(math.pi, 0.0, 8):
        s = np.hstack([base_s, np.zeros((n, 2))])
        l = np.hstack([base_l, np.zeros((n, 2))])
        s[0] = [*(base_s[0] * 0.6), r * math.cos(theta), r * math.sin(theta)]
        l[0] = [*(base_l[0] * 0.6), r, 0.0]
        b = EmbeddingBatch(Tensor(s), Tensor(l), Tensor(s), Tensor(l), np.arange(n))
        cur = loss_s_l(b, CFG).item()
        if prev is not None:
            assert cur < prev
        prev = cur


# ---------------------------------------------------------------- combined objective

def test_combined_endpoints():
    g = np.random.default_rng(3)
    b = batch(g, 4, [0, 1, 0, 1])
    bc = Tensor(2.0)
    sl, slg = loss_s_l(b, CFG).item(), loss_slg(b, CFG).item()
    assert combined_objective(bc, b, ContrastiveConfig(lam=1.0)).item() == 2.0
    assert combined_objective(bc, b, ContrastiveConfig(lam=0.0)).item() == pytest.approx(sl + slg, abs=1e-12)


def test_combined_arithmetic():
    terms = (Tensor(0.25), Tensor(0.75))
    assert combined_objective(Tensor(2.0), None, ContrastiveConfig(lam=0.5), terms).item() == 1.5


def test_combined_components():
    terms = (Tensor(0.25), Tensor(0.75))
    sl_only = combined_objective(Tensor(2.0), None, ContrastiveConfig(lam=0.5, components="sl"), terms)
    none = combined_objective(Tensor(2.0), None, ContrastiveConfig(lam=0.5, components="none"), terms)
    assert sl_only.item() == 1.125 and none.item() == 1.0


# ---------------------------------------------------------------- gradients

def _grad_check(loss, part, seed):
    g = np.random.default_rng(seed)
    n, e = 4, 5
    fixed = batch(g, n, [0, 1, 0, 2], e=e)

    def f(x):
        emb = T.l2_normalize(x)
        parts = {"state": fixed.state, "text": fixed.text, "joint": fixed.joint, "goal": fixed.goal, part: emb}
        return loss(EmbeddingBatch(parts["state"], parts["text"], parts["joint"], parts["goal"], fixed.task_id), CFG)

    for _ in range(10):
        assert finite_diff_check(f, g.normal(size=(n, e))) < 1e-4


@pytest.mark.parametrize("part", ["state", "text"])
def test_sl_gradient(part):
    _grad_check(loss_s_l, part, 11)


@pytest.mark.parametrize("part", ["joint", "goal"])
def test_slg_gradient(part):
    _grad_check(loss_slg, part, 12)


# ---------------------------------------------------------------- export

def test_similarity_csv(tmp_path):
    m = np.array([[1.0, -0.5], [0.25, 0.0]])
    write_similarity_csv(tmp_path / "s.csv", m, ["a b", "c"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "frame,a b,c"
    assert lines[1] == "0,1,-0.5"
