import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_token_scores
from prefill_engine.importance import (ScoringError, block_reduce, head_token_scores, importance,
                                       online_softmax_reduce, partial_scores)


def test_partial_scores_zero_dot():
    s = partial_scores(np.zeros((1, 4)), np.zeros((1, 4)))
    assert s.tolist() == [[0.0]]


def test_partial_scores_causal_mask():
    rng = np.random.default_rng(0)
    s = partial_scores(rng.standard_normal((2, 4)), rng.standard_normal((3, 4)))
    # query row 0 sits at position 1, so key 2 is masked
    assert s[0, 2] == -np.inf
    assert np.isfinite(s[1]).all()


def test_partial_scores_matches_double_loop():
    rng = np.random.default_rng(7)
    q, k = rng.standard_normal((4, 8)), rng.standard_normal((32, 8))
    s = partial_scores(q, k)
    for j in range(4):
        for i in range(32):
            want = sum(q[j, t] * k[i, t] for t in range(8)) / np.sqrt(8) if i <= 28 + j else -np.inf
            assert s[j, i] == pytest.approx(want, abs=1e-6) if np.isfinite(want) else s[j, i] == want


def test_partial_scores_rejects_long_window():
    with pytest.raises(ScoringError, match="clamp"):
        partial_scores(np.zeros((3, 4)), np.zeros((2, 4)))


def test_singleton_and_uniform_softmax():
    assert online_softmax_reduce(np.zeros((1, 1))).tolist() == [1.0]
    assert online_softmax_reduce(np.zeros((1, 4))).tolist() == [0.25] * 4


def test_fully_masked_row_rejected():
    raw = np.array([[0.0, 1.0], [-np.inf, -np.inf]])
    with pytest.raises(ScoringError, match="masked"):
        online_softmax_reduce(raw)


def test_two_heads_mass_and_dense_oracle():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((3, 2, 8)).astype(np.float32)
    k = rng.standard_normal((20, 2, 8)).astype(np.float32)
    tok = head_token_scores(q, k)
    assert tok.sum() == pytest.approx(2.0, abs=1e-5)
    assert np.abs(tok - dense_token_scores(q, k)).max() < 1e-6


@pytest.mark.parametrize("big_n,chunk", [(4096, 1024), (1000, 7), (65, 64)])
def test_streaming_equals_dense_softmax(big_n, chunk):
    rng = np.random.default_rng(big_n)
    raw = partial_scores(rng.standard_normal((2, 5, 8)) * 3, rng.standard_normal((2, big_n, 8)) * 3)
    got = online_softmax_reduce(raw, chunk=chunk)
    e = np.exp(raw - raw.max(axis=-1, keepdims=True))
    want = (e / e.sum(axis=-1, keepdims=True)).mean(axis=1).sum(axis=0)
    assert np.abs(got - want).max() < 1e-6


def test_block_reduce_examples():
    assert block_reduce(np.array([1., 3, 5, 7]), 2).tolist() == [2, 6]
    assert block_reduce(np.array([1., 3, 5, 7, 9]), 2).tolist() == [2, 6, 9]
    rng = np.random.default_rng(1)
    tok = rng.random(200)
    b = block_reduce(tok, 64)
    assert b.size == 4
    counts = np.array([64, 64, 64, 8])
    assert (b * counts).sum() == pytest.approx(tok.sum(), abs=1e-6)


@given(st.integers(1, 300), st.integers(1, 70), st.integers(1, 40), st.integers(1, 4))
def test_mass_conservation_property(big_n, g, n, heads):
    rng = np.random.default_rng(big_n * 31 + g)
    q = rng.standard_normal((big_n, heads, 4)).astype(np.float32)
    k = rng.standard_normal((big_n, heads, 4)).astype(np.float32)
    sc = importance(q, k, n, g)
    assert sc.effective_n == min(n, big_n)
    assert (sc.token_scores >= 0).all() and np.isfinite(sc.token_scores).all()
    assert sc.token_scores.sum() == pytest.approx(heads, abs=1e-5)
    counts = np.minimum(g, big_n - np.arange(0, big_n, g))
    assert (sc.block_scores * counts).sum() == pytest.approx(sc.token_scores.sum(), abs=1e-6)


def test_key_permutation_permutes_scores():
    # with every key visible (window = whole sequence's last row only), scores follow their keys
    rng = np.random.default_rng(5)
    q = rng.standard_normal((1, 2, 8))
    k = rng.standard_normal((30, 2, 8))
    perm = rng.permutation(30)
    a = online_softmax_reduce(partial_scores(q.transpose(1, 0, 2), k.transpose(1, 0, 2)))
    b = online_softmax_reduce(partial_scores(q.transpose(1, 0, 2), k[perm].transpose(1, 0, 2)))
    assert np.allclose(b, a[perm], atol=1e-12)
