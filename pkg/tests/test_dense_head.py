import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_stochastic
from rfclip.dense_head import LogitsMap, argmax_labels, classify_patches, layer_averaged_kk, upsample_logits
from rfclip.errors import ContractError, ShapeError
from rfclip.model_io import ClassEmbeddingSet
from rfclip.numerics import bilinear_resize
from rfclip.vit import AttentionStack


def classes(emb, names=None):
    return ClassEmbeddingSet(tuple(names or (f"c{i}" for i in range(len(emb)))), np.asarray(emb, dtype=float))


def test_feature_equal_to_class():
    cs = classes(np.eye(3, 4))
    f = np.zeros((4, 4))
    f[:, 2] = 5.0
    lm = classify_patches(f, cs)
    assert np.allclose(lm.scores[:, 2], 1.0)
    assert np.all(argmax_labels(lm.scores) == 2)


def test_orthogonal_feature_ties_to_lowest_index():
    cs = classes(np.eye(2, 3))
    lm = classify_patches(np.tile([0.0, 0.0, 1.0], (1, 1)), cs)
    assert np.allclose(lm.scores, 0.0) and argmax_labels(lm.scores)[0] == 0


def test_mixed_feature_scores():
    cs = classes(np.eye(2, 5))
    f = np.array([[0.8, 0.6, 0, 0, 0]])
    lm = classify_patches(f, cs)
    assert np.allclose(lm.scores, [[0.8, 0.6]]) and argmax_labels(lm.scores)[0] == 0


def test_zero_feature_and_width_check(caplog):
    cs = classes(np.eye(2, 3))
    lm = classify_patches(np.zeros((1, 3)), cs)
    assert np.all(lm.scores == 0) and "zero-norm" in caplog.text
    with pytest.raises(ShapeError):
        classify_patches(np.zeros((4, 5)), cs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_class_permutation_and_scaling(seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((5, 8))
    f = rng.standard_normal((16, 8))
    base = classify_patches(f, classes(emb))
    perm = rng.permutation(5)
    permuted = classify_patches(f, classes(emb[perm]))
    assert np.allclose(permuted.scores, base.scores[:, perm])
    assert np.array_equal(perm[argmax_labels(permuted.scores)], argmax_labels(base.scores))
    scaled = emb * rng.uniform(0.1, 10, (5, 1))
    assert np.array_equal(argmax_labels(classify_patches(f, classes(scaled)).scores), argmax_labels(base.scores))
    assert np.all(np.abs(base.scores) <= 1.0)


def test_upsample_identity_constant_and_oracle():
    lm = LogitsMap(np.arange(8, dtype=float).reshape(4, 2), 2)
    assert np.array_equal(upsample_logits(lm, (2, 2)), lm.planes())
    const = LogitsMap(np.full((4, 3), 0.25), 2)
    assert np.allclose(upsample_logits(const, (7, 5)), 0.25)
    checker = LogitsMap(np.array([[0.0], [1.0], [1.0], [0.0]]), 2)
    up = upsample_logits(checker, (4, 4))[..., 0]
    assert np.allclose(up, bilinear_resize(np.array([[0.0, 1.0], [1.0, 0.0]]), (4, 4)))
    assert np.allclose(up[0], [0, 0.25, 0.75, 1.0])
    with pytest.raises(ShapeError):
        upsample_logits(lm, (1, 4))


def stack_of(rng, layers, heads, n):
    st_ = AttentionStack(keep_heads=True)
    for _ in range(layers):
        st_.push(*(random_stochastic(rng, n, (heads,)).astype(np.float32) for _ in range(3)))
    return st_


def test_layer_averaged_kk(rng):
    s = stack_of(rng, 1, 1, 5)
    assert np.allclose(layer_averaged_kk(s), s.heads["kk"][0][0])
    s = AttentionStack()
    P, Q = random_stochastic(rng, 4), random_stochastic(rng, 4)
    s.push(P[None], P[None], P[None])
    s.push(Q[None], Q[None], Q[None])
    assert np.allclose(layer_averaged_kk(s, 2), (P + Q) / 2, atol=1e-7)
    with pytest.raises(ContractError):
        layer_averaged_kk(s, 3)
    big = stack_of(rng, 4, 3, 10)
    avg = layer_averaged_kk(big)
    assert np.allclose(avg.sum(1), 1.0, atol=1e-6)
    direct = np.mean([h.astype(np.float64) for layer in big.heads["kk"] for h in layer], axis=0)
    assert np.allclose(avg, direct, atol=1e-12)
