import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_stochastic
from oracles import phi as phi_oracle
from oracles import redistribute_row
from rfclip.config import ModelConfig
from rfclip.errors import ContractError, ParameterError
from rfclip.fixtures import SPIKED_PATCHES, tiny_checkpoint, tiny_run_config
from rfclip.refocus import (RefocusHook, SuppressionHook, apply_suppression, localize_distractors, make_hook,
                            max_embedding_weight, neighborhood_filter, redistribute_attention,
                            redistribute_embeddings)
from rfclip.vit import TokenState, VisionTower

B16 = ModelConfig.b16()


def test_uniform_token_not_distraction():
    f = np.full((1, 768), 0.3)
    assert np.isclose(max_embedding_weight(f, B16.distraction_dims)[0], 1 / 768)
    assert localize_distractors(f, B16).t_dis.size == 0


def test_planted_spike_b16():
    f = np.ones((1, 768))
    f[0, 4] = 10
    p = max_embedding_weight(f, B16.distraction_dims)[0]
    assert np.isclose(p, 10 / 777)
    assert p > B16.tau
    assert localize_distractors(f, B16).t_dis.tolist() == [0]


def test_small_batch_recovers_planted(rng):
    f = rng.uniform(0.5, 1.5, (16, 768))
    f[3, 162] = 12
    f[11, 713] = 9
    assert localize_distractors(f, B16).t_dis.tolist() == [3, 11]


def test_zero_sum_tokens_excluded():
    f = np.zeros((2, 768))
    f[0, 4] = 1.0
    f[0, 5] = -1.0
    prof = localize_distractors(f, B16)
    assert np.isnan(prof.phi[0]) and 0 not in prof.t_dis


@given(st.floats(0.01, 100))
def test_phi_scale_free(c):
    f = np.random.default_rng(0).uniform(0.1, 1, (5, 768))
    f[2, 4] = 20
    a = max_embedding_weight(f, B16.distraction_dims)
    b = max_embedding_weight(c * f, B16.distraction_dims)
    assert np.allclose(a, b, rtol=1e-12)


def test_joint_rule_needs_column_mass(rng):
    cfg = ModelConfig.l14()
    assert cfg.joint_rule and np.isclose(cfg.tau, 6 / 1024)
    f = rng.uniform(0.5, 1.5, (4, 1024))
    f[:2, 250] = 30
    omega = np.array([20.0, 3.0, 40.0, 1.0])
    assert localize_distractors(f, cfg, omega).t_dis.tolist() == [0]
    with pytest.raises(ContractError):
        localize_distractors(f, cfg)


def test_redistribute_worked_example():
    out = redistribute_attention(np.array([[0.2, 0.3, 0.5]]), [2], [0], 0.5)
    assert np.allclose(out, [[0.45, 0.3, 0.25]])
    assert np.isclose(out.sum(), 1.0)


def test_redistribute_empty_sets_identity(rng):
    a = random_stochastic(rng, 6)
    assert np.array_equal(redistribute_attention(a, [], [1, 2], 0.7), a)
    assert np.array_equal(redistribute_attention(a, [1], [], 0.7), a)


def test_redistribute_rejects_overlap_and_bad_beta(rng):
    a = random_stochastic(rng, 4)
    with pytest.raises(ContractError):
        redistribute_attention(a, [1, 2], [2, 3], 0.5)
    with pytest.raises(ParameterError):
        redistribute_attention(a, [1], [2], 1.0)


def test_redistribute_zero_defocus_row_untouched():
    a = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    out = redistribute_attention(a, [0], [2], 0.5)
    assert np.array_equal(out[0], a[0])
    assert np.allclose(out[1], [0.1, 0.3, 0.6])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**31), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))
def test_redistribute_matches_row_oracle(n, seed, beta):
    rng = np.random.default_rng(seed)
    a = random_stochastic(rng, n, (2,))
    perm = rng.permutation(n)
    k = rng.integers(1, n)
    dis, dfc = sorted(perm[:k]), sorted(perm[k : k + rng.integers(1, n - k + 1)])
    out = redistribute_attention(a, dis, dfc, beta)
    for h in range(2):
        for r in range(n):
            assert np.allclose(out[h, r], redistribute_row(list(a[h, r]), dis, dfc, beta), atol=1e-12)
    assert np.allclose(out.sum(-1), 1.0, atol=1e-12)
    rest = np.setdiff1d(np.arange(n), np.union1d(dis, dfc))
    assert np.array_equal(out[..., rest], a[..., rest])


def test_redistribute_monotone_in_beta(rng):
    a = random_stochastic(rng, 8)
    masses = [redistribute_attention(a, [1, 4], [0, 2, 5], b)[:, [1, 4]].sum(1) for b in (0.1, 0.5, 0.9)]
    assert np.all(masses[0] > masses[1]) and np.all(masses[1] > masses[2])


def test_redistribute_twice_still_stochastic(rng):
    a = random_stochastic(rng, 8)
    once = redistribute_attention(a, [1], [2, 3], 0.7)
    twice = redistribute_attention(once, [1], [2, 3], 0.7)
    assert not np.allclose(once, twice)
    assert np.allclose(twice.sum(1), 1.0, atol=1e-12)


def test_redistribute_beta_default_random_8x8(rng):
    for _ in range(50):
        a = random_stochastic(rng, 8)
        assert np.allclose(redistribute_attention(a, [0, 5], [2, 3, 7], 0.7).sum(1), 1.0, atol=1e-6)


def test_embedding_constant_field_interior():
    f = np.zeros((16, 4))
    f[:, 1] = 2.0
    f[5, 1] = 99.0
    out = redistribute_embeddings(f, [5], [1], grid=4)
    assert out[5, 1] == 2.0


def test_embedding_corner_uses_available_neighbours():
    f = np.zeros((9, 2))
    f[[1, 3, 4], 0] = [1.0, 2.0, 3.0]
    f[0, 0] = 50.0
    out = redistribute_embeddings(f, [0], [0], grid=3)
    assert out[0, 0] == 2.0


def test_embedding_changes_only_designated(rng):
    f = rng.standard_normal((196, 768)).astype(np.float32)
    t_dis = [0, 13, 100, 195]
    out = redistribute_embeddings(f, t_dis, B16.distraction_dims, grid=14)
    changed = np.argwhere(out != f)
    assert len(changed) == len(t_dis) * len(B16.distraction_dims)
    assert set(map(tuple, changed)) == {(i, j) for i in t_dis for j in B16.distraction_dims}


def test_embedding_on_token_state_keeps_global(rng):
    f = rng.standard_normal((10, 16)).astype(np.float32)
    s = redistribute_embeddings(TokenState(1, f), [4], [3, 11])
    assert np.array_equal(s.f[0], f[0])
    nb = [0, 1, 2, 3, 5, 6, 7, 8]  # patch 4 is the centre of the 3x3 grid
    assert np.isclose(s.f[5, 3], f[1:][nb, 3].mean(), atol=1e-6)
    assert np.array_equal(s.f[5, :3], f[5, :3])


def test_neg_inf_mask_zeroes_columns(rng):
    a = random_stochastic(rng, 5, (2,))
    _, out = apply_suppression(np.zeros((4, 3)), [1], "neg_inf_mask", 2, attention=a)
    assert np.all(out[..., 2] == 0)
    assert np.allclose(out.sum(-1), 1.0)
    keep = [0, 1, 3, 4]
    assert np.allclose(out[..., keep], a[..., keep] / a[..., keep].sum(-1, keepdims=True))


def test_mean_filter_constant_identity():
    f = np.full((9, 5), 1.25)
    out, _ = apply_suppression(f, [0, 4, 8], "mean_filter", 3)
    assert np.array_equal(out, f)


def test_median_filter_neighbours():
    f = np.zeros((9, 1))
    f[:, 0] = [1, 2, 3, 4, 100, 5, 6, 7, 8]
    out, _ = apply_suppression(f, [4], "median_filter", 3)
    assert out[4, 0] == np.median([1, 2, 3, 4, 5, 6, 7, 8])


def test_low_pass_clamps_to_tau():
    f = np.ones((1, 10))
    f[0, 2] = 10.0
    out, _ = apply_suppression(f, [0], "low_pass", 1, dims=[2], tau=0.2)
    assert out[0, 2] == pytest.approx(0.2 * 19.0)


def test_unknown_strategy():
    with pytest.raises(ParameterError):
        apply_suppression(np.zeros((4, 2)), [0], "blur", 2)


def test_refocus_hook_finds_planted_tokens():
    run = tiny_run_config()
    ckpt = tiny_checkpoint()
    hook = RefocusHook(run)
    window = np.random.default_rng(0).standard_normal((24, 24, 3)).astype(np.float32) * 0.5
    out = VisionTower(ckpt, debug=True).forward(window, hook)
    assert hook.profiles[1].t_dis.tolist() == sorted(SPIKED_PATCHES)
    part = hook.profiles[1].partition
    assert part is not None and part.t_def.size > 0
    assert not set(part.t_def) & set(hook.profiles[1].t_dis)
    base = VisionTower(ckpt).forward(window, None)
    assert not np.array_equal(out.features, base.features)
    # the applied attention kept row sums
    for a in out.stack.used:
        assert np.allclose(a.sum(-1), 1.0, atol=1e-5)


def test_refocus_hook_respects_layer_range():
    run = tiny_run_config().replace(redistribution_layers=(2, 2))
    hook = RefocusHook(run)
    VisionTower(tiny_checkpoint()).forward(np.zeros((24, 24, 3), np.float32), hook)
    assert list(hook.profiles) == []  # layer 2 is the proxy last layer, no hook call


@pytest.mark.parametrize("strategy", ["neg_inf_mask", "low_pass", "mean_filter", "median_filter"])
def test_suppression_modes_run(strategy):
    run = tiny_run_config(mode=f"suppression:{strategy}")
    hook = make_hook(run)
    assert isinstance(hook, SuppressionHook)
    out = VisionTower(tiny_checkpoint(), debug=True).forward(np.zeros((24, 24, 3), np.float32), hook)
    assert np.all(np.isfinite(out.features))
    assert hook.profiles[1].t_dis.size > 0


def test_make_hook_modes():
    assert make_hook(tiny_run_config(mode="kk_proxy_baseline")) is None
    assert isinstance(make_hook(tiny_run_config()), RefocusHook)


def test_phi_matches_oracle(rng):
    f = rng.uniform(-1, 2, (30, 768))
    ours = max_embedding_weight(f, B16.distraction_dims)
    for i in range(30):
        ref = phi_oracle(f[i], B16.distraction_dims)
        assert (ref is None and np.isnan(ours[i])) or np.isclose(ours[i], ref)
