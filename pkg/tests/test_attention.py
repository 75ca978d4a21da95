import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timo.attention import (
    AttentionParams,
    attention_forward,
    attention_probabilities,
    build_gyroscope_set,
    dstga,
    dstga_forward,
    dstga_spatial_similarity,
    gyroscope_mask,
    init_attention_params,
    mhsa,
    mhsa_forward,
    stga,
    stga_oracle,
    updated_bn_stats,
)
from timo.checks import gradcheck_attention, random_attention_params
from timo.numerics import DimensionError, grad_check

from oracles import coords, gyroscope_members, naive_attention, naive_dstga


def _params(D=8, h=2, seed=0, differential=False, training=False):
    return random_attention_params(D, h, np.random.default_rng(seed), differential, training)


# ---------------------------------------------------------------- index sets

def test_gyroscope_hand_example():
    T, Np = 3, 4
    idx = build_gyroscope_set(T, Np)
    q = 0 * 16 + 1 * 4 + 2  # t=0, x=1, y=2
    row = idx.index[q]
    assert len(row) == 18
    assert row[:16].tolist() == list(range(16))
    assert row[16:].tolist() == [1 * 16 + 6, 2 * 16 + 6]


def test_gyroscope_degenerate_axes():
    for Np in (1, 3, 5):
        idx = build_gyroscope_set(1, Np)
        assert idx.size == Np * Np
        assert all(sorted(r) == list(range(Np * Np)) for r in idx.index.tolist())
    for T in (1, 2, 6):
        idx = build_gyroscope_set(T, 1)
        assert idx.size == T
        assert all(sorted(r) == list(range(T)) for r in idx.index.tolist())


@pytest.mark.parametrize("T,Np", [(2, 2), (3, 3), (4, 2), (1, 4)])
def test_gyroscope_membership_against_coordinates(T, Np):
    idx = build_gyroscope_set(T, Np)
    for q in range(T * Np * Np):
        row = idx.index[q].tolist()
        assert len(row) == len(set(row)) == T + Np * Np - 1
        assert sorted(row) == gyroscope_members(T, Np, q)
        assert row.count(q) == 1 and row.index(q) < Np * Np


def test_gyroscope_mask_matches_members():
    T, Np = 3, 2
    m = gyroscope_mask(T, Np)
    for q in range(T * Np * Np):
        assert np.flatnonzero(m[q]).tolist() == gyroscope_members(T, Np, q)


def test_gyroscope_rejects_bad_sizes():
    with pytest.raises(DimensionError):
        build_gyroscope_set(0, 3)


# ---------------------------------------------------------------- MHSA

def test_mhsa_matches_pair_loop():
    x = np.random.default_rng(1).normal(size=(2, 3, 3, 8))
    p = _params(8, 2, seed=1)
    np.testing.assert_allclose(mhsa(x, p), naive_attention(x, p), atol=1e-12)


def test_mhsa_zero_scores_average_values():
    rng = np.random.default_rng(2)
    p = _params(8, 2, seed=2)
    p.wq = np.zeros_like(p.wq)
    p.wk = np.zeros_like(p.wk)
    p.bq = np.zeros(8)
    x = rng.normal(size=(2, 2, 2, 8))
    v = x.reshape(-1, 8) @ p.wv + p.bv
    want = np.broadcast_to(v.mean(0), v.shape) @ p.wo + p.bo
    np.testing.assert_allclose(mhsa(x, p).reshape(-1, 8), want, atol=1e-12)


def test_mhsa_single_token():
    x = np.random.default_rng(3).normal(size=(1, 1, 1, 8))
    p = _params(8, 4, seed=3)
    want = (x.reshape(1, 8) @ p.wv + p.bv) @ p.wo + p.bo
    np.testing.assert_allclose(mhsa(x, p).reshape(1, 8), want, atol=1e-14)


def test_mhsa_permutation_equivariant():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 3, 8))
    p = _params(8, 2, seed=4)
    perm = rng.permutation(18)
    y = mhsa(x, p).reshape(18, 8)
    yp = mhsa(x.reshape(18, 8)[perm].reshape(x.shape), p).reshape(18, 8)
    np.testing.assert_allclose(yp, y[perm], atol=1e-12)


# ---------------------------------------------------------------- STGA

def test_stga_matches_pair_loop_with_coordinate_mask():
    T, Np = 3, 2
    x = np.random.default_rng(5).normal(size=(T, Np, Np, 8))
    p = _params(8, 2, seed=5)
    c = coords(T, Np)

    def allowed(q, k):
        return c[q][0] == c[k][0] or c[q][1:] == c[k][1:]

    np.testing.assert_allclose(stga(x, p), naive_attention(x, p, allowed), atol=1e-12)


def test_stga_matches_oracle():
    x = np.random.default_rng(6).normal(size=(3, 4, 4, 8))
    p = _params(8, 2, seed=6)
    assert np.abs(stga(x, p) - stga_oracle(x, p)).max() < 1e-6


def test_stga_oracle_mass_only_on_gyroscope():
    T, Np = 2, 3
    x = np.random.default_rng(7).normal(size=(T, Np, Np, 8))
    p = _params(8, 2, seed=7)
    _, cache = mhsa_forward(x, p, mask=gyroscope_mask(T, Np))
    for q in range(T * Np * Np):
        nz = np.flatnonzero(cache["attn"][:, q].sum(0) > 0).tolist()
        assert nz == gyroscope_members(T, Np, q)


def test_stga_uniform_when_scores_vanish():
    T, Np = 2, 3
    rng = np.random.default_rng(8)
    p = _params(8, 2, seed=8)
    p.wq = np.zeros_like(p.wq)
    p.bq = np.zeros(8)
    x = rng.normal(size=(T, Np, Np, 8))
    _, cache = attention_forward("S", x, p)
    np.testing.assert_allclose(cache["attn"], 1.0 / (T + Np * Np - 1), atol=1e-15)


def test_stga_equals_mhsa_at_single_timestamp():
    x = np.random.default_rng(9).normal(size=(1, 4, 4, 8))
    p = _params(8, 4, seed=9)
    np.testing.assert_allclose(stga(x, p), mhsa(x, p), atol=1e-12)
    np.testing.assert_allclose(stga_oracle(x, p), mhsa(x, p), atol=0)


def test_stga_index_geometry_mismatch():
    with pytest.raises(DimensionError):
        stga(np.zeros((2, 3, 3, 8)), _params(), build_gyroscope_set(3, 3))


# ---------------------------------------------------------------- D-STGA

@pytest.mark.parametrize("training", [False, True])
@pytest.mark.parametrize("T", [1, 2, 3, 4])
def test_dstga_matches_formula_loop(T, training):
    x = np.random.default_rng(T).normal(size=(T, 2, 2, 8))
    p = _params(8, 2, seed=T, differential=True, training=training)
    p.pi_b = np.array([0.3, -0.2])
    np.testing.assert_allclose(dstga(x, p), naive_dstga(x, p), atol=1e-12)


def test_spatial_similarity_identical_frames_is_time_invariant():
    rng = np.random.default_rng(10)
    q = np.repeat(rng.normal(size=(1, 3, 3, 4)), 4, axis=0)
    k = np.repeat(rng.normal(size=(1, 3, 3, 4)), 4, axis=0)
    p1 = _params(4, 1, seed=10, differential=True)
    S = dstga_spatial_similarity(q, k, p1)
    assert S.shape == (4, 9, 9)
    I = q[0].reshape(9, 4) @ k[0].reshape(9, 4).T / 2.0
    for t in range(4):
        np.testing.assert_allclose(S[t], I, atol=1e-12)


def test_spatial_similarity_zero_projection_gives_I():
    rng = np.random.default_rng(11)
    p = _params(8, 2, seed=11, differential=True)
    p.pi_w = np.zeros_like(p.pi_w)
    Q, K = rng.normal(size=(2, 3, 2, 2, 4)), rng.normal(size=(2, 3, 2, 2, 4))
    S = dstga_spatial_similarity(Q, K, p)
    assert S.shape == (2, 3, 4, 4)
    MQ = np.sort(Q, axis=1)[:, 1].reshape(2, 4, 4)
    MK = np.sort(K, axis=1)[:, 1].reshape(2, 4, 4)
    I = MQ @ MK.transpose(0, 2, 1) / 2.0
    for t in range(3):
        np.testing.assert_allclose(S[:, t], I, atol=1e-12)


def test_dstga_rows_sum_to_one_and_have_gyroscope_length():
    T, Np = 3, 3
    x = np.random.default_rng(12).normal(size=(T, Np, Np, 8))
    _, cache = dstga_forward(x, _params(8, 2, seed=12, differential=True))
    a = attention_probabilities("D", cache)
    assert a.shape[-1] == T + Np * Np - 1
    assert np.abs(a.sum(-1) - 1).max() < 1e-12


def test_dstga_single_timestamp_is_spatial_softmax():
    x = np.random.default_rng(13).normal(size=(1, 3, 3, 8))
    p = _params(8, 2, seed=13, differential=True)
    _, cache = dstga_forward(x, p)
    assert cache["attn"].shape[-1] == 9


def test_dstga_identical_frames_equals_stga():
    # zero projection: the spatial block equals the per-frame scores, so the
    # two mechanisms see identical score rows
    rng = np.random.default_rng(14)
    p = _params(8, 2, seed=14, differential=True)
    p.pi_w = np.zeros_like(p.pi_w)
    x = np.repeat(rng.normal(size=(1, 3, 3, 8)), 3, axis=0)
    np.testing.assert_allclose(dstga(x, p), stga(x, p), atol=1e-12)
    y = dstga(x, p)
    np.testing.assert_allclose(y[0], y[2], atol=1e-12)


def test_dstga_identical_frames_differs_from_single_frame():
    # the T-1 duplicate temporal keys add weight to the query's own value
    from timo.acceptance import degenerate_dstga_deviation

    assert degenerate_dstga_deviation(T=1) < 1e-12
    assert degenerate_dstga_deviation(T=3) > 1e-3


def test_dstga_requires_projection():
    with pytest.raises(DimensionError):
        dstga(np.zeros((2, 2, 2, 8)), _params())


def test_batch_norm_running_stats_update():
    x = np.random.default_rng(15).normal(size=(3, 2, 2, 8))
    p = _params(8, 2, seed=15, differential=True, training=True)
    _, cache = dstga_forward(x, p)
    mean, var = updated_bn_stats(cache)
    z = cache["sc"]["bn"]["zhat"]
    assert mean.shape == var.shape == (2,)
    assert np.all(var != 1.0) and np.abs(z.mean(axis=(1, 2, 3))).max() < 1e-12
    p.training = False
    _, cache = dstga_forward(x, p)
    np.testing.assert_array_equal(updated_bn_stats(cache)[0], p.bn_running_mean)


# ---------------------------------------------------------------- shared properties

@settings(max_examples=15, deadline=None)
@given(kind=st.sampled_from("MSD"), T=st.integers(1, 3), Np=st.integers(1, 3), h=st.sampled_from([1, 2, 4]))
def test_shapes_and_row_sums(kind, T, Np, h):
    rng = np.random.default_rng(T * 100 + Np * 10 + h)
    x = rng.normal(size=(T, Np, Np, 8))
    p = init_attention_params(8, h, rng, differential=(kind == "D"), std=0.5)
    out, cache = attention_forward(kind, x, p)
    assert out.shape == x.shape
    a = attention_probabilities(kind, cache)
    assert np.abs(a.sum(-1) - 1).max() < 1e-6


def test_heads_must_divide_dim():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        AttentionParams(*(rng.normal(size=(6, 6)), np.zeros(6)) * 4, heads=4)


@pytest.mark.parametrize("kind", ["S", "D"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients(kind, seed):
    errs = gradcheck_attention(kind, seed, coords=None)
    assert max(errs.values()) < 1e-4, errs


def test_stga_sum_gradcheck_small():
    # output scalarised by a plain sum, T=2, Np=3, D'=4
    rng = np.random.default_rng(16)
    p = init_attention_params(8, 2, rng, std=0.5)
    x = rng.normal(size=(2, 3, 3, 8))

    def f(xx):
        out, cache = attention_forward("S", xx, p)
        from timo.attention import attention_backward

        return float(out.sum()), attention_backward("S", np.ones_like(out), cache, p)[0]

    assert grad_check(f, x) < 1e-4


def test_deterministic_bitwise():
    x = np.random.default_rng(17).normal(size=(3, 3, 3, 8))
    for kind in "MSD":
        p = _params(8, 2, seed=17, differential=(kind == "D"))
        a, _ = attention_forward(kind, x, p)
        b, _ = attention_forward(kind, x.copy(), p)
        assert a.tobytes() == b.tobytes()


def test_all_geometries_oracle_sweep_small():
    worst = 0.0
    for T, Np in itertools.product((1, 2, 3), (1, 2, 3)):
        x = np.random.default_rng(T * 7 + Np).normal(size=(T, Np, Np, 8))
        p = _params(8, 2, seed=T + Np)
        worst = max(worst, np.abs(stga(x, p) - stga_oracle(x, p)).max())
    assert worst < 1e-12
