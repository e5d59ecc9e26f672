import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gabortex import autodiff as ad
from gabortex.autodiff import Tensor
from gabortex.layers import Linear, MultiHeadAttention
from gabortex.oracle import gradcheck, naive_histogram
from gabortex.texture import (DegenerateMapError, FilterCorrelation, LearnableHistogram, compute_levels,
                              count, histogram_stats, level_features, position_feature, position_table,
                              quantize)

LEVELS4 = np.array([0.25, 0.5, 0.75, 1.0])


def _map_01():
    m = np.full((4, 4), 0.5)
    m[0, 0], m[3, 3] = 0.0, 1.0
    return m


# levels and quantisation -------------------------------------------------------

def test_levels_example():
    q = compute_levels(_map_01(), 4)
    np.testing.assert_allclose(q.levels, LEVELS4)
    assert q.spacing == 0.25
    np.testing.assert_allclose(np.diff(q.levels), q.spacing)


def test_levels_degenerate_and_small_m():
    with pytest.raises(DegenerateMapError):
        compute_levels(np.full((3, 3), 2.0), 4)
    with pytest.raises(ValueError):
        compute_levels(_map_01(), 1)


def test_quantize_examples():
    q = compute_levels(_map_01(), 4)
    img = np.array([[0.5, 0.6], [0.05, 1.0]])
    V = quantize(img, q)
    np.testing.assert_allclose(V[0, 0], [0, 1, 0, 0])
    np.testing.assert_allclose(V[0, 1], [0, 0.9, 0, 0])
    np.testing.assert_array_equal(V[1, 0], [0, 0, 0, 0])
    np.testing.assert_allclose(V[1, 1], [0, 0, 0, 1])


def test_centered_mode():
    q = compute_levels(_map_01(), 4)
    img = np.array([[0.125, 0.2], [0.0, 0.6]])
    Vc = quantize(img, q, centered=True)
    np.testing.assert_allclose(Vc[0, 0], [1, 0, 0, 0])
    np.testing.assert_allclose(Vc[0, 1], [0.4, 0, 0, 0])      # 1 - 0.075/0.125 around 0.125
    np.testing.assert_array_equal(Vc[1, 0], 0.0)              # window edge
    assert np.all(Vc <= 1.0) and np.all(Vc >= 0.0)


def test_wide_spacing_never_goes_negative():
    m = np.zeros((6, 6))
    m[0, 0], m[0, 1] = 2.5, 8.0
    V = quantize(m, compute_levels(m, 2))
    assert np.all(V >= 0)
    assert V[0, 0, 0] == 0.0                                  # 1.5 from level 4, beyond the ramp


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 10)), st.integers(2, 10))
def test_bins_disjoint_and_counts_normalised(m, M):
    if m.max() - m.min() < 1e-6:
        return
    q = compute_levels(m, M)
    V = quantize(m, q)
    assert np.all((V > 0).sum(axis=-1) <= 1)
    assert np.all(V >= 0) and np.all(V < 1 + 1e-12)
    if V.sum() > 0:
        assert abs(count(V).sum() - 1.0) <= 1e-9


def test_count_one_hot_and_oracle():
    V = np.zeros((3, 3, 4))
    V[..., 1] = 1.0
    np.testing.assert_array_equal(count(V), [0, 1, 0, 0])
    rng = np.random.default_rng(0)
    img = rng.choice(LEVELS4, size=(8, 8))
    img[0, 0], img[0, 1] = 0.0, 1.0       # pins min/max so the levels are exactly LEVELS4
    q = compute_levels(img, 4)
    on_level = img[img > 0]
    V = quantize(on_level.reshape(1, -1), q)
    np.testing.assert_allclose(count(V), naive_histogram(on_level, q.levels), atol=1e-15)


def test_count_zero_mass():
    with pytest.raises(DegenerateMapError):
        count(np.zeros((2, 2, 3)))


# position features ---------------------------------------------------------------

def test_position_table_shape_and_range():
    pe = position_table(8, 16)
    assert pe.shape == (8, 8, 16)
    assert np.all(np.abs(pe) <= 1.0)
    # half the channels follow the row index only, half the column index only
    np.testing.assert_array_equal(pe[:, 0, :8], pe[:, 5, :8])
    np.testing.assert_array_equal(pe[0, :, 8:], pe[5, :, 8:])
    with pytest.raises(ValueError):
        position_table(8, 6)


def test_position_feature_zero_and_delta():
    pe = position_table(4, 8)
    V = np.zeros((4, 4, 3))
    np.testing.assert_array_equal(position_feature(V, pe), np.zeros((3, 8)))
    V[2, 1, 1] = 1.0
    np.testing.assert_array_equal(position_feature(V, pe)[1], pe[2, 1])


def test_permutation_changes_position_not_counts():
    rng = np.random.default_rng(1)
    m = rng.uniform(size=(8, 8))
    shuffled = rng.permutation(m.reshape(-1)).reshape(8, 8)
    q1, q2 = compute_levels(m, 4), compute_levels(shuffled, 4)
    V1, V2 = quantize(m, q1), quantize(shuffled, q2)
    np.testing.assert_allclose(count(V1), count(V2), atol=1e-15)
    pe = position_table(8, 8)
    assert not np.allclose(position_feature(V1, pe), position_feature(V2, pe))

    lho = LearnableHistogram(8, 8, 4, 2, np.random.default_rng(2))
    s1 = lho(Tensor(m)).data
    s2 = lho(Tensor(shuffled)).data
    assert not np.allclose(s1, s2)


# level features and attention ------------------------------------------------------

def test_level_features_examples():
    rng = np.random.default_rng(3)
    phi = Linear(2, 6, rng)
    P = rng.normal(size=(4, 6))
    phi.weight.data[:] = 0.0
    np.testing.assert_array_equal(level_features(np.ones(4) / 4, LEVELS4, P, phi).data, P)
    phi.weight.data[:] = rng.normal(size=phi.weight.shape)
    F = level_features(np.full(4, 0.25), np.full(4, 0.5), np.zeros((4, 6)), phi).data
    np.testing.assert_allclose(F, np.broadcast_to(F[0], F.shape))


def test_level_features_phi_gradient():
    rng = np.random.default_rng(4)
    phi = Linear(2, 6, rng)
    W = rng.normal(size=(4, 6))
    f = lambda: ad.sum(ad.mul(level_features(rng_c, LEVELS4, np.zeros((4, 6)), phi, count_scale=4.0), W))
    rng_c = rng.dirichlet(np.ones(4))
    assert all(r.passed for r in gradcheck(f, phi.parameters()))


def test_mha_single_token_and_symmetry():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(8, 2, rng)
    tok = rng.normal(size=(1, 8))
    expect = tok @ mha.w_v.data @ mha.w_out.data
    np.testing.assert_allclose(mha(Tensor(tok)).data, expect, rtol=1e-12)
    same = np.repeat(tok, 5, axis=0)
    out = mha(Tensor(same)).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=1e-12)


def test_mha_rows_sum_to_one_and_divisibility():
    rng = np.random.default_rng(6)
    mha = MultiHeadAttention(8, 4, rng)
    mha(Tensor(rng.normal(size=(3, 6, 8)) * 5))
    assert np.abs(mha.last_attention.sum(axis=-1) - 1.0).max() <= 1e-12
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4, rng)


# full LHO ----------------------------------------------------------------------------

def test_lho_shape_and_degenerate_map():
    lho = LearnableHistogram(8, 16, 4, 4, np.random.default_rng(7))
    maps = np.random.default_rng(8).uniform(size=(2, 3, 8, 8))
    maps[1, 2] = 0.3                                     # constant map
    out = lho(Tensor(maps))
    assert out.shape == (2, 3, 16)
    assert np.all(np.isfinite(out.data))
    st_ = lho.last
    np.testing.assert_allclose(st_.counts.data[1, 2], 0.25)
    np.testing.assert_array_equal(st_.position.data[1, 2], 0.0)
    np.testing.assert_allclose(st_.counts.data.sum(axis=-1), 1.0, atol=1e-9)


def test_lho_size_mismatch():
    lho = LearnableHistogram(8, 8, 4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        lho(Tensor(np.zeros((4, 4))))


def test_histogram_stats_matches_single_map_helpers():
    rng = np.random.default_rng(9)
    m = rng.uniform(size=(8, 8))
    pe = position_table(8, 8)
    st_ = histogram_stats(Tensor(m.reshape(1, -1)), 4, pe.reshape(64, 8), position_norm="sum")
    q = compute_levels(m, 4)
    V = quantize(m, q)
    np.testing.assert_allclose(st_.levels.data[0], q.levels, rtol=1e-14)
    np.testing.assert_allclose(st_.counts.data[0], count(V), rtol=1e-12)
    np.testing.assert_allclose(st_.position.data[0], position_feature(V, pe), rtol=1e-12, atol=1e-14)


def test_lho_gradients_at_interior_point():
    rng = np.random.default_rng(10)
    lho = LearnableHistogram(8, 8, 4, 2, rng)
    maps = Tensor(rng.uniform(size=(2, 8, 8)), requires_grad=True)
    W = rng.normal(size=(2, 8))
    lho.freeze = True
    try:
        reports = gradcheck(lambda: ad.sum(ad.mul(lho(maps), W)), {"maps": maps, **lho.parameters()},
                            max_entries=10, rng=rng)
    finally:
        lho.freeze = False
    assert all(r.passed for r in reports), [str(r) for r in reports if not r.passed]


# FCM ---------------------------------------------------------------------------------

def _params(rng, n):
    return {k: Tensor(rng.uniform(0.2, 2.0, n), requires_grad=True) for k in FilterCorrelation.PARAMS}


def test_fcm_single_filter():
    rng = np.random.default_rng(11)
    fcm = FilterCorrelation(8, 2, rng)
    stats = rng.normal(size=(3, 1, 8))
    p = _params(rng, 1)
    table = np.stack([p[k].data for k in FilterCorrelation.PARAMS], axis=-1)
    tok = stats + fcm.phi(Tensor(table)).data
    expect = tok[:, 0] @ fcm.attention.w_v.data @ fcm.attention.w_out.data
    np.testing.assert_allclose(fcm(Tensor(stats), p).data, expect, rtol=1e-12)


def test_fcm_zero_embedding_identical_stats():
    rng = np.random.default_rng(12)
    fcm = FilterCorrelation(8, 2, rng)
    fcm.phi.weight.data[:] = 0.0
    s = rng.normal(size=8)
    stats = np.broadcast_to(s, (2, 4, 8)).copy()
    out = fcm(Tensor(stats), _params(rng, 4)).data
    common = fcm.attention(Tensor(s[None])).data[0]
    np.testing.assert_allclose(out, np.broadcast_to(common, (2, 8)), rtol=1e-12)


def test_fcm_count_mismatch():
    rng = np.random.default_rng(13)
    fcm = FilterCorrelation(8, 2, rng)
    with pytest.raises(ValueError):
        fcm(Tensor(rng.normal(size=(2, 3, 8))), _params(rng, 4))


def test_fcm_param_scale_divides_inputs():
    rng = np.random.default_rng(14)
    a = FilterCorrelation(8, 2, np.random.default_rng(0))
    b = FilterCorrelation(8, 2, np.random.default_rng(0), param_scale={k: 2.0 for k in FilterCorrelation.PARAMS})
    stats = Tensor(rng.normal(size=(2, 3, 8)))
    p = _params(rng, 3)
    half = {k: Tensor(v.data / 2.0) for k, v in p.items()}
    np.testing.assert_allclose(b(stats, p).data, a(stats, half).data, rtol=1e-12)


def test_fcm_norm_gradient_reaches_raw_gabor_parameters():
    from gabortex.gabor import FilterBank

    rng = np.random.default_rng(15)
    bank = FilterBank(4, 16, rng)
    fcm = FilterCorrelation(8, 2, rng)
    stats = Tensor(rng.normal(size=(2, 4, 8)))
    f = lambda: ad.sum(ad.square(fcm(stats, bank.values())))
    reports = gradcheck(f, bank.parameters())
    assert all(r.passed for r in reports)
    assert all(np.any(p.grad != 0) for p in bank.parameters().values())
