"""Subspace-attention block and squeeze-excitation baseline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulsam import gradcheck
from ulsam.attention import (
    SeConfig,
    SeWeights,
    UlsamBlock,
    UlsamConfig,
    UlsamWeights,
    attention_map,
    case3_attention,
    init_se_weights,
    init_ulsam_weights,
    se_forward,
    split_groups,
    ulsam_attention_maps,
    ulsam_forward,
)
from ulsam.errors import ConfigurationError, StateError
from ulsam.tensor import Tensor, parameter


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def rand_weights(m, seed=0):
    rng = np.random.default_rng(seed)
    return UlsamWeights(parameter(rng.normal(size=m)), parameter(rng.normal(size=m)))


def zero_weights(m):
    return UlsamWeights(parameter(np.zeros(m)), parameter(np.zeros(m)))


# ---------------------------------------------------------------------------
# configuration and splitting
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("m,g", [(8, 3), (8, 16), (4, 0)])
def test_config_rejects_bad_group_counts(m, g):
    with pytest.raises(ConfigurationError):
        UlsamConfig(m, g)


def test_split_groups_contiguous_slices():
    x = np.random.default_rng(0).normal(size=(2, 8, 3, 3))
    parts = split_groups(t(x), 4)
    assert [p.shape[1] for p in parts] == [2, 2, 2, 2]
    for i, p in enumerate(parts):
        np.testing.assert_array_equal(p.data, x[:, 2 * i : 2 * i + 2])


def test_split_groups_degenerate_cases():
    x = np.random.default_rng(1).normal(size=(1, 4, 2, 2))
    whole = split_groups(t(x), 1)
    assert len(whole) == 1
    np.testing.assert_array_equal(whole[0].data, x)
    singles = split_groups(t(x), 4)
    assert len(singles) == 4 and all(p.shape[1] == 1 for p in singles)


def test_split_groups_uneven_rejected():
    with pytest.raises(ConfigurationError, match="divide"):
        split_groups(t(np.zeros((1, 6, 2, 2))), 4)


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def test_attention_map_zero_weights_uniform():
    rng = np.random.default_rng(2)
    f = t(rng.normal(size=(3, 2, 4, 5)))
    for dw, pw in [(np.zeros(2), rng.normal(size=2)), (rng.normal(size=2), np.zeros(2))]:
        a = attention_map(f, parameter(dw), parameter(pw))
        np.testing.assert_allclose(a.data, 1.0 / 20.0, rtol=0, atol=1e-15)


def test_attention_map_hand_softmax_values():
    # the softmax stage on logits (0, 0, 0, ln 3): exp sums to 6
    from ulsam import ops

    logits = t(np.array([0.0, 0.0, 0.0, np.log(3.0)]).reshape(1, 1, 2, 2))
    a = ops.spatial_softmax(logits)
    np.testing.assert_allclose(a.data.ravel(), [1 / 6, 1 / 6, 1 / 6, 1 / 2], atol=1e-15)


def test_attention_map_unit_weights_matches_pool_softmax():
    from ulsam import ops

    rng = np.random.default_rng(3)
    f = t(rng.normal(size=(1, 1, 3, 3)))
    a = attention_map(f, parameter(np.ones(1)), parameter(np.ones(1)))
    expect = ops.spatial_softmax(ops.maxpool_3x3_p1(f))
    np.testing.assert_array_equal(a.data, expect.data)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(4, 1), (4, 2), (4, 4), (6, 3), (8, 8)]),
       st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_attention_maps_sum_to_one(mg, b, h, w, seed):
    m, g = mg
    rng = np.random.default_rng(seed)
    f = Tensor(rng.normal(scale=3.0, size=(b, m, h, w)))
    maps = ulsam_attention_maps(f, UlsamConfig(m, g), rand_weights(m, seed))
    sums = maps.data.reshape(b, g, h * w).sum(axis=-1)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)


# ---------------------------------------------------------------------------
# the block: forward
# ---------------------------------------------------------------------------


def test_forward_zero_weights_residual_scaling():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(2, 8, 2, 2))
    out = ulsam_forward(t(f), UlsamConfig(8, 4), zero_weights(8))
    np.testing.assert_allclose(out.data, 1.25 * f, rtol=1e-15)


@pytest.mark.parametrize("g", [1, 2, 4, 8, 16])
def test_param_count_is_2m_for_512_channels(g):
    cfg = UlsamConfig(512, g)
    w = init_ulsam_weights(cfg, np.random.default_rng(0))
    assert w.param_count == 1024


@pytest.mark.parametrize("m,g,h,w", [(4, 2, 3, 3), (8, 1, 2, 5), (6, 6, 4, 1), (12, 4, 2, 2)])
def test_output_shape_equals_input_shape(m, g, h, w):
    f = t(np.random.default_rng(5).normal(size=(2, m, h, w)))
    out = ulsam_forward(f, UlsamConfig(m, g), rand_weights(m))
    assert out.shape == (2, m, h, w)


def test_group_locality_zeroing_other_groups():
    rng = np.random.default_rng(6)
    m, g, width = 8, 4, 2
    f = rng.normal(size=(1, m, 3, 3))
    weights = rand_weights(m, seed=3)
    base = ulsam_forward(t(f), UlsamConfig(m, g), weights).data
    for grp in range(g):
        lo, hi = grp * width, (grp + 1) * width
        zeroed = np.zeros_like(f)
        zeroed[:, lo:hi] = f[:, lo:hi]
        out = ulsam_forward(t(zeroed), UlsamConfig(m, g), weights).data
        np.testing.assert_array_equal(out[:, lo:hi], base[:, lo:hi])


def test_within_group_permutation_equivariance_bitwise():
    # eighth-integer lattice inputs/weights: the pointwise reduction is exact,
    # so reordering summands cannot perturb the logits
    rng = np.random.default_rng(7)
    m, g, width = 8, 2, 4
    f = rng.integers(-16, 17, size=(2, m, 3, 3)) / 8.0
    dw = rng.integers(-8, 9, size=m) / 8.0
    pw = rng.integers(-8, 9, size=m) / 8.0
    base = ulsam_forward(t(f), UlsamConfig(m, g), UlsamWeights(parameter(dw), parameter(pw))).data

    perm = np.arange(m)
    perm[0:width] = rng.permutation(width)  # permute inside group 0 only
    out = ulsam_forward(
        t(f[:, perm]), UlsamConfig(m, g),
        UlsamWeights(parameter(dw[perm]), parameter(pw[perm])),
    ).data
    np.testing.assert_array_equal(out, base[:, perm])


def test_group_independence_other_weights_irrelevant():
    rng = np.random.default_rng(8)
    m, g, width = 6, 3, 2
    f = rng.normal(size=(1, m, 4, 4))
    w1 = rand_weights(m, seed=1)
    w2 = UlsamWeights(parameter(w1.dw.data.copy()), parameter(w1.pw.data.copy()))
    w2.dw.data[width:] = 99.0  # clobber every other group's weights
    w2.pw.data[width:] = -99.0
    a = ulsam_forward(t(f), UlsamConfig(m, g), w1).data
    b = ulsam_forward(t(f), UlsamConfig(m, g), w2).data
    np.testing.assert_array_equal(a[:, :width], b[:, :width])


def test_forward_rejects_wrong_channel_count():
    with pytest.raises(ConfigurationError, match="channels"):
        ulsam_forward(t(np.zeros((1, 6, 2, 2))), UlsamConfig(8, 2), rand_weights(8))


# ---------------------------------------------------------------------------
# the block: backward
# ---------------------------------------------------------------------------


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    cfg = UlsamConfig(4, 2)
    arrays = [
        gradcheck.well_separated_windows(rng, (1, 4, 3, 3)),
        rng.normal(size=4),
        rng.normal(size=4),
    ]

    def fn(x, dw, pw):
        return ulsam_forward(x, cfg, UlsamWeights(dw, pw))

    assert gradcheck.check_fn(fn, arrays, rng) < 1e-4


def test_backward_zero_upstream_gives_zero_gradients():
    block = UlsamBlock(6, 3, rng=np.random.default_rng(10))
    x = t(np.random.default_rng(11).normal(size=(2, 6, 3, 3)))
    out = block.forward(x)
    dx, ddw, dpw = block.backward(np.zeros(out.shape))
    assert not dx.any() and not ddw.any() and not dpw.any()


def test_backward_group_locality_of_gradients():
    rng = np.random.default_rng(12)
    m, g, width = 8, 4, 2
    block = UlsamBlock(m, g, rng=rng)
    x = t(rng.normal(size=(1, m, 3, 3)))
    out = block.forward(x)
    upstream = np.zeros(out.shape)
    upstream[:, 0:width] = rng.normal(size=(1, width, 3, 3))  # group 0 only
    dx, ddw, dpw = block.backward(upstream)
    assert not dx[:, width:].any()
    assert not ddw[width:].any() and not dpw[width:].any()


def test_backward_before_forward_raises_state_error():
    block = UlsamBlock(4, 2)
    with pytest.raises(StateError, match="before"):
        block.backward(np.zeros((1, 4, 2, 2)))


# ---------------------------------------------------------------------------
# g = m closed form
# ---------------------------------------------------------------------------


def test_case3_unit_weights_is_pooled_softmax_per_channel():
    from ulsam import ops

    rng = np.random.default_rng(13)
    f = rng.normal(size=(1, 3, 4, 4))
    w = UlsamWeights(parameter(np.ones(3)), parameter(np.ones(3)))
    a = case3_attention(t(f), w)
    for c in range(3):
        expect = ops.spatial_softmax(ops.maxpool_3x3_p1(t(f[:, c : c + 1])))
        np.testing.assert_array_equal(a.data[:, c : c + 1], expect.data)


def test_case3_agrees_bitwise_with_grouped_path():
    rng = np.random.default_rng(14)
    f = t(rng.normal(size=(2, 3, 4, 4)))
    w = rand_weights(3, seed=5)
    closed = case3_attention(f, w)
    grouped = ulsam_attention_maps(f, UlsamConfig(3, 3), w)
    np.testing.assert_array_equal(closed.data, grouped.data)


def test_case3_zero_pointwise_gives_uniform_attention():
    rng = np.random.default_rng(15)
    f = t(rng.normal(size=(1, 2, 3, 3)))
    w = UlsamWeights(parameter(rng.normal(size=2)), parameter(np.zeros(2)))
    a = case3_attention(f, w)
    np.testing.assert_allclose(a.data, 1.0 / 9.0, atol=1e-15)


def test_case3_requires_full_grouping():
    with pytest.raises(ConfigurationError, match="g = m"):
        case3_attention(t(np.zeros((1, 4, 2, 2))), rand_weights(2))


# ---------------------------------------------------------------------------
# squeeze-excitation baseline
# ---------------------------------------------------------------------------


def test_se_zero_weights_halves_features():
    f = np.random.default_rng(16).normal(size=(2, 4, 3, 3))
    cfg = SeConfig(4, 2)
    w = SeWeights(parameter(np.zeros((4, 2))), parameter(np.zeros((2, 4))))
    out = se_forward(t(f), cfg, w)
    np.testing.assert_allclose(out.data, 0.5 * f, rtol=1e-15)


def test_se_param_count_matches_closed_form():
    cfg = SeConfig(512, 16)
    w = init_se_weights(cfg, np.random.default_rng(0))
    assert w.param_count == 32768 == 2 * 512 * 512 // 16


def test_se_reduction_must_divide_channels():
    with pytest.raises(ConfigurationError, match="divide"):
        SeConfig(6, 4)


def test_se_gradients():
    rng = np.random.default_rng(17)
    cfg = SeConfig(4, 2)
    arrays = [rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(4, 2)), rng.normal(size=(2, 4))]

    def fn(x, w1, w2):
        return se_forward(x, cfg, SeWeights(w1, w2))

    assert gradcheck.check_fn(fn, arrays, rng) < 1e-4


# ---------------------------------------------------------------------------
# hypothesis properties
# ---------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 3, 4, 6, 12]), st.integers(0, 2**31 - 1))
def test_property_param_count_independent_of_g(g, seed):
    cfg = UlsamConfig(12, g)
    w = init_ulsam_weights(cfg, np.random.default_rng(seed))
    assert w.param_count == 24


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([(4, 2), (6, 3), (8, 4)]), st.integers(1, 2),
       st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_property_shape_preserved(mg, b, h, w, seed):
    m, g = mg
    rng = np.random.default_rng(seed)
    f = Tensor(rng.normal(size=(b, m, h, w)))
    out = ulsam_forward(f, UlsamConfig(m, g), rand_weights(m, seed))
    assert out.shape == f.shape
