"""Trilinear / nearest warping, pyramids and field upsampling."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from fcnreg.tensor import Tensor
from fcnreg.volume import DisplacementField, Volume
from fcnreg.warp import downsample_half, pyramid, upsample_field, warp_nearest, warp_trilinear

DIMS = (4, 5, 6)


def gather_clamp(vol, field):
    """Index-arithmetic oracle for integer fields."""
    D, H, W = vol.shape
    z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    zz = np.clip(z + field[0].astype(int), 0, D - 1)
    yy = np.clip(y + field[1].astype(int), 0, H - 1)
    xx = np.clip(x + field[2].astype(int), 0, W - 1)
    return vol[zz, yy, xx]


def test_zero_field_is_exact_identity():
    vol = Volume(np.random.default_rng(0).normal(size=DIMS))
    out = warp_trilinear(vol, DisplacementField.zeros(DIMS))
    assert_array_equal(out.data, vol.data)


def test_unit_x_shift_replicates_border():
    vol = np.random.default_rng(1).normal(size=DIMS).astype(np.float32)
    out = warp_trilinear(Volume(vol), DisplacementField.constant(DIMS, (0, 0, 1))).data
    assert_array_equal(out[..., :-1], vol[..., 1:])
    assert_array_equal(out[..., -1], vol[..., -1])


def test_half_voxel_shift_on_ramp():
    ramp = np.broadcast_to(np.arange(6, dtype=np.float32), DIMS)
    out = warp_trilinear(Volume(ramp), DisplacementField.constant(DIMS, (0, 0, 0.5))).data
    assert_allclose(out[..., :-1], ramp[..., :-1] + 0.5, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_integer_fields_match_gather_oracle(seed):
    rng = np.random.default_rng(seed)
    vol = rng.normal(size=DIMS).astype(np.float32)
    field = rng.integers(-3, 4, size=(3, *DIMS)).astype(np.float32)
    out = warp_trilinear(Volume(vol), DisplacementField(field)).data
    assert_array_equal(out, gather_clamp(vol, field))
    labels = rng.integers(0, 3, size=DIMS).astype(np.float32)
    assert_array_equal(warp_nearest(Volume(labels), DisplacementField(field)).data,
                       gather_clamp(labels, field))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), amp=st.floats(0.1, 5.0))
def test_output_within_input_range(seed, amp):
    rng = np.random.default_rng(seed)
    vol = rng.normal(size=DIMS).astype(np.float32)
    field = (amp * rng.normal(size=(3, *DIMS))).astype(np.float32)
    out = warp_trilinear(Volume(vol), DisplacementField(field)).data
    assert out.min() >= vol.min() - 1e-5
    assert out.max() <= vol.max() + 1e-5


def test_nearest_identity_and_shift():
    labels = np.random.default_rng(2).integers(0, 4, size=DIMS).astype(np.float32)
    assert_array_equal(warp_nearest(Volume(labels), DisplacementField.zeros(DIMS)).data, labels)
    shifted = warp_nearest(Volume(labels), DisplacementField.constant(DIMS, (0, 0, 1))).data
    assert_array_equal(shifted[..., :-1], labels[..., 1:])


def test_nearest_rounds_half_away_from_zero():
    labels = np.broadcast_to(np.arange(6, dtype=np.float32), DIMS)
    out = warp_nearest(Volume(labels), DisplacementField.constant(DIMS, (0, 0, 0.5))).data
    # x + 0.5 rounds up for every x >= 0
    assert_array_equal(out[0, 0], [1, 2, 3, 4, 5, 5])
    out = warp_nearest(Volume(labels), DisplacementField.constant(DIMS, (0, 0, -0.5))).data
    # x - 0.5 is half-way: 0.5 -> 1, 1.5 -> 2; -0.5 clamps to 0
    assert_array_equal(out[0, 0], [0, 1, 2, 3, 4, 5])


def test_trilinear_tensor_gradients_reach_moving_and_field():
    rng = np.random.default_rng(3)
    m = Tensor(rng.normal(size=(1, 1, *DIMS)), requires_grad=True)
    f = Tensor(0.3 * rng.normal(size=(1, 3, *DIMS)), requires_grad=True)
    out = warp_trilinear(m, f)
    (out * out).sum().backward()
    assert np.abs(m.grad).sum() > 0 and np.abs(f.grad).sum() > 0


def test_warp_dims_mismatch():
    with pytest.raises(ValueError):
        warp_trilinear(Volume(np.zeros(DIMS)), DisplacementField.zeros((4, 5, 5)))


# -- pyramid ------------------------------------------------------------------

def test_downsample_constant_and_block_mean():
    assert_allclose(downsample_half(Volume(np.full((4, 4, 4), 2.5))).data, 2.5)
    out = downsample_half(Volume(np.arange(1.0, 9.0).reshape(2, 2, 2)))
    assert out.dims == (1, 1, 1)
    assert_allclose(out.data.reshape(-1), [4.5])


def test_two_halvings_of_input_grid():
    vol = Volume(np.zeros((32, 48, 48)))
    assert downsample_half(downsample_half(vol)).dims == (8, 12, 12)
    levels = pyramid(np.zeros((1, 1, 32, 48, 48)), 3)
    assert [lv.shape[2:] for lv in levels] == [(32, 48, 48), (16, 24, 24), (8, 12, 12)]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_downsample_preserves_mean(seed):
    vol = np.random.default_rng(seed).normal(size=(4, 8, 6))
    assert_allclose(downsample_half(vol).mean(), vol.mean(), atol=1e-6)


# -- upsampling ---------------------------------------------------------------

def test_upsample_constant_field_scales_by_factor():
    f = DisplacementField.constant((2, 3, 3), (0.5, -1.0, 0.25), level=2)
    up = upsample_field(f, 4)
    assert up.dims == (8, 12, 12)
    assert up.level == 0
    assert_allclose(up.data[:, 0, 0, 0], [2.0, -4.0, 1.0], rtol=1e-6)
    assert_allclose(up.data, up.data[:, :1, :1, :1] * np.ones_like(up.data), rtol=1e-6)


def test_upsample_linear_field_interior_is_linear():
    # coarse field varying linearly along x; aligned centres keep it linear inside
    coarse = np.zeros((1, 3, 1, 1, 4))
    coarse[0, 2, 0, 0] = np.arange(4.0)
    up = upsample_field(coarse, 2).data[0, 2, 0, 0]
    expected = 2 * ((np.arange(8) + 0.5) / 2 - 0.5)
    assert_allclose(up[1:-1], expected[1:-1], rtol=1e-6)
    assert_allclose(up[[0, -1]], [0.0, 6.0], atol=1e-6)
