import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from obbkit.errors import ShapeError
from obbkit.featops import ConvKernel, FeatureGrid, conv2d_ref
from obbkit.orientation import (
    RING,
    OrientedFeatureGrid,
    RotatingFilter,
    arf_conv,
    orientation_pool,
    rotate_filter,
)


def rand_filter(rng, O, C, N):
    return RotatingFilter(rng.normal(size=(O, C, N, 3, 3)))


def rot_cw(a):
    """Quarter turn clockwise of the two leading spatial axes (rows down, cols right)."""
    return np.rot90(a, k=-1, axes=(0, 1))


def roll_orient(values, N, shift):
    H, W, C = values.shape
    return np.roll(values.reshape(H, W, C // N, N), shift, axis=-1).reshape(H, W, C)


class TestRotateFilter:
    def test_identity(self):
        f = rand_filter(np.random.default_rng(0), 2, 3, 8)
        np.testing.assert_array_equal(rotate_filter(f, 0).weights, f.weights)

    def test_quarter_turn_ring_permutation(self):
        # ring a..h clockwise from top-left, centre z; N = 4, one step = 90 deg
        w = np.zeros((1, 1, 4, 3, 3))
        labels = {pos: v for pos, v in zip(RING, range(1, 9))}
        for (r, c), v in labels.items():
            w[0, 0, 0, r, c] = v
        w[0, 0, 0, 1, 1] = 99
        got = rotate_filter(RotatingFilter(w), 1).weights
        # orientation channel 0 moved to channel 1
        assert not got[0, 0, 0].any()
        ring_after = [got[0, 0, 1, r, c] for r, c in RING]
        assert ring_after == [7, 8, 1, 2, 3, 4, 5, 6]
        assert got[0, 0, 1, 1, 1] == 99
        np.testing.assert_array_equal(got[0, 0, 1], rot_cw(w[0, 0, 0]))

    def test_eighth_turn_shifts_one_ring_slot(self):
        w = np.zeros((1, 1, 8, 3, 3))
        w[0, 0, 3, 0, 0] = 1.0
        got = rotate_filter(RotatingFilter(w), 1).weights
        assert got[0, 0, 4, 0, 1] == 1.0
        assert got.sum() == 1.0

    @pytest.mark.parametrize("N", [1, 2, 4, 8])
    def test_full_circle_closure(self, N):
        f = rand_filter(np.random.default_rng(N), 2, 2, N)
        step = 1 % N  # N = 1 has only the identity rotation
        g = f
        for _ in range(N):
            g = rotate_filter(g, step)
        np.testing.assert_array_equal(g.weights, f.weights)

    def test_composition_matches_index(self):
        f = rand_filter(np.random.default_rng(3), 1, 1, 8)
        g = f
        for i in range(1, 8):
            g = rotate_filter(g, 1)
            np.testing.assert_array_equal(g.weights, rotate_filter(f, i).weights)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            rotate_filter(rand_filter(np.random.default_rng(0), 1, 1, 4), 4)

    def test_unsupported_n(self):
        with pytest.raises(ShapeError):
            RotatingFilter(np.zeros((1, 1, 3, 3, 3)))


class TestArfConv:
    def test_n1_is_plain_conv(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 6, 3))
        f = rand_filter(rng, 2, 3, 1)
        got = arf_conv(OrientedFeatureGrid(x, 1, 1), f).values
        want = conv2d_ref(FeatureGrid(x), ConvKernel(f.weights[:, :, 0])).values
        np.testing.assert_array_equal(got, want)

    @pytest.mark.parametrize("seed", range(5))
    def test_quarter_turn_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        N = 4
        x = rng.normal(size=(8, 8, 2 * N))
        f = rand_filter(rng, 3, 2, N)
        y = arf_conv(OrientedFeatureGrid(x, 1, N), f).values
        x_rot = roll_orient(rot_cw(x), N, 1)
        y_rot = arf_conv(OrientedFeatureGrid(x_rot, 1, N), f).values
        np.testing.assert_allclose(y_rot, roll_orient(rot_cw(y), N, 1), atol=1e-10)

    def test_half_turn_equivariance_n8(self):
        rng = np.random.default_rng(9)
        N = 8
        x = rng.normal(size=(7, 7, N))
        f = rand_filter(rng, 1, 1, N)
        y = arf_conv(OrientedFeatureGrid(x, 1, N), f).values
        x_rot = roll_orient(rot_cw(rot_cw(x)), N, 4)
        y_rot = arf_conv(OrientedFeatureGrid(x_rot, 1, N), f).values
        np.testing.assert_allclose(y_rot, roll_orient(rot_cw(rot_cw(y)), N, 4), atol=1e-10)

    def test_impulse_response(self):
        rng = np.random.default_rng(7)
        N = 4
        f = rand_filter(rng, 1, 1, N)
        x = np.zeros((7, 7, N))
        q = (3, 3)
        x[q[0], q[1], 0] = 1.0  # impulse on input orientation 0
        y = arf_conv(OrientedFeatureGrid(x, 1, N), f).values
        for i in range(N):
            taps = rotate_filter(f, i).weights[0, 0, 0]
            # correlation: Y(q - r) = W(r)
            for ry in (-1, 0, 1):
                for rx in (-1, 0, 1):
                    assert y[q[0] - ry, q[1] - rx, i] == taps[ry + 1, rx + 1]

    def test_orientation_mismatch(self):
        with pytest.raises(ShapeError):
            arf_conv(OrientedFeatureGrid(np.zeros((3, 3, 8)), 1, 8), rand_filter(np.random.default_rng(0), 1, 2, 4))


class TestOrientationPool:
    def test_paper_channel_count(self):
        x = OrientedFeatureGrid(np.random.default_rng(0).normal(size=(4, 5, 256)), 8, 8)
        assert orientation_pool(x).values.shape == (4, 5, 32)

    def test_dominant_channel(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(3, 3, 2, 8))
        base[..., 5] = np.abs(base).max() + 1 + rng.uniform(size=(3, 3, 2))
        pooled = orientation_pool(OrientedFeatureGrid(base.reshape(3, 3, 16), 1, 8)).values
        np.testing.assert_array_equal(pooled, base[..., 5])

    @given(st.integers(0, 7), st.integers(0, 10_000))
    def test_cyclic_shift_invariance_and_dominance(self, shift, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4, 24))
        pooled = orientation_pool(OrientedFeatureGrid(x, 1, 8)).values
        shifted = orientation_pool(OrientedFeatureGrid(roll_orient(x, 8, shift), 1, 8)).values
        assert np.array_equal(pooled, shifted)
        assert np.all(pooled[..., None] >= x.reshape(3, 4, 3, 8))
