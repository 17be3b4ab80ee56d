import numpy as np
import pytest

from shiftmatch.errors import DimensionError
from shiftmatch.tensor import FeatureMatrix, conv2d, matmul, reduce_mean

RNG = np.random.Generator(np.random.PCG64(1234))


def matmul_loops(a, b):
    """Triple-loop float64 oracle."""
    p, k = a.shape
    _, n = b.shape
    out = np.zeros((p, n))
    for i in range(p):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def conv2d_loops(x, w, stride=1, pad=0, circular=False):
    """Direct-summation float64 oracle for cross-correlation."""
    p, c, h, ww = x.shape
    o, _, kh, kw = w.shape
    if circular:
        ho, wo = h // stride, ww // stride
    else:
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((p, o, ho, wo))
    for pi in range(p):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                if circular:
                                    ii = (i * stride + a - kh // 2) % h
                                    jj = (j * stride + b - kw // 2) % ww
                                    acc += float(x[pi, ci, ii, jj]) * float(w[oi, ci, a, b])
                                else:
                                    ii = i * stride + a - pad
                                    jj = j * stride + b - pad
                                    if 0 <= ii < h and 0 <= jj < ww:
                                        acc += float(x[pi, ci, ii, jj]) * float(w[oi, ci, a, b])
                    out[pi, oi, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2, dtype=np.float32)
        assert np.array_equal(matmul(eye, eye), eye)
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        assert np.array_equal(matmul(a, eye), a)

    def test_against_loop_oracle(self):
        a = RNG.standard_normal((3, 4)).astype(np.float32)
        b = RNG.standard_normal((4, 2)).astype(np.float32)
        np.testing.assert_allclose(matmul(a, b), matmul_loops(a, b), rtol=1e-6, atol=1e-6)

    def test_associativity(self):
        for _ in range(5):
            a = RNG.standard_normal((4, 5)).astype(np.float32)
            b = RNG.standard_normal((5, 3)).astype(np.float32)
            c = RNG.standard_normal((3, 6)).astype(np.float32)
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-4, atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))


class TestConv2d:
    def test_identity_kernel(self):
        x = RNG.standard_normal((2, 3, 5, 5)).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), np.float32)
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        np.testing.assert_allclose(conv2d(x, w), x, atol=1e-6)

    def test_circular_shift_inverse(self):
        x = RNG.standard_normal((1, 1, 6, 6)).astype(np.float32)
        down = np.zeros((1, 1, 3, 3), np.float32)
        down[0, 0, 2, 1] = 1.0  # delta at (+1, 0) relative to center
        up = np.zeros((1, 1, 3, 3), np.float32)
        up[0, 0, 0, 1] = 1.0
        roundtrip = conv2d(conv2d(x, down, circular=True), up, circular=True)
        np.testing.assert_allclose(roundtrip, x, atol=1e-6)

    def test_averaging_kernel_oracle(self):
        x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
        w = np.full((1, 1, 3, 3), 1.0 / 9.0, np.float32)
        got = conv2d(x, w, stride=1, pad=0)
        np.testing.assert_allclose(got, conv2d_loops(x, w), rtol=1e-6)

    @pytest.mark.parametrize("stride,pad,circular", [(1, 0, False), (1, 2, False), (2, 1, False), (1, 0, True), (2, 0, True)])
    def test_against_loop_oracle(self, stride, pad, circular):
        x = RNG.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = RNG.standard_normal((4, 3, 3, 3)).astype(np.float32)
        got = conv2d(x, w, stride=stride, pad=pad, circular=circular)
        want = conv2d_loops(x, w, stride=stride, pad=pad, circular=circular)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_circular_commutes_with_cyclic_shift(self):
        x = RNG.standard_normal((1, 2, 8, 8)).astype(np.float32)
        w = RNG.standard_normal((2, 2, 3, 3)).astype(np.float32)
        shifted_then_conv = conv2d(np.roll(x, (2, 3), axis=(2, 3)), w, circular=True)
        conv_then_shifted = np.roll(conv2d(x, w, circular=True), (2, 3), axis=(2, 3))
        assert np.array_equal(shifted_then_conv, conv_then_shifted)

    def test_bad_geometry(self):
        x = np.zeros((1, 1, 4, 4), np.float32)
        w = np.zeros((1, 1, 9, 9), np.float32)
        with pytest.raises(DimensionError):
            conv2d(x, w)
        with pytest.raises(DimensionError):
            conv2d(x, np.zeros((1, 1, 3, 3), np.float32), stride=0)
        with pytest.raises(DimensionError):
            conv2d(x, np.zeros((1, 2, 3, 3), np.float32))


class TestReduceMean:
    def test_zeros(self):
        fm = FeatureMatrix(np.zeros((4, 3), np.float32))
        assert np.array_equal(reduce_mean(fm), np.zeros(3))

    def test_two_row_symmetry(self):
        fm = FeatureMatrix(np.array([[0.0, 0.0], [2.0, 4.0]], np.float32))
        np.testing.assert_allclose(reduce_mean(fm), [1.0, 2.0])

    def test_two_pass_oracle(self):
        x = RNG.standard_normal((100, 8)).astype(np.float32)
        want = np.array([sum(float(v) for v in x[:, j]) / 100 for j in range(8)])
        np.testing.assert_allclose(reduce_mean(FeatureMatrix(x)), want, atol=1e-6)

    def test_mean_subtracted_is_zero(self):
        x = RNG.standard_normal((500, 16)).astype(np.float32)
        centered = x - reduce_mean(FeatureMatrix(x))
        assert np.abs(reduce_mean(FeatureMatrix(centered.astype(np.float32)))).max() <= 1e-6


class TestFeatureMatrix:
    def test_layout_must_tile(self):
        with pytest.raises(DimensionError):
            FeatureMatrix(np.zeros((2, 12), np.float32), layout=(2, 2, 2))

    def test_from_maps_round_trip(self):
        x = RNG.standard_normal((3, 2, 4, 5)).astype(np.float32)
        fm = FeatureMatrix.from_maps(x)
        assert fm.layout == (2, 4, 5)
        assert np.array_equal(fm.maps(), x)

    def test_flat_wrap(self):
        fm = FeatureMatrix.from_array(np.zeros((3, 7), np.float32))
        assert fm.layout == (7, 1, 1)
        assert not fm.spatial
