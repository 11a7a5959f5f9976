import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermalsplat.filters import (
    SeparableFilter,
    conv3x3_replicate,
    conv3x3_replicate_backward,
    filter_matrix_1d,
    gaussian_taps,
    laplacian,
    laplacian_adjoint,
    sobel_gradients,
)


def test_filter_matrix_rows_sum_to_tap_total():
    taps = gaussian_taps(2, 1.0)
    m = filter_matrix_1d(7, taps)
    assert np.allclose(m.sum(axis=1), 1.0)


def test_separable_filter_matches_direct_loop():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (6, 9))
    taps = gaussian_taps(2, 1.3)
    f = SeparableFilter(6, 9, taps, taps)
    out = f.apply(img)

    expected = np.zeros_like(img)
    for y in range(6):
        for x in range(9):
            acc = 0.0
            for j, wy in enumerate(taps):
                for i, wx in enumerate(taps):
                    sy = min(max(y + j - 2, 0), 5)
                    sx = min(max(x + i - 2, 0), 8)
                    acc += wy * wx * img[sy, sx]
            expected[y, x] = acc
    assert np.allclose(out, expected, atol=1e-12)


def test_separable_adjoint_is_exact_transpose():
    rng = np.random.default_rng(1)
    f = SeparableFilter(5, 7, gaussian_taps(2, 1.5), gaussian_taps(2, 1.5))
    u = rng.normal(size=(5, 7))
    v = rng.normal(size=(5, 7))
    assert np.isclose(np.sum(f.apply(u) * v), np.sum(u * f.adjoint(v)))


def test_laplacian_stencil_values():
    img = np.zeros((5, 5))
    img[2, 2] = 1.0
    out = laplacian(img)
    assert out[2, 2] == -4.0
    for y, x in ((1, 2), (3, 2), (2, 1), (2, 3)):
        assert out[y, x] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_laplacian_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(6, 8))
    v = rng.normal(size=(6, 8))
    assert np.isclose(np.sum(laplacian(u) * v), np.sum(u * laplacian_adjoint(v)))


def test_sobel_on_linear_ramp():
    xs = np.tile(np.arange(8, dtype=float), (6, 1))
    gx, gy = sobel_gradients(xs)
    # d/dx of a unit ramp: classical Sobel weight sum = 8 in the interior.
    assert np.allclose(gx[1:-1, 1:-1], 8.0)
    assert np.allclose(gy[1:-1, 1:-1], 0.0)


def test_conv3x3_matches_naive_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv3x3_replicate(x, w, b)

    c, h, wd = x.shape
    expected = np.zeros((3, h, wd))
    for o in range(3):
        for y in range(h):
            for xx in range(wd):
                acc = b[o]
                for ci in range(c):
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            sy = min(max(y + dy, 0), h - 1)
                            sx = min(max(xx + dx, 0), wd - 1)
                            acc += w[o, ci, dy + 1, dx + 1] * x[ci, sy, sx]
                expected[o, y, xx] = acc
    assert np.allclose(out, expected, atol=1e-12)


def test_conv3x3_backward_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=1)
    g = rng.normal(size=(1, 5, 5))

    d_x, d_w, d_b = conv3x3_replicate_backward(x, w, g)

    def loss(xx, ww, bb):
        return float(np.sum(conv3x3_replicate(xx, ww, bb) * g))

    eps = 1e-6
    for arr, grad in ((x, d_x), (w, d_w), (b, d_b)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            lp = loss(x, w, b)
            arr[idx] = old - eps
            lm = loss(x, w, b)
            arr[idx] = old
            fd = (lp - lm) / (2 * eps)
            assert fd == pytest.approx(grad[idx], rel=1e-6, abs=1e-9)
