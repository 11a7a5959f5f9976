"""Linear image filters with replicate (clamp-to-edge) boundaries.

Separable filters are represented as explicit 1D banded matrices so that
the adjoint of every operator is literally the matrix transpose.  That
keeps the backward passes of SSIM, the Laplacian feature stage, and the
structure tensor exact to machine precision, including the edge rows
where replicate padding makes the adjoint different from the filter
itself.
"""

from __future__ import annotations

import numpy as np


def filter_matrix_1d(n: int, taps: np.ndarray) -> np.ndarray:
    """Dense n-by-n matrix applying a centered 1D correlation with replicate edges.

    ``taps`` has odd length 2r+1; row i holds taps[j] at column clamp(i+j-r, 0, n-1),
    accumulating weights that fall off the edge onto the clamped column.
    """
    taps = np.asarray(taps, dtype=np.float64)
    r = len(taps) // 2
    m = np.zeros((n, n), dtype=np.float64)
    for j, w in enumerate(taps):
        cols = np.clip(np.arange(n) + j - r, 0, n - 1)
        m[np.arange(n), cols] += w
    return m


def gaussian_taps(radius: int, sigma: float) -> np.ndarray:
    """Sampled, sum-normalized Gaussian taps of length 2*radius+1."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    t = np.exp(-0.5 * (x / sigma) ** 2)
    return t / t.sum()


class SeparableFilter:
    """Correlation with taps_y x taps_x under replicate padding, as out = Fy @ img @ Fx.T.

    ``adjoint`` applies the exact transpose operator, which is what the
    backward passes need at image borders.
    """

    def __init__(self, height: int, width: int, taps_y: np.ndarray, taps_x: np.ndarray):
        self.fy = filter_matrix_1d(height, taps_y)
        self.fxt = filter_matrix_1d(width, taps_x).T

    def apply(self, img: np.ndarray) -> np.ndarray:
        return self.fy @ img @ self.fxt

    def adjoint(self, grad: np.ndarray) -> np.ndarray:
        return self.fy.T @ grad @ self.fxt.T


def laplacian_matrices(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """1D second-difference matrices (Ay, Ax) so that lap(u) = Ay @ u + u @ Ax.T.

    Each is shift(+1) + shift(-1) - 2I with replicate clamping, i.e. the
    per-axis part of the 5-point stencil with zero-flux edges.
    """
    taps = np.array([1.0, -2.0, 1.0])
    return filter_matrix_1d(height, taps), filter_matrix_1d(width, taps)


def laplacian(img: np.ndarray) -> np.ndarray:
    """5-point Laplacian with replicate boundary handling."""
    ay, ax = laplacian_matrices(*img.shape)
    return ay @ img + img @ ax.T


def laplacian_adjoint(grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`laplacian` (transposed boundary matrices)."""
    ay, ax = laplacian_matrices(*grad.shape)
    return ay.T @ grad + grad @ ax


# Classical unnormalized Sobel kernels, separable as smooth x derivative.
_SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])
_SOBEL_DIFF = np.array([-1.0, 0.0, 1.0])


def sobel_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(gx, gy) Sobel gradients with replicate edges.

    gx responds to horizontal intensity change (d/dx, x = column index),
    gy to vertical change.
    """
    h, w = img.shape
    gx = filter_matrix_1d(h, _SOBEL_SMOOTH) @ img @ filter_matrix_1d(w, _SOBEL_DIFF).T
    gy = filter_matrix_1d(h, _SOBEL_DIFF) @ img @ filter_matrix_1d(w, _SOBEL_SMOOTH).T
    return gx, gy


def conv3x3_replicate(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 multi-channel correlation with replicate padding.

    x: (C, H, W); weight: (O, C, 3, 3); bias: (O,).  Returns (O, H, W).
    """
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.tile(bias[:, None, None], (1, h, w)).astype(x.dtype, copy=False)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + h, dx:dx + w]
            out += np.einsum("oc,chw->ohw", weight[:, :, dy, dx], patch)
    return out


def conv3x3_replicate_backward(
    x: np.ndarray, weight: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv3x3_replicate` w.r.t. (x, weight, bias).

    The replicate padding is handled by scatter-adding the padded-input
    gradient back onto the clamped border cells.
    """
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    d_xp = np.zeros_like(xp)
    d_w = np.zeros_like(weight)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + h, dx:dx + w]
            d_w[:, :, dy, dx] = np.einsum("ohw,chw->oc", d_out, patch)
            d_xp[:, dy:dy + h, dx:dx + w] += np.einsum(
                "oc,ohw->chw", weight[:, :, dy, dx], d_out
            )
    d_b = d_out.sum(axis=(1, 2))
    # Fold padded-border gradient onto the edge cells it was replicated from.
    d_x = d_xp[:, 1:-1, 1:-1].copy()
    d_x[:, 0, :] += d_xp[:, 0, 1:-1]
    d_x[:, -1, :] += d_xp[:, -1, 1:-1]
    d_x[:, :, 0] += d_xp[:, 1:-1, 0]
    d_x[:, :, -1] += d_xp[:, 1:-1, -1]
    d_x[:, 0, 0] += d_xp[:, 0, 0]
    d_x[:, 0, -1] += d_xp[:, 0, -1]
    d_x[:, -1, 0] += d_xp[:, -1, 0]
    d_x[:, -1, -1] += d_xp[:, -1, -1]
    return d_x, d_w, d_b
