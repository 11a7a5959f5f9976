"""Training losses and evaluation metrics.

The corner-weighted discontinuous term uses the Harris response of the
ground-truth image as a fixed weight map (negative responses clamped to
zero, normalized by the per-image maximum) and decays linearly to zero at
``iter_t`` training iterations.  The total loss combines it with D-SSIM
and L1 as 0.2 / 0.2 / 0.6 by default; with the discontinuous term
disabled the split degenerates to the baseline 0.2 / 0.8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filters import SeparableFilter, gaussian_taps, sobel_gradients

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda_dis: float = 0.2
    lambda_dssim: float = 0.2
    iter_t: int = 5000
    k_harris: float = 0.04
    harris_window: int = 3

    def __post_init__(self):
        if not self.lambda_dis + self.lambda_dssim < 1.0:
            raise ValueError("lambda_dis + lambda_dssim must stay below 1")
        if self.iter_t <= 0:
            raise ValueError("iter_t must be positive")


_FILTER_CACHE: dict = {}


def _gaussian_filter(shape: tuple[int, int], radius: int,
                     sigma: float) -> SeparableFilter:
    key = (shape, radius, sigma)
    if key not in _FILTER_CACHE:
        taps = gaussian_taps(radius, sigma)
        _FILTER_CACHE[key] = SeparableFilter(shape[0], shape[1], taps, taps)
    return _FILTER_CACHE[key]


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")


# ---------------------------------------------------------------------------
# L1
# ---------------------------------------------------------------------------

def l1_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    _check_shapes(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def l1_loss_backward(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.sign(pred - gt) / pred.size


# ---------------------------------------------------------------------------
# SSIM / D-SSIM
# ---------------------------------------------------------------------------

def _ssim_terms(x: np.ndarray, y: np.ndarray):
    f = _gaussian_filter(x.shape, radius=5, sigma=1.5)
    mu_x = f.apply(x)
    mu_y = f.apply(y)
    mxx = f.apply(x * x)
    myy = f.apply(y * y)
    mxy = f.apply(x * y)
    var_x = mxx - mu_x ** 2
    var_y = myy - mu_y ** 2
    cov = mxy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return f, mu_x, mu_y, a1, a2, b1, b2


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), unit dynamic range.

    Inputs are clamped to [0, 1]; the window uses replicate padding so it
    is defined for any image size.
    """
    _check_shapes(pred, gt)
    x = np.clip(pred, 0.0, 1.0)
    y = np.clip(gt, 0.0, 1.0)
    _, _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_backward(pred: np.ndarray, gt: np.ndarray,
                  upstream: float = 1.0) -> np.ndarray:
    """d(ssim)/d(pred), exact through the replicate-padded window."""
    x = np.clip(pred, 0.0, 1.0)
    y = np.clip(gt, 0.0, 1.0)
    f, mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = (a1 * a2) / (b1 * b2)
    d_s = np.full(pred.shape, upstream / pred.size)
    d_a1 = d_s * a2 / (b1 * b2)
    d_a2 = d_s * a1 / (b1 * b2)
    d_b1 = -d_s * s / b1
    d_b2 = -d_s * s / b2
    d_mu_x = 2 * mu_y * d_a1 + 2 * mu_x * d_b1
    d_cov = 2 * d_a2
    d_var_x = d_b2
    d_mu_x += -mu_y * d_cov - 2 * mu_x * d_var_x
    d_x = f.adjoint(d_mu_x) + 2 * x * f.adjoint(d_var_x) + y * f.adjoint(d_cov)
    return d_x * ((pred >= 0.0) & (pred <= 1.0))


def d_ssim_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """(1 - ssim) / 2."""
    return (1.0 - ssim(pred, gt)) / 2.0


def d_ssim_loss_backward(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return ssim_backward(pred, gt, upstream=-0.5)


# ---------------------------------------------------------------------------
# Harris corner response and the discontinuous loss
# ---------------------------------------------------------------------------

def harris_response(image: np.ndarray,
                    weights: LossWeights = LossWeights()) -> np.ndarray:
    """R = det(M) - k * trace(M)^2 over the smoothed structure tensor.

    M uses Sobel gradients whose outer products are smoothed by a 3x3
    Gaussian (sigma 1) window; replicate edges throughout.
    """
    gx, gy = sobel_gradients(image)
    radius = weights.harris_window // 2
    f = _gaussian_filter(image.shape, radius=radius, sigma=1.0)
    sxx = f.apply(gx * gx)
    syy = f.apply(gy * gy)
    sxy = f.apply(gx * gy)
    det = sxx * syy - sxy ** 2
    trace = sxx + syy
    return det - weights.k_harris * trace ** 2


def corner_weight_map(gt: np.ndarray,
                      weights: LossWeights = LossWeights()) -> np.ndarray:
    """Clamped, max-normalized Harris response of the ground truth.

    All zeros when the image has no positive corner response.
    """
    r = np.maximum(harris_response(gt, weights), 0.0)
    r_max = r.max()
    if r_max <= 0.0:
        return np.zeros_like(gt)
    return r / r_max


def discontinuity_decay(iteration: int, weights: LossWeights) -> float:
    return max(1.0 - iteration / weights.iter_t, 0.0)


def discontinuous_loss(pred: np.ndarray, gt: np.ndarray, iteration: int,
                       weights: LossWeights = LossWeights(),
                       corner_weights: np.ndarray | None = None) -> float:
    """Corner-weighted absolute error with linear iteration decay.

    ``corner_weights`` lets callers reuse a precomputed weight map for a
    fixed ground-truth image (the map does not depend on pred).
    """
    _check_shapes(pred, gt)
    decay = discontinuity_decay(iteration, weights)
    if decay == 0.0:
        return 0.0
    w = corner_weight_map(gt, weights) if corner_weights is None else corner_weights
    return float(decay * np.mean(w * np.abs(pred - gt)))


def discontinuous_loss_backward(pred: np.ndarray, gt: np.ndarray, iteration: int,
                                weights: LossWeights = LossWeights(),
                                corner_weights: np.ndarray | None = None
                                ) -> np.ndarray:
    decay = discontinuity_decay(iteration, weights)
    if decay == 0.0:
        return np.zeros_like(pred)
    w = corner_weight_map(gt, weights) if corner_weights is None else corner_weights
    return decay * w * np.sign(pred - gt) / pred.size


# ---------------------------------------------------------------------------
# Total loss and metrics
# ---------------------------------------------------------------------------

def total_loss(pred: np.ndarray, gt: np.ndarray, iteration: int,
               weights: LossWeights = LossWeights(),
               include_discontinuous: bool = True,
               corner_weights: np.ndarray | None = None
               ) -> tuple[float, np.ndarray, dict]:
    """Combined training loss and its gradient w.r.t. pred.

    With the discontinuous term enabled the weights are
    (lambda_dis, lambda_dssim, 1 - lambda_dis - lambda_dssim); disabling it
    folds lambda_dis back into the L1 weight (baseline behavior).
    """
    _check_shapes(pred, gt)
    l1 = l1_loss(pred, gt)
    dssim = d_ssim_loss(pred, gt)
    if include_discontinuous:
        dis = discontinuous_loss(pred, gt, iteration, weights, corner_weights)
        lam_dis = weights.lambda_dis
    else:
        dis = 0.0
        lam_dis = 0.0
    lam = weights.lambda_dssim
    lam_l1 = 1.0 - lam_dis - lam
    loss = lam_dis * dis + lam * dssim + lam_l1 * l1

    grad = lam_l1 * l1_loss_backward(pred, gt) + lam * d_ssim_loss_backward(pred, gt)
    if include_discontinuous:
        grad = grad + lam_dis * discontinuous_loss_backward(
            pred, gt, iteration, weights, corner_weights)
    parts = {"l1": l1, "dssim": dssim, "dis": dis}
    return float(loss), grad, parts


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit dynamic range; inf when the images match."""
    _check_shapes(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
