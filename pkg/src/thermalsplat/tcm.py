"""Thermal conduction module.

Extracts second-order gradient (Laplacian) features from a rendered image
and fuses them with the image through a three-layer convolutional block
whose output is added back residually.  The final convolution starts at
zero, so the module is bitwise identity until trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filters import (
    conv3x3_replicate,
    conv3x3_replicate_backward,
    laplacian,
    laplacian_adjoint,
)


class TcmNetwork:
    """Conv stack with channel plan 2n->n->n->n (n = 1 for thermal)."""

    def __init__(self, rng: np.random.Generator | None = None, channels: int = 1):
        rng = np.random.default_rng(0) if rng is None else rng
        n = channels
        plans = [(2 * n, n), (n, n), (n, n)]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for c_in, c_out in plans:
            fan_in = c_in * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
            self.weights.append(w)
            self.biases.append(np.zeros(c_out, dtype=np.float64))
        # Zero final layer: the residual block starts as the exact identity.
        self.weights[-1][:] = 0.0


@dataclass
class TcmCache:
    x0: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray


@dataclass
class TcmGradients:
    d_weights: list
    d_biases: list


def laplacian_features(image: np.ndarray) -> np.ndarray:
    """Discrete 5-point Laplacian with replicate boundary handling."""
    return laplacian(image)


def tcm_forward(image: np.ndarray, net: TcmNetwork) -> tuple[np.ndarray, TcmCache]:
    """refined = image + Conv3(ReLU(Conv2(ReLU(Conv1([image, lap(image)])))))."""
    x0 = np.stack([image, laplacian_features(image)], axis=0)
    z1 = conv3x3_replicate(x0, net.weights[0], net.biases[0])
    a1 = np.maximum(z1, 0.0)
    z2 = conv3x3_replicate(a1, net.weights[1], net.biases[1])
    a2 = np.maximum(z2, 0.0)
    z3 = conv3x3_replicate(a2, net.weights[2], net.biases[2])
    refined = image + z3[0]
    return refined, TcmCache(x0=x0, z1=z1, a1=a1, z2=z2, a2=a2)


def tcm_backward(cache: TcmCache, net: TcmNetwork,
                 d_refined: np.ndarray) -> tuple[TcmGradients, np.ndarray]:
    """Gradients w.r.t. conv parameters and the input image.

    The residual path contributes the upstream gradient directly; the conv
    path flows back through the Laplacian via its exact adjoint stencil.
    """
    d_z3 = d_refined[None, :, :]
    d_a2, d_w3, d_b3 = conv3x3_replicate_backward(cache.a2, net.weights[2], d_z3)
    d_z2 = d_a2 * (cache.z2 > 0.0)
    d_a1, d_w2, d_b2 = conv3x3_replicate_backward(cache.a1, net.weights[1], d_z2)
    d_z1 = d_a1 * (cache.z1 > 0.0)
    d_x0, d_w1, d_b1 = conv3x3_replicate_backward(cache.x0, net.weights[0], d_z1)
    d_image = d_refined + d_x0[0] + laplacian_adjoint(d_x0[1])
    grads = TcmGradients(d_weights=[d_w1, d_w2, d_w3], d_biases=[d_b1, d_b2, d_b3])
    return grads, d_image
