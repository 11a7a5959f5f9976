"""Atmospheric transmission field.

A coordinate/time-conditioned MLP predicts per-Gaussian attenuation
parameters (mu_abs, mu_sca, d); the radiance attenuation factor
exp((mu_abs + mu_sca) * d) rescales all SH coefficients of a Gaussian
uniformly.  The final layer is zero-initialized with bias (0, 0, 1) so the
module is an exact identity before the first optimizer step.

Positions are treated as detached inputs: the field conditions on
geometry but never pushes gradient back into it, keeping attenuation and
geometry decoupled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import NumericalError

ENCODING_FREQS = 10
HIDDEN_WIDTH = 256
HIDDEN_DEPTH = 8
INPUT_DIM = 2 * ENCODING_FREQS * 3 + 2 * ENCODING_FREQS


def positional_encoding(p: np.ndarray, freqs: int = ENCODING_FREQS) -> np.ndarray:
    """Sin/cos frequency encoding, component-major.

    Per input component emits (sin(2^k pi p), cos(2^k pi p)) for
    k = 0..freqs-1; a (n, d) batch maps to (n, d * 2 * freqs).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    n, d = p.shape
    k = (2.0 ** np.arange(freqs)) * np.pi
    angles = p[:, :, None] * k[None, None, :]          # (n, d, freqs)
    enc = np.stack([np.sin(angles), np.cos(angles)], axis=3)
    return enc.reshape(n, d * 2 * freqs)


@dataclass
class AttenuationParams:
    """Per-Gaussian Bouguer-Lambert-Beer parameters."""

    mu_abs: np.ndarray
    mu_sca: np.ndarray
    d: np.ndarray

    @property
    def factor(self) -> np.ndarray:
        """Radiance scale exp((mu_abs + mu_sca) * d); mu may go negative."""
        with np.errstate(over="ignore"):  # inf is caught by attenuate_sh
            return np.exp((self.mu_abs + self.mu_sca) * self.d)


class AtfNetwork:
    """Plain ReLU MLP, 8 hidden layers of width 256, linear 3-unit head."""

    def __init__(self, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dtype = np.dtype(dtype)
        sizes = [INPUT_DIM] + [HIDDEN_WIDTH] * HIDDEN_DEPTH + [3]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        # Identity at iteration 0: zero head weights, bias -> (0, 0, 1).
        self.weights[-1][:] = 0.0
        self.biases[-1][:] = np.array([0.0, 0.0, 1.0], dtype=self.dtype)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Batched evaluation; returns (n, 3) outputs and the activation cache."""
        h = x.astype(self.dtype, copy=False)
        cache = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            cache.append(h)
        return h, cache

    def backward(self, cache: list, d_out: np.ndarray) -> "AtfGradients":
        """Parameter gradients for a batched forward; input gradient is discarded
        (positions are detached by design)."""
        d_h = d_out.astype(self.dtype, copy=False)
        d_w = [np.empty(0)] * self.n_layers
        d_b = [np.empty(0)] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            a_prev = cache[i]
            d_w[i] = a_prev.T @ d_h
            d_b[i] = d_h.sum(axis=0)
            if i > 0:
                d_h = d_h @ self.weights[i].T
                d_h = d_h * (cache[i] > 0.0)
        return AtfGradients(d_weights=d_w, d_biases=d_b)


@dataclass
class AtfGradients:
    d_weights: list
    d_biases: list


def encode_inputs(norm_positions: np.ndarray, time_norm: float,
                  dtype=np.float64) -> np.ndarray:
    """Concatenate gamma(position) and gamma(time) rows for the MLP.

    Positions must already be normalized to the scene box ([-1, 1]^3).
    """
    n = norm_positions.shape[0]
    pos_enc = positional_encoding(norm_positions)
    t_enc = positional_encoding(np.full((1, 1), float(time_norm)))
    enc = np.concatenate([pos_enc, np.tile(t_enc, (n, 1))], axis=1)
    return enc.astype(dtype, copy=False)


def atf_forward(norm_positions: np.ndarray, time_norm: float,
                net: AtfNetwork) -> tuple[AttenuationParams, list]:
    """Attenuation parameters for every Gaussian at one shooting time."""
    enc = encode_inputs(norm_positions, time_norm, dtype=net.dtype)
    out, cache = net.forward(enc)
    out64 = out.astype(np.float64)
    return AttenuationParams(mu_abs=out64[:, 0], mu_sca=out64[:, 1],
                             d=out64[:, 2]), cache


def attenuate_sh(sh0: np.ndarray, params: AttenuationParams) -> np.ndarray:
    """Scale every SH coefficient by exp((mu_abs + mu_sca) * d)."""
    factor = params.factor
    if not np.all(np.isfinite(factor)):
        raise NumericalError("non-finite attenuation factor")
    if sh0.ndim == 1:
        return sh0 * factor
    return sh0 * factor[:, None]


def attenuate_sh_backward(
    sh0: np.ndarray, params: AttenuationParams, d_sh_att: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(d_sh0, d_mlp_out) for the attenuation stage.

    d_mlp_out columns are gradients w.r.t. (mu_abs, mu_sca, d).
    """
    factor = params.factor
    d_sh0 = d_sh_att * factor[:, None]
    d_factor = np.einsum("nk,nk->n", sh0, d_sh_att)
    d_exponent = d_factor * factor
    d_mlp_out = np.stack([
        d_exponent * params.d,
        d_exponent * params.d,
        d_exponent * (params.mu_abs + params.mu_sca),
    ], axis=1)
    return d_sh0, d_mlp_out


def normalize_positions(positions: np.ndarray, box_center: np.ndarray,
                        box_half_extent: float) -> np.ndarray:
    """Map world positions into the scene box frame used for encoding."""
    return (positions - box_center) / box_half_extent


def scene_box(points: np.ndarray, margin: float = 1.05) -> tuple[np.ndarray, float]:
    """(center, half_extent) of the axis-aligned box around the seed points."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = 0.5 * (lo + hi)
    half = float(max(np.max(hi - lo) * 0.5 * margin, 1e-6))
    return center, half
