"""Explicit finite-difference solver for the 2D heat equation.

Serves two roles: an independent physics oracle for the conduction model
(conservation, maximum principle, agreement with the analytic heat
kernel), and the blur engine of the synthetic scene generator.  FTCS is
stable in 2D when alpha * dt / dx^2 <= 0.25; ConductionSpec enforces the
bound at construction so stepping can never blow up.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

BOUNDARIES = ("periodic", "insulated")


@dataclass(frozen=True)
class TemperatureField:
    width: int
    height: int
    data: np.ndarray  # (height, width)
    dx: float = 1.0
    boundary: str = "periodic"

    def __post_init__(self):
        if self.data.shape != (self.height, self.width):
            raise ValueError("data shape does not match declared size")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("temperature values must be finite")
        if self.dx <= 0:
            raise ValueError("dx must be positive")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")

    @classmethod
    def from_array(cls, arr: np.ndarray, dx: float = 1.0,
                   boundary: str = "periodic") -> "TemperatureField":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr,
                   dx=dx, boundary=boundary)


@dataclass(frozen=True)
class ConductionSpec:
    alpha: float
    dt: float
    steps: int

    def __post_init__(self):
        if self.alpha < 0 or self.dt <= 0 or self.steps < 0:
            raise ValueError("alpha >= 0, dt > 0, steps >= 0 required")

    def stability_ratio(self, dx: float) -> float:
        return self.alpha * self.dt / dx ** 2

    def check_stability(self, dx: float) -> None:
        r = self.stability_ratio(dx)
        if r > 0.25 + 1e-12:
            raise ValueError(
                f"unstable FTCS setup: alpha*dt/dx^2 = {r:.6g} exceeds 0.25")


def stencil_laplacian(u: np.ndarray, boundary: str) -> np.ndarray:
    """Raw 5-point stencil sum (not divided by dx^2)."""
    if boundary == "periodic":
        return (np.roll(u, 1, axis=0) + np.roll(u, -1, axis=0)
                + np.roll(u, 1, axis=1) + np.roll(u, -1, axis=1) - 4.0 * u)
    # Insulated: clamp-to-edge neighbors give zero flux through the boundary.
    up = np.vstack([u[:1], u[:-1]])
    down = np.vstack([u[1:], u[-1:]])
    left = np.hstack([u[:, :1], u[:, :-1]])
    right = np.hstack([u[:, 1:], u[:, -1:]])
    return up + down + left + right - 4.0 * u


def heat_step(field: TemperatureField, spec: ConductionSpec) -> TemperatureField:
    """One FTCS update u' = u + (alpha dt / dx^2) * stencil(u)."""
    spec.check_stability(field.dx)
    r = spec.stability_ratio(field.dx)
    new = field.data + r * stencil_laplacian(field.data, field.boundary)
    return replace(field, data=new)


def heat_simulate(field: TemperatureField, spec: ConductionSpec) -> TemperatureField:
    """spec.steps applications of heat_step."""
    spec.check_stability(field.dx)
    r = spec.stability_ratio(field.dx)
    u = field.data
    for _ in range(spec.steps):
        u = u + r * stencil_laplacian(u, field.boundary)
    return replace(field, data=u)


def heat_kernel(xy_sq_dist: np.ndarray, alpha: float, t: float) -> np.ndarray:
    """Analytic fundamental solution (1/(4 pi alpha t)) exp(-r^2 / (4 alpha t))."""
    return np.exp(-xy_sq_dist / (4.0 * alpha * t)) / (4.0 * np.pi * alpha * t)
