"""Deterministic CPU Gaussian-splatting toolkit for thermal-infrared novel-view synthesis.

The pipeline renders a cloud of anisotropic 3D Gaussians through three
physics-aware stages: per-Gaussian radiance attenuation driven by a
position/time MLP, tile-based alpha compositing, and a residual
convolutional refinement of the rendered image.  Every stage ships a
hand-derived backward pass so the whole chain can be checked against
finite differences.
"""

__version__ = "0.1.0"


class UsageError(Exception):
    """Bad command line or configuration input (CLI exit code 1)."""


class DataError(Exception):
    """Malformed or missing on-disk data (CLI exit code 2)."""


class NumericalError(Exception):
    """Non-finite values encountered mid-computation (CLI exit code 3)."""
