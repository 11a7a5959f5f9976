"""Gaussian scene representation, camera model, spherical harmonics, and projection.

Everything here is a pure function of immutable arrays; the trainer owns
all mutation.  Backward companions are hand-derived and validated against
central finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01
COV2D_DILATION = 0.3
SH_DC_OFFSET = 0.5

# Real SH basis normalization constants, degrees 0-3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)
SH_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
         0.3731763325901154, 0.4570457994644658, 1.445305721320277,
         0.5900435899266435)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic squash."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y: float) -> float:
    return float(np.log(y / (1.0 - y)))


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z); q shape (n, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rot_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the unit quaternion given d(loss)/d(R); shapes (n,4), (n,3,3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_rot
    dq = np.empty_like(q)
    dq[:, 0] = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
                    - y * g[:, 2, 0] + x * g[:, 2, 1])
    dq[:, 1] = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
                    - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dq[:, 2] = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
                    + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dq[:, 3] = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
                    - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return dq


def normalize_backward(v: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. v/|v| back to v; works for any trailing dim."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    return (d_unit - u * np.sum(u * d_unit, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# Spherical harmonics (single radiance channel)
# ---------------------------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions; (n, 3) -> (n, (degree+1)^2)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, (degree + 1) ** 2), dtype=np.float64)
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (3 * zz - 1)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction components); (n, 3) -> (n, (degree+1)^2, 3)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n)
    g = np.zeros((n, (degree + 1) ** 2, 3), dtype=np.float64)
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=1)
        g[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=1)
        g[:, 6] = SH_C2[2] * np.stack([zero, zero, 6 * z], axis=1)
        g[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=1)
        g[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=1)
    if degree >= 3:
        g[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * x * x - 3 * y * y, zero], axis=1)
        g[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        g[:, 11] = SH_C3[2] * np.stack(
            [-2 * x * y, 4 * z * z - x * x - 3 * y * y, 8 * y * z], axis=1)
        g[:, 12] = SH_C3[3] * np.stack(
            [-6 * x * z, -6 * y * z, 6 * z * z - 3 * x * x - 3 * y * y], axis=1)
        g[:, 13] = SH_C3[4] * np.stack(
            [4 * z * z - 3 * x * x - y * y, -2 * x * y, 8 * x * z], axis=1)
        g[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, x * x - y * y], axis=1)
        g[:, 15] = SH_C3[6] * np.stack([3 * x * x - 3 * y * y, -6 * x * y, zero], axis=1)
    return g


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> float:
    """Radiance from one coefficient set along one unit direction.

    Includes the +0.5 baseline offset; non-negativity is the caller's job.
    """
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in [0, 3], got {degree}")
    n_coeffs = (degree + 1) ** 2
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] < n_coeffs:
        raise ValueError(f"need >= {n_coeffs} coefficients for degree {degree}")
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError("view_dir must have unit norm (within 1e-6)")
    basis = sh_basis(view_dir[None, :], degree)[0]
    return float(basis @ coeffs[:n_coeffs] + SH_DC_OFFSET)


def eval_sh_batch(coeffs: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Vectorized eval_sh: (n, 16) coefficients with per-Gaussian unit dirs."""
    n_coeffs = (degree + 1) ** 2
    basis = sh_basis(dirs, degree)
    return np.einsum("nk,nk->n", basis, coeffs[:, :n_coeffs]) + SH_DC_OFFSET


def eval_sh_batch_backward(
    coeffs: np.ndarray, dirs: np.ndarray, degree: int, d_radiance: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d_coeffs, d_dirs) for eval_sh_batch."""
    n_coeffs = (degree + 1) ** 2
    basis = sh_basis(dirs, degree)
    d_coeffs = np.zeros_like(coeffs)
    d_coeffs[:, :n_coeffs] = basis * d_radiance[:, None]
    grad = sh_basis_grad(dirs, degree)
    d_dirs = np.einsum("nk,nkd,n->nd", coeffs[:, :n_coeffs], grad, d_radiance)
    return d_coeffs, d_dirs


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------

def covariance_3d(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """World covariances R S S^T R^T from activated scales and unit quaternions."""
    rot = quat_to_rot(quats)
    m = rot * scales[:, None, :]
    return np.einsum("nij,nkj->nik", m, m)


def covariance_3d_backward(
    scales: np.ndarray, quats: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(d_scales, d_unit_quats) given full-matrix d(loss)/d(covariance)."""
    rot = quat_to_rot(quats)
    m = rot * scales[:, None, :]
    d_m = np.einsum("nij,njk->nik", d_cov + np.transpose(d_cov, (0, 2, 1)), m)
    d_rot = d_m * scales[:, None, :]
    d_scales = np.einsum("nij,nij->nj", d_m, rot)
    d_quats = quat_to_rot_backward(quats, d_rot)
    return d_scales, d_quats


# ---------------------------------------------------------------------------
# Camera and views
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera with COLMAP-style world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray   # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-6 \
                or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1 (within 1e-6)")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class RadianceImage:
    """Dense grayscale radiance grid with values in [0, 1]."""

    width: int
    height: int
    data: np.ndarray  # (height, width) float64

    def __post_init__(self):
        if self.data.shape != (self.height, self.width):
            raise ValueError("data shape does not match declared width/height")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("radiance values must be finite")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RadianceImage":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr)


@dataclass(frozen=True)
class ThermalView:
    """One calibrated observation: camera, normalized shot time, radiance image."""

    camera: Camera
    time_norm: float
    image: RadianceImage | None
    frame_index: int


# ---------------------------------------------------------------------------
# Projection (EWA affine approximation)
# ---------------------------------------------------------------------------

@dataclass
class Projection:
    """Screen-space splat parameters for one view, plus culling bookkeeping."""

    mean2d: np.ndarray       # (n, 2) pixels
    cov2d: np.ndarray        # (n, 2, 2), dilation included
    depth: np.ndarray        # (n,) camera-space z
    valid: np.ndarray        # (n,) bool, in front of near plane
    cam_t: np.ndarray        # (n, 3) camera-space positions (cache for backward)
    cov3d: np.ndarray        # (n, 3, 3) world covariances (cache for backward)


def project_gaussians(
    positions: np.ndarray, scales: np.ndarray, quats: np.ndarray, camera: Camera
) -> Projection:
    """Project all Gaussians into one camera; behind-near-plane entries are culled.

    cov2d = J W cov3d W^T J^T + dilation, with J the affine Jacobian of the
    pinhole projection at the Gaussian center.
    """
    w = camera.rotation
    t = positions @ w.T + camera.translation
    valid = t[:, 2] > NEAR_PLANE
    tz = np.where(valid, t[:, 2], 1.0)  # placeholder depth for culled rows

    mean2d = np.stack([
        camera.fx * t[:, 0] / tz + camera.cx,
        camera.fy * t[:, 1] / tz + camera.cy,
    ], axis=1)

    n = positions.shape[0]
    j = np.zeros((n, 2, 3), dtype=np.float64)
    j[:, 0, 0] = camera.fx / tz
    j[:, 0, 2] = -camera.fx * t[:, 0] / tz ** 2
    j[:, 1, 1] = camera.fy / tz
    j[:, 1, 2] = -camera.fy * t[:, 1] / tz ** 2

    cov3d = covariance_3d(scales, quats)
    u = np.einsum("nij,jk->nik", j, w)
    cov2d = np.einsum("nij,njk,nlk->nil", u, cov3d, u)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    return Projection(mean2d=mean2d, cov2d=cov2d, depth=t[:, 2], valid=valid,
                      cam_t=t, cov3d=cov3d)


def project_gaussians_backward(
    proj: Projection,
    scales: np.ndarray,
    quats: np.ndarray,
    camera: Camera,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(d_position, d_scale, d_unit_quat) from screen-space gradients.

    d_cov2d is a full 2x2 gradient matrix per Gaussian.  Culled rows must
    carry zero upstream gradient (the renderer guarantees this).
    """
    w = camera.rotation
    t = proj.cam_t
    tz = np.where(proj.valid, t[:, 2], 1.0)
    fx, fy = camera.fx, camera.fy

    n = t.shape[0]
    j = np.zeros((n, 2, 3), dtype=np.float64)
    j[:, 0, 0] = fx / tz
    j[:, 0, 2] = -fx * t[:, 0] / tz ** 2
    j[:, 1, 1] = fy / tz
    j[:, 1, 2] = -fy * t[:, 1] / tz ** 2
    u = np.einsum("nij,jk->nik", j, w)

    # Covariance path.
    g2 = d_cov2d
    d_cov3d = np.einsum("nai,nab,nbj->nij", u, g2, u)
    d_u = np.einsum("nab,nbj->naj", g2 + np.transpose(g2, (0, 2, 1)),
                    np.einsum("nai,nij->naj", u, proj.cov3d))
    d_j = np.einsum("nai,ji->naj", d_u, w)  # rows d_u @ w.T

    d_t = np.zeros_like(t)
    d_t[:, 0] += d_j[:, 0, 2] * (-fx / tz ** 2)
    d_t[:, 1] += d_j[:, 1, 2] * (-fy / tz ** 2)
    d_t[:, 2] += (d_j[:, 0, 0] * (-fx / tz ** 2)
                  + d_j[:, 1, 1] * (-fy / tz ** 2)
                  + d_j[:, 0, 2] * (2 * fx * t[:, 0] / tz ** 3)
                  + d_j[:, 1, 2] * (2 * fy * t[:, 1] / tz ** 3))

    # Mean path.
    d_t[:, 0] += d_mean2d[:, 0] * fx / tz
    d_t[:, 1] += d_mean2d[:, 1] * fy / tz
    d_t[:, 2] += (d_mean2d[:, 0] * (-fx * t[:, 0] / tz ** 2)
                  + d_mean2d[:, 1] * (-fy * t[:, 1] / tz ** 2))

    d_position = d_t @ w
    d_scales, d_quats = covariance_3d_backward(scales, quats, d_cov3d)
    mask = proj.valid[:, None]
    return d_position * mask, d_scales * mask, d_quats * mask


# ---------------------------------------------------------------------------
# Gaussian cloud
# ---------------------------------------------------------------------------

@dataclass
class GaussianCloud:
    """The optimizable scene: per-Gaussian arrays sharing a common length.

    Scales are stored in the log domain, opacity pre-activation; activation
    happens in the accessors.  A single radiance channel holds up to 16 SH
    coefficients (degree 3).
    """

    positions: np.ndarray     # (n, 3)
    log_scales: np.ndarray    # (n, 3)
    rotations: np.ndarray     # (n, 4) unit quaternions (renormalized by trainer)
    opacities_raw: np.ndarray  # (n,)
    sh: np.ndarray            # (n, 16)
    sh_degree_active: int = 0

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "opacities_raw": (n,), "sh": (n, 16),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacities_raw)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(), log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(), opacities_raw=self.opacities_raw.copy(),
            sh=self.sh.copy(), sh_degree_active=self.sh_degree_active)

    @classmethod
    def from_seed_points(cls, points: np.ndarray, radiance: np.ndarray,
                         initial_opacity: float = 0.1) -> "GaussianCloud":
        """Initialize from a sparse point cloud with per-point radiance seeds.

        The DC coefficient is set so the initial splat radiance reproduces
        the seed value; isotropic scale comes from mean nearest-neighbor
        spacing.
        """
        points = np.asarray(points, dtype=np.float64)
        radiance = np.asarray(radiance, dtype=np.float64)
        n = points.shape[0]
        if n == 0:
            raise ValueError("no seed points")
        sh = np.zeros((n, 16), dtype=np.float64)
        sh[:, 0] = (radiance - SH_DC_OFFSET) / SH_C0
        dist = mean_knn_distance(points, k=3)
        log_scales = np.tile(np.log(np.maximum(dist, 1e-7))[:, None], (1, 3))
        rotations = np.zeros((n, 4), dtype=np.float64)
        rotations[:, 0] = 1.0
        opacities = np.full(n, inverse_sigmoid(initial_opacity), dtype=np.float64)
        return cls(positions=points.copy(), log_scales=log_scales,
                   rotations=rotations, opacities_raw=opacities, sh=sh)


def mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-point sqrt of mean squared distance to the k nearest neighbors."""
    n = points.shape[0]
    if n == 1:
        return np.full(1, 0.1)
    k = min(k, n - 1)
    out = np.empty(n, dtype=np.float64)
    chunk = 512
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = np.sum((points[start:stop, None, :] - points[None, :, :]) ** 2, axis=2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        part = np.partition(d2, k - 1, axis=1)[:, :k]
        out[start:stop] = np.sqrt(np.mean(part, axis=1))
    return out


PLY_FIELDS = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"f_sh_{i}" for i in range(16)]
)


def write_ply(cloud: GaussianCloud, path) -> None:
    """Binary little-endian PLY export.

    Field order: position, log-scale, quaternion, pre-activation opacity,
    SH coefficients (all float32).
    """
    rows = np.concatenate([
        cloud.positions, cloud.log_scales, cloud.rotations,
        cloud.opacities_raw[:, None], cloud.sh,
    ], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rows.tobytes())


def read_ply(path) -> np.ndarray:
    """Read back an export of :func:`write_ply` as an (n, 27) float32 array."""
    with open(path, "rb") as fh:
        n_vertex = None
        n_props = 0
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            elif line.startswith("property"):
                n_props += 1
            elif line == "end_header":
                break
        data = fh.read(n_vertex * n_props * 4)
    return np.frombuffer(data, dtype="<f4").reshape(n_vertex, n_props)


def look_at_camera(position: np.ndarray, target: np.ndarray, fx: float, fy: float,
                   cx: float, cy: float, width: int, height: int,
                   up: np.ndarray | None = None) -> Camera:
    """Camera at ``position`` looking at ``target`` (z forward, y down)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray([0.0, 0.0, 1.0] if up is None else up, dtype=np.float64)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("view direction parallel to the up vector")
    right = right / norm
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=0)
    trans = -rot @ position
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  rotation=rot, translation=trans)
