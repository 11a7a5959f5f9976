import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermalsplat.scene import (
    Camera,
    GaussianCloud,
    covariance_3d,
    eval_sh,
    eval_sh_batch,
    eval_sh_batch_backward,
    look_at_camera,
    normalize_backward,
    project_gaussians,
    quat_normalize,
    read_ply,
    write_ply,
)

# Independent Y00 value: the l=0 real spherical harmonic is 1/(2 sqrt(pi)).
Y00 = 1.0 / (2.0 * math.sqrt(math.pi))


def test_eval_sh_dc_offset_only():
    assert eval_sh(np.zeros(16), [0.0, 0.0, 1.0], 0) == 0.5


def test_eval_sh_unit_dc_coefficient():
    coeffs = np.zeros(16)
    coeffs[0] = 1.0
    value = eval_sh(coeffs, [0.0, 1.0, 0.0], 0)
    assert value == pytest.approx(0.5 + Y00, abs=1e-12)
    assert value == pytest.approx(0.5 + 0.28209479, abs=1e-8)


def test_eval_sh_degree1_odd_parity():
    rng = np.random.default_rng(0)
    coeffs = np.zeros(16)
    coeffs[1:4] = rng.normal(size=3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    plus = eval_sh(coeffs, d, 1)
    minus = eval_sh(coeffs, -d, 1)
    # DC part (0.5 here) is even, the l=1 part flips sign.
    assert plus - 0.5 == pytest.approx(-(minus - 0.5), abs=1e-12)


def test_eval_sh_degree_truncation_equivalence():
    rng = np.random.default_rng(1)
    coeffs = np.zeros(16)
    coeffs[:4] = rng.normal(size=4)  # zero above degree 1
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    assert eval_sh(coeffs, d, 3) == pytest.approx(eval_sh(coeffs, d, 1), abs=1e-14)


def test_eval_sh_validation_errors():
    with pytest.raises(ValueError):
        eval_sh(np.zeros(16), [0, 0, 1], 4)
    with pytest.raises(ValueError):
        eval_sh(np.zeros(16), [0, 0, 2.0], 0)
    with pytest.raises(ValueError):
        eval_sh(np.zeros(3), [0, 0, 1], 1)


def test_covariance_identity():
    cov = covariance_3d(np.ones((1, 3)), np.array([[1.0, 0, 0, 0]]))
    assert np.allclose(cov[0], np.eye(3))


def test_covariance_diagonal_squares_scale():
    cov = covariance_3d(np.array([[2.0, 1.0, 1.0]]), np.array([[1.0, 0, 0, 0]]))
    assert np.allclose(cov[0], np.diag([4.0, 1.0, 1.0]))


def test_covariance_rotation_preserves_spectrum():
    rng = np.random.default_rng(2)
    q = quat_normalize(rng.normal(size=(1, 4)))
    cov = covariance_3d(np.array([[1.0, 2.0, 3.0]]), q)
    eigvals = np.sort(np.linalg.eigvalsh(cov[0]))
    assert np.allclose(eigvals, [1.0, 4.0, 9.0], atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_covariance_always_cholesky_factorizable(seed):
    rng = np.random.default_rng(seed)
    scales = np.exp(rng.uniform(-3, 1, (4, 3)))
    quats = quat_normalize(rng.normal(size=(4, 4)))
    cov = covariance_3d(scales, quats)
    for m in cov:
        np.linalg.cholesky(m)  # raises LinAlgError if not SPD


def _simple_camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, size=100):
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=size, height=size,
                  rotation=np.eye(3), translation=np.zeros(3))


def test_projection_on_axis_point():
    cam = _simple_camera()
    proj = project_gaussians(np.array([[0.0, 0.0, 1.0]]),
                             np.full((1, 3), 0.1), np.array([[1.0, 0, 0, 0]]),
                             cam)
    assert np.allclose(proj.mean2d[0], [50.0, 50.0])
    assert proj.valid[0]


def test_projection_isotropic_cov2d_analytic():
    # Unit world covariance at z = 2 with f = 100: J = diag(50, 50) on axis,
    # so cov2d = 2500 I plus the 0.3 dilation.
    cam = _simple_camera()
    proj = project_gaussians(np.array([[0.0, 0.0, 2.0]]),
                             np.ones((1, 3)), np.array([[1.0, 0, 0, 0]]), cam)
    assert np.allclose(proj.cov2d[0], np.diag([2500.3, 2500.3]), atol=1e-9)


def test_projection_near_plane_cull():
    cam = _simple_camera()
    proj = project_gaussians(np.array([[0.0, 0.0, 0.009], [0.0, 0.0, -1.0]]),
                             np.full((2, 3), 0.1),
                             np.tile([1.0, 0, 0, 0], (2, 1)), cam)
    assert not proj.valid.any()


def test_projection_mean_invariant_to_rotation_about_ray():
    # Isotropic Gaussian: rotating it cannot move its projected center.
    cam = _simple_camera()
    rng = np.random.default_rng(3)
    pos = np.array([[0.3, -0.2, 2.0]])
    scales = np.full((1, 3), 0.2)
    base = project_gaussians(pos, scales, np.array([[1.0, 0, 0, 0]]), cam)
    for _ in range(5):
        q = quat_normalize(rng.normal(size=(1, 4)))
        rotated = project_gaussians(pos, scales, q, cam)
        assert np.allclose(rotated.mean2d, base.mean2d, atol=1e-12)
        assert np.allclose(rotated.cov2d, base.cov2d, atol=1e-10)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(fx=-1, fy=1, cx=5, cy=5, width=10, height=10,
               rotation=np.eye(3), translation=np.zeros(3))
    with pytest.raises(ValueError):
        Camera(fx=10, fy=10, cx=20, cy=5, width=10, height=10,
               rotation=np.eye(3), translation=np.zeros(3))
    bad_rot = np.eye(3)
    bad_rot[0, 0] = 1.1
    with pytest.raises(ValueError):
        Camera(fx=10, fy=10, cx=5, cy=5, width=10, height=10,
               rotation=bad_rot, translation=np.zeros(3))


def test_look_at_camera_projects_target_to_principal_point():
    cam = look_at_camera([1.5, -2.0, 1.0], [0.1, 0.2, 0.0], fx=80, fy=80,
                         cx=32, cy=32, width=64, height=64)
    target_cam = cam.rotation @ np.array([0.1, 0.2, 0.0]) + cam.translation
    assert target_cam[2] > 0
    u = 80 * target_cam[0] / target_cam[2] + 32
    v = 80 * target_cam[1] / target_cam[2] + 32
    assert (u, v) == pytest.approx((32, 32), abs=1e-9)


def test_sh_batch_backward_matches_fd():
    rng = np.random.default_rng(4)
    n = 3
    coeffs = rng.normal(0, 0.4, (n, 16))
    dirs = quat_normalize(rng.normal(size=(n, 3)))
    upstream = rng.normal(size=n)
    d_coeffs, d_dirs = eval_sh_batch_backward(coeffs, dirs, 3, upstream)

    eps = 1e-6
    for i in range(n):
        for k in range(16):
            c = coeffs.copy()
            c[i, k] += eps
            lp = float(np.sum(eval_sh_batch(c, dirs, 3) * upstream))
            c[i, k] -= 2 * eps
            lm = float(np.sum(eval_sh_batch(c, dirs, 3) * upstream))
            assert (lp - lm) / (2 * eps) == pytest.approx(
                d_coeffs[i, k], rel=1e-6, abs=1e-10)


def test_normalize_backward_matches_fd():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(2, 3))
    upstream = rng.normal(size=(2, 3))
    grad = normalize_backward(v, upstream)
    eps = 1e-7
    for i in range(2):
        for j in range(3):
            vp = v.copy()
            vp[i, j] += eps
            up = vp / np.linalg.norm(vp, axis=1, keepdims=True)
            vm = v.copy()
            vm[i, j] -= eps
            um = vm / np.linalg.norm(vm, axis=1, keepdims=True)
            fd = float(np.sum((up - um) * upstream)) / (2 * eps)
            assert fd == pytest.approx(grad[i, j], rel=1e-5, abs=1e-9)


def test_cloud_from_seed_points_and_activations():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(20, 3))
    rad = rng.uniform(0.1, 0.9, 20)
    cloud = GaussianCloud.from_seed_points(pts, rad)
    assert len(cloud) == 20
    # DC coefficient chosen so the initial radiance reproduces the seed.
    dirs = np.tile([0.0, 0.0, 1.0], (20, 1))
    assert np.allclose(eval_sh_batch(cloud.sh, dirs, 0), rad, atol=1e-12)
    assert np.all(cloud.scales > 0)
    assert np.allclose(cloud.opacities, 0.1, atol=1e-12)


def test_cloud_requires_consistent_lengths():
    with pytest.raises(ValueError):
        GaussianCloud(positions=np.zeros((2, 3)), log_scales=np.zeros((3, 3)),
                      rotations=np.zeros((2, 4)), opacities_raw=np.zeros(2),
                      sh=np.zeros((2, 16)))


def test_from_seed_points_rejects_empty():
    with pytest.raises(ValueError, match="no seed points"):
        GaussianCloud.from_seed_points(np.zeros((0, 3)), np.zeros(0))


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    n = 5
    cloud = GaussianCloud(
        positions=rng.normal(size=(n, 3)),
        log_scales=rng.normal(size=(n, 3)),
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        opacities_raw=rng.normal(size=n),
        sh=rng.normal(size=(n, 16)))
    path = tmp_path / "cloud.ply"
    write_ply(cloud, path)
    rows = read_ply(path)
    assert rows.shape == (n, 27)  # 3 pos + 3 scale + 4 quat + 1 opacity + 16 sh
    packed = np.concatenate([
        cloud.positions, cloud.log_scales, cloud.rotations,
        cloud.opacities_raw[:, None], cloud.sh], axis=1)
    assert np.allclose(rows, packed.astype(np.float32))
