import numpy as np
import pytest

from thermalsplat import UsageError
from thermalsplat.scene import GaussianCloud, inverse_sigmoid
from thermalsplat.train import (
    AdamGroup,
    DensifyState,
    GAUSSIAN_ADAM_EPS,
    TrainConfig,
    adam_step,
    apply_overrides,
    atf_lr,
    densify_and_prune,
    exponential_lr,
    position_lr,
    train,
)


def test_adam_zero_gradient_fresh_state_is_noop():
    p = np.array([1.5, -2.0])
    state = AdamGroup([p], eps=GAUSSIAN_ADAM_EPS)
    adam_step(p, np.zeros(2), state, lr=0.1)
    assert np.array_equal(p, [1.5, -2.0])


def test_adam_first_step_moves_by_lr():
    # Bias-corrected first step: m_hat = g, v_hat = g^2, so the update is
    # exactly -lr * sign(g) up to eps.
    p = np.array([0.0])
    state = AdamGroup([p], eps=1e-15)
    adam_step(p, np.array([1.0]), state, lr=0.1)
    assert p[0] == pytest.approx(-0.1, rel=1e-12)


def test_adam_skips_group_on_non_finite_gradient():
    p = np.array([1.0])
    state = AdamGroup([p], eps=1e-15)
    adam_step(p, np.array([np.nan]), state, lr=0.1)
    assert p[0] == 1.0
    assert state.skipped == 1
    assert state.step_count == 0


def test_adam_deterministic_across_runs():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(4, 3)) for _ in range(20)]

    def run():
        p = np.zeros((4, 3))
        state = AdamGroup([p], eps=1e-15)
        for g in grads:
            adam_step(p, g, state, lr=0.01)
        return p

    assert np.array_equal(run(), run())


def test_atf_lr_schedule_endpoints_and_midpoint():
    config = TrainConfig()
    assert atf_lr(0, config) == pytest.approx(8e-4, rel=1e-15)
    assert atf_lr(30000, config) == pytest.approx(1.6e-6, rel=1e-15)
    # Closed form at the midpoint: 8e-4 * 0.002^0.5.
    assert atf_lr(15000, config) == pytest.approx(8e-4 * 0.002 ** 0.5, rel=1e-12)
    assert atf_lr(15000, config) == pytest.approx(3.5777e-5, rel=1e-4)


def test_lr_schedule_strictly_decreasing():
    config = TrainConfig()
    values = [atf_lr(i, config) for i in range(0, 30001, 500)]
    assert all(a > b for a, b in zip(values, values[1:]))
    pos = [position_lr(i, config) for i in range(0, 30001, 500)]
    assert all(a > b for a, b in zip(pos, pos[1:]))
    assert position_lr(0, config) == pytest.approx(1.6e-4)
    assert position_lr(30000, config) == pytest.approx(1.6e-6)


def _make_cloud(n, opacity=0.5, scale=0.05):
    rng = np.random.default_rng(1)
    return GaussianCloud(
        positions=rng.normal(size=(n, 3)),
        log_scales=np.full((n, 3), np.log(scale)),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacities_raw=np.full(n, inverse_sigmoid(opacity)),
        sh=rng.normal(size=(n, 16)))


def _adam_for(cloud):
    from thermalsplat.train import CLOUD_GROUPS, _cloud_param
    return {name: AdamGroup([_cloud_param(cloud, name)], GAUSSIAN_ADAM_EPS)
            for name in CLOUD_GROUPS}


def test_densify_noop_below_thresholds():
    cloud = _make_cloud(5)
    config = TrainConfig()
    densify = DensifyState(grad_accum=np.full(5, 1e-6), count=np.ones(5))
    out = densify_and_prune(cloud, densify, _adam_for(cloud), config,
                            np.random.default_rng(0), scene_extent=4.0)
    assert len(out) == 5
    assert np.array_equal(out.positions, cloud.positions)


def test_densify_clone_grows_by_one():
    cloud = _make_cloud(5, scale=0.01)  # small: below split threshold
    config = TrainConfig()
    densify = DensifyState(grad_accum=np.zeros(5), count=np.ones(5))
    densify.grad_accum[2] = 1.0  # way above threshold
    out = densify_and_prune(cloud, densify, _adam_for(cloud), config,
                            np.random.default_rng(0), scene_extent=4.0)
    assert len(out) == 6
    # Clone duplicates the hot Gaussian in place.
    assert np.allclose(out.positions[-1], cloud.positions[2])


def test_densify_split_replaces_parent_with_two_children():
    cloud = _make_cloud(5, scale=0.5)  # large: above split threshold
    config = TrainConfig()
    densify = DensifyState(grad_accum=np.zeros(5), count=np.ones(5))
    densify.grad_accum[1] = 1.0
    out = densify_and_prune(cloud, densify, _adam_for(cloud), config,
                            np.random.default_rng(0), scene_extent=4.0)
    assert len(out) == 6  # -1 parent, +2 children
    expected_child_log_scale = np.log(0.5) - np.log(1.6)
    assert np.isclose(out.log_scales[-1, 0], expected_child_log_scale)


def test_prune_removes_transparent_gaussian():
    cloud = _make_cloud(5)
    cloud.opacities_raw[3] = inverse_sigmoid(1e-4)  # below prune threshold
    config = TrainConfig()
    densify = DensifyState.zeros(5)
    densify.count[:] = 1
    out = densify_and_prune(cloud, densify, _adam_for(cloud), config,
                            np.random.default_rng(0), scene_extent=4.0)
    assert len(out) == 4


def test_densify_respects_max_count():
    cloud = _make_cloud(5, scale=0.01)
    config = TrainConfig(max_gaussians=5)
    densify = DensifyState(grad_accum=np.ones(5), count=np.ones(5))
    with pytest.warns(UserWarning, match="max Gaussian count"):
        out = densify_and_prune(cloud, densify, _adam_for(cloud), config,
                                np.random.default_rng(0), scene_extent=4.0)
    assert len(out) == 5


def test_apply_overrides_types_and_unknown_key():
    config = TrainConfig()
    apply_overrides(config, {"total_iterations": "500", "atf": "false",
                             "position_lr_start": "2e-4",
                             "checkpoint_iterations": "100,200"})
    assert config.total_iterations == 500
    assert config.atf is False
    assert config.position_lr_start == pytest.approx(2e-4)
    assert config.checkpoint_iterations == (100, 200)
    with pytest.raises(UsageError, match="no_such_key"):
        apply_overrides(config, {"no_such_key": "1"})


def test_exponential_lr_clamps_iteration_range():
    assert exponential_lr(-5, 1e-3, 1e-5, 100) == pytest.approx(1e-3)
    assert exponential_lr(200, 1e-3, 1e-5, 100) == pytest.approx(1e-5)


# ---------------------------------------------------------------------------
# Short end-to-end training runs on a tiny in-memory scene
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    from thermalsplat.dataset import load_views, parse_colmap, split_train_test
    from thermalsplat.synth import Emitter, SynthSpec, synth_scene_generate

    spec = SynthSpec(
        geometry="plane", texture_res=48, ambient=0.3, n_points=80,
        emitters=[Emitter(0.35, 0.4, 0.12, 0.9), Emitter(0.65, 0.6, 0.1, 0.1)],
        views=9, orbit_radius=2.3, orbit_height=1.6, angle_start_deg=0,
        angle_end_deg=100, width=24, height=24, focal=28,
        angle_coeff=-0.08, time_coeff=-0.1, diffusion_time=0.6)
    out = tmp_path_factory.mktemp("tiny_scene")
    synth_scene_generate(spec, out, seed=11)
    scene = parse_colmap(out)
    views = load_views(out, scene)
    train_views, test_views = split_train_test(views)
    return scene, train_views, test_views


def test_zero_iteration_train_checkpoints_initialization(tiny_dataset, tmp_path):
    from thermalsplat.checkpoint import load_checkpoint
    scene, train_views, test_views = tiny_dataset
    config = TrainConfig(total_iterations=0, seed=5, checkpoint_iterations=())
    result = train(train_views, test_views, scene.points,
                   scene.point_radiance, config, out_dir=tmp_path)
    ckpt = load_checkpoint(result.checkpoints[0])
    init = GaussianCloud.from_seed_points(scene.points, scene.point_radiance)
    assert np.array_equal(ckpt.cloud.positions, init.positions)
    assert np.array_equal(ckpt.cloud.sh, init.sh)
    assert np.array_equal(ckpt.cloud.opacities_raw, init.opacities_raw)
    assert ckpt.iteration == 0


def test_all_ablation_configs_share_first_loss(tiny_dataset):
    # Identity initializations: every ablation configuration starts
    # from the same loss value on the same first view.
    from thermalsplat.atf import AtfNetwork, scene_box
    from thermalsplat.losses import total_loss
    from thermalsplat.pipeline import SceneBox, forward_view
    from thermalsplat.tcm import TcmNetwork

    scene, train_views, _ = tiny_dataset
    cloud = GaussianCloud.from_seed_points(scene.points, scene.point_radiance)
    box = SceneBox(*scene_box(scene.points))
    view = train_views[0]

    losses = []
    for use_atf, use_tcm, use_dis in ((False, False, False), (True, False, False),
                                      (False, True, False), (True, True, True)):
        atf = AtfNetwork(rng=np.random.default_rng(1)) if use_atf else None
        tcm = TcmNetwork(rng=np.random.default_rng(2)) if use_tcm else None
        img, _ = forward_view(cloud, view.camera, view.time_norm, box,
                              atf_net=atf, tcm_net=tcm)
        # Compare the raw L1 part: the dis/dssim weighting differs by design.
        from thermalsplat.losses import l1_loss
        losses.append(l1_loss(img, view.image.data))
    assert all(v == losses[0] for v in losses)


def test_training_reduces_loss_and_improves_psnr(tiny_dataset):
    scene, train_views, test_views = tiny_dataset
    config = TrainConfig(total_iterations=150, seed=3, checkpoint_iterations=(),
                         densify_from=60, densify_interval=60)
    result = train(train_views, test_views, scene.points,
                   scene.point_radiance, config)
    metrics = result.metrics[150]
    # Initial render of seed points is crude; 150 iterations must beat it.
    config0 = TrainConfig(total_iterations=0, checkpoint_iterations=())
    result0 = train(train_views, test_views, scene.points,
                    scene.point_radiance, config0)
    assert metrics["psnr"] > result0.metrics[0]["psnr"]


def test_baseline_config_never_builds_physics_nets(tiny_dataset):
    scene, train_views, test_views = tiny_dataset
    config = TrainConfig(total_iterations=3, seed=1, atf=False, tcm=False,
                         dis_loss=False, checkpoint_iterations=())
    result = train(train_views, test_views, scene.points,
                   scene.point_radiance, config)
    assert result.atf_net is None
    assert result.tcm_net is None


def test_train_determinism_short(tiny_dataset):
    scene, train_views, test_views = tiny_dataset
    config = TrainConfig(total_iterations=40, seed=9, checkpoint_iterations=(),
                         densify_from=20, densify_interval=20)

    def run():
        r = train(train_views, test_views, scene.points,
                  scene.point_radiance, config)
        return r.cloud

    a, b = run(), run()
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.sh, b.sh)
    assert np.array_equal(a.opacities_raw, b.opacities_raw)
    assert np.array_equal(a.log_scales, b.log_scales)
    assert np.array_equal(a.rotations, b.rotations)
