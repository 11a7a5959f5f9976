"""Optimization loop: Adam with per-group schedules, densification, ablations.

The Gaussian groups keep the baseline splatting learning rates (the
position group decays exponentially); the attenuation MLP gets its own
exponential schedule from 8e-4 down to 1.6e-6 over the run, and the
refinement convs share the position-group rate.  Densification clones
small high-gradient Gaussians, splits large ones (scale / 1.6, two
children), prunes low-opacity ones, and periodically resets opacity.

Everything is driven by one seeded generator (view shuffling, split
sampling), so identical configs produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import NumericalError, UsageError
from .atf import AtfNetwork, scene_box
from .checkpoint import Checkpoint, save_checkpoint
from .losses import LossWeights, psnr, ssim, total_loss
from .pipeline import SceneBox, backward_view, forward_view, render_view_clamped
from .scene import GaussianCloud, inverse_sigmoid, quat_normalize
from .tcm import TcmNetwork

GAUSSIAN_ADAM_EPS = 1e-15
NETWORK_ADAM_EPS = 1e-8
ADAM_BETAS = (0.9, 0.999)
SPLIT_SCALE_DIVISOR = 1.6


@dataclass
class TrainConfig:
    total_iterations: int = 30000
    seed: int = 0
    background: float = 0.0

    # Ablation switches.
    atf: bool = True
    tcm: bool = True
    dis_loss: bool = True

    # Learning rates (baseline splatting defaults for the Gaussian groups).
    position_lr_start: float = 1.6e-4
    position_lr_end: float = 1.6e-6
    sh_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    atf_lr_start: float = 8e-4
    atf_lr_end: float = 1.6e-6

    # Densification.
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 5e-3
    opacity_reset_interval: int = 3000
    split_scale_fraction: float = 0.01
    max_gaussians: int = 200000

    # Loss weights.
    lambda_dis: float = 0.2
    lambda_dssim: float = 0.2
    iter_t: int = 5000

    # Misc.
    sh_degree_interval: int = 1000
    checkpoint_iterations: tuple = (7000, 30000)
    atf_dtype: str = "float32"
    initial_opacity: float = 0.1

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_dis=self.lambda_dis,
                           lambda_dssim=self.lambda_dssim, iter_t=self.iter_t)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["checkpoint_iterations"] = list(self.checkpoint_iterations)
        return d


_CONFIG_CASTS = {f.name: f.type for f in
                 TrainConfig.__dataclass_fields__.values()}  # type: ignore


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply flat key=value overrides; unknown keys are rejected by name."""
    for key, value in overrides.items():
        if not hasattr(config, key):
            raise UsageError(f"unknown config key '{key}'")
        current = getattr(config, key)
        if isinstance(current, bool):
            parsed = str(value).strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        elif isinstance(current, tuple):
            parsed = tuple(int(v) for v in str(value).split(","))
        else:
            parsed = value
        setattr(config, key, parsed)
    return config


def exponential_lr(iteration: int, start: float, end: float, total: int) -> float:
    """start * (end/start)^(i/total); strictly decreasing to end."""
    frac = min(max(iteration / max(total, 1), 0.0), 1.0)
    return start * (end / start) ** frac


def atf_lr(iteration: int, config: TrainConfig) -> float:
    return exponential_lr(iteration, config.atf_lr_start, config.atf_lr_end,
                          config.total_iterations)


def position_lr(iteration: int, config: TrainConfig) -> float:
    return exponential_lr(iteration, config.position_lr_start,
                          config.position_lr_end, config.total_iterations)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamGroup:
    """Bias-corrected Adam over a list of parameter arrays."""

    def __init__(self, shapes_like: list, eps: float,
                 betas: tuple = ADAM_BETAS, dtype=None):
        self.m = [np.zeros_like(p, dtype=dtype or p.dtype) for p in shapes_like]
        self.v = [np.zeros_like(p, dtype=dtype or p.dtype) for p in shapes_like]
        self.step_count = 0
        self.eps = eps
        self.beta1, self.beta2 = betas
        self.skipped = 0

    def step(self, params: list, grads: list, lr: float) -> None:
        """Update params in place; a group with any non-finite gradient is
        skipped for the step (counted in ``skipped``)."""
        if any(not np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamGroup,
              lr: float) -> None:
    """Single-array convenience wrapper over :class:`AdamGroup`."""
    state.step([param], [grad], lr)


CLOUD_GROUPS = ("position", "sh", "opacity", "scale", "rotation")


def _cloud_param(cloud: GaussianCloud, name: str) -> np.ndarray:
    return {
        "position": cloud.positions, "sh": cloud.sh,
        "opacity": cloud.opacities_raw, "scale": cloud.log_scales,
        "rotation": cloud.rotations,
    }[name]


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------

@dataclass
class DensifyState:
    grad_accum: np.ndarray   # summed screen gradient norms
    count: np.ndarray        # views in which each Gaussian was visible

    @classmethod
    def zeros(cls, n: int) -> "DensifyState":
        return cls(grad_accum=np.zeros(n), count=np.zeros(n))


def densify_and_prune(
    cloud: GaussianCloud,
    densify: DensifyState,
    adam: dict,
    config: TrainConfig,
    rng: np.random.Generator,
    scene_extent: float,
    allow_densify: bool = True,
) -> GaussianCloud:
    """Clone/split high-gradient Gaussians, prune transparent ones.

    Adam moments follow the survivors; new rows start with zero moments.
    Returns the new cloud and rewrites ``densify`` and ``adam`` in place.
    """
    n = len(cloud)
    mean_grad = densify.grad_accum / np.maximum(densify.count, 1.0)
    hot = mean_grad > config.densify_grad_threshold
    max_scale = cloud.scales.max(axis=1)
    split_mask = hot & (max_scale > config.split_scale_fraction * scene_extent)
    clone_mask = hot & ~split_mask

    grown = n + int(clone_mask.sum()) + 2 * int(split_mask.sum())
    if not allow_densify or grown > config.max_gaussians:
        if allow_densify and grown > config.max_gaussians:
            warnings.warn("densification skipped: max Gaussian count reached")
        clone_mask = np.zeros(n, dtype=bool)
        split_mask = np.zeros(n, dtype=bool)

    pieces = {name: [_cloud_param(cloud, name)] for name in CLOUD_GROUPS}
    keep = ~split_mask  # split parents are replaced by their children

    if clone_mask.any():
        for name in CLOUD_GROUPS:
            pieces[name].append(_cloud_param(cloud, name)[clone_mask].copy())

    if split_mask.any():
        idx = np.where(split_mask)[0]
        scales = cloud.scales[idx]
        quats = quat_normalize(cloud.rotations[idx])
        from .scene import quat_to_rot
        rots = quat_to_rot(quats)
        samples = rng.standard_normal((2, len(idx), 3))
        for child in range(2):
            offsets = np.einsum("nij,nj->ni", rots, samples[child] * scales)
            pieces["position"].append(cloud.positions[idx] + offsets)
            pieces["scale"].append(
                cloud.log_scales[idx] - math.log(SPLIT_SCALE_DIVISOR))
            pieces["rotation"].append(cloud.rotations[idx].copy())
            pieces["opacity"].append(cloud.opacities_raw[idx].copy())
            pieces["sh"].append(cloud.sh[idx].copy())

    arrays = {}
    n_new = 0
    for name in CLOUD_GROUPS:
        parts = [pieces[name][0][keep]] + pieces[name][1:]
        arrays[name] = np.concatenate(parts, axis=0)
        n_new = arrays[name].shape[0]

    # Low-opacity prune over the grown cloud.
    from .scene import sigmoid
    alive = sigmoid(arrays["opacity"]) >= config.prune_opacity
    if not alive.any():
        raise NumericalError("densification pruned every Gaussian")
    for name in CLOUD_GROUPS:
        arrays[name] = arrays[name][alive]

    # Rebuild Adam moments: surviving old rows keep state (they occupy the
    # leading block after the prune), clones and split children start fresh.
    n_keep = int(keep.sum())
    surv = alive[:n_keep]
    for name in CLOUD_GROUPS:
        group: AdamGroup = adam[name]
        new_m = np.zeros_like(arrays[name])
        new_v = np.zeros_like(arrays[name])
        new_m[: surv.sum()] = group.m[0][keep][surv]
        new_v[: surv.sum()] = group.v[0][keep][surv]
        group.m = [new_m]
        group.v = [new_v]

    new_cloud = GaussianCloud(
        positions=arrays["position"], log_scales=arrays["scale"],
        rotations=arrays["rotation"], opacities_raw=arrays["opacity"],
        sh=arrays["sh"], sh_degree_active=cloud.sh_degree_active)
    densify.grad_accum = np.zeros(len(new_cloud))
    densify.count = np.zeros(len(new_cloud))
    return new_cloud


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    cloud: GaussianCloud
    atf_net: AtfNetwork | None
    tcm_net: TcmNetwork | None
    box: SceneBox
    log_lines: list
    checkpoints: dict          # iteration -> path (when out_dir given)
    metrics: dict              # iteration -> {"psnr": ..., "ssim": ...}


def _param_stats(cloud: GaussianCloud) -> str:
    return (f"n={len(cloud)} "
            f"pos[{cloud.positions.min():.3g},{cloud.positions.max():.3g}] "
            f"scale[{cloud.log_scales.min():.3g},{cloud.log_scales.max():.3g}] "
            f"opac[{cloud.opacities_raw.min():.3g},{cloud.opacities_raw.max():.3g}] "
            f"sh[{cloud.sh.min():.3g},{cloud.sh.max():.3g}]")


def evaluate_views(cloud: GaussianCloud, views: list, box: SceneBox,
                   atf_net, tcm_net, background: float) -> dict:
    """Mean PSNR/SSIM over a view list (clamped renders vs. ground truth)."""
    psnrs, ssims = [], []
    for view in views:
        render = render_view_clamped(cloud, view.camera, view.time_norm, box,
                                     atf_net=atf_net, tcm_net=tcm_net,
                                     background=background)
        psnrs.append(psnr(render, view.image.data))
        ssims.append(ssim(render, view.image.data))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def train(train_views: list, test_views: list, points: np.ndarray,
          point_radiance: np.ndarray, config: TrainConfig,
          out_dir=None) -> TrainResult:
    """Run the full optimization; see module docstring for the schedule."""
    rng = np.random.default_rng(config.seed)
    cloud = GaussianCloud.from_seed_points(
        points, point_radiance, initial_opacity=config.initial_opacity)
    center, half = scene_box(points)
    box = SceneBox(center=center, half_extent=half)
    scene_extent = 2.0 * half

    atf_net = AtfNetwork(rng=np.random.default_rng(config.seed + 1),
                         dtype=np.dtype(config.atf_dtype)) if config.atf else None
    tcm_net = TcmNetwork(rng=np.random.default_rng(config.seed + 2)) \
        if config.tcm else None

    adam: dict = {name: AdamGroup([_cloud_param(cloud, name)], GAUSSIAN_ADAM_EPS)
                  for name in CLOUD_GROUPS}
    if atf_net is not None:
        adam["atf"] = AdamGroup(atf_net.weights + atf_net.biases,
                                NETWORK_ADAM_EPS)
    if tcm_net is not None:
        adam["tcm"] = AdamGroup(tcm_net.weights + tcm_net.biases,
                                NETWORK_ADAM_EPS)

    weights = config.loss_weights()
    densify = DensifyState.zeros(len(cloud))
    group_lrs = {"sh": config.sh_lr, "opacity": config.opacity_lr,
                 "scale": config.scale_lr, "rotation": config.rotation_lr}
    # Corner weight maps depend only on the fixed ground truths; cache them.
    corner_cache = {}
    if config.dis_loss:
        from .losses import corner_weight_map
        for k, view in enumerate(train_views):
            corner_cache[k] = corner_weight_map(view.image.data, weights)

    log_lines: list[str] = []
    checkpoints: dict = {}
    metrics: dict = {}
    ckpt_iters = set(config.checkpoint_iterations) | {config.total_iterations}
    view_order: list[int] = []
    loss_window: list[float] = []
    t_start = time.time()

    def write_checkpoint(iteration: int):
        config_echo = config.as_dict()
        config_echo["scene_box"] = [float(v) for v in box.center] + [box.half_extent]
        ckpt = Checkpoint(
            cloud=cloud, atf=atf_net, tcm=tcm_net, config=config_echo,
            iteration=iteration, rng_state=rng.bit_generator.state,
            adam={name: {"step": g.step_count, "m": g.m, "v": g.v}
                  for name, g in adam.items()})
        if out_dir is not None:
            path = Path(out_dir) / f"ckpt_{iteration:06d}.tsck"
            save_checkpoint(ckpt, path)
            checkpoints[iteration] = path
        if test_views:
            metrics[iteration] = evaluate_views(
                cloud, test_views, box, atf_net, tcm_net, config.background)
            log_lines.append(
                f"checkpoint {iteration} test_psnr "
                f"{metrics[iteration]['psnr']:.4f} test_ssim "
                f"{metrics[iteration]['ssim']:.4f} n_gaussians {len(cloud)}")

    if config.total_iterations == 0:
        write_checkpoint(0)
        return TrainResult(cloud=cloud, atf_net=atf_net, tcm_net=tcm_net,
                           box=box, log_lines=log_lines,
                           checkpoints=checkpoints, metrics=metrics)

    for iteration in range(config.total_iterations):
        cloud.sh_degree_active = min(3, iteration // config.sh_degree_interval)

        if not view_order:
            view_order = list(rng.permutation(len(train_views)))
        view_idx = view_order.pop()
        view = train_views[view_idx]

        refined, cache = forward_view(
            cloud, view.camera, view.time_norm, box,
            atf_net=atf_net, tcm_net=tcm_net, background=config.background)
        loss, d_refined, parts = total_loss(
            refined, view.image.data, iteration, weights,
            include_discontinuous=config.dis_loss,
            corner_weights=corner_cache.get(view_idx))
        if not math.isfinite(loss):
            raise NumericalError(
                f"non-finite loss at iteration {iteration} on frame "
                f"{view.frame_index}: parts={parts} {_param_stats(cloud)}")
        loss_window.append(loss)

        grads, atf_grads, tcm_grads = backward_view(
            cloud, cache, d_refined, atf_net=atf_net, tcm_net=tcm_net)

        lr_pos = position_lr(iteration, config)
        adam["position"].step([cloud.positions], [grads.d_position], lr_pos)
        adam["sh"].step([cloud.sh], [grads.d_sh], group_lrs["sh"])
        adam["opacity"].step([cloud.opacities_raw], [grads.d_opacity],
                             group_lrs["opacity"])
        adam["scale"].step([cloud.log_scales], [grads.d_scale],
                           group_lrs["scale"])
        adam["rotation"].step([cloud.rotations], [grads.d_rotation],
                              group_lrs["rotation"])
        if atf_net is not None:
            adam["atf"].step(atf_net.weights + atf_net.biases,
                             atf_grads.d_weights + atf_grads.d_biases,
                             atf_lr(iteration, config))
        if tcm_net is not None:
            adam["tcm"].step(tcm_net.weights + tcm_net.biases,
                             tcm_grads.d_weights + tcm_grads.d_biases, lr_pos)

        cloud.rotations[:] = quat_normalize(cloud.rotations)

        # Densification bookkeeping in half-image (NDC-like) units.
        ndc_scale = np.array([cache.aux.width / 2.0, cache.aux.height / 2.0])
        norms = np.linalg.norm(grads.d_mean2d * ndc_scale, axis=1)
        seen = cache.aux.touched
        densify.grad_accum[seen] += norms[seen]
        densify.count[seen] += 1

        it1 = iteration + 1
        if it1 % 1000 == 0 or it1 == config.total_iterations:
            log_lines.append(
                f"iter {it1} loss {np.mean(loss_window):.6f} "
                f"l1 {parts['l1']:.6f} dssim {parts['dssim']:.6f} "
                f"dis {parts['dis']:.6f} n_gaussians {len(cloud)} "
                f"elapsed {time.time() - t_start:.1f}s")
            loss_window = []
        # Checkpoints capture the state after it1 optimizer steps, before
        # the periodic maintenance that prepares the next step.
        if it1 in ckpt_iters:
            write_checkpoint(it1)

        if (config.densify_from <= it1 <= config.densify_until
                and it1 % config.densify_interval == 0):
            cloud = densify_and_prune(cloud, densify, adam, config, rng,
                                      scene_extent)
        if (it1 % config.opacity_reset_interval == 0
                and it1 <= config.densify_until):
            floor = inverse_sigmoid(0.01)
            np.minimum(cloud.opacities_raw, floor, out=cloud.opacities_raw)
            adam["opacity"].m[0][:] = 0.0
            adam["opacity"].v[0][:] = 0.0

    return TrainResult(cloud=cloud, atf_net=atf_net, tcm_net=tcm_net, box=box,
                       log_lines=log_lines, checkpoints=checkpoints,
                       metrics=metrics)
