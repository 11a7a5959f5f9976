"""Full forward/backward composition: attenuation -> SH -> splat -> refinement.

One view's forward pass (ablation flags respected):

    params   = ATF(encode(normalized positions), encode(t))     [optional]
    sh_att   = sh * exp((mu_abs + mu_sca) * d)
    radiance = max(eval_sh(sh_att, view_dir), 0)
    image    = rasterize(cloud, radiance)
    refined  = TCM(image)                                       [optional]

Positions enter the ATF as detached inputs: the backward pass never routes
attenuation gradients into geometry.  ``atf_positions_override`` exists so
gradient checks can freeze that detached input explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atf import (
    AtfGradients,
    AtfNetwork,
    atf_forward,
    attenuate_sh,
    attenuate_sh_backward,
    normalize_positions,
)
from .render import GaussianGradients, RenderAux, render_backward, render_forward
from .scene import (
    Camera,
    GaussianCloud,
    eval_sh_batch,
    eval_sh_batch_backward,
    normalize_backward,
)
from .tcm import TcmCache, TcmGradients, TcmNetwork, tcm_backward, tcm_forward


@dataclass
class SceneBox:
    """Fixed normalization frame for ATF position encoding."""

    center: np.ndarray
    half_extent: float


@dataclass
class ForwardCache:
    camera: Camera
    view_vecs: np.ndarray       # positions - camera center (pre-normalization)
    dirs: np.ndarray
    sh_att: np.ndarray
    radiance_raw: np.ndarray
    radiance: np.ndarray
    aux: RenderAux
    image: np.ndarray           # pre-refinement render
    atf_params: object | None
    atf_cache: list | None
    tcm_cache: TcmCache | None


def forward_view(
    cloud: GaussianCloud,
    camera: Camera,
    time_norm: float,
    box: SceneBox,
    atf_net: AtfNetwork | None = None,
    tcm_net: TcmNetwork | None = None,
    background: float = 0.0,
    atf_positions_override: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Render one view through every enabled stage; returns (refined, cache)."""
    atf_params = None
    atf_cache = None
    if atf_net is not None:
        atf_inputs = (cloud.positions if atf_positions_override is None
                      else atf_positions_override)
        norm_pos = normalize_positions(atf_inputs, box.center, box.half_extent)
        atf_params, atf_cache = atf_forward(norm_pos, time_norm, atf_net)
        sh_att = attenuate_sh(cloud.sh, atf_params)
    else:
        sh_att = cloud.sh

    view_vecs = cloud.positions - camera.center
    dirs = view_vecs / np.linalg.norm(view_vecs, axis=1, keepdims=True)
    radiance_raw = eval_sh_batch(sh_att, dirs, cloud.sh_degree_active)
    radiance = np.maximum(radiance_raw, 0.0)

    image, aux = render_forward(cloud, camera, radiance, background=background)

    tcm_cache = None
    refined = image
    if tcm_net is not None:
        refined, tcm_cache = tcm_forward(image, tcm_net)

    cache = ForwardCache(
        camera=camera, view_vecs=view_vecs, dirs=dirs, sh_att=sh_att,
        radiance_raw=radiance_raw, radiance=radiance, aux=aux, image=image,
        atf_params=atf_params, atf_cache=atf_cache, tcm_cache=tcm_cache)
    return refined, cache


def backward_view(
    cloud: GaussianCloud,
    cache: ForwardCache,
    d_refined: np.ndarray,
    atf_net: AtfNetwork | None = None,
    tcm_net: TcmNetwork | None = None,
) -> tuple[GaussianGradients, AtfGradients | None, TcmGradients | None]:
    """Reverse the full chain; fills every GaussianGradients field."""
    tcm_grads = None
    if tcm_net is not None:
        tcm_grads, d_image = tcm_backward(cache.tcm_cache, tcm_net, d_refined)
    else:
        d_image = d_refined

    grads = render_backward(cache.aux, cloud, cache.camera, d_image)

    # Radiance clamp: gradient flows only where the raw SH sum was positive.
    d_rad = grads.d_radiance * (cache.radiance_raw > 0.0)
    d_sh_att, d_dirs = eval_sh_batch_backward(
        cache.sh_att, cache.dirs, cloud.sh_degree_active, d_rad)
    grads.d_position = grads.d_position + normalize_backward(
        cache.view_vecs, d_dirs)

    atf_grads = None
    if atf_net is not None:
        d_sh, d_mlp_out = attenuate_sh_backward(
            cloud.sh, cache.atf_params, d_sh_att)
        atf_grads = atf_net.backward(cache.atf_cache, d_mlp_out)
    else:
        d_sh = d_sh_att
    grads.d_sh = d_sh
    return grads, atf_grads, tcm_grads


def render_view_clamped(cloud: GaussianCloud, camera: Camera, time_norm: float,
                        box: SceneBox, atf_net: AtfNetwork | None = None,
                        tcm_net: TcmNetwork | None = None,
                        background: float = 0.0,
                        diagnostics: dict | None = None) -> np.ndarray:
    """Evaluation-time render: full enabled pipeline, clamped to [0, 1].

    When ``diagnostics`` is given, the rasterizer counters (culled, skipped,
    max contributors) are accumulated into it.
    """
    refined, cache = forward_view(cloud, camera, time_norm, box,
                                  atf_net=atf_net, tcm_net=tcm_net,
                                  background=background)
    if diagnostics is not None:
        for key, value in cache.aux.diagnostics.items():
            if key == "max_contributors":
                diagnostics[key] = max(diagnostics.get(key, 0), value)
            else:
                diagnostics[key] = diagnostics.get(key, 0) + value
    return np.clip(refined, 0.0, 1.0)
