"""Tile-based forward rasterization and its analytic backward pass.

Per pixel the compositing rule is

    c(p) = sum_i r_i * alpha_i(p) * prod_{j<i} (1 - alpha_j(p)) + bg * T_final

over front-to-back depth order, with alpha_i = opacity_i * exp(-0.5 d^T conic d).
Alphas are clamped to 0.99, contributions below 1/255 are skipped, and a
pixel stops accepting contributions once its transmittance would drop
below 1e-4.  Tiles are processed in fixed row-major order and gradients
are reduced in that same order, which makes both passes bit-deterministic.

The forward pass caches each tile's alpha/transmittance matrices so the
backward pass replays the exact compositing state instead of recomputing
it.  Pixel (ix, iy) samples the continuous image plane at coordinates
(ix, iy), matching the projection convention in :mod:`thermalsplat.scene`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import (
    Camera,
    GaussianCloud,
    Projection,
    normalize_backward,
    project_gaussians,
    project_gaussians_backward,
    quat_normalize,
)

TILE_SIZE = 16
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_STOP = 1e-4


@dataclass
class TileCache:
    """Compositing state of one tile, enough to replay gradients exactly."""

    alpha: np.ndarray     # (g, p) clamped, sub-threshold entries zeroed
    gval: np.ndarray      # (g, p) raw Gaussian falloff exp(power)
    tbefore: np.ndarray   # (g, p) transmittance in front of each contributor
    stop: np.ndarray      # (p,) first row index excluded by the stop rule


@dataclass
class RenderAux:
    """Everything needed to replay compositing in reverse, bit-for-bit."""

    proj: Projection
    conic: np.ndarray          # (n, 3) upper-triangular inverse cov2d entries
    radius_xy: np.ndarray      # (n, 2) 3-sigma AABB half extents
    alive: np.ndarray          # (n,) bool: projected and invertible
    touched: np.ndarray        # (n,) bool: landed in at least one tile
    tile_lists: list           # per-tile arrays of Gaussian indices, depth order
    tiles_x: int
    tiles_y: int
    width: int
    height: int
    opacities: np.ndarray      # (n,) activated opacities
    radiance: np.ndarray       # (n,)
    background: float
    final_transmittance: np.ndarray  # (height, width)
    contrib_count: np.ndarray        # (height, width) int
    tile_caches: list | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class GaussianGradients:
    """Raw-domain parameter gradients plus the per-Gaussian radiance gradient."""

    d_position: np.ndarray
    d_scale: np.ndarray      # w.r.t. log-scales
    d_rotation: np.ndarray   # w.r.t. raw (stored) quaternions
    d_opacity: np.ndarray    # w.r.t. pre-activation opacities
    d_sh: np.ndarray         # filled by the SH stage of the pipeline
    d_radiance: np.ndarray
    d_mean2d: np.ndarray     # screen-space positional gradient (densify signal)


def tile_bin(mean2d: np.ndarray, radius_xy: np.ndarray, alive: np.ndarray,
             depth: np.ndarray, width: int, height: int,
             tile_size: int = TILE_SIZE) -> tuple[list, int, int]:
    """Assign Gaussians to every tile their 3-sigma AABB overlaps.

    Within a tile, indices are ordered by ascending depth with ties broken
    by ascending original index (stable sort on depth).
    """
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y

    order = np.argsort(depth, kind="stable")
    order = order[alive[order]]
    if order.size == 0:
        return [np.empty(0, dtype=np.int64) for _ in range(n_tiles)], tiles_x, tiles_y

    mx, my = mean2d[order, 0], mean2d[order, 1]
    rx, ry = radius_xy[order, 0], radius_xy[order, 1]
    x0 = np.maximum(np.ceil(mx - rx), 0)
    x1 = np.minimum(np.floor(mx + rx), width - 1)
    y0 = np.maximum(np.ceil(my - ry), 0)
    y1 = np.minimum(np.floor(my + ry), height - 1)
    onscreen = (x0 <= x1) & (y0 <= y1)

    tx0 = (x0.astype(np.int64) // tile_size)
    tx1 = (x1.astype(np.int64) // tile_size)
    ty0 = (y0.astype(np.int64) // tile_size)
    ty1 = (y1.astype(np.int64) // tile_size)
    span_x = np.where(onscreen, tx1 - tx0 + 1, 0)
    span_y = np.where(onscreen, ty1 - ty0 + 1, 0)

    tiles_acc, ranks_acc = [], []
    ranks = np.arange(order.size)
    for oy in range(int(span_y.max()) if span_y.size else 0):
        for ox in range(int(span_x.max()) if span_x.size else 0):
            m = (ox < span_x) & (oy < span_y)
            if not m.any():
                continue
            tiles_acc.append((ty0[m] + oy) * tiles_x + tx0[m] + ox)
            ranks_acc.append(ranks[m])
    lists: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_tiles
    if tiles_acc:
        tiles_flat = np.concatenate(tiles_acc)
        ranks_flat = np.concatenate(ranks_acc)
        sort = np.lexsort((ranks_flat, tiles_flat))
        tiles_flat = tiles_flat[sort]
        members = order[ranks_flat[sort]]
        bounds = np.searchsorted(tiles_flat, np.arange(n_tiles + 1))
        for t in range(n_tiles):
            lists[t] = members[bounds[t]:bounds[t + 1]]
    return lists, tiles_x, tiles_y


_PIXEL_GRID_CACHE: dict = {}


def _tile_pixels(tx: int, ty: int, width: int, height: int,
                 tile_size: int) -> tuple[np.ndarray, np.ndarray]:
    key = (tx, ty, width, height, tile_size)
    if key not in _PIXEL_GRID_CACHE:
        x0, y0 = tx * tile_size, ty * tile_size
        xs = np.arange(x0, min(x0 + tile_size, width), dtype=np.float64)
        ys = np.arange(y0, min(y0 + tile_size, height), dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        _PIXEL_GRID_CACHE[key] = (gx.ravel(), gy.ravel())
    return _PIXEL_GRID_CACHE[key]


def _composite_tile(idx: np.ndarray, px: np.ndarray, py: np.ndarray,
                    mean2d: np.ndarray, conic: np.ndarray,
                    opac: np.ndarray) -> TileCache:
    """Alpha/transmittance state for one tile, stop rule folded in."""
    dx = px[None, :] - mean2d[idx, 0][:, None]
    dy = py[None, :] - mean2d[idx, 1][:, None]
    power = dx * dx * (-0.5 * conic[idx, 0][:, None])
    power += dx * dy * (-conic[idx, 1][:, None])
    power += dy * dy * (-0.5 * conic[idx, 2][:, None])
    gval = np.exp(power)
    alpha = np.minimum(opac[idx][:, None] * gval, ALPHA_CLAMP)
    alpha[alpha < ALPHA_SKIP] = 0.0
    traw = np.cumprod(1.0 - alpha, axis=0)
    tbefore = np.empty_like(traw)
    tbefore[0] = 1.0
    tbefore[1:] = traw[:-1]
    stopped = traw < TRANSMITTANCE_STOP
    has_stop = stopped.any(axis=0)
    stop = np.where(has_stop, stopped.argmax(axis=0), alpha.shape[0])
    return TileCache(alpha=alpha, gval=gval, tbefore=tbefore, stop=stop)


def _tile_final_transmittance(cache: TileCache) -> np.ndarray:
    g, p = cache.alpha.shape
    last = cache.tbefore[-1] * (1.0 - cache.alpha[-1])
    cols = np.arange(p)
    clamped = np.minimum(cache.stop, g - 1)
    tfinal = cache.tbefore[clamped, cols]
    return np.where(cache.stop == g, last, tfinal)


def render_forward(cloud: GaussianCloud, camera: Camera,
                   radiance_per_gaussian: np.ndarray,
                   background: float = 0.0,
                   cache_tiles: bool = True) -> tuple[np.ndarray, RenderAux]:
    """Rasterize the cloud into an (H, W) radiance image.

    ``radiance_per_gaussian`` is the post-attenuation, SH-evaluated radiance
    (length = cloud size).  ``cache_tiles=False`` drops the per-tile replay
    buffers for render-only use.
    """
    n = len(cloud)
    radiance = np.asarray(radiance_per_gaussian, dtype=np.float64)
    if radiance.shape != (n,):
        raise ValueError("radiance_per_gaussian length must match the cloud")

    quats = quat_normalize(cloud.rotations)
    proj = project_gaussians(cloud.positions, cloud.scales, quats, camera)
    det = (proj.cov2d[:, 0, 0] * proj.cov2d[:, 1, 1]
           - proj.cov2d[:, 0, 1] ** 2)
    invertible = det > 0
    alive = proj.valid & invertible
    culled_near = int(np.count_nonzero(~proj.valid))
    culled_det = int(np.count_nonzero(proj.valid & ~invertible))

    conic = np.zeros((n, 3), dtype=np.float64)
    safe_det = np.where(alive, det, 1.0)
    conic[:, 0] = proj.cov2d[:, 1, 1] / safe_det
    conic[:, 1] = -proj.cov2d[:, 0, 1] / safe_det
    conic[:, 2] = proj.cov2d[:, 0, 0] / safe_det

    radius_xy = 3.0 * np.sqrt(np.maximum(
        np.stack([proj.cov2d[:, 0, 0], proj.cov2d[:, 1, 1]], axis=1), 0.0))
    tile_lists, tiles_x, tiles_y = tile_bin(
        proj.mean2d, radius_xy, alive, proj.depth, camera.width, camera.height)
    touched = np.zeros(n, dtype=bool)
    for lst in tile_lists:
        touched[lst] = True

    h, w = camera.height, camera.width
    image = np.full((h, w), background, dtype=np.float64)
    tfinal_map = np.ones((h, w), dtype=np.float64)
    contrib_map = np.zeros((h, w), dtype=np.int64)
    opac = cloud.opacities
    skipped = 0
    tile_caches: list = [None] * (tiles_x * tiles_y) if cache_tiles else None

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            idx = tile_lists[t]
            if idx.size == 0:
                continue
            px, py = _tile_pixels(tx, ty, w, h, TILE_SIZE)
            cache = _composite_tile(idx, px, py, proj.mean2d, conic, opac)
            contrib = (np.arange(idx.size)[:, None] < cache.stop[None, :])
            weights = cache.alpha * cache.tbefore * contrib
            tfinal = _tile_final_transmittance(cache)
            vals = (radiance[idx][:, None] * weights).sum(axis=0)
            vals += background * tfinal
            skipped += int(np.count_nonzero(cache.alpha == 0.0))
            ys = py.astype(np.int64)
            xs = px.astype(np.int64)
            image[ys, xs] = vals
            tfinal_map[ys, xs] = tfinal
            contrib_map[ys, xs] = (weights > 0).sum(axis=0)
            if cache_tiles:
                tile_caches[t] = cache

    aux = RenderAux(
        proj=proj, conic=conic, radius_xy=radius_xy, alive=alive,
        touched=touched, tile_lists=tile_lists, tiles_x=tiles_x,
        tiles_y=tiles_y, width=w, height=h, opacities=opac, radiance=radiance,
        background=background, final_transmittance=tfinal_map,
        contrib_count=contrib_map, tile_caches=tile_caches,
        diagnostics={
            "culled_near": culled_near,
            "culled_degenerate": culled_det,
            "skipped": skipped,
            "max_contributors": int(contrib_map.max()),
        },
    )
    return image, aux


def render_backward(aux: RenderAux, cloud: GaussianCloud, camera: Camera,
                    d_image: np.ndarray) -> GaussianGradients:
    """Analytic gradients of the compositing w.r.t. every Gaussian attribute.

    Replays each tile from the cached compositing state (recomputing it
    when the forward pass dropped the caches), then chains screen-space
    gradients through the projection and covariance construction back to
    raw parameter domains.
    """
    n = len(cloud)
    if d_image.shape != (aux.height, aux.width):
        raise ValueError("d_image shape must match the rendered image")

    proj = aux.proj
    d_mean2d = np.zeros((n, 2), dtype=np.float64)
    d_conic = np.zeros((n, 3), dtype=np.float64)
    d_opac_act = np.zeros(n, dtype=np.float64)
    d_radiance = np.zeros(n, dtype=np.float64)

    for ty in range(aux.tiles_y):
        for tx in range(aux.tiles_x):
            t = ty * aux.tiles_x + tx
            idx = aux.tile_lists[t]
            if idx.size == 0:
                continue
            px, py = _tile_pixels(tx, ty, aux.width, aux.height, TILE_SIZE)
            cache = None if aux.tile_caches is None else aux.tile_caches[t]
            if cache is None:
                cache = _composite_tile(idx, px, py, proj.mean2d, aux.conic,
                                        aux.opacities)
            alpha, gval, tbefore = cache.alpha, cache.gval, cache.tbefore
            contrib = (np.arange(idx.size)[:, None] < cache.stop[None, :])
            tfinal = _tile_final_transmittance(cache)
            g = d_image[py.astype(np.int64), px.astype(np.int64)]

            weights = alpha * tbefore * contrib
            r = aux.radiance[idx][:, None]
            d_radiance[idx] += (weights * g[None, :]).sum(axis=1)

            # Suffix radiance behind each contributor, background included.
            rw = r * weights
            behind = rw.sum(axis=0)[None, :] - np.cumsum(rw, axis=0) \
                + aux.background * tfinal[None, :]
            live = contrib & (alpha > 0.0)
            d_alpha = np.where(
                live, g[None, :] * (r * tbefore - behind / (1.0 - alpha)), 0.0)

            unclamped = aux.opacities[idx][:, None] * gval < ALPHA_CLAMP
            d_araw = np.where(unclamped, d_alpha, 0.0)
            d_opac_act[idx] += (d_araw * gval).sum(axis=1)
            d_power = d_araw * aux.opacities[idx][:, None] * gval

            dx = px[None, :] - proj.mean2d[idx, 0][:, None]
            dy = py[None, :] - proj.mean2d[idx, 1][:, None]
            c0 = aux.conic[idx, 0][:, None]
            c1 = aux.conic[idx, 1][:, None]
            c2 = aux.conic[idx, 2][:, None]
            d_mean2d[idx, 0] += ((c0 * dx + c1 * dy) * d_power).sum(axis=1)
            d_mean2d[idx, 1] += ((c1 * dx + c2 * dy) * d_power).sum(axis=1)
            d_conic[idx, 0] += (-0.5 * dx * dx * d_power).sum(axis=1)
            d_conic[idx, 1] += (-dx * dy * d_power).sum(axis=1)
            d_conic[idx, 2] += (-0.5 * dy * dy * d_power).sum(axis=1)

    # conic = inv(cov2d):  d_cov2d = -conic @ d_conic_full @ conic.
    lam = np.zeros((n, 2, 2), dtype=np.float64)
    lam[:, 0, 0] = aux.conic[:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = aux.conic[:, 1]
    lam[:, 1, 1] = aux.conic[:, 2]
    d_lam = np.zeros((n, 2, 2), dtype=np.float64)
    d_lam[:, 0, 0] = d_conic[:, 0]
    d_lam[:, 0, 1] = d_lam[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_lam[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", lam, d_lam, lam)

    d_mean2d *= aux.alive[:, None]
    d_cov2d *= aux.alive[:, None, None]

    quats_unit = quat_normalize(cloud.rotations)
    d_position, d_scales_act, d_quat_unit = project_gaussians_backward(
        proj, cloud.scales, quats_unit, camera, d_mean2d, d_cov2d)

    d_log_scales = d_scales_act * cloud.scales
    d_rotation = normalize_backward(cloud.rotations, d_quat_unit)
    opac = aux.opacities
    d_opacity_raw = d_opac_act * opac * (1.0 - opac) * aux.alive

    return GaussianGradients(
        d_position=d_position,
        d_scale=d_log_scales,
        d_rotation=d_rotation,
        d_opacity=d_opacity_raw,
        d_sh=np.zeros_like(cloud.sh),
        d_radiance=d_radiance * aux.alive,
        d_mean2d=d_mean2d,
    )
