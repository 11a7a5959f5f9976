"""Synthetic thermal-scene generator.

Builds a textured emitter surface (plane or box), diffuses the temperature
field with the FTCS solver to mimic conduction blur, renders an orbit of
pinhole views with a per-view multiplicative attenuation
exp(a * theta + b * t), and writes the result as a COLMAP-layout dataset
(images + sparse model + ground-truth manifest).  Fully deterministic for
a fixed (spec, seed) pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import DataError, UsageError
from .dataset import SparseView, rot_to_qvec, save_image, write_colmap_text
from .heat import ConductionSpec, TemperatureField, heat_simulate
from .scene import look_at_camera

DIFFUSION_ALPHA = 1.0
DIFFUSION_RATIO = 0.2  # FTCS alpha*dt/dx^2 used for the pre-blur


@dataclass
class Emitter:
    cx: float       # texture-space u in [0, 1]
    cy: float       # texture-space v in [0, 1]
    radius: float   # texture-space radius
    temperature: float


@dataclass
class SynthSpec:
    geometry: str = "plane"       # "plane" or "box"
    texture_res: int = 96
    ambient: float = 0.25
    n_points: int = 400
    emitters: list = dataclass_field(default_factory=list)
    views: int = 24
    orbit_radius: float = 2.4
    orbit_height: float = 1.7
    angle_start_deg: float = -60.0
    angle_end_deg: float = 60.0
    width: int = 64
    height: int = 64
    focal: float = 70.0
    angle_coeff: float = 0.0
    time_coeff: float = 0.0
    diffusion_time: float = 0.0

    def validate(self) -> None:
        if self.geometry not in ("plane", "box"):
            raise UsageError(f"unknown geometry '{self.geometry}'")
        if not self.emitters:
            raise UsageError("at least one emitter is required")
        if self.views < 2:
            raise UsageError("need at least 2 views")
        if abs(self.orbit_height) < 1e-6:
            raise UsageError("degenerate camera orbit: views lie in the scene plane")


# ---------------------------------------------------------------------------
# Spec file parsing (INI-style key=value sections)
# ---------------------------------------------------------------------------

_SECTION_KEYS = {
    "scene": {"geometry", "texture_res", "ambient", "n_points"},
    "emitters": {"emitter"},
    "orbit": {"views", "radius", "height", "angle_start_deg", "angle_end_deg",
              "width", "height_px", "focal"},
    "attenuation": {"angle_coeff", "time_coeff"},
    "diffusion": {"time"},
}


def parse_synth_spec(path) -> SynthSpec:
    """Parse the generator spec file, reporting errors with line numbers."""
    sections: dict[str, list] = {}
    current = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().lower()
                if current not in _SECTION_KEYS:
                    raise UsageError(f"{path}:{lineno}: unknown section [{current}]")
                sections.setdefault(current, [])
                continue
            if current is None:
                raise UsageError(f"{path}:{lineno}: key outside any section")
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _SECTION_KEYS[current]:
                raise UsageError(f"{path}:{lineno}: unknown key '{key}' in [{current}]")
            sections[current].append((lineno, key, value))

    for required in ("emitters", "orbit"):
        if required not in sections:
            raise UsageError(f"{path}: missing required section [{required}]")

    spec = SynthSpec()

    def _num(lineno, value, cast):
        try:
            return cast(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad numeric value '{value}'")

    for lineno, key, value in sections.get("scene", []):
        if key == "geometry":
            spec.geometry = value
        elif key == "texture_res":
            spec.texture_res = _num(lineno, value, int)
        elif key == "ambient":
            spec.ambient = _num(lineno, value, float)
        elif key == "n_points":
            spec.n_points = _num(lineno, value, int)
    for lineno, key, value in sections["emitters"]:
        parts = value.split()
        if len(parts) != 4:
            raise UsageError(
                f"{path}:{lineno}: emitter needs 'cx cy radius temperature'")
        vals = [_num(lineno, p, float) for p in parts]
        spec.emitters.append(Emitter(*vals))
    for lineno, key, value in sections["orbit"]:
        if key == "views":
            spec.views = _num(lineno, value, int)
        elif key == "radius":
            spec.orbit_radius = _num(lineno, value, float)
        elif key == "height":
            spec.orbit_height = _num(lineno, value, float)
        elif key == "angle_start_deg":
            spec.angle_start_deg = _num(lineno, value, float)
        elif key == "angle_end_deg":
            spec.angle_end_deg = _num(lineno, value, float)
        elif key == "width":
            spec.width = _num(lineno, value, int)
        elif key == "height_px":
            spec.height = _num(lineno, value, int)
        elif key == "focal":
            spec.focal = _num(lineno, value, float)
    for lineno, key, value in sections.get("attenuation", []):
        if key == "angle_coeff":
            spec.angle_coeff = _num(lineno, value, float)
        else:
            spec.time_coeff = _num(lineno, value, float)
    for lineno, key, value in sections.get("diffusion", []):
        spec.diffusion_time = _num(lineno, value, float)

    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# Texture synthesis
# ---------------------------------------------------------------------------

def emitter_texture(spec: SynthSpec) -> np.ndarray:
    """Hard-disk emitter blobs on an ambient background (pre-conduction)."""
    res = spec.texture_res
    uv = (np.arange(res) + 0.5) / res
    u, v = np.meshgrid(uv, uv)
    tex = np.full((res, res), spec.ambient, dtype=np.float64)
    for em in spec.emitters:
        mask = (u - em.cx) ** 2 + (v - em.cy) ** 2 <= em.radius ** 2
        tex[mask] = em.temperature
    return tex


def conducted_texture(spec: SynthSpec) -> np.ndarray:
    """Emitter texture after the configured diffusion time."""
    tex = emitter_texture(spec)
    if spec.diffusion_time <= 0:
        return tex
    dt = DIFFUSION_RATIO / DIFFUSION_ALPHA  # dx = 1 in texture cells
    steps = int(round(spec.diffusion_time / dt))
    if steps == 0:
        return tex
    out = heat_simulate(
        TemperatureField.from_array(tex, dx=1.0, boundary="insulated"),
        ConductionSpec(alpha=DIFFUSION_ALPHA, dt=dt, steps=steps))
    return out.data


def sample_texture_bilinear(tex: np.ndarray, u: np.ndarray,
                            v: np.ndarray) -> np.ndarray:
    """Bilinear lookup with uv in [0, 1]; samples sit at cell centers."""
    res = tex.shape[0]
    fu = np.clip(u * res - 0.5, 0.0, res - 1.0)
    fv = np.clip(v * res - 0.5, 0.0, res - 1.0)
    x0 = np.floor(fu).astype(int)
    y0 = np.floor(fv).astype(int)
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    wx = fu - x0
    wy = fv - y0
    return ((1 - wy) * ((1 - wx) * tex[y0, x0] + wx * tex[y0, x1])
            + wy * ((1 - wx) * tex[y1, x0] + wx * tex[y1, x1]))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

PLANE_HALF = 1.0  # plane spans [-1, 1]^2 at z = 0
BOX_HALF = np.array([0.8, 0.8, 0.5])


def _plane_hit(origins: np.ndarray, dirs: np.ndarray):
    """(hit mask, u, v) for rays against the textured z=0 square."""
    dz = dirs[:, 2]
    safe = np.where(np.abs(dz) > 1e-12, dz, 1e-12)
    s = -origins[:, 2] / safe
    px = origins[:, 0] + s * dirs[:, 0]
    py = origins[:, 1] + s * dirs[:, 1]
    hit = (np.abs(dz) > 1e-12) & (s > 0) \
        & (np.abs(px) <= PLANE_HALF) & (np.abs(py) <= PLANE_HALF)
    u = (px + PLANE_HALF) / (2 * PLANE_HALF)
    v = (py + PLANE_HALF) / (2 * PLANE_HALF)
    return hit, u, v


def _box_hit(origins: np.ndarray, dirs: np.ndarray):
    """Nearest-face ray/AABB intersection returning shared-texture UVs."""
    inv = 1.0 / np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
    t0 = (-BOX_HALF - origins) * inv
    t1 = (BOX_HALF - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    hit = (tmax > np.maximum(tmin, 0.0))
    t = np.where(tmin > 0, tmin, tmax)
    p = origins + t[:, None] * dirs
    # Face = axis with the largest relative coordinate; uv from the other two.
    rel = np.abs(p) / BOX_HALF
    face_axis = np.argmax(rel, axis=1)
    u = np.empty(len(p))
    v = np.empty(len(p))
    for axis, (ua, va) in enumerate(((1, 2), (0, 2), (0, 1))):
        m = face_axis == axis
        u[m] = (p[m, ua] / BOX_HALF[ua] + 1) / 2
        v[m] = (p[m, va] / BOX_HALF[va] + 1) / 2
    return hit & (t > 0), np.clip(u, 0, 1), np.clip(v, 0, 1)


def render_ground_truth(spec: SynthSpec, tex: np.ndarray, camera) -> np.ndarray:
    """Ray-cast one view of the textured geometry (independent of the splatter)."""
    h, w = camera.height, camera.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([
        (xs.ravel() - camera.cx) / camera.fx,
        (ys.ravel() - camera.cy) / camera.fy,
        np.ones(h * w),
    ], axis=1)
    dirs_world = dirs_cam @ camera.rotation  # R^T rows applied to each dir
    origins = np.tile(camera.center, (h * w, 1))
    if spec.geometry == "plane":
        hit, u, v = _plane_hit(origins, dirs_world)
    else:
        hit, u, v = _box_hit(origins, dirs_world)
    img = np.zeros(h * w)
    img[hit] = sample_texture_bilinear(tex, u[hit], v[hit])
    return img.reshape(h, w)


def orbit_cameras(spec: SynthSpec) -> list:
    """Pinhole cameras on the configured arc, all looking at the origin."""
    cams = []
    angles = np.deg2rad(np.linspace(spec.angle_start_deg, spec.angle_end_deg,
                                    spec.views))
    for theta in angles:
        position = np.array([
            spec.orbit_radius * np.cos(theta),
            spec.orbit_radius * np.sin(theta),
            spec.orbit_height,
        ])
        cams.append(look_at_camera(
            position, np.zeros(3), fx=spec.focal, fy=spec.focal,
            cx=spec.width / 2.0, cy=spec.height / 2.0,
            width=spec.width, height=spec.height))
    return cams, angles


def sample_seed_points(spec: SynthSpec, tex: np.ndarray,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seed 3D points: 70% inside emitter disks, 30% uniform over the surface."""
    n_emit = int(spec.n_points * 0.7)
    n_flat = spec.n_points - n_emit
    uv = []
    per = max(n_emit // max(len(spec.emitters), 1), 1)
    for em in spec.emitters:
        r = em.radius * np.sqrt(rng.uniform(0, 1, per))
        phi = rng.uniform(0, 2 * np.pi, per)
        uv.append(np.stack([em.cx + r * np.cos(phi), em.cy + r * np.sin(phi)],
                           axis=1))
    uv.append(rng.uniform(0, 1, (n_flat, 2)))
    uv = np.clip(np.concatenate(uv, axis=0), 0.0, 1.0)

    if spec.geometry == "plane":
        pts = np.stack([
            uv[:, 0] * 2 * PLANE_HALF - PLANE_HALF,
            uv[:, 1] * 2 * PLANE_HALF - PLANE_HALF,
            np.zeros(len(uv)),
        ], axis=1)
    else:
        # Project uv onto a random box face per point.
        faces = rng.integers(0, 6, len(uv))
        pts = np.empty((len(uv), 3))
        for f in range(6):
            m = faces == f
            axis, sign = f % 3, 1 if f < 3 else -1
            others = [a for a in range(3) if a != axis]
            pts[m, axis] = sign * BOX_HALF[axis]
            pts[m, others[0]] = (uv[m, 0] * 2 - 1) * BOX_HALF[others[0]]
            pts[m, others[1]] = (uv[m, 1] * 2 - 1) * BOX_HALF[others[1]]
    radiance = sample_texture_bilinear(tex, uv[:, 0], uv[:, 1])
    return pts, radiance


# ---------------------------------------------------------------------------
# Generator entry point
# ---------------------------------------------------------------------------

def synth_scene_generate(spec: SynthSpec, out_dir, seed: int) -> dict:
    """Write the dataset and return the ground-truth manifest dict."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "sparse" / "0").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}")

    rng = np.random.default_rng(seed)
    tex = conducted_texture(spec)
    cams, angles = orbit_cameras(spec)

    view_records = []
    attenuations = []
    for i, (camera, theta) in enumerate(zip(cams, angles)):
        t_norm = i / (spec.views - 1)
        img = render_ground_truth(spec, tex, camera)
        factor = float(np.exp(spec.angle_coeff * theta + spec.time_coeff * t_norm))
        attenuations.append(factor)
        name = f"frame_{i:04d}.png"
        save_image(np.clip(img * factor, 0.0, 1.0), out / "images" / name)
        view_records.append(SparseView(
            name=name, qvec=rot_to_qvec(camera.rotation),
            tvec=camera.translation.copy(), camera_id=1))

    points, radiance = sample_seed_points(spec, tex, rng)
    rgb = np.clip(np.round(radiance * 255.0), 0, 255).astype(int)
    rgb = np.stack([rgb, rgb, rgb], axis=1)
    cam0 = cams[0]
    cameras = {1: ("PINHOLE", cam0.width, cam0.height,
                   np.array([cam0.fx, cam0.fy, cam0.cx, cam0.cy]))}
    write_colmap_text(out / "sparse" / "0", cameras, view_records, points, rgb)

    manifest = {
        "seed": seed,
        "geometry": spec.geometry,
        "texture_res": spec.texture_res,
        "ambient": spec.ambient,
        "emitters": [[e.cx, e.cy, e.radius, e.temperature] for e in spec.emitters],
        "views": spec.views,
        "orbit_radius": spec.orbit_radius,
        "orbit_height": spec.orbit_height,
        "angle_range_deg": [spec.angle_start_deg, spec.angle_end_deg],
        "image_size": [spec.width, spec.height],
        "focal": spec.focal,
        "angle_coeff": spec.angle_coeff,
        "time_coeff": spec.time_coeff,
        "diffusion_time": spec.diffusion_time,
        "attenuation_factors": attenuations,
        "n_points": int(len(points)),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
