import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from thermalsplat import UsageError
from thermalsplat.dataset import load_image, load_views, parse_colmap
from thermalsplat.filters import sobel_gradients
from thermalsplat.synth import (
    Emitter,
    SynthSpec,
    conducted_texture,
    parse_synth_spec,
    sample_texture_bilinear,
    synth_scene_generate,
)


def _base_spec(**kwargs):
    defaults = dict(
        geometry="plane", texture_res=48, ambient=0.3, n_points=60,
        emitters=[Emitter(0.35, 0.4, 0.12, 0.9), Emitter(0.7, 0.65, 0.1, 0.05)],
        views=10, orbit_radius=2.3, orbit_height=1.6, angle_start_deg=0,
        angle_end_deg=100, width=24, height=24, focal=28,
        angle_coeff=0.0, time_coeff=0.0, diffusion_time=0.0)
    defaults.update(kwargs)
    return SynthSpec(**defaults)


def _tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_same_spec_and_seed_is_byte_identical(tmp_path):
    spec = _base_spec(angle_coeff=-0.1, time_coeff=-0.1, diffusion_time=0.8)
    synth_scene_generate(spec, tmp_path / "a", seed=4)
    synth_scene_generate(spec, tmp_path / "b", seed=4)
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a)


def test_generated_dataset_parses_and_loads(tmp_path):
    spec = _base_spec()
    manifest = synth_scene_generate(spec, tmp_path, seed=1)
    scene = parse_colmap(tmp_path)
    assert len(scene.views) == 10
    assert scene.points.shape[0] == manifest["n_points"]
    views = load_views(tmp_path, scene)
    assert all(v.image.data.shape == (24, 24) for v in views)
    assert views[0].time_norm == 0.0
    assert views[-1].time_norm == 1.0


def test_no_imaging_effects_gives_view_consistent_radiance(tmp_path):
    # With zero attenuation and no conduction, sampling the same surface
    # point in every rendered view returns the same radiance (up to
    # bilinear interpolation and 8-bit quantization).
    spec = _base_spec()
    synth_scene_generate(spec, tmp_path, seed=2)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert all(f == 1.0 for f in manifest["attenuation_factors"])

    scene = parse_colmap(tmp_path)
    views = load_views(tmp_path, scene)
    tex = conducted_texture(spec)

    # Probe surface points well inside the plane and far from emitter
    # edges (nearest-pixel sampling smears over ~2 texture cells).
    probes = np.array([[-0.7, -0.7, 0.0], [0.7, -0.6, 0.0], [-0.6, 0.6, 0.0]])
    expected = sample_texture_bilinear(
        tex, (probes[:, 0] + 1) / 2, (probes[:, 1] + 1) / 2)
    for view in views:
        cam = view.camera
        p_cam = probes @ cam.rotation.T + cam.translation
        u = cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx
        v = cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy
        inside = (u > 1) & (u < 22) & (v > 1) & (v < 22)
        ui = np.round(u).astype(int)
        vi = np.round(v).astype(int)
        sampled = view.image.data[vi[inside], ui[inside]]
        # Nearest-pixel sampling of a smooth texture: tolerance covers the
        # half-pixel offset plus quantization.
        assert np.abs(sampled - expected[inside]).max() < 0.06


def test_diffusion_reduces_edge_sharpness(tmp_path):
    sharp_spec = _base_spec()
    blurred_spec = _base_spec(diffusion_time=1.5)
    synth_scene_generate(sharp_spec, tmp_path / "sharp", seed=3)
    synth_scene_generate(blurred_spec, tmp_path / "blurred", seed=3)

    def mean_gradient(root):
        total = 0.0
        count = 0
        for path in sorted((Path(root) / "images").glob("*.png")):
            img = load_image(path).data
            gx, gy = sobel_gradients(img)
            total += float(np.sqrt(gx ** 2 + gy ** 2).mean())
            count += 1
        return total / count

    assert mean_gradient(tmp_path / "blurred") < mean_gradient(tmp_path / "sharp")


def test_attenuation_factors_recorded_in_manifest(tmp_path):
    spec = _base_spec(angle_coeff=-0.1, time_coeff=-0.15)
    manifest = synth_scene_generate(spec, tmp_path, seed=5)
    factors = manifest["attenuation_factors"]
    assert len(factors) == 10
    assert factors[0] == pytest.approx(1.0)  # theta = 0, t = 0
    assert factors[-1] < factors[0]
    angles = np.deg2rad(np.linspace(0, 100, 10))
    expected = np.exp(-0.1 * angles - 0.15 * np.linspace(0, 1, 10))
    assert np.allclose(factors, expected, rtol=1e-12)


def test_box_geometry_renders(tmp_path):
    spec = _base_spec(geometry="box")
    synth_scene_generate(spec, tmp_path, seed=6)
    scene = parse_colmap(tmp_path)
    views = load_views(tmp_path, scene)
    assert all(v.image.data.max() > 0 for v in views)


def test_degenerate_orbit_rejected():
    with pytest.raises(UsageError, match="degenerate camera orbit"):
        _base_spec(orbit_height=0.0).validate()


def test_spec_file_parsing_and_errors(tmp_path):
    good = tmp_path / "good.ini"
    good.write_text("""
[scene]
geometry = plane
texture_res = 32
ambient = 0.2
n_points = 50

[emitters]
emitter = 0.4 0.4 0.1 0.9

[orbit]
views = 6
radius = 2.0
height = 1.5
angle_start_deg = 0
angle_end_deg = 90
width = 16
height_px = 16
focal = 20

[attenuation]
angle_coeff = -0.05
time_coeff = -0.05

[diffusion]
time = 0.4
""")
    spec = parse_synth_spec(good)
    assert spec.texture_res == 32
    assert len(spec.emitters) == 1
    assert spec.views == 6
    assert spec.diffusion_time == pytest.approx(0.4)

    missing_orbit = tmp_path / "no_orbit.ini"
    missing_orbit.write_text("[emitters]\nemitter = 0.5 0.5 0.1 0.9\n")
    with pytest.raises(UsageError, match=r"\[orbit\]"):
        parse_synth_spec(missing_orbit)

    bad_key = tmp_path / "bad_key.ini"
    bad_key.write_text("[scene]\nbogus = 1\n")
    with pytest.raises(UsageError, match="bad_key.ini:2"):
        parse_synth_spec(bad_key)

    bad_emitter = tmp_path / "bad_emitter.ini"
    bad_emitter.write_text(
        "[emitters]\nemitter = 0.5 0.5\n[orbit]\nviews = 4\n")
    with pytest.raises(UsageError, match="cx cy radius temperature"):
        parse_synth_spec(bad_emitter)


def test_spec_requires_emitters():
    with pytest.raises(UsageError, match="emitter"):
        SynthSpec(emitters=[]).validate()
