"""COLMAP sparse-model ingestion, PNG codecs, and the train/test split.

Both the text and binary COLMAP layouts are supported (binary per the
published byte layout: little-endian, u64 counts, f64 parameters).  Only
SIMPLE_PINHOLE and PINHOLE models map onto the pinhole camera; distortion
models are rejected outright rather than silently approximated.

Frame order (and therefore normalized shooting time) derives from the
lexicographic sort of image filenames.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import DataError
from .scene import Camera, RadianceImage, ThermalView

CAMERA_MODEL_IDS = {0: "SIMPLE_PINHOLE", 1: "PINHOLE"}
CAMERA_MODEL_NAMES = {v: k for k, v in CAMERA_MODEL_IDS.items()}
MODEL_NUM_PARAMS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}
# Models COLMAP defines but this pipeline refuses (distortion would corrupt
# gradient checks if quietly ignored).
KNOWN_UNSUPPORTED = {
    2: "SIMPLE_RADIAL", 3: "RADIAL", 4: "OPENCV", 5: "OPENCV_FISHEYE",
    6: "FULL_OPENCV", 7: "FOV", 8: "SIMPLE_RADIAL_FISHEYE",
    9: "RADIAL_FISHEYE", 10: "THIN_PRISM_FISHEYE",
}


@dataclass
class SparseView:
    name: str
    qvec: np.ndarray      # (4,) world-to-camera rotation, COLMAP (w, x, y, z)
    tvec: np.ndarray      # (3,)
    camera_id: int
    frame_index: int = -1


@dataclass
class SparseScene:
    cameras: dict          # id -> Camera
    views: list            # list[SparseView], sorted by filename
    points: np.ndarray     # (m, 3)
    point_radiance: np.ndarray  # (m,) grayscale seeds in [0, 1]


def qvec_to_rot(qvec: np.ndarray) -> np.ndarray:
    w, x, y, z = qvec
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_qvec(r: np.ndarray) -> np.ndarray:
    rxx, ryx, rzx, rxy, ryy, rzy, rxz, ryz, rzz = r.flat
    k = np.array([
        [rxx - ryy - rzz, 0, 0, 0],
        [ryx + rxy, ryy - rxx - rzz, 0, 0],
        [rzx + rxz, rzy + ryz, rzz - rxx - ryy, 0],
        [ryz - rzy, rzx - rxz, rxy - ryx, rxx + ryy + rzz],
    ]) / 3.0
    eigvals, eigvecs = np.linalg.eigh(k)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if q[0] < 0:
        q = -q
    return q


def _camera_from_params(model: str, width: int, height: int,
                        params: np.ndarray, rotation: np.ndarray,
                        translation: np.ndarray) -> Camera:
    if model == "SIMPLE_PINHOLE":
        fx = fy = params[0]
        cx, cy = params[1], params[2]
    else:  # PINHOLE
        fx, fy, cx, cy = params[:4]
    return Camera(fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
                  width=int(width), height=int(height),
                  rotation=rotation, translation=translation)


# ---------------------------------------------------------------------------
# Text parsing
# ---------------------------------------------------------------------------

def _iter_content_lines(path: Path):
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield lineno, stripped


def _read_cameras_text(path: Path) -> dict:
    cameras = {}
    for lineno, line in _iter_content_lines(path):
        parts = line.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = np.array([float(v) for v in parts[4:]])
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: malformed camera record")
        if model not in MODEL_NUM_PARAMS:
            raise DataError(
                f"{path}:{lineno}: unsupported camera model '{model}' "
                "(only SIMPLE_PINHOLE and PINHOLE are accepted)")
        if len(params) != MODEL_NUM_PARAMS[model]:
            raise DataError(f"{path}:{lineno}: wrong parameter count for {model}")
        cameras[cam_id] = (model, width, height, params)
    return cameras


def _read_images_text(path: Path) -> list:
    """Pose lines alternate with (possibly empty) 2D-point lines."""
    views = []
    expect_pose = True
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if expect_pose:
                if not line:
                    continue  # blank before any record
                parts = line.split()
                if len(parts) < 10:
                    raise DataError(f"{path}:{lineno}: malformed image record")
                try:
                    qvec = np.array([float(v) for v in parts[1:5]])
                    tvec = np.array([float(v) for v in parts[5:8]])
                    camera_id = int(parts[8])
                    name = parts[9]
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed image record")
                views.append(SparseView(name=name, qvec=qvec, tvec=tvec,
                                        camera_id=camera_id))
                expect_pose = False
            else:
                expect_pose = True  # 2D-points line (may be empty), unused
    return views


def _read_points_text(path: Path) -> tuple[np.ndarray, np.ndarray]:
    xyz, gray = [], []
    for lineno, line in _iter_content_lines(path):
        parts = line.split()
        if len(parts) < 8:
            raise DataError(f"{path}:{lineno}: malformed point record")
        try:
            xyz.append([float(v) for v in parts[1:4]])
            rgb = [float(v) for v in parts[4:7]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed point record")
        gray.append(sum(rgb) / 3.0 / 255.0)
    return np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(gray)


# ---------------------------------------------------------------------------
# Binary parsing
# ---------------------------------------------------------------------------

def _read_bytes(fh, count: int, fmt: str, path: Path):
    data = fh.read(count)
    if len(data) != count:
        raise DataError(f"{path}: truncated at byte {fh.tell() - len(data)}")
    return struct.unpack("<" + fmt, data)


def _read_cameras_binary(path: Path) -> dict:
    cameras = {}
    with open(path, "rb") as fh:
        (n_cameras,) = _read_bytes(fh, 8, "Q", path)
        for _ in range(n_cameras):
            cam_id, model_id, width, height = _read_bytes(fh, 24, "iiQQ", path)
            if model_id not in CAMERA_MODEL_IDS:
                name = KNOWN_UNSUPPORTED.get(model_id, f"id {model_id}")
                raise DataError(
                    f"{path}: unsupported camera model '{name}' at byte "
                    f"{fh.tell() - 24}")
            model = CAMERA_MODEL_IDS[model_id]
            n_params = MODEL_NUM_PARAMS[model]
            params = np.array(_read_bytes(fh, 8 * n_params, "d" * n_params, path))
            cameras[cam_id] = (model, width, height, params)
    return cameras


def _read_images_binary(path: Path) -> list:
    views = []
    with open(path, "rb") as fh:
        (n_images,) = _read_bytes(fh, 8, "Q", path)
        for _ in range(n_images):
            vals = _read_bytes(fh, 64, "idddddddi", path)
            qvec = np.array(vals[1:5])
            tvec = np.array(vals[5:8])
            camera_id = vals[8]
            chars = []
            while True:
                c = fh.read(1)
                if len(c) != 1:
                    raise DataError(f"{path}: truncated at byte {fh.tell()}")
                if c == b"\x00":
                    break
                chars.append(c)
            name = b"".join(chars).decode("utf-8")
            (n_pts,) = _read_bytes(fh, 8, "Q", path)
            fh.seek(24 * n_pts, os.SEEK_CUR)  # (x, y, point3D_id) triples
            views.append(SparseView(name=name, qvec=qvec, tvec=tvec,
                                    camera_id=camera_id))
    return views


def _read_points_binary(path: Path) -> tuple[np.ndarray, np.ndarray]:
    xyz, gray = [], []
    with open(path, "rb") as fh:
        (n_points,) = _read_bytes(fh, 8, "Q", path)
        for _ in range(n_points):
            vals = _read_bytes(fh, 43, "QdddBBBd", path)
            xyz.append(vals[1:4])
            gray.append((vals[4] + vals[5] + vals[6]) / 3.0 / 255.0)
            (track_len,) = _read_bytes(fh, 8, "Q", path)
            fh.seek(8 * track_len, os.SEEK_CUR)
    return np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(gray)


# ---------------------------------------------------------------------------
# Scene assembly
# ---------------------------------------------------------------------------

def parse_colmap(path) -> SparseScene:
    """Load a COLMAP sparse model directory (text or binary layout).

    The directory must contain cameras/images/points3D as either .txt or
    .bin; a ``sparse/0`` subdirectory is searched as a fallback.
    """
    root = Path(path)
    for candidate in (root, root / "sparse" / "0", root / "sparse"):
        if (candidate / "cameras.txt").exists() or (candidate / "cameras.bin").exists():
            root = candidate
            break
    else:
        raise DataError(f"{path}: no COLMAP model found (cameras.txt/bin missing)")

    if (root / "cameras.bin").exists():
        raw_cams = _read_cameras_binary(root / "cameras.bin")
        raw_views = _read_images_binary(root / "images.bin")
        points, gray = _read_points_binary(root / "points3D.bin")
    else:
        raw_cams = _read_cameras_text(root / "cameras.txt")
        raw_views = _read_images_text(root / "images.txt")
        points, gray = _read_points_text(root / "points3D.txt")

    if points.shape[0] == 0:
        raise DataError(f"{root}: no seed points")

    cameras = {}
    views = sorted(raw_views, key=lambda v: v.name)
    for i, view in enumerate(views):
        view.frame_index = i
        if view.camera_id not in raw_cams:
            raise DataError(f"{root}: image '{view.name}' references missing "
                            f"camera {view.camera_id}")
    for cam_id, (model, width, height, params) in raw_cams.items():
        cameras[cam_id] = (model, width, height, params)
    return SparseScene(cameras=cameras, views=views, points=points,
                       point_radiance=gray)


def build_view(scene: SparseScene, view: SparseView, n_views: int,
               image: RadianceImage | None) -> ThermalView:
    """Materialize a calibrated ThermalView from sparse-scene records."""
    model, width, height, params = scene.cameras[view.camera_id]
    rotation = qvec_to_rot(view.qvec)
    camera = _camera_from_params(model, width, height, params,
                                 rotation, view.tvec.astype(np.float64))
    denom = max(n_views - 1, 1)
    return ThermalView(camera=camera, time_norm=view.frame_index / denom,
                       image=image, frame_index=view.frame_index)


def load_views(path, scene: SparseScene, image_dir: str = "images") -> list:
    """All ThermalViews with their ground-truth images loaded."""
    root = Path(path)
    views = []
    n = len(scene.views)
    for view in scene.views:
        img_path = root / image_dir / view.name
        if not img_path.exists():
            raise DataError(f"missing image file {img_path}")
        image = load_image(img_path)
        tv = build_view(scene, view, n, image)
        if (image.width, image.height) != (tv.camera.width, tv.camera.height):
            warnings.warn(
                f"{view.name}: image size {image.width}x{image.height} does not "
                f"match camera {tv.camera.width}x{tv.camera.height}")
        views.append(tv)
    return views


# ---------------------------------------------------------------------------
# Writers (used by the synthetic generator and fixtures)
# ---------------------------------------------------------------------------

def write_colmap_text(path, cameras: dict, views: list,
                      points: np.ndarray, rgb: np.ndarray) -> None:
    """Write a sparse model in the COLMAP text layout.

    ``cameras`` maps id -> (model, width, height, params); ``views`` are
    SparseView records; ``rgb`` holds uint8 colors per point.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam_id, (model, width, height, params) in sorted(cameras.items()):
            vals = " ".join(f"{p:.12g}" for p in params)
            fh.write(f"{cam_id} {model} {width} {height} {vals}\n")
    with open(root / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, view in enumerate(views, start=1):
            q = " ".join(f"{v:.17g}" for v in view.qvec)
            t = " ".join(f"{v:.17g}" for v in view.tvec)
            fh.write(f"{i} {q} {t} {view.camera_id} {view.name}\n\n")
    with open(root / "points3D.txt", "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        for i, (p, c) in enumerate(zip(points, rgb), start=1):
            fh.write(f"{i} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                     f"{int(c[0])} {int(c[1])} {int(c[2])} 0.5\n")


def write_colmap_binary(path, cameras: dict, views: list,
                        points: np.ndarray, rgb: np.ndarray) -> None:
    """Binary twin of :func:`write_colmap_text` (same byte layout COLMAP uses)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(cameras)))
        for cam_id, (model, width, height, params) in sorted(cameras.items()):
            fh.write(struct.pack("<iiQQ", cam_id, CAMERA_MODEL_NAMES[model],
                                 width, height))
            fh.write(struct.pack("<" + "d" * len(params), *params))
    with open(root / "images.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(views)))
        for i, view in enumerate(views, start=1):
            fh.write(struct.pack("<idddddddi", i, *view.qvec, *view.tvec,
                                 view.camera_id))
            fh.write(view.name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", 0))
    with open(root / "points3D.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(points)))
        for i, (p, c) in enumerate(zip(points, rgb), start=1):
            fh.write(struct.pack("<QdddBBBd", i, p[0], p[1], p[2],
                                 int(c[0]), int(c[1]), int(c[2]), 0.5))
            fh.write(struct.pack("<Q", 0))


# ---------------------------------------------------------------------------
# Image codec
# ---------------------------------------------------------------------------

def load_image(path) -> RadianceImage:
    """PNG to radiance in [0, 1]; 8/16-bit gray or RGB (converted by mean)."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"{path}: cannot decode image ({exc})")
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float64) / 255.0
    elif img.mode in ("I;16", "I;16B", "I;16L"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif img.mode == "I":
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float64).mean(axis=2) / 255.0
    else:
        raise DataError(f"{path}: unsupported image mode '{img.mode}' "
                        "(need 8/16-bit grayscale or RGB PNG)")
    return RadianceImage.from_array(arr)


def save_image(image, path) -> None:
    """8-bit grayscale PNG with round-half-up quantization."""
    arr = image.data if isinstance(image, RadianceImage) else np.asarray(image)
    quantized = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------

def split_train_test(views: list) -> tuple[list, list]:
    """Every 8th frame (index = 0 mod 8) goes to the test set."""
    if len(views) < 8:
        warnings.warn(f"only {len(views)} views: test split may be a singleton")
    train, test = [], []
    for view in views:
        (test if view.frame_index % 8 == 0 else train).append(view)
    return train, test
