"""Versioned binary checkpoints with length-prefixed sections.

Layout: 8-byte magic, u32 version, then sections of
[u32 name length][name][u64 payload length][payload] until EOF.  Array
payloads carry dtype tag, ndim, and shape so round trips are bitwise.
Physics-module sections are optional; the trainer re-initializes a module
to identity when its section is absent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DataError
from .atf import AtfNetwork
from .scene import GaussianCloud
from .tcm import TcmNetwork

MAGIC = b"TSPLATCK"
VERSION = 1


def _pack_array(arr: np.ndarray) -> bytes:
    dtype = arr.dtype.str.encode("ascii")  # e.g. b"<f8"
    header = struct.pack("<B", len(dtype)) + dtype
    header += struct.pack("<B", arr.ndim)
    header += struct.pack("<" + "q" * arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def _unpack_array(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    (dlen,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    dtype = np.dtype(buf[offset:offset + dlen].decode("ascii"))
    offset += dlen
    (ndim,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    shape = struct.unpack_from("<" + "q" * ndim, buf, offset)
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    nbytes = count * dtype.itemsize
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype).reshape(shape)
    return arr.copy(), offset + nbytes


def _pack_array_list(arrays: list) -> bytes:
    out = struct.pack("<I", len(arrays))
    for arr in arrays:
        out += _pack_array(arr)
    return out


def _unpack_array_list(buf: bytes, offset: int = 0) -> tuple[list, int]:
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    arrays = []
    for _ in range(count):
        arr, offset = _unpack_array(buf, offset)
        arrays.append(arr)
    return arrays, offset


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    atf: AtfNetwork | None
    tcm: TcmNetwork | None
    config: dict
    iteration: int
    rng_state: dict | None
    adam: dict | None = None  # group name -> {"m": [...], "v": [...], "step": int}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    sections: list[tuple[str, bytes]] = []

    cloud = ckpt.cloud
    cloud_payload = struct.pack("<qi", len(cloud), cloud.sh_degree_active)
    cloud_payload += _pack_array_list([
        cloud.positions, cloud.log_scales, cloud.rotations,
        cloud.opacities_raw, cloud.sh,
    ])
    sections.append(("cloud", cloud_payload))

    if ckpt.atf is not None:
        sections.append(("atf", _pack_array_list(
            ckpt.atf.weights + ckpt.atf.biases)))
    if ckpt.tcm is not None:
        sections.append(("tcm", _pack_array_list(
            ckpt.tcm.weights + ckpt.tcm.biases)))

    sections.append(("config", json.dumps(ckpt.config, sort_keys=True).encode()))
    sections.append(("iter", struct.pack("<q", ckpt.iteration)))
    if ckpt.rng_state is not None:
        sections.append(("rng", json.dumps(ckpt.rng_state).encode()))
    if ckpt.adam is not None:
        names = sorted(ckpt.adam)
        payload = struct.pack("<I", len(names))
        for name in names:
            group = ckpt.adam[name]
            nb = name.encode()
            payload += struct.pack("<I", len(nb)) + nb
            payload += struct.pack("<q", group["step"])
            payload += _pack_array_list(group["m"] + group["v"])
        sections.append(("adam", payload))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, payload in sections:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _load_sections(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}")
    if len(data) < 12 or data[:8] != MAGIC:
        raise DataError(f"{path}: not a thermalsplat checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    sections = {}
    offset = 12
    while offset < len(data):
        if offset + 4 > len(data):
            raise DataError(f"{path}: section header truncated at byte {offset}")
        (nlen,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + nlen].decode()
        offset += nlen
        if offset + 8 > len(data):
            raise DataError(f"{path}: section '{name}' truncated")
        (plen,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if offset + plen > len(data):
            raise DataError(f"{path}: section '{name}' truncated")
        sections[name] = data[offset:offset + plen]
        offset += plen
    return sections


def load_checkpoint(path) -> Checkpoint:
    sections = _load_sections(path)
    if "cloud" not in sections:
        raise DataError(f"{path}: missing cloud section")

    buf = sections["cloud"]
    n, sh_degree = struct.unpack_from("<qi", buf, 0)
    arrays, _ = _unpack_array_list(buf, 12)
    cloud = GaussianCloud(
        positions=arrays[0], log_scales=arrays[1], rotations=arrays[2],
        opacities_raw=arrays[3], sh=arrays[4], sh_degree_active=sh_degree)
    if len(cloud) != n:
        raise DataError(f"{path}: cloud section inconsistent")

    atf = None
    if "atf" in sections:
        arrays, _ = _unpack_array_list(sections["atf"])
        half = len(arrays) // 2
        atf = AtfNetwork(dtype=arrays[0].dtype)
        atf.weights = arrays[:half]
        atf.biases = arrays[half:]

    tcm = None
    if "tcm" in sections:
        arrays, _ = _unpack_array_list(sections["tcm"])
        half = len(arrays) // 2
        tcm = TcmNetwork()
        tcm.weights = arrays[:half]
        tcm.biases = arrays[half:]

    config = json.loads(sections["config"].decode()) if "config" in sections else {}
    iteration = struct.unpack("<q", sections["iter"])[0] if "iter" in sections else 0
    rng_state = json.loads(sections["rng"].decode()) if "rng" in sections else None

    adam = None
    if "adam" in sections:
        buf = sections["adam"]
        (count,) = struct.unpack_from("<I", buf, 0)
        offset = 4
        adam = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            name = buf[offset:offset + nlen].decode()
            offset += nlen
            (step,) = struct.unpack_from("<q", buf, offset)
            offset += 8
            arrays, offset = _unpack_array_list(buf, offset)
            half = len(arrays) // 2
            adam[name] = {"step": step, "m": arrays[:half], "v": arrays[half:]}

    return Checkpoint(cloud=cloud, atf=atf, tcm=tcm, config=config,
                      iteration=iteration, rng_state=rng_state, adam=adam)
