"""On-disk formats: SemanticKITTI scans/labels and the RVS scene container.

RVS layout (all little-endian)::

    b"RVS1" | uint32 H | uint32 W | uint32 channels | uint32 C | float32 planes

Planes are row-major H*W blocks in this order: depth_log, reflectance, mask,
class_ids. A 9-channel file appends x, y, z, remission and the raw 16-bit
label so that a KITTI scan survives a round trip bit-exactly. ``C == 0``
marks an unlabeled scene.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from rvdiff.codec import Palette, PointCloud, RangeScene, SemanticMap, SensorConfig
from rvdiff.errors import FormatError, UsageError

MAGIC = b"RVS1"
HEADER = struct.Struct("<4s4I")
BASE_PLANES = ("depth_log", "reflectance", "mask", "class_ids")
EXTRA_PLANES = ("x", "y", "z", "remission", "raw_label")


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o666 & ~_umask())  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# SemanticKITTI


def read_kitti_scan(path) -> np.ndarray:
    """(N, 4) float32 array of x, y, z, reflectance."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise FormatError(f"{path}: size is not a multiple of 16 bytes")
    return raw.reshape(-1, 4)


def read_kitti_label(path) -> np.ndarray:
    """Raw uint32 labels; the semantic class is the low 16 bits."""
    return np.fromfile(path, dtype="<u4")


def write_kitti_scan(path, points: np.ndarray) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(points, dtype="<f4").tobytes())


def write_kitti_label(path, labels: np.ndarray) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(labels, dtype="<u4").tobytes())


def load_kitti_cloud(bin_path, label_path=None):
    """Read a scan (and labels) into float32 points and low-16-bit raw labels."""
    pts = read_kitti_scan(bin_path)
    raw = None
    if label_path is not None:
        lab = read_kitti_label(label_path)
        if len(lab) != len(pts):
            raise FormatError(f"{label_path}: {len(lab)} labels for {len(pts)} points")
        raw = (lab & 0xFFFF).astype(np.int64)
    return pts, raw


# ---------------------------------------------------------------------------
# RVS


@dataclass(frozen=True)
class RvsRecord:
    planes: dict  # name -> (H, W) float32
    num_classes: int

    @property
    def shape(self):
        return self.planes["depth_log"].shape

    @property
    def has_extras(self) -> bool:
        return "x" in self.planes


def encode_rvs(scene: RangeScene, semantics: Optional[SemanticMap] = None,
               extras: Optional[dict] = None) -> bytes:
    h, w = scene.sensor.shape
    planes = [
        scene.depth_log,
        scene.reflectance,
        scene.mask.astype(np.float64),
        semantics.class_ids if semantics is not None else np.zeros((h, w)),
    ]
    if extras is not None:
        missing = set(EXTRA_PLANES) - set(extras)
        if missing:
            raise UsageError(f"missing extra planes: {sorted(missing)}")
        planes += [extras[k] for k in EXTRA_PLANES]
    c = semantics.num_classes if semantics is not None else 0
    body = np.stack([np.asarray(p, dtype="<f4") for p in planes]).tobytes()
    return HEADER.pack(MAGIC, h, w, len(planes), c) + body


def write_rvs(path, scene: RangeScene, semantics: Optional[SemanticMap] = None,
              extras: Optional[dict] = None) -> None:
    atomic_write_bytes(path, encode_rvs(scene, semantics, extras))


def read_rvs(path) -> RvsRecord:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, h, w, ch, c = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if ch not in (len(BASE_PLANES), len(BASE_PLANES) + len(EXTRA_PLANES)):
        raise FormatError(f"{path}: unsupported channel count {ch}")
    expect = HEADER.size + 4 * h * w * ch
    if len(data) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(ch, h, w)
    names = BASE_PLANES + (EXTRA_PLANES if ch > len(BASE_PLANES) else ())
    return RvsRecord({n: arr[i] for i, n in enumerate(names)}, c)


def load_scene(path, sensor: SensorConfig, palette: Optional[Palette] = None):
    """Read an RVS file as ``(RangeScene, SemanticMap or None, RvsRecord)``."""
    rec = read_rvs(path)
    if rec.shape != sensor.shape:
        raise FormatError(f"{path}: shape {rec.shape} does not match sensor {sensor.shape}")
    p = rec.planes
    try:
        scene = RangeScene(p["depth_log"], p["reflectance"], p["mask"] > 0.5, sensor)
        sem = None
        if rec.num_classes > 0:
            if palette is None or palette.num_classes != rec.num_classes:
                raise FormatError(f"{path}: {rec.num_classes} classes do not match the palette")
            sem = SemanticMap(p["class_ids"].astype(np.int64), palette)
    except (ValueError, UsageError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return scene, sem, rec


def rvs_to_kitti(rec: RvsRecord):
    """Points and raw labels stored in a 9-channel RVS record, row-major pixel order."""
    if not rec.has_extras:
        raise UsageError("RVS record has no raw point planes")
    m = rec.planes["mask"] > 0.5
    pts = np.stack([rec.planes[k][m] for k in ("x", "y", "z", "remission")], axis=1)
    labels = rec.planes["raw_label"][m].astype(np.uint32)
    return pts.astype("<f4"), labels


def cloud_from_kitti(points: np.ndarray, raw_labels: Optional[np.ndarray],
                     palette: Optional[Palette]) -> PointCloud:
    labels = None
    if raw_labels is not None:
        labels = palette.raw_to_class(raw_labels) if palette is not None else raw_labels
    return PointCloud(points[:, :3].astype(np.float64),
                      np.clip(points[:, 3].astype(np.float64), 0.0, 1.0), labels)
