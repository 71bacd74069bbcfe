"""Range-view encoding of LiDAR sweeps.

Conventions used throughout the package:

* Column 0 starts at azimuth -pi and columns advance counter-clockwise.
* Row 0 is the top elevation bin (``elevation_max``).
* Empty pixels hold -1 in both channels and ``mask=False``.
* Empty pixels carry class 0 in semantic maps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from rvdiff import kernels
from rvdiff.errors import DomainError, UsageError

SENTINEL = -1.0
# generated pixels whose signed log-depth falls at or below this are treated as empty
EMPTY_THRESHOLD = -0.99


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# palette


@dataclass(frozen=True)
class Palette:
    names: tuple
    colors: np.ndarray  # (C, 3) uint8
    learning_map: dict = field(default_factory=dict)

    def __post_init__(self):
        colors = np.asarray(self.colors)
        if colors.ndim != 2 or colors.shape[1] != 3:
            raise UsageError(f"palette colors must be (C, 3), got {colors.shape}")
        if len(self.names) != len(colors):
            raise UsageError("palette names and colors differ in length")
        if np.any(colors < 0) or np.any(colors > 255):
            raise UsageError("palette colors must be bytes")
        if len({tuple(c) for c in colors.tolist()}) != len(colors):
            raise UsageError("palette entries must be distinct")
        object.__setattr__(self, "colors", _frozen(colors, np.uint8))

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def raw_to_class(self, raw: np.ndarray) -> np.ndarray:
        """Map raw dataset label ids to class ids; unknown ids go to class 0."""
        raw = np.asarray(raw, dtype=np.int64)
        if not self.learning_map:
            return np.where((raw >= 0) & (raw < self.num_classes), raw, 0)
        lut = np.zeros(max(self.learning_map) + 1, dtype=np.int64)
        for k, v in self.learning_map.items():
            lut[k] = v
        out = np.zeros_like(raw)
        ok = (raw >= 0) & (raw < len(lut))
        out[ok] = lut[raw[ok]]
        return out

    def class_to_raw(self, cls: np.ndarray) -> np.ndarray:
        """Smallest raw id mapping to each class (identity without a learning map)."""
        cls = np.asarray(cls, dtype=np.int64)
        if not self.learning_map:
            return cls.copy()
        inv = np.zeros(self.num_classes, dtype=np.int64)
        for raw in sorted(self.learning_map, reverse=True):
            inv[self.learning_map[raw]] = raw
        return inv[cls]

    def to_json(self) -> dict:
        return {
            "classes": [
                {"id": i, "name": n, "rgb": [int(v) for v in c]}
                for i, (n, c) in enumerate(zip(self.names, self.colors))
            ],
            "learning_map": {str(k): int(v) for k, v in sorted(self.learning_map.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "Palette":
        classes = sorted(data["classes"], key=lambda c: c["id"])
        if [c["id"] for c in classes] != list(range(len(classes))):
            raise UsageError("palette class ids must be 0..C-1")
        lmap = {int(k): int(v) for k, v in data.get("learning_map", {}).items()}
        if any(v < 0 or v >= len(classes) for v in lmap.values()):
            raise UsageError("learning_map targets must be valid class ids")
        return cls(
            names=tuple(c["name"] for c in classes),
            colors=np.array([c["rgb"] for c in classes]),
            learning_map=lmap,
        )


def load_palette(path: Optional[str | Path] = None) -> Palette:
    """Load a palette JSON file; without a path, the bundled SemanticKITTI scheme."""
    if path is None:
        text = resources.files("rvdiff").joinpath("data/semantickitti.json").read_text()
    else:
        text = Path(path).read_text()
    return Palette.from_json(json.loads(text))


# ---------------------------------------------------------------------------
# sensor and containers


@dataclass(frozen=True)
class SensorConfig:
    height_px: int = 64
    width_px: int = 1024
    elevation_min: float = math.radians(-25.0)
    elevation_max: float = math.radians(3.0)
    max_depth: float = 80.0

    def __post_init__(self):
        if self.height_px < 1 or self.width_px < 1:
            raise UsageError("sensor resolution must be positive")
        if not self.elevation_min < self.elevation_max:
            raise UsageError("elevation_min must be below elevation_max")
        if not self.max_depth > 0:
            raise UsageError("max_depth must be positive")

    @property
    def shape(self) -> tuple:
        return (self.height_px, self.width_px)

    @property
    def azimuth_step(self) -> float:
        return 2.0 * math.pi / self.width_px

    @property
    def elevation_step(self) -> float:
        return (self.elevation_max - self.elevation_min) / self.height_px

    def column_azimuths(self) -> np.ndarray:
        """Azimuth at each column's bin center."""
        return -math.pi + (np.arange(self.width_px) + 0.5) * self.azimuth_step

    def row_elevations(self) -> np.ndarray:
        """Elevation at each row's bin center, top row first."""
        return self.elevation_max - (np.arange(self.height_px) + 0.5) * self.elevation_step

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) unit vectors through every bin center."""
        el = self.row_elevations()[:, None]
        az = self.column_azimuths()[None, :]
        return np.stack(
            np.broadcast_arrays(np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)),
            axis=-1,
        )

    def to_json(self) -> dict:
        return {
            "height_px": self.height_px,
            "width_px": self.width_px,
            "elevation_min": self.elevation_min,
            "elevation_max": self.elevation_max,
            "max_depth": self.max_depth,
        }


SENSOR_PROFILES = {
    "kitti64": SensorConfig(64, 1024, math.radians(-25.0), math.radians(3.0), 80.0),
    "nuscenes32": SensorConfig(32, 1024, math.radians(-30.0), math.radians(10.0), 100.0),
    "desk": SensorConfig(32, 256, math.radians(-25.0), math.radians(3.0), 80.0),
}


@dataclass(frozen=True)
class PointCloud:
    xyz: np.ndarray
    reflectance: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        refl = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
        if len(refl) != len(xyz):
            raise UsageError("reflectance length does not match point count")
        if np.any((refl < 0) | (refl > 1)):
            raise DomainError("reflectance must lie in [0, 1]")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "reflectance", _frozen(refl))
        if self.labels is not None:
            lab = np.asarray(self.labels).reshape(-1)
            if len(lab) != len(xyz):
                raise UsageError("label length does not match point count")
            if np.any(lab < 0):
                raise UsageError("labels must be nonnegative")
            object.__setattr__(self, "labels", _frozen(lab, np.int64))

    def __len__(self):
        return len(self.xyz)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @classmethod
    def empty(cls, labeled=False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64) if labeled else None)


@dataclass(frozen=True)
class RangeScene:
    """Two-channel range image: signed log-depth and signed reflectance."""

    depth_log: np.ndarray
    reflectance: np.ndarray
    mask: np.ndarray
    sensor: SensorConfig

    def __post_init__(self):
        shape = self.sensor.shape
        d = np.asarray(self.depth_log, dtype=np.float64)
        r = np.asarray(self.reflectance, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if d.shape != shape or r.shape != shape or m.shape != shape:
            raise UsageError(f"scene planes must have shape {shape}")
        d = np.where(m, d, SENTINEL)
        r = np.where(m, r, SENTINEL)
        if np.any(np.abs(d) > 1) or np.any(np.abs(r) > 1):
            raise DomainError("scene channels must lie in [-1, 1]")
        object.__setattr__(self, "depth_log", _frozen(d))
        object.__setattr__(self, "reflectance", _frozen(r))
        object.__setattr__(self, "mask", _frozen(m))

    def tensor(self) -> np.ndarray:
        """(H, W, 2) array fed to the diffusion model."""
        return np.stack([self.depth_log, self.reflectance], axis=-1)

    @classmethod
    def from_tensor(cls, x: np.ndarray, sensor: SensorConfig,
                    empty_threshold: float = EMPTY_THRESHOLD) -> "RangeScene":
        """Build a scene from a generated (H, W, 2) tensor, clamping to [-1, 1]."""
        x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
        if x.shape != (*sensor.shape, 2):
            raise UsageError(f"expected tensor of shape {(*sensor.shape, 2)}, got {x.shape}")
        mask = x[..., 0] > empty_threshold
        return cls(x[..., 0], x[..., 1], mask, sensor)

    @classmethod
    def empty(cls, sensor: SensorConfig) -> "RangeScene":
        full = np.full(sensor.shape, SENTINEL)
        return cls(full, full, np.zeros(sensor.shape, bool), sensor)


@dataclass(frozen=True)
class SemanticMap:
    class_ids: np.ndarray
    palette: Palette

    def __post_init__(self):
        ids = np.asarray(self.class_ids)
        if ids.ndim != 2:
            raise UsageError("class_ids must be a 2D grid")
        if np.any(ids < 0) or np.any(ids >= self.palette.num_classes):
            raise UsageError("class id out of range for palette")
        object.__setattr__(self, "class_ids", _frozen(ids, np.int64))

    @property
    def num_classes(self) -> int:
        return self.palette.num_classes

    @property
    def shape(self) -> tuple:
        return self.class_ids.shape

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.class_ids]


@dataclass(frozen=True)
class ConditionImage:
    """RGB-encoded semantics plus a presence indicator, (H, W, 4) in [0, 1]."""

    channels: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=np.float64)
        if c.ndim != 3 or c.shape[-1] != 4:
            raise UsageError("condition image must be (H, W, 4)")
        object.__setattr__(self, "channels", _frozen(c))

    @property
    def indicator(self) -> np.ndarray:
        return self.channels[..., 3]


# ---------------------------------------------------------------------------
# channel rescaling


def depth_to_log(d, max_depth):
    """log(d + 1) / log(max_depth + 1), defined for 0 <= d <= max_depth."""
    d = np.asarray(d, dtype=np.float64)
    if max_depth <= 0:
        raise DomainError("max_depth must be positive")
    if np.any(d < 0) or np.any(d > max_depth):
        raise DomainError(f"depth outside [0, {max_depth}]")
    out = np.log1p(d) / np.log1p(max_depth)
    return out if out.ndim else float(out)


def log_to_depth(v, max_depth):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1):
        raise DomainError("log-depth outside [0, 1]")
    out = np.expm1(v * np.log1p(max_depth))
    return out if out.ndim else float(out)


def rescale_to_signed_unit(v):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1):
        raise DomainError("value outside [0, 1]")
    out = 2.0 * v - 1.0
    return out if out.ndim else float(out)


def rescale_from_signed_unit(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < -1) or np.any(s > 1):
        raise DomainError("value outside [-1, 1]")
    out = (s + 1.0) / 2.0
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# projection


@dataclass(frozen=True)
class Projection:
    scene: RangeScene
    semantics: Optional[SemanticMap]
    dropped: int
    # (H, W) index into the source cloud of the point kept at each pixel, -1 if empty
    source_index: np.ndarray


def pixel_coordinates(xyz: np.ndarray, sensor: SensorConfig):
    """Row, column, range and an in-range flag for each point."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rng = np.linalg.norm(xyz, axis=1)
    if np.any(rng == 0):
        raise DomainError("point at the sensor origin has no direction")
    az = np.arctan2(xyz[:, 1], xyz[:, 0])
    el = np.arcsin(np.clip(xyz[:, 2] / np.where(rng > 0, rng, 1.0), -1.0, 1.0))
    ok = (el >= sensor.elevation_min) & (el <= sensor.elevation_max) & (rng <= sensor.max_depth)
    span = sensor.elevation_max - sensor.elevation_min
    row = np.floor((sensor.elevation_max - el) / span * sensor.height_px).astype(np.int64)
    row = np.clip(row, 0, sensor.height_px - 1)
    col = np.floor((az + math.pi) / (2.0 * math.pi) * sensor.width_px).astype(np.int64)
    col = np.mod(col, sensor.width_px)
    return row, col, rng, ok


def project_cloud(cloud: PointCloud, sensor: SensorConfig,
                  palette: Optional[Palette] = None) -> Projection:
    """Project a cloud to a range image, keeping the nearest point per pixel.

    Points outside the elevation band or beyond ``max_depth`` are dropped and
    counted. Labels, when present, become a SemanticMap over ``palette``.
    """
    h, w = sensor.shape
    if len(cloud) == 0:
        sem = None
        if cloud.labeled:
            sem = SemanticMap(np.zeros(sensor.shape, np.int64), palette or load_palette())
        return Projection(RangeScene.empty(sensor), sem, 0, np.full(sensor.shape, -1, np.int64))

    row, col, rng, ok = pixel_coordinates(cloud.xyz, sensor)
    kept = np.flatnonzero(ok)
    winner = kernels.scatter_nearest(row[kept] * w + col[kept], rng[kept], h * w)
    has = winner >= 0
    src = np.full(h * w, -1, dtype=np.int64)
    src[has] = kept[winner[has]]

    depth = np.full(h * w, SENTINEL)
    refl = np.full(h * w, SENTINEL)
    depth[has] = rescale_to_signed_unit(depth_to_log(rng[src[has]], sensor.max_depth))
    refl[has] = rescale_to_signed_unit(cloud.reflectance[src[has]])
    scene = RangeScene(depth.reshape(h, w), refl.reshape(h, w), has.reshape(h, w), sensor)

    sem = None
    if cloud.labeled:
        palette = palette or load_palette()
        ids = np.zeros(h * w, dtype=np.int64)
        ids[has] = cloud.labels[src[has]]
        sem = SemanticMap(ids.reshape(h, w), palette)
    return Projection(scene, sem, int(len(cloud) - len(kept)), src.reshape(h, w))


def unproject_scene(scene: RangeScene, semantics: Optional[SemanticMap] = None) -> PointCloud:
    """One point per masked pixel, placed on the bin-center ray at the decoded depth."""
    s = scene.sensor
    m = scene.mask
    if not m.any():
        return PointCloud.empty(labeled=semantics is not None)
    d = log_to_depth(rescale_from_signed_unit(scene.depth_log[m]), s.max_depth)
    xyz = s.ray_directions()[m] * d[:, None]
    refl = rescale_from_signed_unit(scene.reflectance[m])
    labels = semantics.class_ids[m] if semantics is not None else None
    return PointCloud(xyz, refl, labels)


# ---------------------------------------------------------------------------
# semantic conditioning


def encode_condition(y: Optional[SemanticMap], conditioned: bool,
                     shape: Optional[tuple] = None) -> ConditionImage:
    """Palette RGB scaled to [0, 1] plus an all-ones indicator, or all zeros."""
    if conditioned:
        if y is None:
            raise UsageError("a semantic map is required when conditioned=True")
        rgb = y.palette.colors[y.class_ids].astype(np.float64) / 255.0
        ind = np.ones((*y.shape, 1))
        return ConditionImage(np.concatenate([rgb, ind], axis=-1))
    if shape is None:
        if y is None:
            raise UsageError("shape is required for an unconditioned image without a map")
        shape = y.shape
    return ConditionImage(np.zeros((*shape, 4)))


def zero_condition(shape: tuple) -> ConditionImage:
    return ConditionImage(np.zeros((*shape, 4)))


def decode_condition(cond: ConditionImage, palette: Palette) -> SemanticMap:
    """Invert encode_condition by exact palette lookup."""
    if not np.all(cond.indicator == 1.0):
        raise UsageError("condition image carries no semantics")
    rgb = np.rint(cond.channels[..., :3] * 255.0).astype(np.int64)
    key = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    colors = palette.colors.astype(np.int64)
    pkey = (colors[:, 0] << 16) | (colors[:, 1] << 8) | colors[:, 2]
    order = np.argsort(pkey)
    pos = np.searchsorted(pkey[order], key)
    pos = np.clip(pos, 0, len(pkey) - 1)
    if not np.all(pkey[order][pos] == key):
        raise UsageError("condition image holds colors outside the palette")
    return SemanticMap(order[pos], palette)
