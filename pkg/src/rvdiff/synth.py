"""Procedural labeled toy worlds: a ground plane plus axis-aligned boxes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from rvdiff import kernels
from rvdiff.codec import PointCloud, SensorConfig
from rvdiff.errors import UsageError

GROUND_CLASS = 9  # "road" in the bundled palette


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    class_id: int

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center, float) - 0.5 * np.asarray(self.size, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center, float) + 0.5 * np.asarray(self.size, float)


def _default_boxes():
    return (
        Box((8.0, 3.0, -1.73 + 0.75), (4.2, 1.8, 1.5), 1),       # car
        Box((-6.0, -4.0, -1.73 + 0.8), (4.5, 1.9, 1.6), 1),      # car
        Box((-18.0, 12.0, -1.73 + 4.0), (12.0, 8.0, 8.0), 13),   # building
        Box((14.0, -14.0, -1.73 + 2.5), (3.0, 3.0, 5.0), 15),    # vegetation
        Box((3.0, -7.0, -1.73 + 3.0), (0.3, 0.3, 6.0), 18),      # pole
    )


@dataclass(frozen=True)
class WorldSpec:
    ground_z: float = -1.73
    boxes: tuple = field(default_factory=_default_boxes)
    num_classes: int = 20
    seed: int = 0
    ground_class: int = GROUND_CLASS

    def __post_init__(self):
        if not self.ground_class < self.num_classes:
            raise UsageError("ground class id out of range")
        for b in self.boxes:
            if not 0 <= b.class_id < self.num_classes:
                raise UsageError(f"box class {b.class_id} out of range")
            if b.lo[2] < self.ground_z - 1e-9:
                raise UsageError("boxes must sit on or above the ground")
            if np.any(np.asarray(b.size) <= 0):
                raise UsageError("box sizes must be positive")
            if np.all(b.lo < 0) and np.all(b.hi > 0):
                raise UsageError("a box may not contain the sensor")

    def to_json(self) -> dict:
        return {
            "ground_z": self.ground_z,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "ground_class": self.ground_class,
            "boxes": [{"center": list(b.center), "size": list(b.size), "class_id": b.class_id}
                      for b in self.boxes],
        }

    @classmethod
    def from_json(cls, d: dict) -> "WorldSpec":
        boxes = tuple(Box(tuple(b["center"]), tuple(b["size"]), int(b["class_id"]))
                      for b in d.get("boxes", []))
        return cls(d.get("ground_z", -1.73), boxes, d.get("num_classes", 20),
                   d.get("seed", 0), d.get("ground_class", GROUND_CLASS))


def _hash_unit(seed: int, idx: np.ndarray) -> np.ndarray:
    """splitmix64 of (seed, idx) mapped to [0, 1)."""
    with np.errstate(over="ignore"):
        z = idx.astype(np.uint64) + np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def class_reflectance(class_ids: np.ndarray) -> np.ndarray:
    """Per-class base reflectance in [0.1, 0.9]."""
    return 0.1 + 0.8 * ((np.asarray(class_ids) * 7) % 20) / 19.0


def synthesize(spec: WorldSpec, sensor: SensorConfig) -> PointCloud:
    """Cast one ray per range-image pixel through the bin centers.

    The first surface hit within ``max_depth`` yields a point with that
    surface's class; reflectance is the class base value plus up to +/-0.02
    of hash jitter.
    """
    dirs = sensor.ray_directions().reshape(-1, 3)
    if spec.boxes:
        lo = np.stack([b.lo for b in spec.boxes])
        hi = np.stack([b.hi for b in spec.boxes])
    else:
        lo = hi = np.zeros((0, 3))
    dist, surf = kernels.raycast(dirs, spec.ground_z, lo, hi, sensor.max_depth)
    hit = np.flatnonzero(surf >= 0)
    surface_class = np.array([spec.ground_class] + [b.class_id for b in spec.boxes], np.int64)
    labels = surface_class[surf[hit]]
    xyz = dirs[hit] * dist[hit, None]
    jitter = 0.04 * (_hash_unit(spec.seed, hit) - 0.5)
    refl = np.clip(class_reflectance(labels) + jitter, 0.0, 1.0)
    return PointCloud(xyz, refl, labels)


def jitter_world(base: WorldSpec, rng: np.random.Generator, shift: float = 2.0,
                 scale: float = 0.1, seed: int = 0) -> WorldSpec:
    """Move boxes up to ``shift`` m in x/y and rescale sizes by up to +/-``scale``."""
    boxes = []
    for b in base.boxes:
        dx, dy = rng.uniform(-shift, shift, size=2)
        f = rng.uniform(1.0 - scale, 1.0 + scale, size=3)
        size = tuple(float(s * k) for s, k in zip(b.size, f))
        cz = base.ground_z + 0.5 * size[2] + (b.lo[2] - base.ground_z)
        center = (float(b.center[0] + dx), float(b.center[1] + dy), float(cz))
        cand = Box(center, size, b.class_id)
        if np.all(cand.lo < 0) and np.all(cand.hi > 0):
            cand = b
        boxes.append(cand)
    return replace(base, boxes=tuple(boxes), seed=seed)


def corpus(n: int, base_spec: WorldSpec, seed: int, sensor: SensorConfig,
           shift: float = 2.0, scale: float = 0.1) -> list:
    """``n`` worlds as ``(PointCloud, WorldSpec)``; world 0 is ``base_spec`` itself."""
    if n < 1:
        raise UsageError("corpus size must be >= 1")
    out = []
    for i in range(n):
        if i == 0:
            spec = base_spec
        else:
            rng = np.random.default_rng([seed, i])
            spec = jitter_world(base_spec, rng, shift, scale, seed=seed * 100003 + i)
        out.append((synthesize(spec, sensor), spec))
    return out


def scale_boxes(spec: WorldSpec, factor: float) -> WorldSpec:
    """Same world with every box scaled about its footprint center, resting on the ground."""
    boxes = []
    for b in spec.boxes:
        size = tuple(float(s * factor) for s in b.size)
        gap = b.lo[2] - spec.ground_z
        center = (b.center[0], b.center[1], spec.ground_z + gap + 0.5 * size[2])
        boxes.append(Box(center, size, b.class_id))
    return replace(spec, boxes=tuple(boxes))
