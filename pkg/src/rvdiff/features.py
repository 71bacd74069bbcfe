"""Feature extractors feeding the Fréchet and MMD metrics.

Pretrained encoders are not bundled. :class:`DeskExtractor` is a small
deterministic stand-in; anything implementing :class:`FeatureExtractor`
can replace it.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from rvdiff.codec import PointCloud, RangeScene, SemanticMap


class FeatureExtractor(Protocol):
    def range_features(self, scene: RangeScene) -> np.ndarray: ...

    def point_features(self, cloud: PointCloud, max_depth: float) -> np.ndarray: ...

    def semantic_features(self, semantics: SemanticMap) -> np.ndarray: ...


def _mean_std(v):
    if len(v) == 0:
        return [0.0, 0.0]
    return [float(np.mean(v)), float(np.std(v))]


class DeskExtractor:
    """Histogram and moment features.

    * range view: 32-bin histogram of signed log-depth over returns, then
      mean/std of log-depth and of reflectance (36 values)
    * points: 32-bin histogram of horizontal distance in [0, max_depth], then
      mean/std of z and of reflectance (36 values)
    * semantics: fraction of pixels in each class (C values)
    """

    def __init__(self, bins: int = 32):
        self.bins = bins

    def range_features(self, scene: RangeScene) -> np.ndarray:
        m = scene.mask
        d = scene.depth_log[m]
        r = scene.reflectance[m]
        hist, _ = np.histogram(d, bins=self.bins, range=(-1.0, 1.0))
        hist = hist / max(len(d), 1)
        return np.concatenate([hist, _mean_std(d), _mean_std(r)])

    def point_features(self, cloud: PointCloud, max_depth: float) -> np.ndarray:
        xyz = cloud.xyz
        rho = np.hypot(xyz[:, 0], xyz[:, 1])
        hist, _ = np.histogram(rho, bins=self.bins, range=(0.0, max_depth))
        hist = hist / max(len(rho), 1)
        return np.concatenate([hist, _mean_std(xyz[:, 2]), _mean_std(cloud.reflectance)])

    def semantic_features(self, semantics: SemanticMap) -> np.ndarray:
        counts = np.bincount(semantics.class_ids.ravel(), minlength=semantics.num_classes)
        return counts / semantics.class_ids.size
