"""Semantic-aware two-sample metrics for generated labeled LiDAR scenes.

Three views are compared between a real and a generated set:

* range view: Fréchet distance and polynomial-kernel MMD on range features,
  with and without appended semantic features (FRD / S-FRD);
* Cartesian points: the same pair on point-cloud features (FPD / S-FPD);
* bird's-eye view: Jensen-Shannon divergence between set-averaged occupancy
  histograms and MMD on per-scene histograms, class-agnostic (B x B) and
  per-class (C x B x B).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from rvdiff import kernels
from rvdiff.codec import PointCloud, RangeScene, SemanticMap, unproject_scene
from rvdiff.errors import DomainError, InsufficientDataError, RvdiffError, UsageError
from rvdiff.features import DeskExtractor, FeatureExtractor

REPORT_KEYS = (
    "frd", "s_frd", "mmd_range", "s_mmd_range",
    "fpd", "s_fpd", "mmd_cart", "s_mmd_cart",
    "jsd", "s_jsd", "mmd_bev", "s_mmd_bev",
)


def semantic_feature(scene_feat, sem_feat) -> np.ndarray:
    """Scene features followed by semantic features."""
    return np.concatenate([np.asarray(scene_feat, dtype=np.float64).ravel(),
                           np.asarray(sem_feat, dtype=np.float64).ravel()])


# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        cov = np.asarray(self.cov, dtype=np.float64).reshape(len(mean), len(mean))
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-9):
            raise DomainError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return len(self.mean)


def gaussian_stats(vectors) -> GaussianStats:
    """Sample mean and covariance (divisor N - 1) of a set of feature vectors."""
    try:
        x = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise UsageError("feature vectors differ in dimension") from exc
    if x.ndim == 1:
        x = x[:, None] if len(x) else x.reshape(0, 0)
    if x.ndim != 2:
        raise UsageError("feature vectors differ in dimension")
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 feature vectors, got {n}")
    mu = x.mean(axis=0)
    dx = x - mu
    cov = dx.T @ dx / (n - 1)
    return GaussianStats(mu, (cov + cov.T) / 2.0)


def _psd_eigvals(m: np.ndarray, tol: float, what: str) -> np.ndarray:
    w = np.linalg.eigvalsh((m + m.T) / 2.0)
    floor = -tol * max(1.0, float(np.max(np.abs(w))) if len(w) else 1.0)
    if len(w) and w.min() < floor:
        raise DomainError(f"{what} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None)


def _sqrt_psd(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    floor = -tol * max(1.0, float(np.max(np.abs(w))))
    if w.min() < floor:
        raise DomainError(f"covariance is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray, psd_tol: float = 1e-8) -> float:
    """Tr((A B)^(1/2)) via the symmetric form A^(1/2) B A^(1/2)."""
    ra = _sqrt_psd(np.asarray(cov_a, dtype=np.float64), psd_tol)
    inner = ra @ np.asarray(cov_b, dtype=np.float64) @ ra
    return float(np.sum(np.sqrt(_psd_eigvals(inner, psd_tol, "sqrt(A) B sqrt(A)"))))


def frechet_distance(a: GaussianStats, b: GaussianStats, psd_tol: float = 1e-8) -> float:
    if a.dim != b.dim:
        raise UsageError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    _psd_eigvals(a.cov, psd_tol, "first covariance")
    _psd_eigvals(b.cov, psd_tol, "second covariance")
    diff = a.mean - b.mean
    tr = np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt_product(a.cov, b.cov, psd_tol)
    return max(float(diff @ diff + tr), 0.0)


# ---------------------------------------------------------------------------
# MMD


def mmd_poly3(set_r, set_g) -> float:
    """Biased (V-statistic) MMD with k(f, f') = (f.f' / d + 1)^3."""
    x = np.atleast_2d(np.asarray(set_r, dtype=np.float64))
    y = np.atleast_2d(np.asarray(set_g, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise UsageError("MMD needs two non-empty sets")
    if x.shape[1] != y.shape[1]:
        raise UsageError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    n, m = len(x), len(y)
    scale = 1.0 / x.shape[1]
    kxx = kernels.poly3_kernel_sum(x, x, scale)
    kyy = kernels.poly3_kernel_sum(y, y, scale)
    kxy = kernels.poly3_kernel_sum(x, y, scale)
    return kxx / (n * n) + kyy / (m * m) - 2.0 * kxy / (n * m)


# ---------------------------------------------------------------------------
# BEV histograms and JSD


@dataclass(frozen=True)
class BevHistogram:
    counts: np.ndarray  # (C, B, B)
    bounds: tuple
    bins: int

    def agnostic(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _check_bev_args(bounds, bins):
    if bins < 1:
        raise UsageError("bins must be >= 1")
    x0, x1, y0, y1 = bounds
    if not (x0 < x1 and y0 < y1):
        raise UsageError(f"degenerate BEV bounds {bounds}")


def bev_histogram(cloud: PointCloud, bounds=(-50.0, 50.0, -50.0, 50.0), bins: int = 16,
                  num_classes: int = 20) -> BevHistogram:
    """Per-class counts of points over a B x B grid of the xy-plane.

    Bin (i, j) covers x in [x0 + i*dx, x0 + (i+1)*dx) and the same for y;
    points outside ``bounds`` are dropped.
    """
    if not cloud.labeled:
        raise UsageError("BEV semantic histogram needs a labeled cloud")
    _check_bev_args(bounds, bins)
    counts = kernels.bev_counts(cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.labels,
                                bounds, bins, num_classes)
    return BevHistogram(counts, tuple(float(b) for b in bounds), bins)


def bev_histogram_agnostic(cloud: PointCloud, bounds=(-50.0, 50.0, -50.0, 50.0),
                           bins: int = 16) -> np.ndarray:
    """Class-agnostic B x B occupancy counts."""
    _check_bev_args(bounds, bins)
    zeros = np.zeros(len(cloud), dtype=np.int64)
    return kernels.bev_counts(cloud.xyz[:, 0], cloud.xyz[:, 1], zeros, bounds, bins, 1)[0]


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits between two normalized histograms."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise UsageError("histograms differ in shape")
    for name, h in (("p", p), ("q", q)):
        if np.any(h < 0) or abs(h.sum() - 1.0) > 1e-6:
            raise UsageError(f"{name} is not a normalized histogram")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), 1.0)


def _normalize_each(hists: np.ndarray) -> np.ndarray:
    flat = hists.reshape(len(hists), -1).astype(np.float64)
    tot = flat.sum(axis=1, keepdims=True)
    return np.divide(flat, tot, out=np.zeros_like(flat), where=tot > 0)


def _set_distribution(normed: np.ndarray, which: str) -> np.ndarray:
    mean = normed.mean(axis=0)
    s = mean.sum()
    if s <= 0:
        raise InsufficientDataError(f"no {which} points fall inside the BEV bounds")
    return mean / s


# ---------------------------------------------------------------------------
# full evaluation


@dataclass(frozen=True)
class MetricsConfig:
    bev_bounds: tuple = (-50.0, 50.0, -50.0, 50.0)
    bev_bins: int = 16
    feature_bins: int = 32
    psd_tol: float = 1e-8

    def to_json(self) -> dict:
        return {"bev_bounds": list(self.bev_bounds), "bev_bins": self.bev_bins,
                "feature_bins": self.feature_bins, "psd_tol": self.psd_tol}


@dataclass
class MetricReport:
    values: dict
    n_real: int
    n_gen: int
    config: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_json(self) -> dict:
        out = {k: self.values[k] for k in REPORT_KEYS}
        out["n_real"] = self.n_real
        out["n_gen"] = self.n_gen
        out["config"] = self.config
        return out


@dataclass
class _SetFeatures:
    range_f: np.ndarray
    range_sf: np.ndarray
    point_f: np.ndarray
    point_sf: np.ndarray
    bev: np.ndarray  # (N, B*B) normalized
    bev_s: np.ndarray  # (N, C*B*B) normalized


def _extract(pairs, extractor: FeatureExtractor, cfg: MetricsConfig, which: str) -> _SetFeatures:
    rf, rsf, pf, psf, bev, bev_s = [], [], [], [], [], []
    for idx, (scene, sem) in enumerate(pairs):
        try:
            if sem is None:
                raise UsageError("semantic-aware evaluation needs a semantic map per scene")
            g = extractor.semantic_features(sem)
            e_range = extractor.range_features(scene)
            cloud = unproject_scene(scene, sem)
            e_pts = extractor.point_features(cloud, scene.sensor.max_depth)
            h = bev_histogram(cloud, cfg.bev_bounds, cfg.bev_bins, sem.num_classes)
        except RvdiffError as exc:
            raise type(exc)(f"[features/{which}#{idx}] {exc}") from exc
        rf.append(e_range)
        rsf.append(semantic_feature(e_range, g))
        pf.append(e_pts)
        psf.append(semantic_feature(e_pts, g))
        bev.append(h.agnostic())
        bev_s.append(h.counts)
    return _SetFeatures(np.array(rf), np.array(rsf), np.array(pf), np.array(psf),
                        _normalize_each(np.array(bev)), _normalize_each(np.array(bev_s)))


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except RvdiffError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def evaluate_sets(real: Sequence, gen: Sequence, extractor: Optional[FeatureExtractor] = None,
                  config: Optional[MetricsConfig] = None) -> MetricReport:
    """Compare two sets of ``(RangeScene, SemanticMap)`` pairs on every metric."""
    if len(real) == 0 or len(gen) == 0:
        raise UsageError("both sets must be non-empty")
    cfg = config or MetricsConfig()
    extractor = extractor or DeskExtractor(cfg.feature_bins)
    fr = _extract(real, extractor, cfg, "real")
    fg = _extract(gen, extractor, cfg, "gen")

    def fd(name, a, b):
        sa = _stage(f"{name}/real", gaussian_stats, a)
        sb = _stage(f"{name}/gen", gaussian_stats, b)
        return _stage(name, frechet_distance, sa, sb, cfg.psd_tol)

    v = {
        "frd": fd("frd", fr.range_f, fg.range_f),
        "s_frd": fd("s_frd", fr.range_sf, fg.range_sf),
        "mmd_range": _stage("mmd_range", mmd_poly3, fr.range_f, fg.range_f),
        "s_mmd_range": _stage("s_mmd_range", mmd_poly3, fr.range_sf, fg.range_sf),
        "fpd": fd("fpd", fr.point_f, fg.point_f),
        "s_fpd": fd("s_fpd", fr.point_sf, fg.point_sf),
        "mmd_cart": _stage("mmd_cart", mmd_poly3, fr.point_f, fg.point_f),
        "s_mmd_cart": _stage("s_mmd_cart", mmd_poly3, fr.point_sf, fg.point_sf),
        "jsd": _stage("jsd", jsd, _set_distribution(fr.bev, "real"),
                      _set_distribution(fg.bev, "gen")),
        "s_jsd": _stage("s_jsd", jsd, _set_distribution(fr.bev_s, "real"),
                        _set_distribution(fg.bev_s, "gen")),
        "mmd_bev": _stage("mmd_bev", mmd_poly3, fr.bev, fg.bev),
        "s_mmd_bev": _stage("s_mmd_bev", mmd_poly3, fr.bev_s, fg.bev_s),
    }
    return MetricReport({k: float(x) for k, x in v.items()}, len(real), len(gen), cfg.to_json())
