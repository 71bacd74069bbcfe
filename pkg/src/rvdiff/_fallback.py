"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Each function mirrors its compiled twin argument for argument. Integer
outputs agree exactly; floating sums may differ in the last bits because
numpy reduces in a different order.
"""

import numpy as np


def scatter_nearest(pix, depth, npix):
    out = np.full(npix, -1, dtype=np.int64)
    if len(pix) == 0:
        return out
    idx = np.arange(len(pix), dtype=np.int64)
    # primary key depth, secondary key point index
    order = np.lexsort((idx, depth))
    first_pix, first = np.unique(pix[order], return_index=True)
    out[first_pix] = order[first]
    return out


def _bin_index(v, lo, width, bins):
    i = np.clip(np.floor((v - lo) / width).astype(np.int64), 0, bins - 1)
    i -= v < lo + i * width
    i += (i + 1 < bins) & (v >= lo + (i + 1) * width)
    return i


def bev_counts(x, y, labels, x_min, x_max, y_min, y_max, bins, num_classes):
    keep = (x >= x_min) & (x < x_max) & (y >= y_min) & (y < y_max)
    keep &= (labels >= 0) & (labels < num_classes)
    i = _bin_index(x[keep], x_min, (x_max - x_min) / bins, bins)
    j = _bin_index(y[keep], y_min, (y_max - y_min) / bins, bins)
    flat = (labels[keep] * bins + i) * bins + j
    counts = np.bincount(flat, minlength=num_classes * bins * bins)
    return counts.astype(np.int64).reshape(num_classes, bins, bins)


def poly3_kernel_sum(a, b, scale):
    v = scale * (a @ b.T) + 1.0
    return float(np.sum(np.sum(v * v * v, axis=1)))


def raycast(dirs, ground_z, lo, hi, max_range):
    nr = dirs.shape[0]
    best = np.full(nr, np.inf)
    surf = np.full(nr, -1, dtype=np.int64)

    dz = dirs[:, 2]
    down = dz < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(down, ground_z / np.where(down, dz, 1.0), np.inf)
    hit_ground = down & (tg > 0.0)
    best[hit_ground] = tg[hit_ground]
    surf[hit_ground] = 0

    for b in range(lo.shape[0]):
        t0 = np.full(nr, -np.inf)
        t1 = np.full(nr, np.inf)
        for ax in range(3):
            d = dirs[:, ax]
            zero = d == 0.0
            safe = np.where(zero, 1.0, d)
            ta = lo[b, ax] / safe
            tb = hi[b, ax] / safe
            near = np.minimum(ta, tb)
            far = np.maximum(ta, tb)
            outside = lo[b, ax] > 0.0 or hi[b, ax] < 0.0
            near = np.where(zero, np.inf if outside else -np.inf, near)
            far = np.where(zero, np.inf, far)
            t0 = np.maximum(t0, near)
            t1 = np.minimum(t1, far)
        hit = (t0 <= t1) & (t0 > 0.0) & (t0 < best)
        best[hit] = t0[hit]
        surf[hit] = b + 1

    miss = (surf < 0) | (best > max_range)
    best[miss] = np.inf
    surf[miss] = -1
    return best, surf
