"""Independent brute-force reference implementations used by several test files."""

from __future__ import annotations

import math

import numpy as np

from cloudeye.core import BoundingBox, FeatureLayer, FeatureMap
from cloudeye.mining import region_cells


# -- feature mining -----------------------------------------------------------

def planted_maps(rng, grid_h, grid_w, channels, stride, ref_cells, offset, noise_cells=()):
    """Reference map of noise, and a current map of fresh noise with the five
    reference descriptors copied to ``cell + offset``.

    ``noise_cells`` lists indices of points whose copy is skipped (corrupted).
    """
    ref = rng.normal(size=(grid_h, grid_w, channels))
    cur = rng.normal(size=(grid_h, grid_w, channels))
    dy, dx = offset
    for i, (r, c) in enumerate(ref_cells):
        if i not in noise_cells:
            cur[r + dy, c + dx] = ref[r, c]
    w, h = grid_w * stride, grid_h * stride
    mk = lambda d, fid: FeatureMap((FeatureLayer(stride, d),), fid, w, h)  # noqa: E731
    return mk(ref, 0), mk(cur, 1)


def brute_force_match(ref_desc, inv_var, layer: FeatureLayer, region: BoundingBox):
    """Exhaustive search over every p0 cell and every quadrant assignment.

    Returns (total loss, cells) of the jointly best group, where p1..p4 must
    lie in the TL/TR/BL/BR quadrant (inclusive) around p0.
    """
    y0, y1, x0, x1 = region_cells(region, layer.stride, layer.grid_h, layer.grid_w)
    norm = math.sqrt(layer.channels)

    cells = [(r, c) for r in range(y0, y1) for c in range(x0, x1)]
    table = {}
    for i in range(len(ref_desc)):
        for r, c in cells:
            diff = layer.data[r, c] - ref_desc[i]
            table[i, r, c] = math.sqrt(float(np.sum(diff * diff * inv_var))) / norm

    def dist(i, r, c):
        return table[i, r, c]

    best = (math.inf, None)
    for r0, c0 in cells:
        quads = [
            [(r, c) for r, c in cells if r <= r0 and c <= c0],
            [(r, c) for r, c in cells if r <= r0 and c >= c0],
            [(r, c) for r, c in cells if r >= r0 and c <= c0],
            [(r, c) for r, c in cells if r >= r0 and c >= c0],
        ]
        total = dist(0, r0, c0)
        group = [(r0, c0)]
        for i, quad in enumerate(quads, 1):
            d, cell = min((dist(i, r, c), cell_) for cell_ in quad for r, c in [cell_])
            total += d
            group.append(cell)
        if total < best[0]:
            best = (total, tuple(group))
    return best


# -- clustering ---------------------------------------------------------------

def wcss(points, weights, labels):
    total = 0.0
    for lab in set(labels):
        idx = [i for i, l in enumerate(labels) if l == lab]
        p, w = points[idx], weights[idx]
        mu = (p * w[:, None]).sum(axis=0) / w.sum()
        total += float((w * ((p - mu) ** 2).sum(axis=1)).sum())
    return total


def exhaustive_two_partition(points, weights):
    """Minimum weighted WCSS over every split into two non-empty groups."""
    n = len(points)
    best = (math.inf, None)
    for mask in range(1, 2 ** (n - 1)):
        labels = [(mask >> i) & 1 for i in range(n)]
        cost = wcss(points, weights, labels)
        if cost < best[0] - 1e-12:
            best = (cost, labels)
    return best


# -- scheduling ---------------------------------------------------------------

def enumerate_selection(entries, bandwidth, latency):
    """Scan every entry; keep the feasible one that beats all others pairwise.

    Order: higher accuracy, then smaller payload, then smaller K, then earlier.
    Returns None when nothing fits the budget.
    """
    best = None
    for i, e in enumerate(entries):
        if e.payload_size / bandwidth + e.t_cluster + e.t_encode > latency:
            continue
        if best is None:
            best = (i, e)
            continue
        b = best[1]
        if e.accuracy != b.accuracy:
            better = e.accuracy > b.accuracy
        elif e.payload_size != b.payload_size:
            better = e.payload_size < b.payload_size
        else:
            better = e.k < b.k
        if better:
            best = (i, e)
    return None if best is None else best[1]
