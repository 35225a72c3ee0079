"""Numpy implementations of the hot loops, used when the extension is absent."""

import numpy as np


def region_distances(grid, desc, inv_var, y0, y1, x0, x1):
    block = grid[y0:y1, x0:x1, :] - desc
    # accumulate channel-by-channel so the summation order matches the C loop
    acc = np.zeros(block.shape[:2], dtype=np.float64)
    for k in range(block.shape[2]):
        acc += block[:, :, k] * block[:, :, k] * inv_var[k]
    return np.sqrt(acc)


def adc_scan(codes, table):
    acc = np.zeros(codes.shape[0], dtype=np.float64)
    for j in range(codes.shape[1]):
        acc += table[j, codes[:, j]]
    return acc


def abs_diff_sum(a, b):
    if a.shape[0] != b.shape[0]:
        raise ValueError("buffers differ in length")
    return int(np.abs(a.astype(np.int16) - b.astype(np.int16)).sum(dtype=np.int64))
