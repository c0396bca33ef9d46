"""Brute-force reference implementations used by the metric tests."""
import itertools
import math

import numpy as np


def dice_oracle(a, b):
    out = {}
    for lab in sorted((set(a.ravel().tolist()) | set(b.ravel().tolist())) - {0}):
        inter = na = nb = 0
        for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
            na += x == lab
            nb += y == lab
            inter += x == lab and y == lab
        out[lab] = 2 * inter / (na + nb)
    return out


def boundary_oracle(mask):
    out = np.zeros_like(mask)
    for p in zip(*np.nonzero(mask)):
        for ax in range(3):
            for step in (-1, 1):
                q = list(p)
                q[ax] += step
                if not 0 <= q[ax] < mask.shape[ax] or not mask[tuple(q)]:
                    out[p] = True
    return out


def surface_oracle(a, b, spacing):
    pa = np.argwhere(boundary_oracle(a)) * np.asarray(spacing)
    pb = np.argwhere(boundary_oracle(b)) * np.asarray(spacing)
    d_ab = np.array([min(math.dist(p, q) for q in pb) for p in pa])
    d_ba = np.array([min(math.dist(p, q) for q in pa) for p in pb])
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    # linear interpolation between order statistics
    pos = 0.95 * (len(pooled) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    hd95 = pooled[lo] + (pos - lo) * (pooled[hi] - pooled[lo])
    return hd95, 0.5 * (d_ab.mean() + d_ba.mean())


def ball(shape, centre, radius):
    g = np.indices(shape)
    return ((g - np.asarray(centre)[:, None, None, None]) ** 2).sum(0) <= radius**2


def det3(m):
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )


def folding_oracle(flow):
    neg = total = 0
    D, H, W = flow.shape[1:]
    for p in itertools.product(range(1, D - 1), range(1, H - 1), range(1, W - 1)):
        m = [[0.0] * 3 for _ in range(3)]
        for c in range(3):
            for ax in range(3):
                hi, lo = list(p), list(p)
                hi[ax] += 1
                lo[ax] -= 1
                m[c][ax] = (flow[(c, *hi)] - flow[(c, *lo)]) / 2 + (c == ax)
        neg += det3(m) < 0
        total += 1
    return 100.0 * neg / total
