"""Deliberately naive oracles for cross-checking the fast implementations.

Everything here is written as plain nested loops over index sets, shares no
code with the production kernels, and is meant for small instances only.
"""

from __future__ import annotations

import numpy as np


def conv2d_naive(x, kernel, bias, stride=1, padding=0, dilation=1):
    """Quadruple-loop cross-correlation. x [H,W,Din], kernel [Dout,Din,kh,kw]."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    h, w, cin = x.shape
    cout, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = bias[o]
                for a in range(kh):
                    for b in range(kw):
                        ii = i * stride + a * dilation - padding
                        jj = j * stride + b * dilation - padding
                        if 0 <= ii < h and 0 <= jj < w:
                            for c in range(cin):
                                acc += x[ii, jj, c] * kernel[o, c, a, b]
                out[i, j, o] = acc
    return out


def pool2d_naive(x, kind, window, stride, dilation=1):
    """Window pooling by explicit enumeration of each strided index set.

    Output extent is floor((H - window) / stride) + 1 for every kind; dilated
    taps beyond the input border are excluded from the index set.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            rows = [i * stride + a * dilation for a in range(window)]
            cols = [j * stride + b * dilation for b in range(window)]
            taps = [(r, s) for r in rows for s in cols if r < h and s < w]
            for d in range(c):
                vals = [x[r, s, d] for r, s in taps]
                if kind in ("max", "dilated_max"):
                    out[i, j, d] = max(vals)
                else:
                    out[i, j, d] = sum(vals) / len(vals)
    return out


def cmc_naive(dist, truth):
    """Rank each probe's true match by stable sort and count cumulatively."""
    dist = np.asarray(dist, dtype=np.float64)
    p, g = dist.shape
    ranks = []
    for i in range(p):
        order = sorted(range(g), key=lambda j: (dist[i, j], j))
        ranks.append(order.index(int(truth[i])) + 1)
    curve = []
    for r in range(1, g + 1):
        curve.append(sum(1 for rk in ranks if rk <= r) / p)
    return curve


def flow_patch_match_naive(prev_gray, next_gray, radius=2, half_patch=1):
    """Dense displacement by exhaustive SSD patch search, in pixels.

    For each interior pixel, tries every integer shift within ``radius`` and
    keeps the one whose patch around the shifted position in ``prev`` best
    matches the patch in ``next``.  Used only to sanity-check optical flow on
    constructed inputs.
    """
    prev_gray = np.asarray(prev_gray, dtype=np.float64)
    next_gray = np.asarray(next_gray, dtype=np.float64)
    h, w = prev_gray.shape
    fx = np.zeros((h, w))
    fy = np.zeros((h, w))
    lo = half_patch + radius
    for i in range(lo, h - lo):
        for j in range(lo, w - lo):
            best = None
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    pn = next_gray[i - half_patch:i + half_patch + 1, j - half_patch:j + half_patch + 1]
                    pp = prev_gray[i - dy - half_patch:i - dy + half_patch + 1,
                                   j - dx - half_patch:j - dx + half_patch + 1]
                    ssd = float(((pn - pp) ** 2).sum())
                    key = (ssd, abs(dx) + abs(dy), dy, dx)
                    if best is None or key < best[0]:
                        best = (key, dx, dy)
            fx[i, j] = best[1]
            fy[i, j] = best[2]
    return fx, fy
