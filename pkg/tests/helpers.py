"""Shared test utilities: finite differences and reference implementations."""

import numpy as np


def numerical_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function at x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    """Worst-case elementwise relative error with an absolute floor for
    near-zero entries."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def loop_conv2d(x, w, b, dilation, padding):
    """Direct nested-loop cross-correlation reference."""
    cout, cin, k, _ = w.shape
    _, h, wid = x.shape
    ho = h + 2 * padding - dilation * (k - 1)
    wo = wid + 2 * padding - dilation * (k - 1)
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[co]
                for ci in range(cin):
                    for u in range(k):
                        for v in range(k):
                            ii = i + u * dilation - padding
                            jj = j + v * dilation - padding
                            if 0 <= ii < h and 0 <= jj < wid:
                                acc += x[ci, ii, jj] * w[co, ci, u, v]
                out[co, i, j] = acc
    return out


def loop_mean_pool(x, win):
    """Per-pixel clipped-window mean; sequential row-major accumulation."""
    r = win // 2
    h, w = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            count = 0
            for ii in range(max(0, i - r), min(h, i + r + 1)):
                for jj in range(max(0, j - r), min(w, j + r + 1)):
                    acc += x[ii, jj]
                    count += 1
            out[i, j] = acc / count
    return out


def loop_max_pool(x, win):
    """Per-pixel clipped-window max plus the row-major-first argmax."""
    r = win // 2
    h, w = x.shape
    out = np.zeros_like(x)
    arg = {}
    for i in range(h):
        for j in range(w):
            best = -np.inf
            where = None
            for ii in range(max(0, i - r), min(h, i + r + 1)):
                for jj in range(max(0, j - r), min(w, j + r + 1)):
                    if x[ii, jj] > best:
                        best = x[ii, jj]
                        where = (ii, jj)
            out[i, j] = best
            arg[(i, j)] = where
    return out, arg


def loop_nms(heatmap, threshold, radius):
    """O(HW r^2) reference NMS with the deterministic plateau rule."""
    h, w = heatmap.shape
    out = []
    for i in range(h):
        for j in range(w):
            v = heatmap[i, j]
            if v <= threshold:
                continue
            keep = True
            for ii in range(max(0, i - radius), min(h, i + radius + 1)):
                for jj in range(max(0, j - radius), min(w, j + radius + 1)):
                    if (ii, jj) == (i, j):
                        continue
                    other = heatmap[ii, jj]
                    earlier = (ii < i) or (ii == i and jj < j)
                    if other > v or (earlier and other == v):
                        keep = False
                        break
                if not keep:
                    break
            if keep:
                out.append((j, i, float(v)))
    return out


def loop_mnn(desc_a, desc_b):
    """Quadruple-loop mutual nearest neighbors with Euclidean distances."""
    a, b = len(desc_a), len(desc_b)
    if a == 0 or b == 0:
        return []
    d = np.zeros((a, b))
    for i in range(a):
        for j in range(b):
            d[i, j] = np.sqrt(np.sum((desc_a[i] - desc_b[j]) ** 2))
    matches = []
    for i in range(a):
        j = int(np.argmin(d[i]))
        if int(np.argmin(d[:, j])) == i:
            matches.append((i, j))
    return matches


def unit_rows(rng, n, dim, dtype=np.float64):
    d = rng.standard_normal((n, dim)).astype(dtype)
    return d / np.linalg.norm(d, axis=1, keepdims=True)
