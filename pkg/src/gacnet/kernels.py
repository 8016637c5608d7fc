"""Index-heavy inner loops: FPS, ball query, windowed k-nearest valid pixels,
block-median selection.

Every kernel has a numba path (``*_jit``) and a numpy path (``*_np``) that
return identical results. The public wrappers dispatch on
``gacnet._accel.USE_NUMBA`` unless ``use_numba`` is passed explicitly.
"""
import numpy as np

from . import _accel
from ._accel import njit


def _pick(use_numba):
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    return bool(use_numba) and _accel.HAVE_NUMBA


# ---------------------------------------------------------------------------
# farthest point sampling

@njit(cache=True)
def _fps_jit(points, m, start):
    n = points.shape[0]
    out = np.empty(m, np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for i in range(m):
        out[i] = cur
        cx = points[cur, 0]
        cy = points[cur, 1]
        cz = points[cur, 2]
        best = -1.0
        best_j = 0
        for j in range(n):
            dx = points[j, 0] - cx
            dy = points[j, 1] - cy
            dz = points[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best:
                best = mind[j]
                best_j = j
        cur = best_j
    return out


def _fps_np(points, m, start):
    n = points.shape[0]
    out = np.empty(m, np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for i in range(m):
        out[i] = cur
        dx = points[:, 0] - points[cur, 0]
        dy = points[:, 1] - points[cur, 1]
        dz = points[:, 2] - points[cur, 2]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        cur = int(np.argmax(mind))
    return out


def fps(points, m, start, use_numba=None):
    """Greedy farthest-point order of ``m`` indices beginning at ``start``.

    Ties go to the lowest index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if _pick(use_numba):
        return _fps_jit(points, int(m), int(start))
    return _fps_np(points, int(m), int(start))


# ---------------------------------------------------------------------------
# ball query

@njit(cache=True)
def _ball_query_jit(points, centers, radius2, k):
    n = points.shape[0]
    c = centers.shape[0]
    out = np.empty((c, k), np.int64)
    cd = np.empty(n)
    ci_ = np.empty(n, np.int64)
    for ci in range(c):
        p = centers[ci]
        cx = points[p, 0]
        cy = points[p, 1]
        cz = points[p, 2]
        m = 0
        for j in range(n):
            dx = points[j, 0] - cx
            dy = points[j, 1] - cy
            dz = points[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d <= radius2:
                cd[m] = d
                ci_[m] = j
                m += 1
        # candidates are in index order; a stable sort keeps index tie-breaks
        order = np.argsort(cd[:m], kind="mergesort")
        cnt = min(m, k)
        for t in range(cnt):
            out[ci, t] = ci_[order[t]]
        for t in range(cnt, k):
            out[ci, t] = out[ci, 0]
    return out


def _ball_query_np(points, centers, radius2, k):
    c = points[centers]
    dx = points[None, :, 0] - c[:, None, 0]
    dy = points[None, :, 1] - c[:, None, 1]
    dz = points[None, :, 2] - c[:, None, 2]
    d = dx * dx + dy * dy + dz * dz
    order = np.argsort(d, axis=1, kind="stable")
    if order.shape[1] < k:
        order = np.concatenate([order, np.repeat(order[:, :1], k - order.shape[1], axis=1)], axis=1)
    order = order[:, :k]
    inside = np.take_along_axis(d, order, axis=1) <= radius2
    # the center is always its own nearest hit, so column 0 is inside
    return np.where(inside, order, order[:, :1])


def ball_query(points, centers, radius, k, use_numba=None):
    """Up to ``k`` neighbours within ``radius`` of each center, ordered by
    (distance, index), padded by repeating the nearest hit."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.int64)
    r2 = float(radius) ** 2
    if _pick(use_numba):
        return _ball_query_jit(points, centers, r2, int(k))
    return _ball_query_np(points, centers, r2, int(k))


# ---------------------------------------------------------------------------
# k nearest valid pixels inside a Chebyshev window

@njit(cache=True)
def _window_knn_jit(mask, radius, k):
    H, W = mask.shape
    idx = np.full((H * W, k), -1, np.int64)
    cnt = np.zeros(H * W, np.int64)
    bd = np.empty(k, np.int64)
    bi = np.empty(k, np.int64)
    for v in range(H):
        for u in range(W):
            n = 0
            for r in range(radius + 1):
                if n == k and bd[k - 1] < r * r:
                    break
                v0 = v - r
                v1 = v + r
                u0 = u - r
                u1 = u + r
                if v0 < 0 and v1 >= H and u0 < 0 and u1 >= W and r > 0:
                    break
                for vv in range(max(v0, 0), min(v1, H - 1) + 1):
                    edge_row = vv == v0 or vv == v1
                    uu = max(u0, 0)
                    while uu <= min(u1, W - 1):
                        if edge_row or uu == u0 or uu == u1:
                            if mask[vv, uu]:
                                d = (vv - v) * (vv - v) + (uu - u) * (uu - u)
                                q = vv * W + uu
                                if n < k:
                                    pos = n
                                    n += 1
                                elif d < bd[k - 1] or (d == bd[k - 1] and q < bi[k - 1]):
                                    pos = k - 1
                                else:
                                    pos = -1
                                if pos >= 0:
                                    while pos > 0 and (bd[pos - 1] > d or (bd[pos - 1] == d and bi[pos - 1] > q)):
                                        bd[pos] = bd[pos - 1]
                                        bi[pos] = bi[pos - 1]
                                        pos -= 1
                                    bd[pos] = d
                                    bi[pos] = q
                            uu += 1
                        else:
                            # interior of the ring was covered by smaller radii
                            uu = u1
            p = v * W + u
            cnt[p] = n
            for t in range(n):
                idx[p, t] = bi[t]
    return idx, cnt


def _window_knn_np(mask, radius, k, chunk_elems=1 << 22):
    H, W = mask.shape
    valid = np.flatnonzero(mask.ravel())
    idx = np.full((H * W, k), -1, np.int64)
    cnt = np.zeros(H * W, np.int64)
    if valid.size == 0:
        return idx, cnt
    qv = valid // W
    qu = valid % W
    big = np.iinfo(np.int64).max
    pix = np.arange(H * W)
    step = max(1, chunk_elems // valid.size)
    for s in range(0, H * W, step):
        p = pix[s:s + step]
        dv = qv[None, :] - (p // W)[:, None]
        du = qu[None, :] - (p % W)[:, None]
        d = dv * dv + du * du
        d[np.maximum(np.abs(dv), np.abs(du)) > radius] = big
        # valid ids are row-major, so a stable sort breaks ties by index
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        dsel = np.take_along_axis(d, order, axis=1)
        hit = dsel < big
        sel = np.where(hit, valid[order], -1)
        idx[s:s + step, :sel.shape[1]] = sel
        cnt[s:s + step] = hit.sum(axis=1)
    return idx, cnt


def window_knn(mask, radius, k, use_numba=None):
    """For every pixel, the ``k`` nearest True pixels of ``mask`` within
    Chebyshev distance ``radius``.

    Nearness is squared Euclidean pixel distance, ties broken by row-major
    index. Returns ``(idx, count)`` with ``idx`` shaped ``(H*W, k)`` and
    padded with -1.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _pick(use_numba):
        return _window_knn_jit(mask, int(radius), int(k))
    return _window_knn_np(mask, int(radius), int(k))


# ---------------------------------------------------------------------------
# block selection for sparse downsampling

@njit(cache=True)
def _block_select_jit(values, f):
    H, W = values.shape
    Hb = H // f
    Wb = W // f
    out = np.zeros((Hb, Wb))
    buf = np.empty(f * f)
    for bv in range(Hb):
        for bu in range(Wb):
            n = 0
            for i in range(f):
                for j in range(f):
                    x = values[bv * f + i, bu * f + j]
                    if x > 0:
                        buf[n] = x
                        n += 1
            if n == 0:
                continue
            s = np.sort(buf[:n])
            if n % 2 == 1:
                med = s[n // 2]
            else:
                med = 0.5 * (s[n // 2 - 1] + s[n // 2])
            best = s[0]
            bestd = abs(s[0] - med)
            for t in range(1, n):
                dd = abs(s[t] - med)
                if dd < bestd:
                    bestd = dd
                    best = s[t]
            out[bv, bu] = best
    return out


def _block_select_np(values, f):
    H, W = values.shape
    Hb, Wb = H // f, W // f
    blocks = values[:Hb * f, :Wb * f].reshape(Hb, f, Wb, f).transpose(0, 2, 1, 3).reshape(Hb, Wb, f * f)
    vals = np.where(blocks > 0, blocks, np.inf)
    s = np.sort(vals, axis=-1)
    n = (blocks > 0).sum(axis=-1)
    lo = np.clip((n - 1) // 2, 0, f * f - 1)
    hi = np.clip(n // 2, 0, f * f - 1)
    a = np.take_along_axis(s, lo[..., None], axis=-1)[..., 0]
    b = np.take_along_axis(s, hi[..., None], axis=-1)[..., 0]
    with np.errstate(invalid="ignore"):
        med = np.where(n % 2 == 1, a, 0.5 * (a + b))
        dist = np.abs(s - med[..., None])
    # sorted ascending, so the first minimum is the smaller depth on ties
    first = np.argmin(np.where(np.isfinite(s), dist, np.inf), axis=-1)
    out = np.take_along_axis(s, first[..., None], axis=-1)[..., 0]
    return np.where(n > 0, out, 0.0)


def block_select(values, factor, use_numba=None):
    """Per ``factor``x``factor`` block, the valid depth nearest to the block's
    median of valid depths (smaller depth on ties, 0 for empty blocks)."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if factor == 1:
        return values.copy()
    if _pick(use_numba):
        return _block_select_jit(values, int(factor))
    return _block_select_np(values, int(factor))
