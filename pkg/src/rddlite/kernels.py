"""Hot inner loops: bilinear gather/scatter, col2im accumulation, strict NMS.

Each kernel exists twice, a numba version (``*_nb``) and a vectorised numpy
version (``*_np``).  The public names dispatch on the active backend, which
defaults to numba unless ``RDDLITE_DISABLE_NUMBA`` is set.  Both paths must
agree to round-off; ``tests/test_kernels.py`` holds them to that.
"""
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit

_state = {"backend": _accel.backend_name()}


def active_backend():
    return _state["backend"]


def set_backend(name):
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _accel.HAVE_NUMBA:
        raise RuntimeError("numba is not available")
    _state["backend"] = name


@contextmanager
def use_backend(name):
    prev = _state["backend"]
    set_backend(name)
    try:
        yield
    finally:
        _state["backend"] = prev


# ---------------------------------------------------------------------------
# bilinear sampling, clamp-to-edge
# maps: (B, H, W, C), pts: (B, N, 2) as (x, y) pixel coordinates


@njit(cache=True)
def _bilinear_fwd_nb(maps, pts):
    B, H, W, C = maps.shape
    N = pts.shape[1]
    out = np.empty((B, N, C))
    for b in range(B):
        for n in range(N):
            x = min(max(pts[b, n, 0], 0.0), W - 1.0)
            y = min(max(pts[b, n, 1], 0.0), H - 1.0)
            x0 = min(int(np.floor(x)), W - 2)
            y0 = min(int(np.floor(y)), H - 2)
            wx = x - x0
            wy = y - y0
            for c in range(C):
                top = (1.0 - wx) * maps[b, y0, x0, c] + wx * maps[b, y0, x0 + 1, c]
                bot = (1.0 - wx) * maps[b, y0 + 1, x0, c] + wx * maps[b, y0 + 1, x0 + 1, c]
                out[b, n, c] = (1.0 - wy) * top + wy * bot
    return out


@njit(cache=True)
def _bilinear_bwd_nb(maps, pts, grad):
    B, H, W, C = maps.shape
    N = pts.shape[1]
    gmap = np.zeros_like(maps)
    gpts = np.zeros((B, N, 2))
    for b in range(B):
        for n in range(N):
            px = pts[b, n, 0]
            py = pts[b, n, 1]
            x = min(max(px, 0.0), W - 1.0)
            y = min(max(py, 0.0), H - 1.0)
            x0 = min(int(np.floor(x)), W - 2)
            y0 = min(int(np.floor(y)), H - 2)
            wx = x - x0
            wy = y - y0
            dx = 0.0
            dy = 0.0
            for c in range(C):
                g = grad[b, n, c]
                v00 = maps[b, y0, x0, c]
                v01 = maps[b, y0, x0 + 1, c]
                v10 = maps[b, y0 + 1, x0, c]
                v11 = maps[b, y0 + 1, x0 + 1, c]
                gmap[b, y0, x0, c] += g * (1.0 - wx) * (1.0 - wy)
                gmap[b, y0, x0 + 1, c] += g * wx * (1.0 - wy)
                gmap[b, y0 + 1, x0, c] += g * (1.0 - wx) * wy
                gmap[b, y0 + 1, x0 + 1, c] += g * wx * wy
                dx += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10))
                dy += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01))
            if 0.0 <= px <= W - 1.0:
                gpts[b, n, 0] = dx
            if 0.0 <= py <= H - 1.0:
                gpts[b, n, 1] = dy
    return gmap, gpts


def _corners_np(maps, pts):
    B, H, W, _ = maps.shape
    x = np.clip(pts[..., 0], 0.0, W - 1.0)
    y = np.clip(pts[..., 1], 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    bi = np.arange(B)[:, None]
    return bi, x0, y0, wx, wy


def _bilinear_fwd_np(maps, pts):
    bi, x0, y0, wx, wy = _corners_np(maps, pts)
    v00 = maps[bi, y0, x0]
    v01 = maps[bi, y0, x0 + 1]
    v10 = maps[bi, y0 + 1, x0]
    v11 = maps[bi, y0 + 1, x0 + 1]
    top = (1.0 - wx) * v00 + wx * v01
    bot = (1.0 - wx) * v10 + wx * v11
    return (1.0 - wy) * top + wy * bot


def _bilinear_bwd_np(maps, pts, grad):
    B, H, W, C = maps.shape
    bi, x0, y0, wx, wy = _corners_np(maps, pts)
    v00 = maps[bi, y0, x0]
    v01 = maps[bi, y0, x0 + 1]
    v10 = maps[bi, y0 + 1, x0]
    v11 = maps[bi, y0 + 1, x0 + 1]
    gmap = np.zeros_like(maps)
    bb = np.broadcast_to(bi, x0.shape)
    np.add.at(gmap, (bb, y0, x0), grad * (1.0 - wx) * (1.0 - wy))
    np.add.at(gmap, (bb, y0, x0 + 1), grad * wx * (1.0 - wy))
    np.add.at(gmap, (bb, y0 + 1, x0), grad * (1.0 - wx) * wy)
    np.add.at(gmap, (bb, y0 + 1, x0 + 1), grad * wx * wy)
    dx = np.sum(grad * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10)), axis=-1)
    dy = np.sum(grad * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01)), axis=-1)
    px, py = pts[..., 0], pts[..., 1]
    dx = np.where((px >= 0.0) & (px <= W - 1.0), dx, 0.0)
    dy = np.where((py >= 0.0) & (py <= H - 1.0), dy, 0.0)
    return gmap, np.stack([dx, dy], axis=-1)


def bilinear_forward(maps, pts):
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if _state["backend"] == "numba":
        return _bilinear_fwd_nb(maps, pts)
    return _bilinear_fwd_np(maps, pts)


def bilinear_backward(maps, pts, grad):
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if _state["backend"] == "numba":
        return _bilinear_bwd_nb(maps, pts, grad)
    return _bilinear_bwd_np(maps, pts, grad)


# ---------------------------------------------------------------------------
# multi-scale deformable sampling (the attention core)
# value: (M, S, D) with all levels flattened row-major along S
# shapes: (L, 2) int (H_l, W_l); starts: (L,) offsets into S
# locs: (M, Q, L, K, 2) level-pixel (x, y); attn: (M, Q, L, K) -> (M, Q, D)


@njit(cache=True)
def _cell(px, py, H, W):
    x = min(max(px, 0.0), W - 1.0)
    y = min(max(py, 0.0), H - 1.0)
    x0 = min(int(np.floor(x)), max(W - 2, 0))
    y0 = min(int(np.floor(y)), max(H - 2, 0))
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    return x0, y0, x1, y1, x - x0, y - y0


@njit(cache=True)
def _msda_fwd_nb(value, shapes, starts, locs, attn):
    M, S, D = value.shape
    Q, L, K = locs.shape[1], locs.shape[2], locs.shape[3]
    out = np.zeros((M, Q, D))
    for m in range(M):
        for q in range(Q):
            for l in range(L):
                H = shapes[l, 0]
                W = shapes[l, 1]
                s0 = starts[l]
                for k in range(K):
                    a = attn[m, q, l, k]
                    x0, y0, x1, y1, wx, wy = _cell(locs[m, q, l, k, 0], locs[m, q, l, k, 1], H, W)
                    i00 = s0 + y0 * W + x0
                    i01 = s0 + y0 * W + x1
                    i10 = s0 + y1 * W + x0
                    i11 = s0 + y1 * W + x1
                    w00 = (1.0 - wx) * (1.0 - wy) * a
                    w01 = wx * (1.0 - wy) * a
                    w10 = (1.0 - wx) * wy * a
                    w11 = wx * wy * a
                    for d in range(D):
                        out[m, q, d] += (w00 * value[m, i00, d] + w01 * value[m, i01, d]
                                         + w10 * value[m, i10, d] + w11 * value[m, i11, d])
    return out


@njit(cache=True)
def _msda_bwd_nb(value, shapes, starts, locs, attn, grad):
    M, S, D = value.shape
    Q, L, K = locs.shape[1], locs.shape[2], locs.shape[3]
    gval = np.zeros_like(value)
    glocs = np.zeros(locs.shape)
    gattn = np.zeros(attn.shape)
    for m in range(M):
        for q in range(Q):
            for l in range(L):
                H = shapes[l, 0]
                W = shapes[l, 1]
                s0 = starts[l]
                for k in range(K):
                    a = attn[m, q, l, k]
                    px = locs[m, q, l, k, 0]
                    py = locs[m, q, l, k, 1]
                    x0, y0, x1, y1, wx, wy = _cell(px, py, H, W)
                    i00 = s0 + y0 * W + x0
                    i01 = s0 + y0 * W + x1
                    i10 = s0 + y1 * W + x0
                    i11 = s0 + y1 * W + x1
                    dx = 0.0
                    dy = 0.0
                    da = 0.0
                    for d in range(D):
                        g = grad[m, q, d]
                        v00 = value[m, i00, d]
                        v01 = value[m, i01, d]
                        v10 = value[m, i10, d]
                        v11 = value[m, i11, d]
                        ga = g * a
                        gval[m, i00, d] += ga * (1.0 - wx) * (1.0 - wy)
                        gval[m, i01, d] += ga * wx * (1.0 - wy)
                        gval[m, i10, d] += ga * (1.0 - wx) * wy
                        gval[m, i11, d] += ga * wx * wy
                        top = (1.0 - wx) * v00 + wx * v01
                        bot = (1.0 - wx) * v10 + wx * v11
                        da += g * ((1.0 - wy) * top + wy * bot)
                        dx += ga * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10))
                        dy += ga * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01))
                    gattn[m, q, l, k] = da
                    if 0.0 <= px <= W - 1.0:
                        glocs[m, q, l, k, 0] = dx
                    if 0.0 <= py <= H - 1.0:
                        glocs[m, q, l, k, 1] = dy
    return gval, glocs, gattn


def _msda_cells_np(shapes, starts, locs):
    L = shapes.shape[0]
    H = shapes[:, 0].reshape(1, 1, L, 1).astype(np.float64)
    W = shapes[:, 1].reshape(1, 1, L, 1).astype(np.float64)
    Wi = shapes[:, 1].reshape(1, 1, L, 1)
    s0 = starts.reshape(1, 1, L, 1)
    px, py = locs[..., 0], locs[..., 1]
    x = np.clip(px, 0.0, W - 1.0)
    y = np.clip(py, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x), np.maximum(W - 2.0, 0.0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), np.maximum(H - 2.0, 0.0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, Wi - 1)
    y1 = np.minimum(y0 + 1, shapes[:, 0].reshape(1, 1, L, 1) - 1)
    wx = x - x0
    wy = y - y0
    idx = [s0 + y0 * Wi + x0, s0 + y0 * Wi + x1, s0 + y1 * Wi + x0, s0 + y1 * Wi + x1]
    inside_x = (px >= 0.0) & (px <= W - 1.0)
    inside_y = (py >= 0.0) & (py <= H - 1.0)
    return idx, wx, wy, inside_x, inside_y


def _msda_fwd_np(value, shapes, starts, locs, attn):
    M = value.shape[0]
    (i00, i01, i10, i11), wx, wy, _, _ = _msda_cells_np(shapes, starts, locs)
    mi = np.arange(M).reshape(M, 1, 1, 1)
    w = [(1 - wx) * (1 - wy) * attn, wx * (1 - wy) * attn, (1 - wx) * wy * attn, wx * wy * attn]
    out = 0.0
    for idx, wt in zip((i00, i01, i10, i11), w):
        out = out + np.einsum("mqlkd,mqlk->mqd", value[mi, idx], wt)
    return out


def _msda_bwd_np(value, shapes, starts, locs, attn, grad):
    M = value.shape[0]
    (i00, i01, i10, i11), wx, wy, inx, iny = _msda_cells_np(shapes, starts, locs)
    mi = np.broadcast_to(np.arange(M).reshape(M, 1, 1, 1), i00.shape)
    v00, v01, v10, v11 = (value[mi, i] for i in (i00, i01, i10, i11))
    g = grad[:, :, None, None, :]
    wx_, wy_, a_ = wx[..., None], wy[..., None], attn[..., None]
    gval = np.zeros_like(value)
    for idx, wt in ((i00, (1 - wx_) * (1 - wy_)), (i01, wx_ * (1 - wy_)),
                    (i10, (1 - wx_) * wy_), (i11, wx_ * wy_)):
        np.add.at(gval, (mi, idx), g * a_ * wt)
    top = (1 - wx_) * v00 + wx_ * v01
    bot = (1 - wx_) * v10 + wx_ * v11
    gattn = np.sum(g * ((1 - wy_) * top + wy_ * bot), axis=-1)
    dx = np.sum(g * a_ * ((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)), axis=-1)
    dy = np.sum(g * a_ * ((1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)), axis=-1)
    glocs = np.stack([np.where(inx, dx, 0.0), np.where(iny, dy, 0.0)], axis=-1)
    return gval, glocs, gattn


def _msda_args(value, shapes, starts, locs, attn):
    return (np.ascontiguousarray(value, dtype=np.float64),
            np.ascontiguousarray(shapes, dtype=np.int64),
            np.ascontiguousarray(starts, dtype=np.int64),
            np.ascontiguousarray(locs, dtype=np.float64),
            np.ascontiguousarray(attn, dtype=np.float64))


def msda_forward(value, shapes, starts, locs, attn):
    args = _msda_args(value, shapes, starts, locs, attn)
    if _state["backend"] == "numba":
        return _msda_fwd_nb(*args)
    return _msda_fwd_np(*args)


def msda_backward(value, shapes, starts, locs, attn, grad):
    args = _msda_args(value, shapes, starts, locs, attn)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if _state["backend"] == "numba":
        return _msda_bwd_nb(*args, grad)
    return _msda_bwd_np(*args, grad)


# ---------------------------------------------------------------------------
# im2col / col2im for HWC convolution


def im2col(padded, k, stride):
    """(Hp, Wp, C) -> (Ho, Wo, k, k, C) patch view (copy)."""
    win = sliding_window_view(padded, (k, k), axis=(0, 1))[::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2))


@njit(cache=True)
def _col2im_nb(cols, Hp, Wp, stride):
    Ho, Wo, k, _, C = cols.shape
    out = np.zeros((Hp, Wp, C))
    for i in range(Ho):
        for j in range(Wo):
            for di in range(k):
                for dj in range(k):
                    r = i * stride + di
                    s = j * stride + dj
                    for c in range(C):
                        out[r, s, c] += cols[i, j, di, dj, c]
    return out


def _col2im_np(cols, Hp, Wp, stride):
    Ho, Wo, k, _, C = cols.shape
    out = np.zeros((Hp, Wp, C))
    for di in range(k):
        for dj in range(k):
            out[di:di + stride * (Ho - 1) + 1:stride,
                dj:dj + stride * (Wo - 1) + 1:stride] += cols[:, :, di, dj, :]
    return out


def col2im(cols, Hp, Wp, stride):
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if _state["backend"] == "numba":
        return _col2im_nb(cols, Hp, Wp, stride)
    return _col2im_np(cols, Hp, Wp, stride)


# ---------------------------------------------------------------------------
# strict local maxima in N x N windows


@njit(cache=True)
def _nms_nb(S, N, threshold):
    H, W = S.shape
    r = (N - 1) // 2
    mask = np.zeros((H, W), dtype=np.bool_)
    for y in range(r, H - r):
        for x in range(r, W - r):
            v = S[y, x]
            if v < threshold:
                continue
            ok = True
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if (dy != 0 or dx != 0) and S[y + dy, x + dx] >= v:
                        ok = False
                        break
                if not ok:
                    break
            mask[y, x] = ok
    return mask


def _nms_np(S, N, threshold):
    H, W = S.shape
    r = (N - 1) // 2
    mask = np.zeros((H, W), dtype=bool)
    if H < N or W < N:
        return mask
    win = sliding_window_view(S, (N, N)).reshape(H - 2 * r, W - 2 * r, N * N).copy()
    win[:, :, (N * N) // 2] = -np.inf
    centre = S[r:H - r, r:W - r]
    mask[r:H - r, r:W - r] = (centre > win.max(axis=-1)) & (centre >= threshold)
    return mask


def nms_mask(S, N, threshold):
    S = np.ascontiguousarray(S, dtype=np.float64)
    if _state["backend"] == "numba":
        return _nms_nb(S, int(N), float(threshold))
    return _nms_np(S, int(N), float(threshold))
