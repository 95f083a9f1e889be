"""Slow, independent reference implementations used as test oracles.

Each oracle is written with plain loops and scalar arithmetic so it shares
no code path with the library.
"""
import math

import numpy as np


def bilinear_scalar(fmap, x, y):
    """Straight-line interpolation with clamp-to-edge, fmap (H, W, C)."""
    H, W = fmap.shape[:2]
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    top = fmap[y0, x0] * (1 - fx) + fmap[y0, x1] * fx
    bot = fmap[y1, x0] * (1 - fx) + fmap[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def softmax_list(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [v / s for v in e]


def deform_attn_loop(z, p_hat, levels, P, single_pixel_ref=None):
    """Naive multi-scale deformable attention for one query.

    ``P`` holds plain arrays: value_proj, output_proj, offset_weight,
    offset_bias, attn_weight, attn_bias, M, K.  ``single_pixel_ref`` gives a
    pixel reference (single-scale form) instead of normalised coordinates.
    """
    M, K, L = P["M"], P["K"], len(levels)
    C = z.shape[0]
    dh = P["value_proj"].shape[1] // M
    off = z @ P["offset_weight"] + P["offset_bias"]
    logit = z @ P["attn_weight"] + P["attn_bias"]
    out = np.zeros(P["output_proj"].shape[1])
    for m in range(M):
        logits = [logit[(m * L + lv) * K + k] for lv in range(L) for k in range(K)]
        A = softmax_list(logits)
        head = np.zeros(dh)
        for lv in range(L):
            H, W = levels[lv].shape[:2]
            if single_pixel_ref is not None:
                rx, ry = single_pixel_ref
            else:
                rx = p_hat[0] * W - 0.5
                ry = p_hat[1] * H - 0.5
            for k in range(K):
                base = ((m * L + lv) * K + k) * 2
                sx = rx + off[base]
                sy = ry + off[base + 1]
                v = bilinear_scalar(levels[lv], sx, sy)
                proj = np.array([sum(v[c] * P["value_proj"][c, m * dh + j] for c in range(C))
                                 for j in range(dh)])
                head += A[lv * K + k] * proj
        for j in range(dh):
            out += head[j] * P["output_proj"][m * dh + j]
    return out


def nms_brute(S, N, thr):
    r = (N - 1) // 2
    H, W = S.shape
    out = []
    for y in range(r, H - r):
        for x in range(r, W - r):
            v = S[y, x]
            if v < thr:
                continue
            ok = True
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if (dx or dy) and S[y + dy, x + dx] >= v:
                        ok = False
            if ok:
                out.append((x, y))
    return out


def dual_softmax_direct(S):
    n1, n2 = S.shape
    cols = [softmax_list(list(S[:, j])) for j in range(n2)]
    P = np.zeros_like(S)
    for i in range(n1):
        row = softmax_list(list(S[i]))
        for j in range(n2):
            P[i, j] = row[j] * cols[j][i]
    return P


def mnn_brute(P, thr):
    n1, n2 = P.shape
    out = []
    for i in range(n1):
        best_j = 0
        for j in range(n2):
            if P[i, j] > P[i, best_j]:
                best_j = j
        best_i = 0
        for ii in range(n1):
            if P[ii, best_j] > P[best_i, best_j]:
                best_i = ii
        if best_i == i and P[i, best_j] > thr:
            out.append((i, best_j))
    return out


def project_point_to_line(line, pt):
    """Foot of the perpendicular from pt to line (a, b, c)."""
    a, b, c = line
    x, y = pt
    t = (a * x + b * y + c) / (a * a + b * b)
    return x - a * t, y - b * t


def auc_reference(errors, T, samples=None):
    """Trapezoid of the piecewise-linear recall curve through (0,0), (e_i, i/n)."""
    e = sorted(errors)
    n = len(e)
    xs, ys = [0.0], [0.0]
    for i, v in enumerate(e):
        xs.append(v)
        ys.append((i + 1) / n)
    area = 0.0
    for k in range(1, len(xs)):
        x0, x1, y0, y1 = xs[k - 1], xs[k], ys[k - 1], ys[k]
        if x0 >= T:
            break
        if x1 > T:
            if math.isinf(x1):
                y1 = y0
            else:
                y1 = y0 + (y1 - y0) * (T - x0) / (x1 - x0)
            x1 = T
        area += 0.5 * (y0 + y1) * (x1 - x0)
    else:
        if xs[-1] < T:
            area += ys[-1] * (T - xs[-1])
    return area / T


def random_attention(rng, C, M, K, L, scale=1.5):
    """Attention parameters with non-trivial offsets and logits.

    Returns ``(params, plain)`` where ``plain`` is the dict form the loop
    oracle consumes.
    """
    from rddlite.attention import DeformAttnParams
    from rddlite.tensor import Tensor

    dh = int(rng.integers(1, 4))
    mlk = M * L * K
    plain = {
        "value_proj": rng.normal(size=(C, M * dh)),
        "output_proj": rng.normal(size=(M * dh, C)),
        "offset_weight": rng.normal(scale=scale, size=(C, mlk * 2)),
        "offset_bias": rng.normal(scale=scale, size=mlk * 2),
        "attn_weight": rng.normal(size=(C, mlk)),
        "attn_bias": rng.normal(size=mlk),
        "M": M, "K": K,
    }
    params = DeformAttnParams(M, K, L, **{k: Tensor(v.copy(), requires_grad=True)
                                         for k, v in plain.items() if k not in ("M", "K")})
    return params, plain


def random_pyramid(rng, C, L, H=None, W=None):
    H = H or int(rng.integers(3, 9))
    W = W or int(rng.integers(3, 9))
    levels = []
    for _ in range(L):
        levels.append(rng.normal(size=(H, W, C)))
        H, W = -(-H // 2), -(-W // 2)
        H, W = max(H, 2), max(W, 2)
    return levels
