"""Training objectives for both branches.

Every loss returns a scalar :class:`Tensor`.  Optional ``info`` dicts collect
flags (clamping, empty sets, skipped windows) without changing the value.
"""
from dataclasses import dataclass

import numpy as np

from .descriptors import sample_descriptors
from .keypoints import gather_windows, window_offsets
from .matcher import dual_softmax, score_matrix
from .tensor import (Tensor, as_tensor, bilinear_sample, clip, log, mean, reshape, softmax, sqrt,
                     tabs, transpose, tsum)

CLAMP = 1e-12


@dataclass
class LossWeights:
    alpha: float = 0.25
    gamma: float = 2.0
    t_rel: float = 1.0
    t_det: float = 0.1
    window: int = 5
    p_norm: float = 2.0
    tau: float = 0.1
    match_radius: float = 5.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.t_rel <= 0 or self.t_det <= 0:
            raise ValueError("temperatures must be positive")


def _flag(info, key, value=True):
    if info is not None:
        info[key] = value


def focal_matching_loss(P_diag, alpha=0.25, gamma=2.0, info=None):
    """Mean of ``-alpha (1 - P)^gamma log P`` over matched pairs."""
    P = as_tensor(P_diag)
    if P.size == 0:
        _flag(info, "empty")
        return Tensor(0.0)
    if np.any(P.data <= 0):
        _flag(info, "clamped")
    P = clip(P, CLAMP, 1.0)
    return mean((1.0 - P) ** gamma * log(P) * (-alpha))


def bce(M, M_gt, info=None):
    M = as_tensor(M)
    if np.any(M.data <= CLAMP) or np.any(M.data >= 1 - CLAMP):
        _flag(info, "clamped")
    M = clip(M, CLAMP, 1.0 - CLAMP)
    g = np.asarray(M_gt, dtype=np.float64)
    return -(log(M) * g + log(1.0 - M) * (1.0 - g))


def matchability_loss(M, M_gt, alpha=0.25, gamma=2.0, info=None):
    """Focal form with ``P`` replaced by ``lambda = exp(-BCE)``; per-pixel mean."""
    b = bce(M, M_gt, info)
    lam = (-b).exp()
    return mean((1.0 - lam) ** gamma * b * alpha)


def rasterize_matchability(points, shape, k):
    """Binary map with 1 in every D-cell that contains a ground-truth point."""
    h, w = shape
    out = np.zeros((h, w))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts):
        cx = np.clip(np.floor((pts[:, 0] + 0.5) / k), 0, w - 1).astype(int)
        cy = np.clip(np.floor((pts[:, 1] + 0.5) / k), 0, h - 1).astype(int)
        out[cy, cx] = 1.0
    return out


def descriptor_losses(field1, field2, m_gt, weights=None, info=None):
    """``(L_focal, L_matchability)`` for one pair of descriptor fields."""
    w = weights or LossWeights()
    m_gt = np.asarray(m_gt, dtype=np.float64).reshape(-1, 4)
    d1 = sample_descriptors(field1, m_gt[:, :2])
    d2 = sample_descriptors(field2, m_gt[:, 2:])
    P = dual_softmax(score_matrix(d1, d2, w.tau))
    n = len(m_gt)
    diag = P[np.arange(n), np.arange(n)]
    focal = focal_matching_loss(diag, w.alpha, w.gamma, info)
    g1 = rasterize_matchability(m_gt[:, :2], field1.M.shape, field1.k)
    g2 = rasterize_matchability(m_gt[:, 2:], field2.M.shape, field2.k)
    mloss = (matchability_loss(field1.M, g1, w.alpha, w.gamma, info)
             + matchability_loss(field2.M, g2, w.alpha, w.gamma, info)) * 0.5
    return focal, mloss


# ---------------------------------------------------------------------------
# keypoint objectives


def _nearest_within(warped, targets, radius):
    """Index of the nearest target per warped point, -1 beyond ``radius``."""
    if len(warped) == 0 or len(targets) == 0:
        return np.full(len(warped), -1)
    d = np.linalg.norm(warped[:, None, :] - targets[None, :, :], axis=-1)
    j = np.argmin(d, axis=1)
    return np.where(d[np.arange(len(warped)), j] < radius, j, -1)


def _warp_jacobian(warp, pts, h=1e-5):
    """Central-difference Jacobian of ``warp`` at ``pts``, (n, 2, 2)."""
    n = len(pts)
    steps = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    w = warp((pts[None] + steps[:, None]).reshape(-1, 2))[0].reshape(4, n, 2)
    return np.stack([w[0] - w[1], w[2] - w[3]], axis=-1) / (2 * h)


def _directional(src, dst, warp, radius):
    """Matched ``(i, j, warped_i)`` for src points warped onto dst points.

    ``warped_i`` is a first-order expansion of the warp around the current
    positions: its value is exact and its gradient reaches ``src`` through
    a finite-difference Jacobian of the warp.
    """
    src = as_tensor(src)
    src_np = src.data.reshape(-1, 2)
    dst_np = as_tensor(dst).data.reshape(-1, 2)
    warped, valid = warp(src_np)
    idx = np.flatnonzero(valid)
    j = _nearest_within(warped[idx], dst_np, radius)
    keep = j >= 0
    i = idx[keep]
    if not src.requires_grad or len(i) == 0:
        return i, j[keep], warped[i]
    J = _warp_jacobian(warp, src_np[i])
    delta = reshape(reshape(src, (-1, 2))[i] - src_np[i], (len(i), 1, 2))
    moved = reshape(tsum(delta * J, axis=2), (len(i), 2)) + warped[i]
    return i, j[keep], moved


def _mean_distance(points, idx, targets):
    diff = as_tensor(points)[idx] - targets
    return mean(sqrt(tsum(diff * diff, axis=1) + 1e-24))


def reprojection_loss(kps1, kps2, warp12, warp21, match_radius=5.0, info=None):
    """``0.5 (dist_12 + dist_21)`` over keypoints with a partner within the radius.

    ``warp12`` / ``warp21`` map (n, 2) arrays to ``(warped, valid)``.  Warped
    positions are treated as constants; each direction's gradient reaches
    the keypoints of the target image.
    """
    kps1, kps2 = as_tensor(kps1), as_tensor(kps2)
    i12, j12, w12 = _directional(kps1, kps2, warp12, match_radius)
    i21, j21, w21 = _directional(kps2, kps1, warp21, match_radius)
    if len(j12) == 0 and len(j21) == 0:
        _flag(info, "empty")
        return Tensor(0.0)
    parts = [_mean_distance(kps2, j12, w12) if len(j12) else None,
             _mean_distance(kps1, j21, w21) if len(j21) else None]
    parts = [p for p in parts if p is not None]
    if info is not None:
        info["matched"] = (len(j12), len(j21))
    if len(parts) == 1:
        return parts[0]
    return (parts[0] + parts[1]) * 0.5


def reliability_map(P, t_rel=1.0):
    return ((as_tensor(P) - 1.0) * (1.0 / t_rel)).exp()


def _reliability_one(R, s_src, s_warp, rows, cols, divide_by_pairs):
    r = R[rows, cols]
    wgt = s_src[rows] * s_warp
    total = tsum(wgt)
    loss = tsum(wgt * (1.0 - r)) / total
    if divide_by_pairs:
        loss = loss * (1.0 / len(rows))
    return loss


def reliability_loss(kps1, kps2, scores1, scores2, P, warp12, warp21, S1, S2, t_rel=1.0,
                     match_radius=5.0, divide_by_pairs=False, info=None):
    """Score-weighted ``1 - r`` over warp-matched keypoints, symmetrised.

    ``P`` is the dual-softmax matrix between descriptors at ``kps1`` and
    ``kps2``; ``r`` is read from ``R = exp((P - 1) / t_rel)`` at each matched
    pair.  ``s^{1->2}`` is the raw score map of the other image sampled at
    the warped position.  With ``divide_by_pairs`` the weighted mean is
    additionally divided by the number of pairs.
    """
    R = reliability_map(P, t_rel)
    s1, s2 = reshape(as_tensor(scores1), (-1,)), reshape(as_tensor(scores2), (-1,))
    i12, j12, w12 = _directional(kps1, kps2, warp12, match_radius)
    i21, j21, w21 = _directional(kps2, kps1, warp21, match_radius)
    parts = []
    if len(i12):
        sw = reshape(bilinear_sample(as_tensor(S2), w12), (-1,))
        parts.append(_reliability_one(R, s1, sw, i12, j12, divide_by_pairs))
    if len(i21):
        sw = reshape(bilinear_sample(as_tensor(S1), w21), (-1,))
        parts.append(_reliability_one(transpose(R, (1, 0)), s2, sw, i21, j21, divide_by_pairs))
    if not parts:
        _flag(info, "empty")
        return Tensor(0.0)
    if len(parts) == 1:
        return parts[0]
    return (parts[0] + parts[1]) * 0.5


def _pnorm(dx, dy, p):
    if p == 1:
        return tabs(dx) + tabs(dy)
    if p == 2:
        return sqrt(dx * dx + dy * dy + 1e-24)
    return (tabs(dx) ** p + tabs(dy) ** p + 1e-300) ** (1.0 / p)


def peaky_loss(S, keypoints, N=5, t_det=0.1, p_norm=2.0, info=None):
    """Mean over keypoints of ``(1/N^2) sum d(i, j) s'(i, j)``.

    ``s'`` is the temperature softmax of the window around each integer
    keypoint and ``d`` the p-norm distance of each cell to the window's soft
    location.  Windows crossing the border are skipped and counted.
    """
    S = as_tensor(S)
    pts = np.rint(np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)).astype(np.int64)
    r = (N - 1) // 2
    H, W = S.shape
    inside = ((pts[:, 0] >= r) & (pts[:, 1] >= r) & (pts[:, 0] <= W - 1 - r)
              & (pts[:, 1] <= H - 1 - r)) if len(pts) else np.zeros(0, dtype=bool)
    if info is not None:
        info["skipped"] = int((~inside).sum())
    pts = pts[inside]
    if len(pts) == 0:
        _flag(info, "empty")
        return Tensor(0.0)
    n = len(pts)
    win = gather_windows(S, pts, N)
    sp = softmax(reshape(win, (n, N * N)), t_det, axis=-1)
    dx, dy = (o.ravel().astype(np.float64) for o in window_offsets(N))
    sx = reshape(tsum(sp * dx, axis=1), (n, 1))
    sy = reshape(tsum(sp * dy, axis=1), (n, 1))
    d = _pnorm(dx[None, :] - sx, dy[None, :] - sy, p_norm)
    per = tsum(d * sp, axis=1) * (1.0 / (N * N))
    return mean(per)
