"""Dual-softmax / MNN sparse matching and epipolar semi-dense refinement."""
import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .descriptors import describe, sample_descriptors
from .keypoints import DEFAULT_NMS_WINDOW, DEFAULT_T_DET, DEFAULT_THRESHOLD, detect, score_map
from .tensor import as_tensor, matmul, softmax, transpose

DEFAULT_TAU = 0.1
DEFAULT_MATCH_THRESHOLD = 0.01
DEFAULT_EPS = 1e-9


@dataclass
class MatchSet:
    pts1: np.ndarray  # (n, 2)
    pts2: np.ndarray  # (n, 2)
    conf: np.ndarray  # (n,)
    kind: str = "sparse"
    idx1: np.ndarray = None
    idx2: np.ndarray = None
    degraded: bool = False
    dropped_by_filter: int = 0
    dropped_degenerate: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pts1 = np.asarray(self.pts1, dtype=np.float64).reshape(-1, 2)
        self.pts2 = np.asarray(self.pts2, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.conf)

    @property
    def pairs(self):
        return [((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), float(c))
                for a, b, c in zip(self.pts1, self.pts2, self.conf)]

    def as_array(self):
        return np.concatenate([self.pts1, self.pts2], axis=1)

    def to_report(self):
        rows = [[round(float(v), 6) for v in (*a, *b, c)]
                for a, b, c in zip(self.pts1, self.pts2, self.conf)]
        return {"kind": self.kind, "pairs": rows, "degraded": bool(self.degraded),
                "dropped_by_filter": int(self.dropped_by_filter)}

    def to_json(self):
        return json.dumps(self.to_report(), sort_keys=True)


def score_matrix(d1, d2, tau=DEFAULT_TAU):
    """``S(i, j) = <d1_i, d2_j> / tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    d1, d2 = as_tensor(d1), as_tensor(d2)
    return matmul(d1, transpose(d2, (1, 0))) * (1.0 / tau)


def dual_softmax(S):
    """Row softmax times column softmax."""
    S = as_tensor(S)
    return softmax(S, 1.0, axis=1) * softmax(S, 1.0, axis=0)


def mnn_filter(P, threshold=DEFAULT_MATCH_THRESHOLD):
    """Mutual-argmax pairs with confidence above ``threshold``.

    Returns ``(i, j, conf)`` index arrays ordered by ``i``.  ``np.argmax``
    returns the first maximum, so ties go to the smaller index.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    P = as_tensor(P).data
    if P.size == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, np.zeros(0)
    row_best = np.argmax(P, axis=1)
    col_best = np.argmax(P, axis=0)
    i = np.arange(P.shape[0])
    keep = (col_best[row_best] == i) & (P[i, row_best] > threshold)
    i = i[keep]
    j = row_best[keep]
    return i, j, P[i, j]


def patch_centers(idx_xy, k):
    """Pixel coordinates of D-cell centres (pixel-index convention)."""
    return (np.asarray(idx_xy, dtype=np.float64) + 0.5) * k - 0.5


def topk_coarse(M, K, k=4):
    """``K`` highest-matchability cells, descending; ties by (row, col).

    Returns ``(centers (n, 2) pixel xy, cells (n, 2) int xy)``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    M = as_tensor(M).data
    h, w = M.shape
    rows, cols = np.divmod(np.arange(h * w), w)
    order = np.lexsort((cols, rows, -M.ravel()))[:K]
    cells = np.stack([cols[order], rows[order]], axis=-1)
    return patch_centers(cells, k), cells


def estimate_fundamental(matches):
    return geometry.estimate_fundamental(matches)


def epipolar_lines(F, pts1):
    return geometry.epipolar_lines(F, pts1)


def project_to_lines(lines, pts, eps=DEFAULT_EPS):
    """Offsets moving each point orthogonally onto its line.

    Lines are scaled to unit normal first, so ``eps`` acts on a scale-free
    denominator and the result does not depend on the scale of F.
    Returns ``(delta (n, 2), degenerate (n,) bool)``.
    """
    lines = np.asarray(lines, dtype=np.float64).reshape(-1, 3)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    nrm = np.hypot(lines[:, 0], lines[:, 1])
    scale = np.max(np.abs(lines), axis=1)
    degenerate = ~(nrm > 1e-12 * scale) | (scale == 0)
    safe = np.where(degenerate, 1.0, nrm)
    a, b, c = (lines / safe[:, None]).T
    x, y = pts.T
    den = a * a + b * b + eps
    dx = (b * (b * x - a * y) - a * c) / den - x
    dy = (a * (a * y - b * x) - b * c) / den - y
    delta = np.stack([dx, dy], axis=-1)
    delta[degenerate] = np.nan
    return delta, degenerate


def refine_semi_dense(coarse, F, k=4, eps=DEFAULT_EPS):
    """Slide each image-2 coarse point onto the epipolar line of its partner."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    lines = epipolar_lines(F, coarse.pts1)
    delta, degenerate = project_to_lines(lines, coarse.pts2, eps)
    cheb = np.max(np.abs(np.where(degenerate[:, None], 0.0, delta)), axis=1)
    too_far = (~degenerate) & (cheb > k)
    keep = (~degenerate) & (~too_far)
    return MatchSet(
        coarse.pts1[keep], coarse.pts2[keep] + delta[keep], coarse.conf[keep], "refined",
        None if coarse.idx1 is None else coarse.idx1[keep],
        None if coarse.idx2 is None else coarse.idx2[keep],
        dropped_by_filter=int(too_far.sum()), dropped_degenerate=int(degenerate.sum()),
    )


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class MatchConfig:
    top_k: int = 500
    tau: float = DEFAULT_TAU
    threshold: float = DEFAULT_MATCH_THRESHOLD
    nms_window: int = DEFAULT_NMS_WINDOW
    det_threshold: float = DEFAULT_THRESHOLD
    t_det: float = DEFAULT_T_DET
    patch: int = 4
    coarse_k: int = 200
    eps: float = DEFAULT_EPS
    use_ransac: bool = False
    ransac_iters: int = 500
    ransac_thresh: float = 1.0
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Weights:
    keypoint: object  # KeypointNet
    descriptor: object  # DescriptorNet


def _extract(image, weights, cfg):
    S = score_map(image, weights.keypoint)
    xy, scores, _ = detect(S, cfg.top_k, cfg.nms_window, cfg.det_threshold, cfg.t_det)
    field = describe(image, weights.descriptor)
    desc = sample_descriptors(field, xy.data)
    return xy.data, scores.data, desc, field


def match_descriptors(xy1, xy2, d1, d2, tau, threshold, kind="sparse"):
    if len(xy1) == 0 or len(xy2) == 0:
        return MatchSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), kind,
                        np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    P = dual_softmax(score_matrix(d1, d2, tau))
    i, j, c = mnn_filter(P, threshold)
    return MatchSet(xy1[i], xy2[j], c, kind, i, j)


def match_sparse(img1, img2, weights, cfg=None):
    cfg = cfg or MatchConfig()
    xy1, _, d1, _ = _extract(img1, weights, cfg)
    xy2, _, d2, _ = _extract(img2, weights, cfg)
    return match_descriptors(xy1, xy2, d1, d2, cfg.tau, cfg.threshold)


def coarse_matches(field1, field2, cfg):
    c1, _ = topk_coarse(field1.M, cfg.coarse_k, field1.k)
    c2, _ = topk_coarse(field2.M, cfg.coarse_k, field2.k)
    d1 = sample_descriptors(field1, c1)
    d2 = sample_descriptors(field2, c2)
    return match_descriptors(c1, c2, d1, d2, cfg.tau, cfg.threshold, "coarse")


def fundamental_for_refinement(sparse, cfg):
    if cfg.use_ransac:
        F, _ = geometry.ransac_fundamental(sparse, cfg.ransac_iters, cfg.ransac_thresh, cfg.seed)
        return F
    return estimate_fundamental(sparse)


def match_semi_dense(img1, img2, weights, cfg=None):
    """Sparse matches -> F -> coarse patch matches -> epipolar refinement.

    Falls back to the sparse matches with ``degraded=True`` when F cannot be
    estimated.
    """
    cfg = cfg or MatchConfig()
    xy1, _, d1, f1 = _extract(img1, weights, cfg)
    xy2, _, d2, f2 = _extract(img2, weights, cfg)
    sparse = match_descriptors(xy1, xy2, d1, d2, cfg.tau, cfg.threshold)
    try:
        F = fundamental_for_refinement(sparse, cfg)
    except (ValueError, np.linalg.LinAlgError):
        sparse.degraded = True
        return sparse
    out = refine_semi_dense(coarse_matches(f1, f2, cfg), F, cfg.patch, cfg.eps)
    out.extra["F"] = F
    return out
