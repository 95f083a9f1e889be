"""Keypoint branch: residual CNN score map, strict NMS and DKD refinement."""
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .nn import Params, add_conv, add_resblock, conv, resblock
from .tensor import Tensor, as_tensor, bilinear_sample, concat, reshape, relu, resize_bilinear, sigmoid, softmax

DEFAULT_NMS_WINDOW = 5
DEFAULT_THRESHOLD = 0.2
DEFAULT_T_DET = 0.1


class Keypoint(NamedTuple):
    x: float
    y: float
    score: float


@dataclass
class KeypointNetConfig:
    width: int = 32  # per level; fused width is 4 * width
    kernel_size: int = 3
    seed: int = 0


class KeypointNet:
    """Features at 1/1, 1/2, 1/8 and 1/32, upsampled, concatenated, sigmoid head."""

    levels = (1, 2, 8, 32)

    def __init__(self, params, config):
        self.params = params
        self.config = config

    @classmethod
    def init(cls, config=None, seed=None):
        config = config or KeypointNetConfig()
        if seed is not None:
            config = KeypointNetConfig(config.width, config.kernel_size, seed)
        rng = np.random.default_rng(config.seed)
        c, k = config.width, config.kernel_size
        p = Params()
        add_conv(p, rng, "kp.l1.in", k, 3, c)
        add_resblock(p, rng, "kp.l1.res", k, c)
        add_conv(p, rng, "kp.l2.down", k, c, c)
        add_resblock(p, rng, "kp.l2.res", k, c)
        add_conv(p, rng, "kp.l3.down1", k, c, c)
        add_conv(p, rng, "kp.l3.down2", k, c, c)
        add_resblock(p, rng, "kp.l3.res", k, c)
        add_conv(p, rng, "kp.l4.down1", k, c, c)
        add_conv(p, rng, "kp.l4.down2", k, c, c)
        add_resblock(p, rng, "kp.l4.res", k, c)
        add_conv(p, rng, "kp.head1", 1, 4 * c, c)
        add_conv(p, rng, "kp.head2", 1, c, 1, gain=0.5)
        return cls(p, config)

    def features(self, image):
        p = self.params
        H, W = image.shape[:2]
        f1 = resblock(p, "kp.l1.res", relu(conv(p, "kp.l1.in", image)))
        f2 = resblock(p, "kp.l2.res", relu(conv(p, "kp.l2.down", f1, stride=2)))
        f3 = relu(conv(p, "kp.l3.down1", f2, stride=2))
        f3 = resblock(p, "kp.l3.res", relu(conv(p, "kp.l3.down2", f3, stride=2)))
        f4 = relu(conv(p, "kp.l4.down1", f3, stride=2))
        f4 = resblock(p, "kp.l4.res", relu(conv(p, "kp.l4.down2", f4, stride=2)))
        return [resize_bilinear(f, H, W) for f in (f1, f2, f3, f4)]

    def forward(self, image):
        image = as_tensor(image)
        fused = concat(self.features(image), axis=2)
        h = relu(conv(self.params, "kp.head1", fused))
        logits = conv(self.params, "kp.head2", h)
        return reshape(sigmoid(logits), image.shape[:2])


def score_map(image, weights):
    """Score map in [0, 1] for an (H, W, 3) image; H and W divisible by 32."""
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    H, W = image.shape[:2]
    if H % 32 or W % 32:
        raise ValueError(f"image extents {H}x{W} must be divisible by 32; pad the image")
    return weights.forward(image)


def _check_window(N):
    if N < 1 or N % 2 == 0:
        raise ValueError("NMS window must be odd")


def nms_local_max(S, window=DEFAULT_NMS_WINDOW, threshold=DEFAULT_THRESHOLD):
    """Strict local maxima above ``threshold`` as an (n, 2) int array of (x, y).

    Pixels closer than ``(window - 1) / 2`` to the border are never returned.
    Output is in raster order.
    """
    _check_window(window)
    data = as_tensor(S).data
    mask = kernels.nms_mask(data, window, threshold)
    ys, xs = np.nonzero(mask)
    return np.stack([xs, ys], axis=-1).astype(np.int64)


def window_offsets(N):
    r = (N - 1) // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return dx, dy


def gather_windows(S, pts, N):
    """(n, N, N) windows of S centred on integer pixels ``pts`` (x, y)."""
    S = as_tensor(S)
    pts = np.asarray(pts, dtype=np.int64).reshape(-1, 2)
    r = (N - 1) // 2
    H, W = S.shape
    if len(pts) and (pts[:, 0].min() < r or pts[:, 1].min() < r
                     or pts[:, 0].max() > W - 1 - r or pts[:, 1].max() > H - 1 - r):
        raise ValueError("DKD window overruns the score map border")
    dx, dy = window_offsets(N)
    ys = pts[:, 1, None, None] + dy[None]
    xs = pts[:, 0, None, None] + dx[None]
    return S[ys, xs]


def soft_windows(S, pts, N=DEFAULT_NMS_WINDOW, t_det=DEFAULT_T_DET):
    """Temperature softmax over each N x N window, shape (n, N, N)."""
    _check_window(N)
    win = gather_windows(S, pts, N)
    n = win.shape[0]
    return reshape(softmax(reshape(win, (n, N * N)), t_det, axis=-1), (n, N, N))


def soft_offsets(sw, N):
    """Expected (dx, dy) offset of each softmaxed window, shape (n, 2)."""
    dx, dy = window_offsets(N)
    ox = (sw * dx[None]).sum(axis=(1, 2))
    oy = (sw * dy[None]).sum(axis=(1, 2))
    return concat([reshape(ox, (-1, 1)), reshape(oy, (-1, 1))], axis=1)


def dkd_refine_batch(S, pts, N=DEFAULT_NMS_WINDOW, t_det=DEFAULT_T_DET):
    """Sub-pixel positions ``p_nms + soft offset`` for integer pixels ``pts``.

    Returns ``(positions, soft_windows)``, both differentiable w.r.t. ``S``.
    """
    pts = np.asarray(pts, dtype=np.int64).reshape(-1, 2)
    sw = soft_windows(S, pts, N, t_det)
    return soft_offsets(sw, N) + pts.astype(np.float64), sw


def dkd_refine(S, p_nms, N=DEFAULT_NMS_WINDOW, t_det=DEFAULT_T_DET):
    """Refine a single NMS pixel into a :class:`Keypoint`."""
    pos, _ = dkd_refine_batch(S, [p_nms], N, t_det)
    x, y = pos.data[0]
    score = bilinear_sample(as_tensor(S), pos).data[0, 0]
    return Keypoint(float(x), float(y), float(score))


def topk_keypoints(kps, K):
    """Highest ``K`` scores, descending; ties ordered by (y, x)."""
    ranked = sorted(kps, key=lambda k: (-k.score, k.y, k.x))
    return ranked[:K]


def topk_order(xy, scores, K):
    """Index form of :func:`topk_keypoints` for arrays."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    order = np.lexsort((xy[:, 0], xy[:, 1], -np.asarray(scores, dtype=np.float64)))
    return order[:K]


def detect(S, top_k=500, window=DEFAULT_NMS_WINDOW, threshold=DEFAULT_THRESHOLD,
           t_det=DEFAULT_T_DET):
    """NMS + DKD + top-k.  Returns ``(xy (n,2) Tensor, scores (n,) Tensor, nms_pixels)``."""
    S = as_tensor(S)
    pix = nms_local_max(S, window, threshold)
    if len(pix) == 0:
        return Tensor(np.zeros((0, 2))), Tensor(np.zeros(0)), pix
    raw = S.data[pix[:, 1], pix[:, 0]]
    keep = topk_order(pix, raw, top_k)
    pix = pix[keep]
    xy, _ = dkd_refine_batch(S, pix, window, t_det)
    scores = reshape(bilinear_sample(S, xy), (-1,))
    return xy, scores, pix


def keypoints_to_json(kps):
    rows = [f'{{"x": {k.x:.6f}, "y": {k.y:.6f}, "score": {k.score:.6f}}}' for k in kps]
    return "[" + ", ".join(rows) + "]"


def keypoints_from_json(text):
    return [Keypoint(float(d["x"]), float(d["y"]), float(d["score"])) for d in json.loads(text)]
