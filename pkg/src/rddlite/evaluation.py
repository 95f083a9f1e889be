"""Scene-level evaluation: matching, RANSAC, pose and homography metrics."""
from dataclasses import dataclass

import numpy as np

from . import geometry
from .descriptors import describe, sample_descriptors
from .keypoints import detect, score_map
from .matcher import MatchConfig, match_descriptors

MODES = ("network", "oracle", "random")


def positional_code(pts, dim=64, sigma=1.5, seed=0):
    """Unit random-Fourier code of pixel positions; inner products decay with distance."""
    rng = np.random.default_rng([seed, 99])
    omega = rng.normal(0.0, 1.0 / sigma, size=(2, dim))
    phase = rng.uniform(0.0, 2 * np.pi, size=dim)
    code = np.cos(np.asarray(pts, dtype=np.float64).reshape(-1, 2) @ omega + phase)
    return code / np.maximum(np.linalg.norm(code, axis=1, keepdims=True), 1e-12)


def grid_points(size, stride=4):
    H, W = size
    ys, xs = np.meshgrid(np.arange(stride // 2, H, stride), np.arange(stride // 2, W, stride),
                         indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)


def oracle_keypoints(scene, stride=4):
    """Grid keypoints in image 1 and their exact warps in image 2."""
    kp1 = grid_points(scene.size, stride)
    w, ok = geometry.warp_points(kp1, scene)
    return kp1, w[ok]


def scene_descriptors(scene, kp1, kp2, mode, seed):
    if mode == "oracle":
        back, ok = geometry.warp_points(kp2, scene, (2, 1))
        d1 = positional_code(kp1, seed=seed)
        d2 = positional_code(np.where(ok[:, None], back, -1e3), seed=seed)
        return d1, d2
    rng = np.random.default_rng([scene.seed, 17])
    d1 = rng.normal(size=(len(kp1), 64))
    d2 = rng.normal(size=(len(kp2), 64))
    return (d1 / np.linalg.norm(d1, axis=1, keepdims=True),
            d2 / np.linalg.norm(d2, axis=1, keepdims=True))


def network_matches(scene, weights, cfg):
    out = []
    for img in (scene.image1, scene.image2):
        S = score_map(img, weights.keypoint)
        xy, _, _ = detect(S, cfg.top_k, cfg.nms_window, cfg.det_threshold, cfg.t_det)
        out.append((xy.data, sample_descriptors(describe(img, weights.descriptor), xy.data).data))
    (k1, d1), (k2, d2) = out
    return match_descriptors(k1, k2, d1, d2, cfg.tau, cfg.threshold)


def scene_matches(scene, mode, weights=None, cfg=None):
    cfg = cfg or MatchConfig()
    if mode == "network":
        if weights is None:
            raise ValueError("network mode needs weights")
        return network_matches(scene, weights, cfg)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    kp1, kp2 = oracle_keypoints(scene)
    d1, d2 = scene_descriptors(scene, kp1, kp2, mode, cfg.seed)
    return match_descriptors(kp1, kp2, d1, d2, cfg.tau, cfg.threshold)


@dataclass
class SceneResult:
    index: int
    num_matches: int
    pose_error: float  # combined degrees, inf on failure, nan when not applicable
    corner_error: float  # px, inf on failure, nan when not applicable


def evaluate_scene(index, scene, mode, weights=None, cfg=None):
    cfg = cfg or MatchConfig()
    m = scene_matches(scene, mode, weights, cfg)
    pose_err = float("nan")
    # a planar surface leaves F undetermined, so pose is only scored off-plane
    if scene.baseline > 0 and scene.surface.profile != "plane":
        pose_err = float("inf")
        if len(m) >= 8:
            try:
                F, mask = geometry.ransac_fundamental(m, cfg.ransac_iters, cfg.ransac_thresh,
                                                      cfg.seed)
                inl = m.as_array()[mask]
                pose = geometry.recover_pose(F, scene.K1, scene.K2, inl)
                if pose.translation_ok:
                    pose_err = geometry.pose_error(pose, scene.R, scene.t).combined
            except (ValueError, np.linalg.LinAlgError):
                pass
    corner = float("nan")
    if scene.surface.profile == "plane":
        corner = float("inf")
        if len(m) >= 4:
            try:
                Hm, _ = geometry.ransac_homography(m, cfg.ransac_iters, 3.0, cfg.seed)
                H, W = scene.size
                corner = geometry.corner_error(Hm, scene.plane_homography(), W, H)
            except (ValueError, np.linalg.LinAlgError):
                pass
    return SceneResult(index, len(m), pose_err, corner)


def aggregate(results, auc_thresholds=(5, 10, 20), mha_thresholds=(3, 5, 10)):
    """Metric report; results are sorted by scene index first."""
    results = sorted(results, key=lambda r: r.index)
    pose = [r.pose_error for r in results if not np.isnan(r.pose_error)]
    corners = [r.corner_error for r in results if not np.isnan(r.corner_error)]
    report = {"auc": None, "mha": None}
    if pose:
        report["auc"] = {str(t): round(v, 6) for t, v in
                         zip(auc_thresholds, geometry.pose_auc(pose, auc_thresholds))}
    if corners:
        report["mha"] = {str(t): round(v, 6) for t, v in
                         zip(mha_thresholds, geometry.homography_mha(corners, mha_thresholds))}
    return report
