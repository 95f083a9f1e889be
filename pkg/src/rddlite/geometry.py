"""Two-view geometry: synthetic scenes, f_warp, eight-point/RANSAC, pose, metrics.

Pixel coordinates follow the pixel-index convention: the centre of pixel
``(col, row)`` is at ``(x, y) = (col, row)``.  Camera 1 defines the world
frame; camera 2 maps world points by ``X2 = R X1 + baseline * t``.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import dten


class DegenerateConfiguration(ValueError):
    """Correspondences do not determine the requested model."""


# ---------------------------------------------------------------------------
# small helpers


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_about(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    Kx = skew(axis)
    return np.eye(3) + np.sin(angle_rad) * Kx + (1.0 - np.cos(angle_rad)) * Kx @ Kx


def intrinsics(H, W, focal=None):
    f = float(W if focal is None else focal)
    return np.array([[f, 0.0, (W - 1) / 2.0], [0.0, f, (H - 1) / 2.0], [0.0, 0.0, 1.0]])


def homogeneous(pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return np.concatenate([pts, np.ones((len(pts), 1))], axis=1)


def normalize_frobenius(F):
    F = np.asarray(F, dtype=np.float64)
    n = np.linalg.norm(F)
    if n == 0:
        raise DegenerateConfiguration("zero matrix has no direction")
    return F / n


def fundamental_from_pose(K1, K2, R, t):
    """F with ``p2^T F p1 = 0`` for ``X2 = R X1 + t``; unit Frobenius norm."""
    E = skew(t) @ R
    F = np.linalg.inv(K2).T @ E @ np.linalg.inv(K1)
    return normalize_frobenius(F)


def align_sign(F, ref):
    """Flip ``F`` to the sign closest to ``ref`` (both unit Frobenius)."""
    return F if np.sum(F * ref) >= 0 else -F


def fundamental_distance(F, ref):
    """min over sign of ||F/|F| - ref/|ref|||_F."""
    a, b = normalize_frobenius(F), normalize_frobenius(ref)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Surface:
    """Height field ``Z = h(X, Y)`` in the camera-1 frame."""

    profile: str
    d0: float
    gx: float = 0.0
    gy: float = 0.0
    bumps: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # (x, y, amp, sigma)

    def height(self, X, Y):
        h = self.d0 + self.gx * X + self.gy * Y
        for bx, by, amp, sig in self.bumps:
            h = h + amp * np.exp(-((X - bx) ** 2 + (Y - by) ** 2) / (2.0 * sig * sig))
        return h

    def plane(self):
        """``(n, d)`` with ``n . X = d`` when the profile is planar."""
        if self.profile != "plane":
            raise ValueError("surface is not planar")
        return np.array([-self.gx, -self.gy, 1.0]), self.d0

    def intersect(self, origin, dirs, s_max=60.0, steps=240):
        """Ray parameter of the first surface hit, NaN if none (rays ``o + s d``)."""
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        if self.profile == "plane" or len(self.bumps) == 0:
            n, dd = np.array([-self.gx, -self.gy, 1.0]), self.d0
            denom = d @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (dd - o @ n) / denom
            s = np.where((np.abs(denom) > 1e-12) & (s > 1e-9) & (s < s_max), s, np.nan)
            return s

        def g(s):
            P = o[None, :] + s[:, None] * d
            return P[:, 2] - self.height(P[:, 0], P[:, 1])

        n = len(d)
        grid = np.linspace(1e-3, s_max, steps)
        prev_s = np.full(n, grid[0])
        prev_g = g(prev_s)
        lo = np.full(n, np.nan)
        hi = np.full(n, np.nan)
        found = prev_g >= 0  # starting behind the surface: invalid
        lo[found] = np.nan
        done = found.copy()
        for s_val in grid[1:]:
            cur_s = np.full(n, s_val)
            cur_g = g(cur_s)
            cross = (~done) & (prev_g < 0) & (cur_g >= 0)
            lo[cross] = prev_s[cross]
            hi[cross] = cur_s[cross]
            done |= cross
            prev_s, prev_g = cur_s, cur_g
            if done.all():
                break
        ok = np.isfinite(lo)
        a, b = lo[ok], hi[ok]
        oo = o[None, :]
        dk = d[ok]
        for _ in range(64):
            m = 0.5 * (a + b)
            P = oo + m[:, None] * dk
            gm = P[:, 2] - self.height(P[:, 0], P[:, 1])
            left = gm < 0
            a = np.where(left, m, a)
            b = np.where(left, b, m)
        s = np.full(n, np.nan)
        s[ok] = 0.5 * (a + b)
        return s


@dataclass
class Texture:
    """Procedural colour field on world (X, Y): Gaussian blobs over a gradient."""

    blobs: np.ndarray  # (n, 6): x, y, sigma, r, g, b
    base: np.ndarray  # (3,)
    grad: np.ndarray  # (3, 2)

    def colour(self, X, Y):
        out = self.base[None, :] + np.stack([X, Y], axis=-1) @ self.grad.T
        for bx, by, sig, r, g, b in self.blobs:
            w = np.exp(-((X - bx) ** 2 + (Y - by) ** 2) / (2.0 * sig * sig))
            out = out + w[:, None] * np.array([r, g, b])
        return np.clip(out, 0.0, 1.0)


SCENE_DEFAULTS = {
    "height": 64,
    "width": 64,
    "profile": "plane",
    "depth": 4.0,
    "baseline": 0.3,
    "rotation_deg": 5.0,
    "tilt": 0.15,
    "direction": None,  # unit translation direction, random if None
    "axis": None,  # rotation axis, random if None
    "blobs": 400,
    "blob_size": 0.025,  # mean blob sigma as a fraction of depth
    "pose_eval": False,
}


@dataclass
class ScenePair:
    K1: np.ndarray
    K2: np.ndarray
    R: np.ndarray
    t: np.ndarray  # unit direction
    baseline: float
    surface: Surface
    texture: Texture
    size: tuple  # (H, W)
    seed: int = 0
    params: dict = field(default_factory=dict)
    valid1: np.ndarray = None
    valid2: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        H, W = self.size
        if self.valid1 is None:
            self.valid1 = np.ones((H, W), dtype=bool)
        if self.valid2 is None:
            self.valid2 = np.ones((H, W), dtype=bool)

    @property
    def translation(self):
        return self.baseline * self.t

    def camera(self, view):
        """``(K, origin, to_world)``: rays are ``origin + s * to_world @ K^-1 p``."""
        if view == 1:
            return self.K1, np.zeros(3), np.eye(3)
        return self.K2, -self.R.T @ self.translation, self.R.T

    def depth_at(self, view, pts):
        """Analytic depth of sub-pixel points in ``view``; NaN where invalid."""
        K, origin, to_world = self.camera(view)
        ph = homogeneous(pts)
        rays = (to_world @ (np.linalg.inv(K) @ ph.T)).T
        s = self.surface.intersect(origin, rays)
        H, W = self.size
        mask = self.valid1 if view == 1 else self.valid2
        xi = np.clip(np.rint(ph[:, 0]), 0, W - 1).astype(int)
        yi = np.clip(np.rint(ph[:, 1]), 0, H - 1).astype(int)
        return np.where(mask[yi, xi], s, np.nan)

    def grid(self):
        H, W = self.size
        ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)

    def depth(self, view):
        key = ("depth", view)
        if key not in self._cache:
            H, W = self.size
            d = self.depth_at(view, self.grid()).reshape(H, W)
            self._cache[key] = np.where(np.isfinite(d), d, 0.0)
        return self._cache[key]

    def image(self, view):
        key = ("image", view)
        if key not in self._cache:
            H, W = self.size
            pts = self.grid()
            z = self.depth_at(view, pts)
            K, origin, to_world = self.camera(view)
            rays = (to_world @ (np.linalg.inv(K) @ homogeneous(pts).T)).T
            ok = np.isfinite(z)
            P = origin[None, :] + np.where(ok, z, 0.0)[:, None] * rays
            col = self.texture.colour(P[:, 0], P[:, 1])
            col[~ok] = 0.0
            self._cache[key] = col.reshape(H, W, 3)
        return self._cache[key]

    @property
    def image1(self):
        return self.image(1)

    @property
    def image2(self):
        return self.image(2)

    @property
    def depth1(self):
        return self.depth(1)

    @property
    def depth2(self):
        return self.depth(2)

    def fundamental(self):
        return fundamental_from_pose(self.K1, self.K2, self.R, self.translation)

    def plane_homography(self):
        """Homography from image 1 to image 2 induced by a planar surface."""
        n, d = self.surface.plane()
        Hm = self.K2 @ (self.R + np.outer(self.translation, n) / d) @ np.linalg.inv(self.K1)
        return Hm / Hm[2, 2]


def _unit(rng, v=None):
    if v is None:
        v = rng.normal(size=3)
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def synth_scene(seed, params=None):
    """Deterministic two-view scene for ``seed`` and optional parameter overrides.

    ``profile`` is ``plane``, ``ridge`` or ``cloud``.  ``baseline`` is the
    camera-centre distance; ``rotation_deg`` the relative rotation angle.
    """
    p = dict(SCENE_DEFAULTS)
    p.update(params or {})
    H, W = int(p["height"]), int(p["width"])
    if H % 64 or W % 64 or H <= 0 or W <= 0:
        raise ValueError("scene extents must be positive multiples of 64")
    if p["profile"] not in ("plane", "ridge", "cloud"):
        raise ValueError(f"unknown depth profile {p['profile']!r}")
    rng = np.random.default_rng(seed)
    d0 = float(p["depth"])
    tilt = float(p["tilt"])
    gx, gy = (rng.uniform(-tilt, tilt, size=2) if tilt > 0 else (0.0, 0.0))
    bumps = np.zeros((0, 4))
    extent = d0 * 0.6
    if p["profile"] == "ridge":
        # a long ridge approximated by a row of overlapping bumps along Y
        x0 = rng.uniform(-0.3, 0.3) * extent
        amp = -rng.uniform(0.3, 0.6) * d0 * 0.25
        ys = np.linspace(-3 * extent, 3 * extent, 25)
        bumps = np.array([[x0, y, amp, 0.35 * extent] for y in ys])
    elif p["profile"] == "cloud":
        n = 6
        bumps = np.column_stack([
            rng.uniform(-extent, extent, n), rng.uniform(-extent, extent, n),
            -rng.uniform(0.05, 0.2, n) * d0, rng.uniform(0.2, 0.4, n) * extent,
        ])
    surface = Surface(p["profile"], d0, float(gx), float(gy), bumps)

    nb = int(p["blobs"])
    span = 2.5 * extent
    blobs = np.column_stack([
        rng.uniform(-span, span, nb), rng.uniform(-span, span, nb),
        rng.uniform(0.5, 1.5, nb) * float(p["blob_size"]) * d0,
        rng.uniform(-0.6, 0.6, (nb, 3)),
    ])
    texture = Texture(blobs, rng.uniform(0.3, 0.7, 3), rng.uniform(-0.05, 0.05, (3, 2)))

    axis = _unit(rng, p["axis"])
    R = rotation_about(axis, np.deg2rad(float(p["rotation_deg"])))
    t = _unit(rng, p["direction"])
    baseline = float(p["baseline"])
    K = intrinsics(H, W)
    if p.get("pose_eval") and baseline == 0:
        raise ValueError("pose-evaluation scenes need a non-zero baseline")
    stored = {k: (list(v) if isinstance(v, (tuple, np.ndarray)) else v) for k, v in p.items()}
    return ScenePair(K, K.copy(), R, t, baseline, surface, texture, (H, W), int(seed), stored)


# ---------------------------------------------------------------------------
# warping and ground truth


def warp_points(pts, scene, direction=(1, 2)):
    """Warp points between views.  Returns ``(warped (n, 2), valid (n,) bool)``."""
    src, dst = direction
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    H, W = scene.size
    z = scene.depth_at(src, pts)
    K_s, o_s, tw_s = scene.camera(src)
    K_d, o_d, tw_d = scene.camera(dst)
    rays = (tw_s @ (np.linalg.inv(K_s) @ homogeneous(pts).T)).T
    ok = np.isfinite(z) & (z > 0)
    Xw = o_s[None, :] + np.where(ok, z, 0.0)[:, None] * rays
    Xd = (tw_d.T @ (Xw - o_d[None, :]).T).T  # into destination camera frame
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = (K_d @ Xd.T).T
        uv = proj[:, :2] / proj[:, 2:3]
    ok &= Xd[:, 2] > 1e-9
    tol = 1e-9  # border pixels must survive round-off
    ok &= (uv[:, 0] >= -tol) & (uv[:, 0] <= W - 1 + tol) & (uv[:, 1] >= -tol) & (uv[:, 1] <= H - 1 + tol)
    uv = np.where(ok[:, None], np.clip(uv, 0.0, [W - 1.0, H - 1.0]), np.nan)
    return uv, ok


def consistent_mask(pts, scene, direction=(1, 2), tol=0.5):
    """Forward warp valid and the round trip returns within ``tol`` pixels."""
    fwd, ok = warp_points(pts, scene, direction)
    back, ok2 = warp_points(np.where(ok[:, None], fwd, 0.0), scene, direction[::-1])
    ok &= ok2
    err = np.linalg.norm(back - pts, axis=1)
    return ok & (err <= tol), fwd


class GroundTruthMatches(NamedTuple):
    m_gt: np.ndarray  # (N, 4): x1, y1, x2, y2
    complete: bool
    scene_seed: int


def gt_correspondences(scene, count, seed=None):
    """Sample ``count`` bidirectionally consistent pixel correspondences."""
    pts = scene.grid()
    ok, fwd = consistent_mask(pts, scene)
    idx = np.flatnonzero(ok)
    rng = np.random.default_rng(scene.seed if seed is None else seed)
    complete = len(idx) >= count
    if complete:
        idx = np.sort(rng.choice(idx, size=count, replace=False))
    rows = np.concatenate([pts[idx], fwd[idx]], axis=1) if len(idx) else np.zeros((0, 4))
    return GroundTruthMatches(rows, complete, scene.seed)


def overlap_count(scene, direction=(1, 2)):
    """Number of source pixels with a valid, round-trip consistent warp."""
    ok, _ = consistent_mask(scene.grid(), scene, direction)
    return int(ok.sum())


# ---------------------------------------------------------------------------
# scene archives


def save_scene(directory, scene):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in (("image1", scene.image1), ("image2", scene.image2),
                      ("depth1", scene.depth1), ("depth2", scene.depth2)):
        dten.write(d / f"{name}.dten", arr)
    meta = {
        "seed": scene.seed, "params": scene.params,
        "K1": scene.K1.tolist(), "K2": scene.K2.tolist(),
        "R": scene.R.tolist(), "t": scene.t.tolist(), "baseline": scene.baseline,
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_scene(directory):
    """Rebuild a scene from its archive (seed + params regenerate the surface)."""
    meta = json.loads((Path(directory) / "scene.json").read_text())
    scene = synth_scene(meta["seed"], meta["params"])
    if not np.allclose(scene.R, np.array(meta["R"])):
        raise ValueError("archive pose does not match its seed/params")
    return scene


# ---------------------------------------------------------------------------
# fundamental matrix


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if not d > 1e-12:
        raise DegenerateConfiguration("points are coincident")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def eight_point(pts1, pts2):
    """Normalised eight-point F: rank 2, unit Frobenius norm."""
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    if len(pts1) != len(pts2):
        raise ValueError("point sets differ in length")
    if len(pts1) < 8:
        raise ValueError(f"eight-point needs >= 8 correspondences, got {len(pts1)}")
    T1, T2 = _hartley(pts1), _hartley(pts2)
    x1 = (T1 @ homogeneous(pts1).T).T
    x2 = (T2 @ homogeneous(pts2).T).T
    A = np.einsum("ni,nj->nij", x2, x1).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A)
    # planar or pure-rotation data leave a 3-dim null space whose members all
    # fit the data; only rank < 6 (collinear, repeated points) is rejected
    if len(s) < 6 or s[5] < 1e-9 * s[0]:
        raise DegenerateConfiguration("correspondences do not determine F")
    F = Vt[-1].reshape(3, 3)
    U, S, Vt2 = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt2
    F = T2.T @ F @ T1
    F = normalize_frobenius(F)
    # fixed sign convention so repeated solves agree exactly
    k = np.argmax(np.abs(F.ravel()))
    return F if F.ravel()[k] > 0 else -F


def estimate_fundamental(matches):
    """Eight-point F from a :class:`~rddlite.matcher.MatchSet` or (n, 4) array."""
    pts1, pts2 = _split_pairs(matches)
    return eight_point(pts1, pts2)


def _split_pairs(matches):
    if hasattr(matches, "pts1"):
        return matches.pts1, matches.pts2
    a = np.asarray(matches, dtype=np.float64).reshape(-1, 4)
    return a[:, :2], a[:, 2:]


def epipolar_lines(F, pts):
    """Homogeneous lines ``F p`` for each point, (n, 3), unnormalised."""
    return (np.asarray(F, dtype=np.float64) @ homogeneous(pts).T).T


def point_line_distance(lines, pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    num = np.abs(lines[:, 0] * pts[:, 0] + lines[:, 1] * pts[:, 1] + lines[:, 2])
    return num / np.hypot(lines[:, 0], lines[:, 1])


def symmetric_epipolar_distance(F, pts1, pts2):
    """sqrt of the mean squared point-to-epipolar-line distance in both images."""
    d2 = point_line_distance(epipolar_lines(F, pts1), pts2)
    d1 = point_line_distance(epipolar_lines(np.asarray(F).T, pts2), pts1)
    return np.sqrt(0.5 * (d1 ** 2 + d2 ** 2))


def algebraic_residual(F, pts1, pts2):
    return np.abs(np.einsum("ni,ij,nj->n", homogeneous(pts2), F, homogeneous(pts1)))


def ransac_fundamental(matches, iters=500, inlier_thresh=1.0, seed=0):
    """RANSAC over minimal 8-samples, refit on the consensus set.

    Iteration ``i`` draws from ``default_rng([seed, i])`` so the result does
    not depend on evaluation order.  Returns ``(F, inlier_mask)``.
    """
    pts1, pts2 = _split_pairs(matches)
    n = len(pts1)
    if n < 8:
        raise ValueError(f"RANSAC needs >= 8 correspondences, got {n}")
    best_mask, best_key = None, None
    for i in range(iters):
        rng = np.random.default_rng([seed, i])
        sample = rng.choice(n, size=8, replace=False)
        try:
            F = eight_point(pts1[sample], pts2[sample])
        except DegenerateConfiguration:
            continue
        res = symmetric_epipolar_distance(F, pts1, pts2)
        mask = res <= inlier_thresh
        key = (int(mask.sum()), -float(np.mean(np.minimum(res, inlier_thresh))))
        if best_key is None or key > best_key:
            best_key, best_mask = key, mask
    if best_mask is None or best_mask.sum() < 8:
        raise DegenerateConfiguration("no non-degenerate minimal sample found")
    F = eight_point(pts1[best_mask], pts2[best_mask])
    mask = symmetric_epipolar_distance(F, pts1, pts2) <= inlier_thresh
    if mask.sum() >= best_mask.sum() and mask.sum() >= 8 and not np.array_equal(mask, best_mask):
        F = eight_point(pts1[mask], pts2[mask])
        mask = symmetric_epipolar_distance(F, pts1, pts2) <= inlier_thresh
    return F, mask


# ---------------------------------------------------------------------------
# homography (used for the pure-rotation check and MHA)


def fit_homography(pts1, pts2):
    """Normalised DLT homography mapping pts1 -> pts2, ``H[2, 2] = 1``."""
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    if len(pts1) < 4:
        raise ValueError("homography needs >= 4 correspondences")
    T1, T2 = _hartley(pts1), _hartley(pts2)
    x1 = (T1 @ homogeneous(pts1).T).T
    x2 = (T2 @ homogeneous(pts2).T).T
    rows = []
    for (u, v, w), (x, y, z) in zip(x1, x2):
        rows.append([0, 0, 0, -z * u, -z * v, -z * w, y * u, y * v, y * w])
        rows.append([z * u, z * v, z * w, 0, 0, 0, -x * u, -x * v, -x * w])
    _, _, Vt = np.linalg.svd(np.asarray(rows))
    Hn = Vt[-1].reshape(3, 3)
    Hm = np.linalg.inv(T2) @ Hn @ T1
    return Hm / Hm[2, 2]


def apply_homography(Hm, pts):
    p = (np.asarray(Hm) @ homogeneous(pts).T).T
    return p[:, :2] / p[:, 2:3]


def ransac_homography(matches, iters=500, inlier_thresh=3.0, seed=0):
    """4-point RANSAC homography with a DLT refit; returns ``(H, inlier_mask)``."""
    pts1, pts2 = _split_pairs(matches)
    n = len(pts1)
    if n < 4:
        raise ValueError(f"homography RANSAC needs >= 4 correspondences, got {n}")
    best_mask, best_count = None, -1
    for i in range(iters):
        rng = np.random.default_rng([seed, i])
        sample = rng.choice(n, size=4, replace=False)
        try:
            with np.errstate(all="ignore"):
                Hm = fit_homography(pts1[sample], pts2[sample])
                err = np.linalg.norm(apply_homography(Hm, pts1) - pts2, axis=1)
        except (DegenerateConfiguration, np.linalg.LinAlgError, ValueError):
            continue
        mask = np.nan_to_num(err, nan=np.inf) <= inlier_thresh
        if mask.sum() > best_count:
            best_count, best_mask = int(mask.sum()), mask
    if best_mask is None or best_count < 4:
        raise DegenerateConfiguration("no homography consensus")
    Hm = fit_homography(pts1[best_mask], pts2[best_mask])
    return Hm, best_mask


# ---------------------------------------------------------------------------
# pose


class RelativePose(NamedTuple):
    R: np.ndarray
    t: np.ndarray  # unit direction, zeros when unrecoverable
    translation_ok: bool


def pose_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Wm = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ Wm @ Vt
    R2 = U @ Wm.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate(R, t, x1n, x2n):
    """Linear triangulation in normalised coordinates; returns (n, 3) in camera 1."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    out = np.empty((len(x1n), 3))
    for i, (a, b) in enumerate(zip(x1n, x2n)):
        A = np.stack([a[0] * P1[2] - P1[0], a[1] * P1[2] - P1[1],
                      b[0] * P2[2] - P2[0], b[1] * P2[2] - P2[1]])
        X = np.linalg.svd(A)[2][-1]
        out[i] = X[:3] / X[3] if abs(X[3]) > 1e-15 else np.array([np.nan] * 3)
    return out


def cheirality_count(R, t, x1n, x2n):
    X = triangulate(R, t, x1n, x2n)
    z1 = X[:, 2]
    z2 = (X @ R.T + t)[:, 2]
    return int(np.sum((z1 > 0) & (z2 > 0)))


def _to_normalized(K, pts):
    return (np.linalg.inv(K) @ homogeneous(pts).T).T[:, :2]


def _nearest_rotation(M):
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def _pure_rotation(K1, K2, pts1, pts2, px_tol=0.5, sv_tol=2e-3):
    """Rotation if the matches are explained by ``K2 R K1^-1``, else None."""
    if len(pts1) < 4:
        return None
    try:
        Hm = fit_homography(pts1, pts2)
    except (ValueError, DegenerateConfiguration, np.linalg.LinAlgError):
        return None
    if np.max(np.linalg.norm(apply_homography(Hm, pts1) - pts2, axis=1)) > px_tol:
        return None
    M = np.linalg.inv(K2) @ Hm @ K1
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] / s[2] - 1.0 > sv_tol:
        return None
    return _nearest_rotation(M / np.cbrt(np.linalg.det(M)))


def recover_pose(F, K1, K2, matches):
    """Relative pose from F and inlier matches via E and a cheirality vote.

    When the matches are consistent with a pure rotation the translation is
    reported as unrecoverable (``translation_ok=False``) and R comes from the
    infinite homography.
    """
    pts1, pts2 = _split_pairs(matches)
    R_rot = _pure_rotation(K1, K2, pts1, pts2)
    if R_rot is not None:
        return RelativePose(R_rot, np.zeros(3), False)
    E = K2.T @ np.asarray(F, dtype=np.float64) @ K1
    x1n, x2n = _to_normalized(K1, pts1), _to_normalized(K2, pts2)
    counts = [cheirality_count(R, t, x1n, x2n) for R, t in pose_candidates(E)]
    best = int(np.argmax(counts))
    if counts[best] == 0:
        raise DegenerateConfiguration("no pose candidate passes cheirality")
    R, t = pose_candidates(E)[best]
    return RelativePose(R, t / np.linalg.norm(t), True)


def rotation_error_deg(R_est, R_gt):
    c = (np.trace(R_est.T @ R_gt) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error_deg(t_est, t_gt):
    """Angle between directions, folded into [0, 90] for the sign ambiguity of E."""
    n = np.linalg.norm(t_est) * np.linalg.norm(t_gt)
    if n == 0:
        return float("inf")
    c = np.clip(np.dot(t_est, t_gt) / n, -1.0, 1.0)
    e = float(np.degrees(np.arccos(c)))
    return min(e, 180.0 - e)


class PoseError(NamedTuple):
    rotation: float
    translation: float

    @property
    def combined(self):
        return max(self.rotation, self.translation)


def pose_error(pose, R_gt, t_gt):
    return PoseError(rotation_error_deg(pose.R, R_gt), translation_error_deg(pose.t, t_gt))


# ---------------------------------------------------------------------------
# metrics


def pose_auc(errors, thresholds=(5, 10, 20)):
    """Area under the recall-vs-error curve on ``[0, T]``, divided by ``T``.

    The recall curve is the piecewise-linear interpolation of the points
    ``(0, 0), (e_1, 1/n), ..., (e_n, 1)`` over the sorted errors, held at
    ``1`` after the largest error; failures are ``inf``.  Integration is the
    exact trapezoid of that curve truncated at ``T``.
    """
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise ValueError("pose_auc needs at least one error value")
    if np.any(errors < 0) or np.any(np.isnan(errors)):
        raise ValueError("errors must be non-negative")
    e = np.sort(errors)
    n = len(e)
    xs = np.concatenate([[0.0], e])
    ys = np.concatenate([[0.0], np.arange(1, n + 1) / n])
    finite = np.isfinite(xs)
    xs, ys = xs[finite], ys[finite]
    out = []
    for T in thresholds:
        T = float(T)
        inside = xs <= T
        cx, cy = xs[inside], ys[inside]
        if len(cx) < len(xs):
            j = len(cx)  # first point beyond T, interpolate the crossing
            x0, y0, x1, y1 = xs[j - 1], ys[j - 1], xs[j], ys[j]
            yT = y0 + (y1 - y0) * (T - x0) / (x1 - x0) if x1 > x0 else y1
        else:
            yT = cy[-1]
        cx = np.concatenate([cx, [T]])
        cy = np.concatenate([cy, [yT]])
        out.append(float(np.sum(0.5 * (cy[1:] + cy[:-1]) * np.diff(cx)) / T))
    return out


def corner_error(H_est, H_gt, width, height):
    """Mean corner displacement between two homographies; inf if H_est is singular."""
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0],
                        [0.0, height - 1.0]])
    H_est = np.asarray(H_est, dtype=np.float64)
    if not np.all(np.isfinite(H_est)) or abs(np.linalg.det(H_est)) < 1e-12 * max(
            1.0, np.abs(H_est).max() ** 3):
        return float("inf")
    a = apply_homography(H_est, corners)
    b = apply_homography(H_gt, corners)
    if not np.all(np.isfinite(a)):
        return float("inf")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def homography_mha(corner_errors, thresholds=(3, 5, 10)):
    """Fraction of pairs whose mean corner error is <= each threshold."""
    e = np.asarray(list(corner_errors), dtype=np.float64)
    if e.size == 0:
        raise ValueError("no corner errors")
    return [float(np.mean(e <= T)) for T in thresholds]
