import math

import numpy as np
import pytest

from rddlite.losses import (LossWeights, focal_matching_loss, matchability_loss, peaky_loss,
                            rasterize_matchability, reliability_loss, reprojection_loss)
from rddlite.tensor import grad_check

HALF = 0.25 * 0.25 * math.log(2)


def shift(dx, dy=0.0):
    def warp(p):
        return p + [dx, dy], np.ones(len(p), dtype=bool)
    return warp


identity = shift(0.0)


# focal and matchability

def test_focal_examples():
    assert focal_matching_loss(np.ones(4)).item() == 0.0
    assert focal_matching_loss(np.full(3, 0.5)).item() == pytest.approx(HALF, abs=1e-12)
    assert HALF == pytest.approx(0.043322, abs=1e-6)


def test_focal_clamps_and_flags():
    info = {}
    v = focal_matching_loss(np.array([0.0, 1.0]), info=info).item()
    assert info["clamped"] and np.isfinite(v)


def test_focal_gradient():
    P = np.random.default_rng(0).uniform(0.05, 0.95, size=6)
    assert grad_check(lambda t: focal_matching_loss(t), P) <= 1e-5


def test_matchability_examples():
    gt = (np.random.default_rng(1).uniform(size=(4, 4)) > 0.5).astype(float)
    assert matchability_loss(gt, gt).item() <= 1e-10
    assert matchability_loss(np.full((3, 3), 0.5), np.ones((3, 3))).item() == \
        pytest.approx(HALF, abs=1e-12)


def test_matchability_gradient():
    rng = np.random.default_rng(2)
    M = rng.uniform(0.05, 0.95, size=(4, 4))
    gt = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    assert grad_check(lambda t: matchability_loss(t, gt), M) <= 1e-5


def test_rasterize_uses_cell_containing_point():
    g = rasterize_matchability([[5.5, 1.0], [-0.5, 15.4]], (4, 4), 4)
    assert g[0, 1] == 1 and g[3, 0] == 1 and g.sum() == 2


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(alpha=1.0)
    with pytest.raises(ValueError):
        LossWeights(t_rel=0.0)


# reprojection

def test_reprojection_zero_for_identical_sets():
    k = np.random.default_rng(3).uniform(0, 60, size=(10, 2))
    assert reprojection_loss(k, k.copy(), identity, identity).item() < 1e-11


def test_reprojection_single_offset_pair():
    v = reprojection_loss(np.array([[10.0, 10.0]]), np.array([[13.0, 10.0]]), identity, identity)
    assert v.item() == pytest.approx(3.0, abs=1e-12)


def brute_direction(src, dst, warp, radius):
    w, _ = warp(src)
    ds = []
    for p in w:
        best = min(dst, key=lambda q: math.dist(p, q))
        if math.dist(p, best) < radius:
            ds.append(math.dist(p, best))
    return ds


def test_reprojection_brute_force_oracle():
    rng = np.random.default_rng(4)
    k1 = rng.uniform(0, 40, size=(15, 2))
    k2 = k1 + [1.0, -0.5] + rng.normal(scale=1.5, size=k1.shape)
    w12, w21 = shift(1.0, -0.5), shift(-1.0, 0.5)
    a = brute_direction(k1, k2, w12, 5.0)
    b = brute_direction(k2, k1, w21, 5.0)
    ref = 0.5 * (np.mean(a) + np.mean(b))
    assert abs(reprojection_loss(k1, k2, w12, w21).item() - ref) < 1e-9


def test_reprojection_gradient_through_nonlinear_warp():
    def warp(p):
        return np.stack([p[:, 0] + 0.01 * p[:, 1] ** 2, 1.1 * p[:, 1]], 1), np.ones(len(p), bool)

    def inverse(p):
        y = p[:, 1] / 1.1
        return np.stack([p[:, 0] - 0.01 * y ** 2, y], 1), np.ones(len(p), bool)

    rng = np.random.default_rng(12)
    k1 = rng.uniform(2, 20, size=(6, 2))
    k2 = warp(k1)[0] + rng.normal(scale=1.0, size=k1.shape)
    assert grad_check(lambda t: reprojection_loss(t, k2, warp, inverse), k1) <= 1e-4


def test_reprojection_empty_flag():
    info = {}
    v = reprojection_loss(np.array([[0.0, 0.0]]), np.array([[50.0, 50.0]]), identity, identity,
                          info=info)
    assert v.item() == 0.0 and info["empty"]


def test_reprojection_gradient():
    rng = np.random.default_rng(5)
    k1 = rng.uniform(0, 20, size=(6, 2))
    k2 = k1 + rng.normal(scale=1.0, size=k1.shape)
    assert grad_check(lambda t: reprojection_loss(k1, t, identity, identity), k2) <= 1e-4


# reliability

def rel_setup(rng, n=6):
    k1 = rng.uniform(5, 25, size=(n, 2))
    k2 = k1.copy()
    P = rng.uniform(0.05, 1.0, size=(n, n))
    s1, s2 = rng.uniform(0.1, 1, size=n), rng.uniform(0.1, 1, size=n)
    S1, S2 = rng.uniform(0.1, 1, size=(32, 32)), rng.uniform(0.1, 1, size=(32, 32))
    return k1, k2, s1, s2, P, S1, S2


def test_reliability_zero_when_diagonal_is_one():
    k1, k2, s1, s2, P, S1, S2 = rel_setup(np.random.default_rng(6))
    np.fill_diagonal(P, 1.0)
    assert reliability_loss(k1, k2, s1, s2, P, identity, identity, S1, S2).item() == 0.0


def test_reliability_equal_r_gives_one_minus_r():
    k1, k2, s1, s2, P, S1, S2 = rel_setup(np.random.default_rng(7))
    np.fill_diagonal(P, 0.6)
    r = math.exp(-0.4)
    assert reliability_loss(k1, k2, s1, s2, P, identity, identity, S1, S2).item() == \
        pytest.approx(1 - r, abs=1e-12)


def bilinear(S, x, y):
    x0, y0 = int(x), int(y)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * S[y0, x0] + fx * (1 - fy) * S[y0, x0 + 1]
            + (1 - fx) * fy * S[y0 + 1, x0] + fx * fy * S[y0 + 1, x0 + 1])


def test_reliability_direct_evaluation():
    k1, k2, s1, s2, P, S1, S2 = rel_setup(np.random.default_rng(8))
    t = 0.7

    def one(P_, s_src, S_dst, pts):
        num = den = 0.0
        for i in range(len(pts)):
            w = s_src[i] * bilinear(S_dst, *pts[i])
            num += w * (1 - math.exp((P_[i, i] - 1) / t))
            den += w
        return num / den

    ref = 0.5 * (one(P, s1, S2, k1) + one(P.T, s2, S1, k2))
    got = reliability_loss(k1, k2, s1, s2, P, identity, identity, S1, S2, t_rel=t).item()
    assert abs(got - ref) < 1e-12
    scaled = reliability_loss(k1, k2, s1, s2, P, identity, identity, S1, S2, t_rel=t,
                              divide_by_pairs=True).item()
    assert abs(scaled - ref / len(k1)) < 1e-12


def test_reliability_gradient():
    k1, k2, s1, s2, P, S1, S2 = rel_setup(np.random.default_rng(9))
    assert grad_check(lambda t: reliability_loss(k1, k2, s1, s2, t, identity, identity, S1, S2),
                      P) <= 1e-4


# peaky

def test_peaky_uniform_3x3():
    S = np.zeros((7, 7))
    v = peaky_loss(S, [[3, 3]], N=3, t_det=0.1).item()
    # exact hand value 0.1192204; the commonly quoted 0.11921 is a mis-rounding
    assert v == pytest.approx((4 + 4 * math.sqrt(2)) / 81, abs=1e-12)


def test_peaky_one_hot_is_zero():
    S = np.zeros((9, 9))
    S[4, 4] = 1.0
    assert peaky_loss(S, [[4, 4]], N=5, t_det=1e-3).item() <= 1e-10


def test_peaky_skips_border_windows():
    info = {}
    peaky_loss(np.zeros((9, 9)), [[1, 1], [4, 4]], N=5, info=info)
    assert info["skipped"] == 1


def test_peaky_decreases_as_mass_concentrates():
    S = np.zeros((9, 9))
    vals = []
    for h in (0.0, 0.1, 0.3, 1.0):
        S[4, 4] = h
        vals.append(peaky_loss(S, [[4, 4]], N=5).item())
    assert vals == sorted(vals, reverse=True)


def test_peaky_gradient():
    S = np.random.default_rng(10).uniform(size=(9, 9))
    assert grad_check(lambda t: peaky_loss(t, [[4, 4], [3, 5]], N=5, t_det=0.1), S) <= 1e-4


def test_all_losses_nonnegative():
    rng = np.random.default_rng(11)
    assert focal_matching_loss(rng.uniform(0.01, 1, 5)).item() >= 0
    assert matchability_loss(rng.uniform(0.01, 0.99, (3, 3)), np.ones((3, 3))).item() >= 0
    assert peaky_loss(rng.uniform(size=(9, 9)), [[4, 4]]).item() >= 0
