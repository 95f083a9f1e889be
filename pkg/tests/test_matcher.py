import json

import numpy as np
import pytest

from oracles import dual_softmax_direct, mnn_brute, project_point_to_line
from rddlite import geometry
from rddlite.descriptors import DescriptorNet, DescriptorNetConfig
from rddlite.keypoints import KeypointNet, KeypointNetConfig
from rddlite.matcher import (MatchConfig, MatchSet, Weights, dual_softmax, epipolar_lines,
                             estimate_fundamental, match_semi_dense, match_sparse, mnn_filter,
                             patch_centers, project_to_lines, refine_semi_dense, score_matrix,
                             topk_coarse)


def unit_rows(rng, n, c):
    d = rng.normal(size=(n, c))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# score matrix and dual softmax

def test_score_matrix_examples():
    e = np.array([[1.0, 0.0]])
    assert score_matrix(e, e, 1.0).data.tolist() == [[1.0]]
    assert np.all(score_matrix(np.eye(2)[:1], np.eye(2)[1:], 0.5).data == 0)


def test_score_matrix_loop_oracle():
    rng = np.random.default_rng(0)
    d1, d2 = unit_rows(rng, 5, 8), unit_rows(rng, 7, 8)
    S = score_matrix(d1, d2, 0.1).data
    for i in range(5):
        for j in range(7):
            assert abs(S[i, j] - sum(d1[i, c] * d2[j, c] for c in range(8)) / 0.1) < 1e-12


def test_score_matrix_rejects_bad_tau():
    with pytest.raises(ValueError):
        score_matrix(np.ones((1, 1)), np.ones((1, 1)), 0.0)


def test_dual_softmax_examples():
    assert dual_softmax(np.array([[3.0]])).data.tolist() == [[1.0]]
    P = dual_softmax(np.array([[10.0, 0.0], [0.0, 10.0]])).data
    assert P[0, 0] >= 0.99 and P[1, 1] >= 0.99


def test_dual_softmax_direct_oracle():
    S = np.random.default_rng(1).normal(size=(4, 4)) * 3
    np.testing.assert_allclose(dual_softmax(S).data, dual_softmax_direct(S), atol=1e-12)


# mutual nearest neighbours

def test_mnn_examples():
    i, j, c = mnn_filter(np.array([[0.9, 0.0], [0.0, 0.8]]), 0.01)
    assert list(zip(i, j)) == [(0, 0), (1, 1)]
    assert len(mnn_filter(np.full((4, 5), 1 / 20), 0.06)[0]) == 0


def test_mnn_ties_go_to_smaller_index():
    i, j, _ = mnn_filter(np.array([[0.5, 0.5], [0.5, 0.5]]), 0.0)
    assert list(zip(i, j)) == [(0, 0)]


@pytest.mark.parametrize("seed", range(5))
def test_mnn_brute_force(seed):
    P = np.random.default_rng(seed).uniform(size=(20, 20)) ** 4
    i, j, _ = mnn_filter(P, 0.01)
    assert list(zip(i.tolist(), j.tolist())) == mnn_brute(P, 0.01)


def test_mnn_threshold_range():
    with pytest.raises(ValueError):
        mnn_filter(np.ones((2, 2)), 1.0)


# coarse points

def test_topk_coarse_examples():
    M = np.zeros((4, 4))
    M[2, 1] = 1.0
    centers, cells = topk_coarse(M, 1, 4)
    assert cells.tolist() == [[1, 2]] and centers.tolist() == [[5.5, 9.5]]
    assert len(topk_coarse(M, 100, 4)[0]) == 16


def test_topk_coarse_sort_oracle():
    M = np.round(np.random.default_rng(2).uniform(size=(16, 16)), 2)
    _, cells = topk_coarse(M, 50, 4)
    ref = sorted(((-M[r, c], r, c) for r in range(16) for c in range(16)))[:50]
    assert [(r, c) for _, r, c in ref] == [(y, x) for x, y in cells.tolist()]


def test_patch_centre_convention():
    assert patch_centers([[0, 0]], 4).tolist() == [[1.5, 1.5]]


# fundamental and lines

def scene_points(seed, n=20, **params):
    s = geometry.synth_scene(seed, {"profile": "cloud", **params})
    gt = geometry.gt_correspondences(s, n, seed)
    return s, gt.m_gt


def test_estimate_fundamental_clean_points():
    s, m = scene_points(3)
    F = estimate_fundamental(m)
    assert np.max(geometry.symmetric_epipolar_distance(F, m[:, :2], m[:, 2:])) <= 1e-6
    assert abs(np.linalg.norm(F) - 1) < 1e-9 and abs(np.linalg.det(F)) < 1e-8


def test_pure_translation_gives_skew_fundamental():
    s, m = scene_points(4, rotation_deg=0.0)
    F = estimate_fundamental(m)
    Fn = np.linalg.inv(s.K2).T @ geometry.skew(s.t) @ np.linalg.inv(s.K1)
    assert geometry.fundamental_distance(F, geometry.normalize_frobenius(Fn)) < 1e-6


def test_seven_matches_rejected():
    _, m = scene_points(5)
    with pytest.raises(ValueError):
        estimate_fundamental(m[:7])


def test_epipolar_lines():
    F = np.arange(9.0).reshape(3, 3)
    np.testing.assert_allclose(epipolar_lines(F, [[0.0, 0.0]])[0], F[:, 2])
    np.testing.assert_allclose(epipolar_lines(2 * F, [[1.0, 2.0]]), 2 * epipolar_lines(F, [[1.0, 2.0]]))
    rng = np.random.default_rng(6)
    G, pts = rng.normal(size=(3, 3)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(epipolar_lines(G, pts), [G @ [x, y, 1] for x, y in pts], atol=1e-12)


# refinement

def coarse_set(p1, p2):
    return MatchSet(p1, p2, np.ones(len(p1)), "coarse")


def line_F(a, b, c):
    """F whose epipolar line for (0, 0) is (a, b, c)."""
    F = np.zeros((3, 3))
    F[:, 2] = [a, b, c]
    return F


def test_horizontal_line_projection():
    F = line_F(0, 1, -2)
    out = refine_semi_dense(coarse_set([[0, 0]], [[3, 5]]), F, k=4)
    np.testing.assert_allclose(out.pts2, [[3, 2]], atol=1e-8)
    dropped = refine_semi_dense(coarse_set([[0, 0]], [[3, 5]]), F, k=2)
    assert len(dropped) == 0 and dropped.dropped_by_filter == 1


def test_point_on_line_is_fixed():
    out = refine_semi_dense(coarse_set([[0, 0]], [[3, 2]]), line_F(0, 1, -2), k=4)
    np.testing.assert_allclose(out.pts2, [[3, 2]], atol=1e-12)


def test_projection_oracle_and_residual():
    rng = np.random.default_rng(7)
    F = rng.normal(size=(3, 3))
    p1 = rng.uniform(0, 64, size=(50, 2))
    lines = epipolar_lines(F, p1)
    p2 = rng.uniform(0, 64, size=(50, 2))
    delta, _ = project_to_lines(lines, p2, eps=1e-15)
    for ln, p, d in zip(lines, p2, delta):
        fx, fy = project_point_to_line(ln, p)
        assert abs(p[0] + d[0] - fx) < 1e-9 and abs(p[1] + d[1] - fy) < 1e-9
    out = refine_semi_dense(coarse_set(p1, p2), F, k=4)
    for a, b in zip(out.pts1, out.pts2):
        ln = F @ [a[0], a[1], 1.0]
        assert abs(ln @ [b[0], b[1], 1.0]) <= 1e-6 * np.hypot(ln[0], ln[1])


def test_degenerate_line_dropped_and_counted():
    out = refine_semi_dense(coarse_set([[0, 0], [1, 0]], [[3, 2], [3, 2]]),
                            np.array([[0, 1, -3.0], [0, 0, 0], [0, 0, 1]]).T, k=4)
    assert out.dropped_degenerate == 1 and len(out) == 1


# pipelines

@pytest.fixture(scope="module")
def tiny_weights():
    return Weights(KeypointNet.init(KeypointNetConfig(width=4, seed=3)),
                   DescriptorNet.init(DescriptorNetConfig(num_layers=1, num_heads=2, num_points=2)))


def test_self_match_is_exact(tiny_weights):
    img = geometry.synth_scene(11).image1
    cfg = MatchConfig(top_k=64, det_threshold=0.0)
    m = match_sparse(img, img, tiny_weights, cfg)
    assert len(m) > 0
    assert np.max(np.abs(m.pts1 - m.pts2)) <= 0.5


def test_degraded_mode_equals_sparse(tiny_weights):
    img1 = np.random.default_rng(8).uniform(size=(64, 64, 3))
    img2 = np.random.default_rng(9).uniform(size=(64, 64, 3))
    cfg = MatchConfig(top_k=4, det_threshold=0.0)
    sd = match_semi_dense(img1, img2, tiny_weights, cfg)
    sp = match_sparse(img1, img2, tiny_weights, cfg)
    assert sd.degraded and sd.kind == "sparse"
    assert sd.to_report()["pairs"] == sp.to_report()["pairs"]


def test_match_report_json_is_rounded():
    m = MatchSet([[1 / 3, 0]], [[2, 0]], [0.5], "sparse")
    rep = json.loads(m.to_json())
    assert rep["pairs"] == [[0.333333, 0.0, 2.0, 0.0, 0.5]] and rep["degraded"] is False
