import numpy as np
import pytest

from rddlite import training
from rddlite.descriptors import DescriptorNetConfig
from rddlite.keypoints import KeypointNetConfig
from rddlite.training import (LossCurve, TrainConfig, TrainingDiverged, random_positions,
                              toy_scenes, train_descriptor_branch, train_keypoint_branch)


def small(**kw):
    base = dict(steps=3, batch=1, gt_count=16, top_k=8, random_k=8,
                descriptor=DescriptorNetConfig(num_layers=1, num_heads=2, num_points=2),
                keypoint=KeypointNetConfig(width=4))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return toy_scenes(2, 5)


def test_zero_learning_rate_gives_constant_curve(scenes):
    cfg = small(lr=0.0, batch=2)
    _, curve = train_descriptor_branch(scenes, cfg)
    assert len(set(curve.totals.tolist())) == 1


def test_descriptor_curve_is_bit_identical(scenes):
    a = train_descriptor_branch(scenes, small())[1].to_csv()
    b = train_descriptor_branch(scenes, small())[1].to_csv()
    assert a == b


def test_resume_continues_the_schedule(scenes):
    full_net, full = train_descriptor_branch(scenes, small(steps=4))
    net, part = train_descriptor_branch(scenes, small(steps=2))
    net, part = train_descriptor_branch(scenes, small(steps=4), net, 2, part)
    assert [r[0] for r in part.rows] == [0, 1, 2, 3]
    assert part.to_csv() == full.to_csv()
    assert net.params.digest() == full_net.params.digest()


def test_keypoint_stage_leaves_descriptor_untouched(scenes):
    desc, _ = train_descriptor_branch(scenes, small(steps=1))
    before = desc.params.digest()
    kp, curve = train_keypoint_branch(scenes, desc, small(steps=2))
    assert desc.params.digest() == before
    assert all(np.isfinite(v) for row in curve.rows for v in row)
    assert all(t.requires_grad for _, t in desc.params.items())  # restored afterwards


def test_no_gradient_reaches_frozen_descriptor(scenes):
    desc, _ = train_descriptor_branch(scenes, small(steps=1))
    cfg = small()
    fields = training.frozen_fields(desc, scenes)
    kp = training.KeypointNet.init(cfg.keypoint)
    with training.GradTape() as tape:
        rep, rel, peak = training.keypoint_losses(kp, *fields[0], scenes[0],
                                                  np.random.default_rng(0), cfg)
        total = rep + rel + peak
    tape.backward(total)
    assert all(t.grad is None or not np.any(t.grad) for _, t in desc.params.items())
    assert any(t.grad is not None and np.any(t.grad) for _, t in kp.params.items())
    desc.params.set_trainable(True)


def test_divergence_reports_step(scenes):
    with pytest.raises(TrainingDiverged) as e, np.errstate(all="ignore"):
        train_descriptor_branch(scenes, small(steps=5, lr=1e308, clip_norm=1e308))
    assert e.value.stage == "descriptor" and e.value.step == 1


def test_random_positions_avoid_excluded_pixels():
    rng = np.random.default_rng(0)
    pts = random_positions(rng, (16, 16), 20, [(5, 5), (6, 6)], 2)
    assert len(pts) == 20 and len({tuple(p) for p in pts}) == 20
    assert not {(5, 5), (6, 6)} & {tuple(p) for p in pts.tolist()}
    assert pts.min() >= 2 and pts.max() <= 13


def test_loss_curve_csv_roundtrip():
    c = LossCurve(("loss_total", "a"))
    c.append(0, [0.1, 1 / 3])
    assert LossCurve.from_csv(c.to_csv()).rows == c.rows
    assert c.to_csv().splitlines()[0] == "step,loss_total,a"


def test_config_dict_roundtrip():
    cfg = small(seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.slow
def test_toy_reprojection_drops_by_thirty_percent():
    from toy import trained

    run = trained(0)
    rep = np.array([r[2] for r in run.keypoint_curve.rows])
    assert rep[-10:].mean() <= 0.7 * rep[:10].mean()
