"""Toy two-stage training: descriptor branch first, then keypoint branch with frozen descriptors."""
import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .descriptors import DescriptorNet, DescriptorNetConfig, sample_descriptors
from .keypoints import KeypointNet, KeypointNetConfig, dkd_refine_batch, nms_local_max, topk_order
from .losses import LossWeights, descriptor_losses, peaky_loss, reliability_loss, reprojection_loss
from .matcher import dual_softmax, score_matrix
from .tensor import GradTape, Tensor, bilinear_sample, reshape


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, stage):
        super().__init__(f"{stage} training diverged at step {step}: non-finite loss")
        self.step = step
        self.stage = stage


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 0.05
    batch: int = 2
    clip_norm: float = 1.0
    seed: int = 0
    gt_count: int = 64
    top_k: int = 32
    random_k: int = 32
    descriptor: DescriptorNetConfig = field(
        default_factory=lambda: DescriptorNetConfig(num_layers=2, num_heads=4, num_points=4))
    keypoint: KeypointNetConfig = field(default_factory=lambda: KeypointNetConfig(width=8))
    weights: LossWeights = field(default_factory=LossWeights)
    kp_lr: float = 0.05

    def to_dict(self):
        return {
            "steps": self.steps, "lr": self.lr, "batch": self.batch, "clip_norm": self.clip_norm,
            "seed": self.seed, "gt_count": self.gt_count, "top_k": self.top_k,
            "random_k": self.random_k, "kp_lr": self.kp_lr,
            "descriptor": self.descriptor.to_dict(),
            "keypoint": dict(self.keypoint.__dict__),
            "weights": dict(self.weights.__dict__),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["descriptor"] = DescriptorNetConfig.from_dict(d.get("descriptor", {}) or
                                                        DescriptorNetConfig().to_dict())
        d["keypoint"] = KeypointNetConfig(**d.get("keypoint", {}))
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass
class LossCurve:
    columns: tuple
    rows: list = field(default_factory=list)

    def append(self, step, values):
        self.rows.append((int(step), *[float(v) for v in values]))

    @property
    def totals(self):
        return np.array([r[1] for r in self.rows])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step",) + tuple(self.columns))
        for r in self.rows:
            w.writerow([r[0]] + [repr(v) for v in r[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        curve = cls(tuple(rows[0][1:]))
        for r in rows[1:]:
            curve.rows.append((int(r[0]), *[float(v) for v in r[1:]]))
        return curve


def toy_scene_params(index, size=64):
    """Mild, identity-adjacent two-view configurations for desk training."""
    profiles = ("plane", "ridge", "cloud")
    return {"height": size, "width": size, "profile": profiles[index % 3],
            "baseline": 0.15 + 0.05 * (index % 4), "rotation_deg": 2.0 + (index % 5)}


def toy_scenes(n, seed, size=64):
    return [geometry.synth_scene(seed * 1000 + i, toy_scene_params(i, size)) for i in range(n)]


def _step_rng(seed, step):
    return np.random.default_rng([seed, step, 7])


def _sgd(params, lr, clip_norm):
    grads = [(t, t.grad) for _, t in params.items() if t.grad is not None]
    norm = np.sqrt(sum(float(np.sum(g * g)) for _, g in grads))
    scale = min(1.0, clip_norm / norm) if norm > 0 else 1.0
    for t, g in grads:
        t.data -= lr * scale * g
    params.zero_grad()
    return norm


def _check(value, step, stage):
    if not np.isfinite(value):
        raise TrainingDiverged(step, stage)


@contextmanager
def _diverges_at(step, stage):
    """Report numeric blow-ups inside a forward pass as divergence at ``step``."""
    try:
        yield
    except TrainingDiverged:
        raise
    except FloatingPointError as e:
        raise TrainingDiverged(step, stage) from e


def _check_params(params, step, stage):
    """An update that leaves a non-finite weight counts as divergence at that step."""
    if not all(np.all(np.isfinite(t.data)) for _, t in params.items()):
        raise TrainingDiverged(step, stage)


def _batch(rng, n, size):
    return rng.choice(n, size=min(size, n), replace=False)


def descriptor_loss_on(net, scene, m_gt, weights):
    f1 = net.forward(scene.image1)
    f2 = net.forward(scene.image2)
    return descriptor_losses(f1, f2, m_gt, weights)


def evaluate_descriptor_loss(net, scenes, gts, weights):
    tot = 0.0
    for s, g in zip(scenes, gts):
        a, b = descriptor_loss_on(net, s, g, weights)
        tot += a.item() + b.item()
    return tot / len(scenes)


def train_descriptor_branch(scenes, config=None, net=None, start_step=0, curve=None):
    """Plain clipped gradient descent on ``L_focal + L_matchability``.

    Batches for step ``i`` come from an RNG seeded by ``(seed, i)`` so a
    resumed run continues the same schedule.
    """
    config = config or TrainConfig()
    net = net or DescriptorNet.init(replace(config.descriptor, seed=config.seed))
    curve = curve or LossCurve(("loss_total", "loss_focal", "loss_matchability"))
    gts = [geometry.gt_correspondences(s, config.gt_count).m_gt for s in scenes]
    for step in range(start_step, config.steps):
        idx = _batch(_step_rng(config.seed, step), len(scenes), config.batch)
        with GradTape() as tape, _diverges_at(step, "descriptor"):
            focal = matchab = None
            for i in idx:
                a, b = descriptor_loss_on(net, scenes[i], gts[i], config.weights)
                focal = a if focal is None else focal + a
                matchab = b if matchab is None else matchab + b
            focal = focal * (1.0 / len(idx))
            matchab = matchab * (1.0 / len(idx))
            total = focal + matchab
        _check(total.item(), step, "descriptor")
        tape.backward(total)
        _sgd(net.params, config.lr, config.clip_norm)
        _check_params(net.params, step, "descriptor")
        curve.append(step, (total.item(), focal.item(), matchab.item()))
    return net, curve


def random_positions(rng, shape, count, exclude, margin):
    """``count`` distinct interior pixels not in ``exclude`` (x, y)."""
    H, W = shape
    taken = {(int(x), int(y)) for x, y in exclude}
    cand = [(x, y) for y in range(margin, H - margin) for x in range(margin, W - margin)
            if (x, y) not in taken]
    if not cand:
        return np.zeros((0, 2), dtype=np.int64)
    pick = rng.choice(len(cand), size=min(count, len(cand)), replace=False)
    return np.array([cand[i] for i in np.sort(pick)], dtype=np.int64)


def detection_set(S, rng, config):
    """Top-K NMS maxima plus K random non-maximum pixels, all DKD-refinable."""
    w = config.weights
    pix = nms_local_max(S, w.window, 0.0)
    if len(pix):
        pix = pix[topk_order(pix, S.data[pix[:, 1], pix[:, 0]], config.top_k)]
    rnd = random_positions(rng, S.shape, config.random_k, pix, (w.window - 1) // 2)
    return np.concatenate([pix.reshape(-1, 2), rnd], axis=0)


def _memo_warp(scene, direction):
    """Warp closure that reuses results for repeated point sets."""
    cache = {}

    def warp(p):
        key = p.tobytes()
        if key not in cache:
            cache[key] = geometry.warp_points(p, scene, direction)
        return cache[key]
    return warp


def keypoint_losses(kp_net, field1, field2, scene, rng, config):
    w = config.weights
    S1 = kp_net.forward(scene.image1)
    S2 = kp_net.forward(scene.image2)
    pix1 = detection_set(S1, rng, config)
    pix2 = detection_set(S2, rng, config)
    pos1, _ = dkd_refine_batch(S1, pix1, w.window, w.t_det)
    pos2, _ = dkd_refine_batch(S2, pix2, w.window, w.t_det)
    w12, w21 = _memo_warp(scene, (1, 2)), _memo_warp(scene, (2, 1))
    rep = reprojection_loss(pos1, pos2, w12, w21, w.match_radius)
    s1 = reshape(bilinear_sample(S1, pos1), (-1,))
    s2 = reshape(bilinear_sample(S2, pos2), (-1,))
    P = dual_softmax(score_matrix(sample_descriptors(field1, pos1),
                                  sample_descriptors(field2, pos2), w.tau))
    rel = reliability_loss(pos1, pos2, s1, s2, P, w12, w21, S1, S2, w.t_rel, w.match_radius)
    peak = (peaky_loss(S1, pix1, w.window, w.t_det, w.p_norm)
            + peaky_loss(S2, pix2, w.window, w.t_det, w.p_norm)) * 0.5
    return rep, rel, peak


def frozen_fields(desc_net, scenes):
    """Descriptor fields computed once, outside any tape."""
    desc_net.params.set_trainable(False)
    return [(desc_net.forward(s.image1), desc_net.forward(s.image2)) for s in scenes]


def train_keypoint_branch(scenes, desc_net, config=None, kp_net=None, start_step=0, curve=None):
    """Clipped gradient descent on ``L_reprojection + L_reliability + L_peaky``.

    Only keypoint parameters are updated; descriptor parameters are marked
    non-trainable so no gradient can reach them.
    """
    config = config or TrainConfig()
    kp_net = kp_net or KeypointNet.init(replace(config.keypoint, seed=config.seed))
    curve = curve or LossCurve(("loss_total", "loss_reprojection", "loss_reliability",
                                "loss_peaky"))
    fields = frozen_fields(desc_net, scenes)
    for step in range(start_step, config.steps):
        rng = _step_rng(config.seed + 1, step)
        idx = _batch(rng, len(scenes), config.batch)
        with GradTape() as tape, _diverges_at(step, "keypoint"):
            parts = [Tensor(0.0), Tensor(0.0), Tensor(0.0)]
            for i in idx:
                terms = keypoint_losses(kp_net, *fields[i], scenes[i], rng, config)
                parts = [p + t for p, t in zip(parts, terms)]
            parts = [p * (1.0 / len(idx)) for p in parts]
            total = parts[0] + parts[1] + parts[2]
        _check(total.item(), step, "keypoint")
        tape.backward(total)
        _sgd(kp_net.params, config.kp_lr, config.clip_norm)
        _check_params(kp_net.params, step, "keypoint")
        curve.append(step, [total.item()] + [p.item() for p in parts])
    desc_net.params.set_trainable(True)
    return kp_net, curve
