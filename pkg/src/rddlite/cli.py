"""Command-line front end: ``rddlite {match,eval,train,pairgen}``.

Every command resolves its configuration as defaults < ``--config`` JSON <
explicit flags, prints the resolved configuration and writes it to
``<out-dir>/run.json``.  Passing that file back through ``--config``
replays the run.

Exit codes: 0 success, 1 numeric failure, 2 usage or I/O error.
"""
import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, dten, geometry, kernels
from .descriptors import DescriptorNet, DescriptorNetConfig
from .evaluation import MODES, aggregate, evaluate_scene
from .keypoints import KeypointNet, KeypointNetConfig
from .matcher import MatchConfig, Weights, match_semi_dense, match_sparse
from .overlay import match_overlay, write_ppm
from .training import (LossCurve, TrainConfig, TrainingDiverged, toy_scenes,
                       train_descriptor_branch, train_keypoint_branch)

REFERENCE_EXTENT = 800  # longer image side used for the pair-selection band

COMMON = {"seed": 0, "out_dir": "out", "jobs": 1}

DEFAULTS = {
    "match": {
        "image1": None, "image2": None, "scene": None, "scene_seed": None,
        "profile": "ridge", "size": 64, "weights": None, "random_init": False,
        "self_match": False, "semi_dense": False, "top_k": 500, "tau": 0.1,
        "threshold": 0.01, "nms_window": 5, "det_threshold": 0.2, "t_det": 0.1,
        "patch": 4, "coarse_k": 200, "use_ransac": False, "epi_threshold": 1e-4,
    },
    "eval": {
        "num_scenes": 20, "profile": "mixed", "size": 64, "baseline": 0.3,
        "rotation": 5.0, "mode": "oracle", "weights": None, "random_init": False,
        "top_k": 500, "tau": 0.1, "threshold": 0.01, "ransac_iters": 500,
        "ransac_thresh": 1.0, "det_threshold": 0.2, "t_det": 0.1, "nms_window": 5,
    },
    "train": {
        "stage": "both", "steps": 200, "lr": 0.05, "kp_lr": 0.05, "batch": 2,
        "num_pairs": 8, "size": 64, "gt_count": 64, "top_k": 32, "random_k": 32,
        "alpha": 0.25, "gamma": 2.0, "t_rel": 1.0, "t_det": 0.1, "window": 5,
        "p_norm": 2.0, "tau": 0.1, "layers": 2, "heads": 4, "points": 4, "channels": 32,
        "kp_width": 8, "resume": False,
    },
    "pairgen": {
        "num_candidates": 20, "size": 64, "lo": 2000, "hi": 20000, "scale_band": True,
        "max_baseline": 3.0, "max_rotation": 30.0, "archive": False,
    },
}

HELP = {
    "image1": "first image as a DTEN1 (H, W, 3) file",
    "image2": "second image as a DTEN1 (H, W, 3) file",
    "scene": "scene archive directory (overrides images)",
    "scene_seed": "synthesise the scene with this seed",
    "profile": "depth profile: plane, ridge, cloud (eval also accepts mixed)",
    "weights": "checkpoint directory with both branches",
    "random_init": "use freshly initialised weights instead of a checkpoint",
    "self_match": "match image 1 against itself",
    "semi_dense": "run the semi-dense pipeline (report kind 'refined')",
    "top_k": "keypoints kept per image",
    "tau": "dual-softmax temperature",
    "threshold": "MNN confidence threshold",
    "nms_window": "NMS / DKD window N (odd)",
    "det_threshold": "score threshold for NMS",
    "t_det": "DKD softmax temperature",
    "patch": "descriptor patch size k",
    "coarse_k": "top-K coarse cells per image",
    "use_ransac": "estimate the refinement F with RANSAC",
    "epi_threshold": "overlay colour threshold on normalised epipolar error",
    "num_scenes": "number of evaluation scenes",
    "baseline": "camera baseline of generated scenes",
    "rotation": "relative rotation of generated scenes in degrees",
    "mode": "descriptor source: " + ", ".join(MODES),
    "ransac_iters": "RANSAC iterations",
    "ransac_thresh": "RANSAC inlier threshold in pixels",
    "stage": "descriptor, keypoint or both",
    "steps": "training steps per stage",
    "lr": "descriptor step size",
    "kp_lr": "keypoint step size",
    "resume": "continue from the checkpoint in out-dir",
    "lo": "lower overlap bound (800-px reference scale)",
    "hi": "upper overlap bound (800-px reference scale)",
    "scale_band": "scale the band by (extent / 800)^2",
    "archive": "write scene archives for kept pairs",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling


def _add_flag(p, name, default):
    flag = "--" + name.replace("_", "-")
    helptext = HELP.get(name, name.replace("_", " ")) + f" (default: {default})"
    if isinstance(default, bool):
        p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None,
                       help=helptext)
    elif default is None:
        p.add_argument(flag, dest=name, default=None, help=helptext)
    else:
        p.add_argument(flag, dest=name, type=type(default), default=None, help=helptext)


def build_parser():
    parser = argparse.ArgumentParser(prog="rddlite", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, defaults in DEFAULTS.items():
        p = sub.add_parser(cmd, help=f"{cmd} command")
        p.add_argument("--config", default=None, help="JSON config file; flags override it")
        for name, default in {**COMMON, **defaults}.items():
            _add_flag(p, name, default)
    return parser


def resolve_config(args):
    cfg = {**COMMON, **DEFAULTS[args.command]}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from e
        unknown = set(loaded) - set(cfg) - {"command", "version", "backend"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k in cfg})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def echo(cfg, command, out_dir):
    manifest = {"command": command, "version": __version__, "backend": kernels.active_backend(),
                **cfg}
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(text)
    print(text, end="")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# weights


def save_weights(directory, kp_net=None, desc_net=None, extra=None):
    params, meta = {}, dict(extra or {})
    if desc_net is not None:
        params.update(desc_net.params.arrays())
        meta["descriptor_config"] = desc_net.config.to_dict()
    if kp_net is not None:
        params.update(kp_net.params.arrays())
        meta["keypoint_config"] = dict(kp_net.config.__dict__)
    return dten.save_checkpoint(directory, params, meta)


def load_weights(directory):
    d = Path(directory)
    if not (d / "manifest.json").is_file():
        raise UsageError(f"no checkpoint manifest in {d}")
    arrays, manifest = dten.load_checkpoint(d)
    desc = kp = None
    if "descriptor_config" in manifest:
        desc = DescriptorNet.from_arrays(
            arrays, DescriptorNetConfig.from_dict(manifest["descriptor_config"]))
    if "keypoint_config" in manifest:
        kp = KeypointNet.init(KeypointNetConfig(**manifest["keypoint_config"]))
        for name, a in arrays.items():
            if name in kp.params:
                kp.params[name].data[...] = a
    return kp, desc, manifest


def resolve_weights(cfg):
    if cfg["weights"]:
        kp, desc, _ = load_weights(cfg["weights"])
        if kp is None or desc is None:
            raise UsageError("checkpoint lacks one of the two branches")
        return Weights(kp, desc)
    if cfg["random_init"]:
        return Weights(KeypointNet.init(KeypointNetConfig(seed=cfg["seed"])),
                       DescriptorNet.init(DescriptorNetConfig(seed=cfg["seed"])))
    raise UsageError("pass --weights DIR or --random-init")


# ---------------------------------------------------------------------------
# match


def _load_image(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"image not found: {p}")
    try:
        img = dten.read(p)
    except dten.DtenError as e:
        raise UsageError(f"{p}: {e}") from e
    if img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(f"{p}: expected an (H, W, 3) image, got {img.shape}")
    return img


def match_inputs(cfg):
    if cfg["scene"]:
        d = Path(cfg["scene"])
        if not (d / "scene.json").is_file():
            raise UsageError(f"no scene archive at {d}")
        scene = geometry.load_scene(d)
        return scene.image1, scene.image2, scene
    if cfg["scene_seed"] is not None:
        scene = geometry.synth_scene(int(cfg["scene_seed"]), {
            "profile": cfg["profile"], "height": cfg["size"], "width": cfg["size"]})
        return scene.image1, scene.image2, scene
    if not cfg["image1"]:
        raise UsageError("pass --scene, --scene-seed or --image1/--image2")
    img1 = _load_image(cfg["image1"])
    if cfg["self_match"]:
        return img1, img1, None
    if not cfg["image2"]:
        raise UsageError("--image2 is required unless --self-match is set")
    return img1, _load_image(cfg["image2"]), None


def normalized_epipolar_error(scene, pts1, pts2):
    """Epipolar error in normalised camera coordinates (transfer error at zero baseline)."""
    x1 = (np.linalg.inv(scene.K1) @ geometry.homogeneous(pts1).T).T
    x2 = (np.linalg.inv(scene.K2) @ geometry.homogeneous(pts2).T).T
    if scene.baseline == 0:
        w, ok = geometry.warp_points(pts1, scene)
        xw = (np.linalg.inv(scene.K2) @ geometry.homogeneous(np.nan_to_num(w)).T).T
        return np.where(ok, np.linalg.norm(xw[:, :2] - x2[:, :2], axis=1), np.inf)
    E = geometry.skew(scene.translation) @ scene.R
    E = E / np.linalg.norm(E)
    return geometry.symmetric_epipolar_distance(E, x1[:, :2], x2[:, :2])


def cmd_match(cfg, out_dir):
    img1, img2, scene = match_inputs(cfg)
    if cfg["self_match"]:
        img2 = img1
    weights = resolve_weights(cfg)
    mc = MatchConfig(top_k=cfg["top_k"], tau=cfg["tau"], threshold=cfg["threshold"],
                     nms_window=cfg["nms_window"], det_threshold=cfg["det_threshold"],
                     t_det=cfg["t_det"], patch=cfg["patch"], coarse_k=cfg["coarse_k"],
                     use_ransac=cfg["use_ransac"], seed=cfg["seed"])
    run = match_semi_dense if cfg["semi_dense"] else match_sparse
    matches = run(img1, img2, weights, mc)
    write_json(out_dir / "matches.json", matches.to_report())
    good = None
    if cfg["self_match"]:
        good = np.linalg.norm(matches.pts1 - matches.pts2, axis=1) <= cfg["epi_threshold"]
    elif scene is not None:
        good = normalized_epipolar_error(scene, matches.pts1, matches.pts2) <= cfg["epi_threshold"]
    write_ppm(out_dir / "overlay.ppm", match_overlay(img1, img2, matches.pts1, matches.pts2, good))
    return 0


# ---------------------------------------------------------------------------
# eval


def eval_scene_params(cfg, i):
    prof = cfg["profile"]
    if prof == "mixed":
        prof = ("ridge", "cloud")[i % 2]
    return {"profile": prof, "height": cfg["size"], "width": cfg["size"],
            "baseline": cfg["baseline"], "rotation_deg": cfg["rotation"]}


def _eval_one(args):
    i, cfg, weights = args
    scene = geometry.synth_scene(cfg["seed"] * 100000 + i, eval_scene_params(cfg, i))
    mc = MatchConfig(top_k=cfg["top_k"], tau=cfg["tau"], threshold=cfg["threshold"],
                     ransac_iters=cfg["ransac_iters"], ransac_thresh=cfg["ransac_thresh"],
                     det_threshold=cfg["det_threshold"], t_det=cfg["t_det"],
                     nms_window=cfg["nms_window"], seed=cfg["seed"])
    return evaluate_scene(i, scene, cfg["mode"], weights, mc)


def cmd_eval(cfg, out_dir):
    if cfg["mode"] not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    weights = resolve_weights(cfg) if cfg["mode"] == "network" else None
    jobs = [(i, cfg, weights) for i in range(cfg["num_scenes"])]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as ex:
            results = list(ex.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    report = aggregate(results)
    write_json(out_dir / "metrics.json", report)
    rows = [{"index": r.index, "matches": r.num_matches,
             "pose_error": None if not np.isfinite(r.pose_error) else round(r.pose_error, 6),
             "corner_error": None if not np.isfinite(r.corner_error) else round(r.corner_error, 6)}
            for r in sorted(results, key=lambda r: r.index)]
    write_json(out_dir / "scenes.json", rows)
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train


def train_config(cfg):
    from .losses import LossWeights

    return TrainConfig(
        steps=cfg["steps"], lr=cfg["lr"], kp_lr=cfg["kp_lr"], batch=cfg["batch"],
        seed=cfg["seed"], gt_count=cfg["gt_count"], top_k=cfg["top_k"],
        random_k=cfg["random_k"],
        descriptor=DescriptorNetConfig(channels=cfg["channels"], num_layers=cfg["layers"],
                                       num_heads=cfg["heads"], num_points=cfg["points"],
                                       seed=cfg["seed"]),
        keypoint=KeypointNetConfig(width=cfg["kp_width"], seed=cfg["seed"]),
        weights=LossWeights(alpha=cfg["alpha"], gamma=cfg["gamma"], t_rel=cfg["t_rel"],
                            t_det=cfg["t_det"], window=cfg["window"], p_norm=cfg["p_norm"],
                            tau=cfg["tau"]),
    )


def _read_curve(path):
    return LossCurve.from_csv(path.read_text()) if path.is_file() else None


def cmd_train(cfg, out_dir):
    if cfg["stage"] not in ("descriptor", "keypoint", "both"):
        raise UsageError("--stage must be descriptor, keypoint or both")
    tc = train_config(cfg)
    scenes = toy_scenes(cfg["num_pairs"], cfg["seed"], cfg["size"])
    ckpt = out_dir / "checkpoint"
    desc = kp = None
    desc_done = kp_done = 0
    dcurve = kcurve = None
    if cfg["resume"]:
        if not (ckpt / "manifest.json").is_file():
            raise UsageError(f"nothing to resume in {ckpt}")
        kp, desc, manifest = load_weights(ckpt)
        desc_done = manifest.get("descriptor_steps", 0)
        kp_done = manifest.get("keypoint_steps", 0)
        dcurve = _read_curve(out_dir / "descriptor_curve.csv")
        kcurve = _read_curve(out_dir / "keypoint_curve.csv")
    if cfg["stage"] in ("descriptor", "both"):
        desc, dcurve = train_descriptor_branch(scenes, tc, desc, desc_done, dcurve)
        desc_done = max(desc_done, tc.steps)
        (out_dir / "descriptor_curve.csv").write_text(dcurve.to_csv())
        save_weights(ckpt, kp, desc, {"descriptor_steps": desc_done, "keypoint_steps": kp_done})
    if cfg["stage"] in ("keypoint", "both"):
        if desc is None:
            raise UsageError("keypoint stage needs a trained descriptor checkpoint (--resume)")
        kp, kcurve = train_keypoint_branch(scenes, desc, tc, kp, kp_done, kcurve)
        kp_done = max(kp_done, tc.steps)
        (out_dir / "keypoint_curve.csv").write_text(kcurve.to_csv())
        save_weights(ckpt, kp, desc, {"descriptor_steps": desc_done, "keypoint_steps": kp_done})
    return 0


# ---------------------------------------------------------------------------
# pairgen


def overlap_band(cfg):
    lo, hi = float(cfg["lo"]), float(cfg["hi"])
    if cfg["scale_band"]:
        s = (cfg["size"] / REFERENCE_EXTENT) ** 2
        lo, hi = lo * s, hi * s
    return lo, hi


def candidate_params(seed, i, cfg):
    rng = np.random.default_rng([seed, i, 3])
    return {"profile": ("plane", "ridge", "cloud")[int(rng.integers(3))],
            "height": cfg["size"], "width": cfg["size"],
            "baseline": float(np.round(rng.uniform(0.0, cfg["max_baseline"]), 6)),
            "rotation_deg": float(np.round(rng.uniform(0.0, cfg["max_rotation"]), 6))}


def select_pairs(scenes, lo, hi):
    """Partition scenes by ``lo < overlap_count < hi``."""
    out = []
    for s in scenes:
        n = geometry.overlap_count(s)
        out.append((s, n, lo < n < hi))
    return out


def cmd_pairgen(cfg, out_dir):
    lo, hi = overlap_band(cfg)
    scenes = [geometry.synth_scene(cfg["seed"] * 100000 + i, candidate_params(cfg["seed"], i, cfg))
              for i in range(cfg["num_candidates"])]
    rows = []
    for s, n, keep in select_pairs(scenes, lo, hi):
        rows.append({"seed": s.seed, "params": s.params, "overlap": n, "kept": keep})
        if keep and cfg["archive"]:
            geometry.save_scene(out_dir / "scenes" / f"scene_{s.seed}", s)
    write_json(out_dir / "pairs.json", {"band": [lo, hi], "pairs": rows})
    print(f"kept {sum(r['kept'] for r in rows)} of {len(rows)} candidates (band {lo:g}..{hi:g})")
    return 0


COMMANDS = {"match": cmd_match, "eval": cmd_eval, "train": cmd_train, "pairgen": cmd_pairgen}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out_dir = Path(cfg["out_dir"])
        echo(cfg, args.command, out_dir)
        return COMMANDS[args.command](cfg, out_dir)
    except UsageError as e:
        print(f"rddlite {args.command}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"rddlite {args.command}: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"rddlite {args.command}: {e}", file=sys.stderr)
        return 1
    except (FloatingPointError, geometry.DegenerateConfiguration, np.linalg.LinAlgError) as e:
        print(f"rddlite {args.command}: numeric failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
