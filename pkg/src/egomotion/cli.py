"""Reproducible command-line surface tying all modules together.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes a JSON manifest (config hash, seed, versions,
artifact list) next to its outputs. Nothing embeds wall-clock state, so a
rerun with identical flags and inputs produces byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .container import load_motion, read_container, save_motion, write_container
from .denoiser import DenoiserConfig, synthetic_encoder
from .errors import DataError, NumericalFailure, TrainingDiverged, UsageError
from .features import encode, feature_layout
from .fitting import (
    FitWeights,
    load_keypoints,
    load_rig,
    perframe_fit,
    sequence_fit,
    filter_segments,
)
from .metrics import load_encoder, save_encoder, train_proxy_encoder, evaluate, write_report
from .pipeline import (
    TrainConfig,
    build_clip_dataset,
    forecast,
    generate,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
    train,
)
from .se3 import SE3, MotionSequence, sequence_positions
from .skeletons import get_skeleton
from .synth import generate_take, load_take, save_take, feature_cache
from .util import derive_seed, stable_json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag problems through the usage-error path."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# manifest plumbing


def _versions():
    return {
        "egomotion": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


def _flags_dict(args):
    out = {}
    for key, val in vars(args).items():
        if key in ("func", "command"):
            continue
        out[key] = str(val) if isinstance(val, Path) else val
    return out


def _write_manifest(path: Path, command, flags, seed, artifacts, config=None, results=None):
    payload = {"command": command, "flags": flags, "config": config or {}}
    manifest = {
        "command": command,
        "config_hash": hashlib.blake2b(
            stable_json(payload).encode("utf-8"), digest_size=16
        ).hexdigest(),
        "seed": seed,
        "versions": _versions(),
        "flags": flags,
        "artifacts": sorted(str(a) for a in artifacts),
    }
    if config is not None:
        manifest["config"] = config
    if results is not None:
        manifest["results"] = results
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_toml(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


# ---------------------------------------------------------------------------
# config files


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in fields(DenoiserConfig)}
_WEIGHT_KEYS = {f.name for f in fields(FitWeights)}
_FIT_EXTRA_KEYS = {"max_iter", "grad_tol", "jitter_threshold"}


def _parse_train_config(doc):
    """Split a config document into TrainConfig kwargs, model overrides,
    and path-ish extras. Unknown keys are usage errors, named."""
    train_kwargs, model_kwargs, extras = {}, {}, {}
    for key, val in doc.items():
        if key == "model":
            if not isinstance(val, dict):
                raise UsageError("config key 'model' must be a table")
            for sub, subval in val.items():
                if sub not in _MODEL_KEYS:
                    raise UsageError(f"unknown config key 'model.{sub}'")
                model_kwargs[sub] = subval
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = val
        elif key in ("skeleton", "data"):
            extras[key] = val
        else:
            raise UsageError(f"unknown config key '{key}'")
    return train_kwargs, model_kwargs, extras


def _parse_fit_config(doc):
    weight_kwargs, extras = {}, {}
    for key, val in doc.items():
        if key in _WEIGHT_KEYS:
            weight_kwargs[key] = val
        elif key in _FIT_EXTRA_KEYS:
            extras[key] = val
        else:
            raise UsageError(f"unknown config key '{key}'")
    return weight_kwargs, extras


def _take_features(take, trajectory, d_img):
    return np.stack(
        [synthetic_encoder(take.scene_id, take.activity_id, pose, d_img) for pose in trajectory]
    ).astype(np.float32)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    out = _out_dir(args)
    takes_dir = out / "takes"
    feat_dir = out / "features"
    takes_dir.mkdir(exist_ok=True)
    feat_dir.mkdir(exist_ok=True)

    takes, artifacts = [], []
    for scene in range(args.scenes):
        for activity in range(args.activities):
            for idx in range(args.takes):
                seed = derive_seed("synth-take", args.seed, scene, activity, idx)
                take = generate_take(scene, activity, args.duration, seed)
                path = takes_dir / f"{take.key}.eem"
                save_take(path, take)
                takes.append(take)
                artifacts.append(path.relative_to(out))
    encoder = functools.partial(synthetic_encoder, d_img=args.d_img)
    cache = feature_cache(takes, encoder, feat_dir, d_img=args.d_img)
    artifacts += [Path(p).relative_to(out) for p in cache.values()]

    _write_manifest(
        out / "manifest.json",
        "synth",
        _flags_dict(args),
        args.seed,
        artifacts,
        results={"n_takes": len(takes)},
    )
    print(f"wrote {len(takes)} takes to {out}")
    return 0


def _load_takes_dir(data_dir: Path, skel):
    takes_dir = data_dir / "takes" if (data_dir / "takes").is_dir() else data_dir
    paths = sorted(takes_dir.glob("*.eem"))
    takes = [load_take(p, skel) for p in paths]
    if not takes:
        raise DataError(f"no take containers found under {data_dir}")
    return takes


def cmd_train(args):
    doc = _load_toml(args.config)
    train_kwargs, model_kwargs, extras = _parse_train_config(doc)
    data = args.data or extras.get("data")
    if not data:
        raise UsageError("no data directory: pass --data or set 'data' in the config")
    data_dir = Path(data)
    skel = get_skeleton(extras.get("skeleton", "humanoid22"))
    try:
        config = TrainConfig(**train_kwargs)
    except (UsageError, DataError):
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)

    takes = _load_takes_dir(data_dir, skel)
    d_img = int(model_kwargs.get("d_img", 64))
    cache_dir = data_dir / "features" if (data_dir / "features").is_dir() else out / "feature_cache"
    dataset = build_clip_dataset(takes, cache_dir, skel=skel, d_img=d_img)

    model_kwargs.setdefault("d_motion", dataset.width)
    model_kwargs.setdefault("d_img", d_img)
    try:
        model_cfg = DenoiserConfig(**model_kwargs)
    except (UsageError, DataError):
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if model_cfg.d_motion != dataset.width:
        raise DataError(
            f"model.d_motion={model_cfg.d_motion} but the data has width {dataset.width}"
        )

    resume = load_checkpoint(args.resume) if args.resume else None
    flags = _flags_dict(args)
    ckpt_path = out / "checkpoint.eem"
    log_path = out / "loss_log.csv"
    try:
        state = train(
            dataset,
            config,
            model_cfg,
            resume=resume,
            max_steps=args.max_steps,
            log=lambda msg: print(msg, file=sys.stderr),
        )
    except TrainingDiverged as exc:
        bad_path = out / "checkpoint.diverged.eem"
        if exc.last_good is not None:
            arrays, meta = exc.last_good
            write_container(bad_path, arrays, meta)
        _write_manifest(
            out / "manifest.json",
            "train",
            flags,
            config.seed,
            [bad_path.relative_to(out)] if exc.last_good is not None else [],
            config=doc,
            results={"status": "diverged", "step": exc.step},
        )
        raise

    save_checkpoint(ckpt_path, state)
    lines = ["epoch,mean_loss"]
    lines += [f"{i + 1},{v:.10g}" for i, v in enumerate(state.epoch_losses)]
    log_path.write_text("\n".join(lines) + "\n")
    _write_manifest(
        out / "manifest.json",
        "train",
        flags,
        config.seed,
        [ckpt_path.relative_to(out), log_path.relative_to(out)],
        config=doc,
        results={
            "status": "ok",
            "steps": state.step,
            "final_epoch_loss": state.epoch_losses[-1] if state.epoch_losses else None,
        },
    )
    print(f"checkpoint: {ckpt_path}")
    return 0


def _load_model_and_take(args):
    state = load_checkpoint(args.model)
    skel = get_skeleton(state.skeleton)
    width = feature_layout(skel).width
    if state.model_cfg.d_motion != width:
        raise DataError(
            f"checkpoint feature width {state.model_cfg.d_motion} does not match "
            f"skeleton '{skel.name}' width {width}"
        )
    take = load_take(args.input, skel)
    return state, skel, take


def cmd_reconstruct(args):
    state, _, take = _load_model_and_take(args)
    n_take = len(take.motion)
    start = args.start
    frames = args.frames or min(n_take - start, state.model_cfg.n_max)
    if start < 0 or frames < 1 or start + frames > n_take:
        raise UsageError(
            f"window [{start}, {start + frames}) is outside the {n_take}-frame take"
        )
    trajectory = take.trajectory[start : start + frames]
    feats = _take_features(take, trajectory, state.model_cfg.d_img)
    motion = reconstruct(state, trajectory, feats, seed=args.seed)

    out = _out_dir(args)
    path = out / "motion.eem"
    save_motion(path, motion)
    _write_manifest(
        out / "manifest.json",
        "reconstruct",
        _flags_dict(args),
        args.seed,
        [path.relative_to(out)],
        results={"frames": frames, "start": start},
    )
    print(f"motion: {path}")
    return 0


def cmd_forecast(args):
    state, _, take = _load_model_and_take(args)
    n_take = len(take.motion)
    n_obs = int(round(args.observe * take.fps))
    n_total = args.frames or min(80, state.model_cfg.n_max)
    if n_obs < 1:
        raise UsageError("--observe must cover at least one frame")
    if n_obs >= n_take:
        raise UsageError(
            f"--observe {args.observe}s is {n_obs} frames, but the clip has only "
            f"{n_take} frames"
        )
    if n_obs >= n_total:
        raise UsageError(
            f"--observe {args.observe}s is {n_obs} frames, not less than the "
            f"{n_total}-frame horizon"
        )
    trajectory = take.trajectory[:n_obs]
    feats = _take_features(take, trajectory, state.model_cfg.d_img)
    motion = forecast(state, trajectory, feats, n_total=n_total, seed=args.seed)

    out = _out_dir(args)
    path = out / "motion.eem"
    save_motion(path, motion)
    _write_manifest(
        out / "manifest.json",
        "forecast",
        _flags_dict(args),
        args.seed,
        [path.relative_to(out)],
        results={"observed_frames": n_obs, "total_frames": n_total},
    )
    print(f"motion: {path}")
    return 0


def _load_image_feature(path, d_img):
    arrays, meta = read_container(path)
    if meta.get("kind") == "take":
        pose = SE3(
            arrays["traj_rotation"][0].astype(np.float64),
            arrays["traj_translation"][0].astype(np.float64),
        )
        return synthetic_encoder(int(meta["scene_id"]), int(meta["activity_id"]), pose, d_img)
    if "feature" in arrays:
        vec = np.asarray(arrays["feature"], dtype=np.float32).reshape(-1)
        if vec.shape != (d_img,):
            raise DataError(
                f"image feature has width {vec.shape[0]}, model expects {d_img}"
            )
        return vec
    raise DataError(f"{path}: neither a take container nor an image-feature container")


def cmd_generate(args):
    state = load_checkpoint(args.model)
    feat = _load_image_feature(args.image_feature, state.model_cfg.d_img)
    motion = generate(state, feat, args.frames, seed=args.seed)

    out = _out_dir(args)
    path = out / "motion.eem"
    save_motion(path, motion)
    _write_manifest(
        out / "manifest.json",
        "generate",
        _flags_dict(args),
        args.seed,
        [path.relative_to(out)],
        results={"frames": args.frames},
    )
    print(f"motion: {path}")
    return 0


def _motion_paths(directory):
    paths = sorted(Path(directory).glob("*.eem"))
    if not paths:
        raise DataError(f"no motion containers found in {directory}")
    return paths


def _load_motion_dir(directory):
    motions = []
    skel = None
    for path in _motion_paths(directory):
        _, meta = read_container(path)
        name = meta.get("skeleton")
        if skel is None:
            skel = get_skeleton(name)
        elif skel.name != name:
            raise DataError(f"{path}: mixed skeletons in {directory}")
        motions.append(load_motion(path, skel))
    return motions, skel


def cmd_train_encoder(args):
    paths = _motion_paths(args.data)
    clips = []
    skel = None
    for path in paths:
        arrays, meta = read_container(path)
        skel_name = meta.get("skeleton")
        this_skel = get_skeleton(skel_name)
        if skel is None:
            skel = this_skel
        elif skel.name != this_skel.name:
            raise DataError(f"{path}: mixed skeletons under {args.data}")
        if meta.get("kind") == "take":
            motion = load_take(path, skel).motion
        else:
            motion = load_motion(path, skel)
        n = len(motion)
        w = args.window_frames
        for start in range(0, n - w + 1, args.stride):
            window = MotionSequence(
                frames=list(motion.frames[start : start + w]),
                fps=motion.fps,
                skeleton_id=motion.skeleton_id,
            )
            clips.append(encode(window, skel).astype(np.float32))
    if not clips:
        raise DataError(
            f"no {args.window_frames}-frame windows could be cut from {args.data}"
        )
    encoder = train_proxy_encoder(
        np.stack(clips), seed=args.seed, steps=args.steps, width=args.width
    )

    out = _out_dir(args)
    path = out / "encoder.eem"
    save_encoder(path, encoder)
    _write_manifest(
        out / "manifest.json",
        "train-encoder",
        _flags_dict(args),
        args.seed,
        [path.relative_to(out)],
        results={
            "clips": len(clips),
            "loss_initial": encoder.loss_initial,
            "loss_final": encoder.loss_final,
        },
    )
    print(f"encoder: {path}")
    return 0


def cmd_eval(args):
    if args.metrics == "semantic" and not args.encoder:
        raise UsageError("--metrics semantic requires --encoder")
    preds, skel_p = _load_motion_dir(args.pred)
    gts, skel_g = _load_motion_dir(args.gt)
    if skel_p.name != skel_g.name:
        raise DataError(
            f"prediction skeleton {skel_p.name!r} does not match truth {skel_g.name!r}"
        )
    if len(preds) != len(gts):
        raise DataError(
            f"clip count mismatch: {len(preds)} predictions vs {len(gts)} ground truths"
        )
    encoder = load_encoder(args.encoder) if args.encoder else None
    report = evaluate(preds, gts, skel_p, encoder=encoder)

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = report_path.with_name(report_path.name + ".per_clip.csv")
    write_report(report_path, report, per_clip_csv=csv_path)
    _write_manifest(
        report_path.with_name(report_path.name + ".manifest.json"),
        "eval",
        _flags_dict(args),
        None,
        [report_path.name, csv_path.name],
        results=report.to_dict(),
    )
    print(f"report: {report_path}")
    return 0


def _reprojection_outliers(motion, skel, views, kps, rho):
    """Fraction of observed detections whose final residual saturates the
    robust loss (r > 2*rho): the telltale of outliers being rejected."""
    positions = sequence_positions(motion, skel)
    total, saturated = 0, 0
    for v, view in enumerate(views):
        rot, trans = view.extrinsic.rotation, view.extrinsic.translation
        for i in range(len(motion)):
            cam = positions[i] @ rot.T + trans
            for j in range(positions.shape[1]):
                if kps.confidence[v, i, j] <= 0:
                    continue
                total += 1
                z = cam[j, 2]
                if z <= 1e-6:
                    saturated += 1
                    continue
                u = view.fx * cam[j, 0] / z + view.cx
                w = view.fy * cam[j, 1] / z + view.cy
                r = float(np.hypot(u - kps.pixels[v, i, j, 0], w - kps.pixels[v, i, j, 1]))
                if r > 2.0 * rho:
                    saturated += 1
    return saturated / total if total else 0.0


def cmd_fit(args):
    views = load_rig(args.rig)
    kps = load_keypoints(args.keypoints)
    _, init_meta = read_container(args.init)
    skel = get_skeleton(init_meta.get("skeleton"))
    init_motion = load_motion(args.init, skel)
    if len(init_motion) != kps.n_frames:
        raise DataError(
            f"init motion has {len(init_motion)} frames, keypoints {kps.n_frames}"
        )

    weight_kwargs, extras = ({}, {})
    doc = {}
    if args.weights_config:
        doc = _load_toml(args.weights_config)
        weight_kwargs, extras = _parse_fit_config(doc)
    try:
        weights = FitWeights(**weight_kwargs)
    except (UsageError, DataError):
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    max_iter = int(extras.get("max_iter", 200))
    grad_tol = float(extras.get("grad_tol", 1e-6))
    jitter = float(extras.get("jitter_threshold", 5.0))

    results, failed = [], []
    for i in range(kps.n_frames):
        pixels = kps.pixels[:, i]
        confidence = kps.confidence[:, i]
        init = init_motion.frames[i]
        try:
            res = perframe_fit(
                views, pixels, confidence, init, weights, skel,
                max_iter=max_iter, grad_tol=grad_tol,
            )
            if not np.isfinite(res.energy):
                raise NumericalFailure(f"non-finite energy on frame {i}")
        except NumericalFailure:
            failed.append(i)
            res = None
        results.append(res if res is not None else init)
    if len(failed) == kps.n_frames:
        raise NumericalFailure(f"optimizer failed on all {kps.n_frames} frames")

    fitted = sequence_fit(results, views, kps, weights, skel, max_iter=max_iter, grad_tol=grad_tol)
    kept = filter_segments(fitted, skel, jitter_threshold=jitter)

    init_pos = sequence_positions(init_motion, skel)
    fit_pos = sequence_positions(fitted, skel)
    per_joint = np.linalg.norm(fit_pos - init_pos, axis=2)
    outlier_fraction = _reprojection_outliers(fitted, skel, views, kps, weights.rho)

    out = _out_dir(args)
    path = out / "fitted.eem"
    save_motion(path, fitted)
    _write_manifest(
        out / "manifest.json",
        "fit",
        _flags_dict(args),
        None,
        [path.relative_to(out)],
        config=doc,
        results={
            "kept_ranges": [[int(a), int(b)] for a, b in kept],
            "mean_joint_error_vs_init_m": float(per_joint.mean()),
            "max_joint_error_vs_init_m": float(per_joint.max()),
            "converged_frames": sum(
                1 for r in results if hasattr(r, "converged") and r.converged
            ),
            "failed_frames": failed,
            "outlier_fraction": outlier_fraction,
            "robust": outlier_fraction > 0.02,
        },
    )
    print(f"fitted motion: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="egomotion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic takes plus a feature cache")
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--activities", type=int, default=2)
    p.add_argument("--takes", type=int, default=2, help="takes per scene-activity pair")
    p.add_argument("--duration", type=float, default=8.0, help="seconds per take")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-img", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the denoiser on a take directory")
    p.add_argument("--config", required=True, help="TOML training config")
    p.add_argument("--data", help="take directory (overrides config 'data')")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="recover motion from trajectory + features")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="take container")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("forecast", help="observe a prefix, inpaint the future")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="take container")
    p.add_argument("--observe", type=float, default=2.0, help="observed seconds")
    p.add_argument("--frames", type=int, default=None, help="total frames")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("generate", help="sample motion from a first-frame feature")
    p.add_argument("--model", required=True)
    p.add_argument("--image-feature", required=True, help="feature or take container")
    p.add_argument("--frames", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-encoder", help="train the proxy motion encoder")
    p.add_argument("--data", required=True, help="directory of motion/take containers")
    p.add_argument("--window-frames", type=int, default=20)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("eval", help="metric report over paired motion directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--encoder", help="proxy encoder container")
    p.add_argument(
        "--metrics",
        choices=("basic", "semantic"),
        default="basic",
        help="'semantic' additionally requires --encoder",
    )
    p.add_argument("--report", required=True, help="report file path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit", help="multi-view keypoint fitting")
    p.add_argument("--rig", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--init", required=True, help="initial motion container")
    p.add_argument("--weights-config", help="TOML fitting weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
