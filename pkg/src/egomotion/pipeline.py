"""Training loop with stochastic task masking, plus the three inference
entry points: reconstruct, forecast, generate.

The denoiser predicts z-scored motion features. This module owns the glue
around it: windowing takes into fixed-length clips, fitting the feature
normalizer, deriving every piece of per-step randomness statelessly from
the run seed (so checkpoint resume is bit-exact), and decoding sampled
features back into world-space motion.
"""

from __future__ import annotations

import enum
import functools
import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .container import read_container, write_container
from .denoiser import (
    TRAJ_DIM,
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    build_denoiser,
    synthetic_encoder,
)
from .diffusion import (
    NoiseSchedule,
    cosine_schedule,
    denoise_loss,
    repaint_forecast,
    sample,
)
from .errors import DataError, TrainingDiverged, UsageError
from .features import (
    CanonicalFrame,
    canonicalize_frame,
    encode,
    feature_layout,
    features_to_motion,
    sanitize_features,
)
from .se3 import SE3, MotionSequence, rot_to_6d, se3_compose, se3_inverse
from .skeletons import get_skeleton
from .synth import feature_cache, load_features, window_dataset
from .util import derive_seed

# The capture device is rigidly mounted on the head; in the synthetic world
# the two frames coincide, so the calibrated head-from-device offset is the
# identity. Real rigs would substitute a measured transform here.
HEAD_FROM_DEVICE = SE3.identity()


class TaskKind(enum.Enum):
    """Training/inference task modes. Forecast is inference-only: the
    training loop never samples it (unless the optional prefix-mask flag
    is switched on)."""

    RECONSTRUCTION = "reconstruction"
    GENERATION = "generation"
    FORECAST = "forecast"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for the unified denoiser training."""

    epochs: int = 350
    batch_size: int = 64
    lr: float = 3e-5
    lr_final: float = 3e-6
    lr_switch_epoch: int = 300  # epochs before this index use lr, after lr_final
    weight_decay: float = 0.01
    mask_prob: float = 0.5
    prefix_mask_prob: float = 0.0  # optional prefix-conditioned task, off by default
    t_max: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "t_max"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not (self.lr > 0 and self.lr_final > 0):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if not 0.0 <= self.prefix_mask_prob <= 1.0:
            raise ValueError("prefix_mask_prob must lie in [0, 1]")
        if self.lr_switch_epoch < 0:
            raise ValueError("lr_switch_epoch must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def learning_rate(self, epoch: int) -> float:
        """Step schedule: constant lr, then constant lr_final after the boundary."""
        return self.lr if epoch < self.lr_switch_epoch else self.lr_final


def sample_task_masks(n_frames: int, rng, mask_prob: float = 0.5, prefix_mask_prob: float = 0.0):
    """Draw per-frame conditioning masks for one training batch.

    With probability mask_prob the reconstruction task is simulated (all
    conditioning observed); otherwise the generation task (no trajectory,
    image observed only at the first frame). If prefix_mask_prob > 0 a
    forecast-style prefix task is carved out first; it is off by default.

    Returns (traj_mask, img_mask) as (n_frames,) bool arrays.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    if prefix_mask_prob > 0.0 and rng.random() < prefix_mask_prob:
        n_obs = int(rng.integers(1, n_frames)) if n_frames > 1 else 1
        prefix = np.zeros(n_frames, dtype=bool)
        prefix[:n_obs] = True
        return prefix, prefix.copy()
    if rng.random() < mask_prob:
        full = np.ones(n_frames, dtype=bool)
        return full, full.copy()
    traj_mask = np.zeros(n_frames, dtype=bool)
    img_mask = np.zeros(n_frames, dtype=bool)
    img_mask[0] = True
    return traj_mask, img_mask


# ---------------------------------------------------------------------------
# feature normalization


@dataclass(frozen=True)
class Normalizer:
    """Per-column z-scoring of motion features, std floored at 1e-3."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float32).reshape(-1)
        std = np.asarray(self.std, dtype=np.float32).reshape(-1)
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same width")
        if not (np.isfinite(mean).all() and np.isfinite(std).all()):
            raise ValueError("normalizer statistics must be finite")
        if (std < 1e-3).any():
            std = np.maximum(std, np.float32(1e-3))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def fit(cls, rows) -> "Normalizer":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise DataError("normalizer needs a nonempty (rows, width) matrix")
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    @classmethod
    def identity(cls, width: int) -> "Normalizer":
        return cls(np.zeros(width, np.float32), np.ones(width, np.float32))

    @property
    def width(self) -> int:
        return int(self.mean.shape[0])

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float32)
        return (x - self.mean) / self.std

    def denormalize(self, x):
        x = np.asarray(x, dtype=np.float32)
        return x * self.std + self.mean


# ---------------------------------------------------------------------------
# clip dataset


def trajectory_tokens(trajectory, anchor: CanonicalFrame) -> np.ndarray:
    """Tokenize a device trajectory relative to a canonical anchor frame.

    Each SE3 becomes [rot6d | xyz] of anchor^-1 * T_i, shape (N, 9) float32.
    """
    inv = se3_inverse(anchor.to_se3())
    rows = []
    for pose in trajectory:
        rel = se3_compose(inv, pose)
        rows.append(np.concatenate([rot_to_6d(rel.rotation), rel.translation]))
    if not rows:
        return np.zeros((0, TRAJ_DIM), dtype=np.float32)
    out = np.stack(rows).astype(np.float32)
    assert out.shape[1] == TRAJ_DIM
    return out


@dataclass(frozen=True)
class Clip:
    """One fixed-length training window, fully materialized."""

    x0: np.ndarray  # (N, D) float32 raw motion features
    traj: np.ndarray  # (N, 9) float32 anchored trajectory tokens
    img: np.ndarray  # (N, d_img) float32 image features
    take_key: str
    start: int
    split: str


@dataclass
class ClipDataset:
    """Windowed clips plus the normalizer fitted on the train split."""

    train_clips: list
    eval_clips: list
    normalizer: Normalizer
    skeleton: str
    fps: float

    def __post_init__(self):
        if not self.train_clips:
            raise DataError("dataset has no training clips")
        widths = {c.x0.shape[1] for c in self.train_clips + self.eval_clips}
        if len(widths) != 1:
            raise DataError(f"inconsistent feature widths in dataset: {sorted(widths)}")
        lengths = {c.x0.shape[0] for c in self.train_clips + self.eval_clips}
        if len(lengths) != 1:
            raise DataError(f"inconsistent clip lengths in dataset: {sorted(lengths)}")

    @property
    def width(self) -> int:
        return int(self.train_clips[0].x0.shape[1])

    @property
    def d_img(self) -> int:
        return int(self.train_clips[0].img.shape[1])

    @property
    def n_frames(self) -> int:
        return int(self.train_clips[0].x0.shape[0])


def build_clip_dataset(
    takes,
    cache_dir,
    skel=None,
    encoder=None,
    d_img: int = 64,
    window_s: float = 8.0,
    train_stride_s: float = 2.0,
    eval_stride_s: float = 20.0,
) -> ClipDataset:
    """Window takes into clips and materialize features for each window.

    Motion features are re-encoded per window so that every clip's first
    frame carries the identity residual; image features come from the
    on-disk cache; trajectory tokens are expressed relative to the clip's
    own canonical anchor (identity head-from-device calibration).
    """
    if not takes:
        raise DataError("no takes given")
    if encoder is None:
        encoder = functools.partial(synthetic_encoder, d_img=d_img)
    skel = get_skeleton("humanoid22") if skel is None else skel
    fps = takes[0].fps
    if any(abs(t.fps - fps) > 1e-9 for t in takes):
        raise DataError("all takes must share one frame rate")
    refs = window_dataset(takes, window_s=window_s, train_stride_s=train_stride_s, eval_stride_s=eval_stride_s)
    if not refs:
        raise DataError("no windows could be extracted from the takes")
    cache = feature_cache(takes, encoder, cache_dir, d_img=d_img)
    take_map = {t.key: t for t in takes}
    img_map = {key: load_features(path)[0] for key, path in cache.items()}

    train_clips, eval_clips = [], []
    for ref in refs:
        take = take_map[ref.take_key]
        lo, hi = ref.start, ref.start + ref.length
        window = MotionSequence(
            frames=list(take.motion.frames[lo:hi]),
            fps=fps,
            skeleton_id=take.motion.skeleton_id,
        )
        x0 = encode(window, skel).astype(np.float32)
        anchor = canonicalize_frame(se3_compose(take.trajectory[lo], HEAD_FROM_DEVICE))
        traj = trajectory_tokens(take.trajectory[lo:hi], anchor)
        img = np.asarray(img_map[ref.take_key][lo:hi], dtype=np.float32)
        clip = Clip(x0=x0, traj=traj, img=img, take_key=ref.take_key, start=lo, split=ref.split)
        (train_clips if ref.split == "train" else eval_clips).append(clip)

    if not train_clips:
        raise DataError("windowing produced no training clips")
    normalizer = Normalizer.fit(np.concatenate([c.x0 for c in train_clips], axis=0))
    return ClipDataset(
        train_clips=train_clips,
        eval_clips=eval_clips,
        normalizer=normalizer,
        skeleton=skel.name,
        fps=fps,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    """Everything needed to continue training or run inference."""

    model: Denoiser
    model_cfg: DenoiserConfig
    config: TrainConfig
    optimizer: torch.optim.AdamW
    normalizer: Normalizer
    schedule: NoiseSchedule
    step: int
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    skeleton: str = "humanoid22"
    fps: float = 10.0


def _torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed) & (2**63 - 1))
    return g


def _epoch_order(seed: int, epoch: int, n_clips: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed("epoch-order", seed, epoch))
    return rng.permutation(n_clips)


def _batch_tensors(dataset: ClipDataset, indices):
    x0 = torch.from_numpy(
        np.stack([dataset.normalizer.normalize(dataset.train_clips[i].x0) for i in indices])
    )
    traj = torch.from_numpy(np.stack([dataset.train_clips[i].traj for i in indices]))
    img = torch.from_numpy(np.stack([dataset.train_clips[i].img for i in indices]))
    return x0, traj, img


def checkpoint_payload(state: TrainState):
    """Serialize a TrainState into container-ready (arrays, meta)."""
    arrays = {}
    for key, value in state.model.state_dict().items():
        arrays[f"model.{key}"] = value.detach().cpu().numpy().copy()
    opt_sd = state.optimizer.state_dict()
    opt_entries = sorted(opt_sd["state"].keys())
    for idx in opt_entries:
        entry = opt_sd["state"][idx]
        arrays[f"opt.{idx}.step"] = np.asarray(
            entry["step"].detach().cpu().numpy() if torch.is_tensor(entry["step"]) else entry["step"],
            dtype=np.float64,
        ).reshape(1)
        arrays[f"opt.{idx}.exp_avg"] = entry["exp_avg"].detach().cpu().numpy().copy()
        arrays[f"opt.{idx}.exp_avg_sq"] = entry["exp_avg_sq"].detach().cpu().numpy().copy()
    arrays["norm.mean"] = state.normalizer.mean.copy()
    arrays["norm.std"] = state.normalizer.std.copy()
    arrays["log.step_losses"] = np.asarray(state.step_losses, dtype=np.float64)
    arrays["log.epoch_losses"] = np.asarray(state.epoch_losses, dtype=np.float64)
    meta = {
        "kind": "checkpoint",
        "model": state.model_cfg.to_dict(),
        "train": state.config.to_dict(),
        "step": int(state.step),
        "opt_entries": [int(i) for i in opt_entries],
        "skeleton": state.skeleton,
        "fps": float(state.fps),
    }
    return arrays, meta


def save_checkpoint(path, state: TrainState):
    arrays, meta = checkpoint_payload(state)
    write_container(path, arrays, meta)


def _state_from_payload(arrays, meta) -> TrainState:
    if meta.get("kind") != "checkpoint":
        raise DataError(f"not a checkpoint container (kind={meta.get('kind')!r})")
    model_cfg = DenoiserConfig(**meta["model"])
    config = TrainConfig(**meta["train"])
    model = build_denoiser(model_cfg, seed=config.seed)
    model_sd = {
        key[len("model.") :]: torch.from_numpy(np.array(val))
        for key, val in arrays.items()
        if key.startswith("model.")
    }
    model.load_state_dict(model_sd)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    entries = meta.get("opt_entries", [])
    if entries:
        opt_sd = optimizer.state_dict()
        opt_state = {}
        for idx in entries:
            opt_state[int(idx)] = {
                "step": torch.tensor(float(arrays[f"opt.{idx}.step"][0])),
                "exp_avg": torch.from_numpy(np.array(arrays[f"opt.{idx}.exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(arrays[f"opt.{idx}.exp_avg_sq"])),
            }
        optimizer.load_state_dict(
            {"state": opt_state, "param_groups": opt_sd["param_groups"]}
        )
    normalizer = Normalizer(arrays["norm.mean"], arrays["norm.std"])
    return TrainState(
        model=model,
        model_cfg=model_cfg,
        config=config,
        optimizer=optimizer,
        normalizer=normalizer,
        schedule=cosine_schedule(config.t_max),
        step=int(meta["step"]),
        step_losses=[float(v) for v in arrays["log.step_losses"]],
        epoch_losses=[float(v) for v in arrays["log.epoch_losses"]],
        skeleton=meta["skeleton"],
        fps=float(meta["fps"]),
    )


def load_checkpoint(path) -> TrainState:
    arrays, meta = read_container(path)
    return _state_from_payload(arrays, meta)


def train(
    dataset: ClipDataset,
    config: TrainConfig,
    model_cfg: DenoiserConfig | None = None,
    resume: TrainState | None = None,
    max_steps: int | None = None,
    snapshot_every: int = 50,
    log=None,
) -> TrainState:
    """Run the unified denoising objective over the clip dataset.

    Per batch-step: one timestep t drawn uniformly from [1, t_max], one
    task-mask draw shared across the batch, fresh Gaussian noise, an AdamW
    update. All randomness is derived statelessly from (config.seed, step),
    and the clip order per epoch from (config.seed, epoch), so resuming
    from a checkpoint reproduces the continuation bit-exactly.

    A non-finite loss aborts with TrainingDiverged carrying the most recent
    snapshot (taken every `snapshot_every` steps) as a checkpoint payload.
    """
    if model_cfg is None and resume is None:
        model_cfg = DenoiserConfig(d_motion=dataset.width, d_img=dataset.d_img)
    if resume is not None:
        state = resume
        model_cfg = state.model_cfg
        config = state.config
    else:
        model = build_denoiser(model_cfg, seed=config.seed)
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )
        state = TrainState(
            model=model,
            model_cfg=model_cfg,
            config=config,
            optimizer=optimizer,
            normalizer=dataset.normalizer,
            schedule=cosine_schedule(config.t_max),
            step=0,
            skeleton=dataset.skeleton,
            fps=dataset.fps,
        )
    if model_cfg.d_motion != dataset.width:
        raise DataError(
            f"model expects feature width {model_cfg.d_motion}, dataset has {dataset.width}"
        )
    if model_cfg.d_img != dataset.d_img:
        raise DataError(
            f"model expects image width {model_cfg.d_img}, dataset has {dataset.d_img}"
        )
    if dataset.n_frames > model_cfg.n_max:
        raise DataError(
            f"clips have {dataset.n_frames} frames but the model caps at {model_cfg.n_max}"
        )

    model = state.model
    optimizer = state.optimizer
    schedule = state.schedule
    n_clips = len(dataset.train_clips)
    steps_per_epoch = math.ceil(n_clips / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    last_good = checkpoint_payload(state)
    model.train()
    # when resuming mid-epoch, replay the running epoch's losses from the log
    # so the epoch-mean entry matches an uninterrupted run exactly
    into_epoch = state.step % steps_per_epoch
    epoch_accum = list(state.step_losses[-into_epoch:]) if into_epoch else []
    while state.step < total_steps:
        step = state.step
        epoch, slot = divmod(step, steps_per_epoch)
        for group in optimizer.param_groups:
            group["lr"] = config.learning_rate(epoch)
        order = _epoch_order(config.seed, epoch, n_clips)
        indices = order[slot * config.batch_size : (slot + 1) * config.batch_size]

        rng = np.random.default_rng(derive_seed("train-step", config.seed, step))
        t = int(rng.integers(1, config.t_max + 1))
        traj_mask, img_mask = sample_task_masks(
            dataset.n_frames, rng, config.mask_prob, config.prefix_mask_prob
        )
        x0, traj, img = _batch_tensors(dataset, indices)
        b = x0.shape[0]
        cond = ConditioningBundle(
            traj=traj,
            img=img,
            traj_mask=torch.from_numpy(np.tile(traj_mask, (b, 1))),
            img_mask=torch.from_numpy(np.tile(img_mask, (b, 1))),
        )
        noise = torch.randn(
            x0.shape,
            generator=_torch_generator(derive_seed("train-noise", config.seed, step)),
            dtype=torch.float32,
        )
        torch.manual_seed(derive_seed("train-dropout", config.seed, step))

        loss = denoise_loss(model, schedule, x0, cond, t, noise)
        loss_val = float(loss.item())
        if not math.isfinite(loss_val):
            raise TrainingDiverged(
                f"non-finite training loss at step {step}", last_good=last_good, step=step
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        state.step = step + 1
        state.step_losses.append(loss_val)
        epoch_accum.append(loss_val)
        if slot == steps_per_epoch - 1:
            state.epoch_losses.append(float(np.mean(epoch_accum)))
            if log is not None:
                log(f"epoch {epoch + 1}/{config.epochs} mean loss {state.epoch_losses[-1]:.6f}")
            epoch_accum = []
        if state.step % snapshot_every == 0:
            last_good = checkpoint_payload(state)
    model.eval()
    return state


# ---------------------------------------------------------------------------
# inference


def _check_inference_inputs(state: TrainState, n: int, img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2 or img.shape != (n, state.model_cfg.d_img):
        raise DataError(
            f"image features must have shape ({n}, {state.model_cfg.d_img}), got {img.shape}"
        )
    if n < 1:
        raise DataError("need at least one frame")
    if n > state.model_cfg.n_max:
        raise DataError(f"{n} frames exceeds the model's maximum of {state.model_cfg.n_max}")
    return img


def _sample_features(state, traj_tokens, img, traj_mask, img_mask, seed, stride=None):
    """Run the reverse process; returns normalized features (N, D) float32."""
    model = state.model
    model.eval()
    n = traj_tokens.shape[0]
    cond = ConditioningBundle(
        traj=torch.from_numpy(traj_tokens[None]),
        img=torch.from_numpy(img[None]),
        traj_mask=torch.from_numpy(traj_mask[None]),
        img_mask=torch.from_numpy(img_mask[None]),
    )
    x = sample(
        model, state.schedule, (1, n, state.model_cfg.d_motion), cond, seed, stride=stride
    )
    return x[0].cpu().numpy().astype(np.float32)


def _decode_shape(state, skel, features):
    """The shape vector decode() would derive: mean over sanitized rows."""
    layout = feature_layout(skel)
    f = sanitize_features(np.asarray(features, dtype=np.float64), layout)
    return f[:, layout.shape].mean(axis=0)


def reconstruct(
    state: TrainState,
    trajectory,
    img_feats,
    seed: int = 0,
    stride=None,
    head_from_device: SE3 | None = None,
) -> MotionSequence:
    """Recover full-body motion from a device trajectory and image features.

    Conditioning is fully observed; the decode anchor is the canonical
    frame of the first head pose (device pose composed with the calibrated
    head-from-device offset, identity by default).
    """
    n = len(trajectory)
    img = _check_inference_inputs(state, n, img_feats)
    offset = HEAD_FROM_DEVICE if head_from_device is None else head_from_device
    anchor = canonicalize_frame(se3_compose(trajectory[0], offset))
    tokens = trajectory_tokens(
        [se3_compose(pose, offset) for pose in trajectory], anchor
    )
    full = np.ones(n, dtype=bool)
    feats = _sample_features(state, tokens, img, full, full.copy(), seed, stride)
    skel = get_skeleton(state.skeleton)
    return features_to_motion(state.normalizer.denormalize(feats), anchor, skel, state.fps)


def generate(state: TrainState, img_feat_1, n_frames: int, seed: int = 0, stride=None) -> MotionSequence:
    """Sample motion conditioned only on the first frame's image feature."""
    img_feat_1 = np.asarray(img_feat_1, dtype=np.float32).reshape(-1)
    if img_feat_1.shape != (state.model_cfg.d_img,):
        raise DataError(
            f"image feature must have width {state.model_cfg.d_img}, got {img_feat_1.shape}"
        )
    if not 1 <= n_frames <= state.model_cfg.n_max:
        raise DataError(
            f"n_frames must be in [1, {state.model_cfg.n_max}], got {n_frames}"
        )
    tokens = np.zeros((n_frames, TRAJ_DIM), dtype=np.float32)
    img = np.zeros((n_frames, state.model_cfg.d_img), dtype=np.float32)
    img[0] = img_feat_1
    traj_mask = np.zeros(n_frames, dtype=bool)
    img_mask = np.zeros(n_frames, dtype=bool)
    img_mask[0] = True
    feats = _sample_features(state, tokens, img, traj_mask, img_mask, seed, stride)
    skel = get_skeleton(state.skeleton)
    return features_to_motion(
        state.normalizer.denormalize(feats), CanonicalFrame.identity(), skel, state.fps
    )


def forecast(
    state: TrainState,
    traj_prefix,
    img_prefix,
    n_total: int = 80,
    seed: int = 0,
    head_from_device: SE3 | None = None,
) -> MotionSequence:
    """Observe a prefix, then inpaint the future with the repaint sampler.

    Stage 1 reconstructs the observed frames exactly as reconstruct() would
    under the same seed; stage 2 repaints the full window while pinning the
    stage-1 features over the prefix, so the first len(traj_prefix) frames
    of the output equal the stage-1 reconstruction bit-exactly.
    """
    n = len(traj_prefix)
    if n >= n_total:
        raise UsageError(
            f"observed prefix ({n} frames) must be shorter than the total ({n_total})"
        )
    if n_total > state.model_cfg.n_max:
        raise DataError(
            f"{n_total} frames exceeds the model's maximum of {state.model_cfg.n_max}"
        )
    skel = get_skeleton(state.skeleton)
    d_img = state.model_cfg.d_img

    if n == 0:
        warnings.warn(
            "forecast with an empty prefix degenerates to unconditional "
            "generation with no image conditioning",
            stacklevel=2,
        )
        tokens = np.zeros((n_total, TRAJ_DIM), dtype=np.float32)
        img = np.zeros((n_total, d_img), dtype=np.float32)
        none = np.zeros(n_total, dtype=bool)
        feats = _sample_features(state, tokens, img, none, none.copy(), seed)
        return features_to_motion(
            state.normalizer.denormalize(feats), CanonicalFrame.identity(), skel, state.fps
        )

    img_prefix = _check_inference_inputs(state, n, img_prefix)
    offset = HEAD_FROM_DEVICE if head_from_device is None else head_from_device
    heads = [se3_compose(pose, offset) for pose in traj_prefix]
    anchor = canonicalize_frame(heads[0])
    tokens_prefix = trajectory_tokens(heads, anchor)

    # stage 1: plain reconstruction of the observed window, same seed as
    # reconstruct() so the two agree frame-for-frame
    full = np.ones(n, dtype=bool)
    stage1 = _sample_features(state, tokens_prefix, img_prefix, full, full.copy(), seed)

    # stage 2: repaint over the full horizon with the prefix pinned
    tokens = np.zeros((n_total, TRAJ_DIM), dtype=np.float32)
    tokens[:n] = tokens_prefix
    img = np.zeros((n_total, d_img), dtype=np.float32)
    img[:n] = img_prefix
    observed = np.zeros(n_total, dtype=bool)
    observed[:n] = True
    cond = ConditioningBundle(
        traj=torch.from_numpy(tokens[None]),
        img=torch.from_numpy(img[None]),
        traj_mask=torch.from_numpy(observed[None]),
        img_mask=torch.from_numpy(observed[None]),
    )
    known = torch.zeros((1, n_total, state.model_cfg.d_motion), dtype=torch.float32)
    known[0, :n] = torch.from_numpy(stage1)
    state.model.eval()
    x = repaint_forecast(
        state.model,
        state.schedule,
        known,
        n,
        cond,
        derive_seed("forecast-repaint", seed),
    )
    feats = state.normalizer.denormalize(x[0].cpu().numpy().astype(np.float32))

    # decode with the prefix's shape estimate so the observed frames match
    # the stage-1 decode bit-exactly
    stage1_feats = state.normalizer.denormalize(stage1)
    shape1 = _decode_shape(state, skel, stage1_feats)
    return features_to_motion(feats, anchor, skel, state.fps, shape_override=shape1)
