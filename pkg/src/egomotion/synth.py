"""Procedural synthetic takes for the humanoid skeleton.

Five activity families: walk-line, walk-circle, squat-reach, kick, shoot-arc.
Legs are posed by exact two-link IK against planted ankle targets, so feet
have bit-stable world positions during stance (no foot skate by
construction). Gait phases are quantized to the frame grid: a foot is either
exactly at its plant point or moving faster than the contact-speed
threshold, which keeps the generator's intended contact labels in agreement
with labels detected from the rendered motion.

All randomness is drawn from generators seeded via derive_seed, so a take is
a pure function of (scene_id, activity_id, duration, seed).
"""

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .errors import DataError, UsageError
from .se3 import (
    MotionSequence,
    PoseParams,
    SE3,
    limb_scale,
    matrix_to_axis_angle,
    rotation_x,
    rotation_y,
    rotation_z,
    se3_compose,
    sequence_head_transforms,
)
from .skeletons import (
    L_ANKLE,
    L_ELBOW,
    L_HIP,
    L_KNEE,
    L_SHOULDER,
    R_ANKLE,
    R_ELBOW,
    R_HIP,
    R_KNEE,
    R_SHOULDER,
    SPINE1,
    humanoid22,
)
from .util import derive_seed

FPS = 10.0
ACTIVITIES = ("walk-line", "walk-circle", "squat-reach", "kick", "shoot-arc")

_THIGH = 0.40
_SHANK = 0.45
_HIP_DROP = 0.06
_ANKLE_REST_Z = 0.04  # ankle height when the sole sits on the floor
_MIN_DURATION = 8.0


@dataclass
class SyntheticTake:
    """One generated recording: motion, device trajectory, intended contacts."""

    scene_id: int
    activity_id: int
    duration: float
    seed: int
    motion: MotionSequence
    trajectory: list  # per-frame device SE3 (== head frame)
    contacts: np.ndarray  # (N, F) float, generator's intended plant labels

    @property
    def activity(self):
        return ACTIVITIES[self.activity_id]

    @property
    def key(self):
        return (
            f"take_s{self.scene_id:03d}_{self.activity}"
            f"_d{int(round(self.duration * 10)):04d}_r{self.seed:08d}"
        )

    @property
    def fps(self):
        return self.motion.fps


def resolve_activity(activity):
    """Accept an activity name or index; return the index."""
    if isinstance(activity, str):
        if activity not in ACTIVITIES:
            raise DataError(
                f"unknown activity {activity!r} (known: {', '.join(ACTIVITIES)})"
            )
        return ACTIVITIES.index(activity)
    idx = int(activity)
    if not 0 <= idx < len(ACTIVITIES):
        raise DataError(f"unknown activity index {activity!r}")
    return idx


def _smoothstep(u):
    return u * u * (3.0 - 2.0 * u)


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _rotation_between(a, b):
    """Minimal rotation matrix taking unit vector a to unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.cross(a, b)
    d = float(np.dot(a, b))
    s = float(np.linalg.norm(c))
    if s < 1e-12:
        if d > 0.0:
            return np.eye(3)
        # 180 degrees about any axis perpendicular to a
        helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    axis = c / s
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + s * k + (1.0 - d) * (k @ k)


def _solve_leg(angles, root_rot, root_pos, s, side, target, foot_heading):
    """Exact two-link leg IK writing hip/knee/ankle axis-angles in place.

    side +1 = left, -1 = right. `target` is the desired world ankle
    position; the foot is kept flat and pointed along `foot_heading`.
    The knee bends toward the foot heading (forward), falling back to
    vertical bend if the leg points along the heading.
    """
    hip_idx = L_HIP if side > 0 else R_HIP
    knee_idx = L_KNEE if side > 0 else R_KNEE
    ankle_idx = L_ANKLE if side > 0 else R_ANKLE

    hip_off = s * np.array([0.0, side * 0.09, -_HIP_DROP])
    p_hip = root_rot @ hip_off + root_pos
    l1, l2 = _THIGH * s, _SHANK * s

    d = np.asarray(target, dtype=np.float64) - p_hip
    dist = float(np.linalg.norm(d))
    dist = min(max(dist, abs(l1 - l2) * 1.05), (l1 + l2) * 0.995)
    d_hat = d / np.linalg.norm(d)

    fwd = np.array([np.cos(foot_heading), np.sin(foot_heading), 0.0])
    bend = fwd - d_hat * float(np.dot(d_hat, fwd))
    norm = float(np.linalg.norm(bend))
    if norm < 1e-6:
        bend = np.array([0.0, 0.0, 1.0]) - d_hat * float(d_hat[2])
        norm = float(np.linalg.norm(bend))
    bend /= norm

    cos_alpha = (l1 * l1 + dist * dist - l2 * l2) / (2.0 * l1 * dist)
    alpha = float(np.arccos(np.clip(cos_alpha, -1.0, 1.0)))
    thigh_dir = np.cos(alpha) * d_hat + np.sin(alpha) * bend
    p_knee = p_hip + l1 * thigh_dir
    shank = p_hip + d_hat * dist - p_knee
    shank_dir = shank / np.linalg.norm(shank)

    down = np.array([0.0, 0.0, -1.0])
    rw_hip = _rotation_between(down, thigh_dir)
    rw_knee = _rotation_between(down, shank_dir)
    rw_ankle = rotation_z(foot_heading)

    angles[hip_idx - 1] = matrix_to_axis_angle(root_rot.T @ rw_hip)
    angles[knee_idx - 1] = matrix_to_axis_angle(rw_hip.T @ rw_knee)
    angles[ankle_idx - 1] = matrix_to_axis_angle(rw_knee.T @ rw_ankle)


def _plant_schedule(n, cyc, stance, offset, plant_fn):
    """Per-frame foot targets for a grid-quantized gait.

    plant_fn(m) -> (xy (2,), heading) gives the m-th plant of this leg.
    Returns (targets_xy (N,2), lift_u (N,), headings (N,), planted (N,) bool);
    lift_u is the swing progress in (0, 1), 0 when planted.
    """
    swing = cyc - stance
    plants = {}

    def plant(m):
        if m not in plants:
            plants[m] = plant_fn(m)
        return plants[m]

    xy = np.zeros((n, 2))
    lift = np.zeros(n)
    headings = np.zeros(n)
    planted = np.zeros(n, dtype=bool)
    for i in range(n):
        k = (i + offset) % cyc
        m = (i + offset) // cyc
        p0, h0 = plant(m)
        if k < stance:
            xy[i] = p0
            headings[i] = h0
            planted[i] = True
        else:
            p1, h1 = plant(m + 1)
            u = (k - stance + 1) / (swing + 1)
            w = _smoothstep(u)
            xy[i] = p0 + w * (p1 - p0)
            lift[i] = np.sin(np.pi * u)
            headings[i] = h0 + w * _wrap_angle(h1 - h0)
    return xy, lift, headings, planted


def _intended_contacts(planted_left, planted_right):
    """Interior-of-stance labels matching the backward-difference detector:
    a frame counts as contact when the foot is planted now and was planted
    on the previous frame; frame 1 copies frame 2."""
    n = planted_left.shape[0]
    out = np.zeros((n, 2), dtype=np.float64)
    for col, planted in enumerate((planted_left, planted_right)):
        inner = planted[1:] & planted[:-1]
        out[1:, col] = inner
        out[0, col] = out[1, col] if n > 1 else float(planted[0])
    # feature contact block order: (l_ankle, r_ankle, l_toe, r_toe)
    return np.concatenate([out, out], axis=1)


def _arm_hang(angles, swing_l=0.0, swing_r=0.0, raise_l=0.0, raise_r=0.0, tilt=0.0):
    """Arms hang near the body; optional fore/aft swing and raise overrides.

    raise_* in [0, 1] sweeps the arm from hanging to overhead; swing_* is a
    fore/aft angle in radians; tilt pitches raised arms forward.
    """
    hang = 1.45
    th_l = -hang + 2.75 * raise_l
    th_r = hang - 2.75 * raise_r
    rot_l = rotation_y(swing_l + tilt * raise_l) @ rotation_x(th_l)
    rot_r = rotation_y(swing_r + tilt * raise_r) @ rotation_x(th_r)
    angles[L_SHOULDER - 1] = matrix_to_axis_angle(rot_l)
    angles[R_SHOULDER - 1] = matrix_to_axis_angle(rot_r)
    angles[L_ELBOW - 1] = np.array([-0.25, 0.0, 0.0])
    angles[R_ELBOW - 1] = np.array([0.25, 0.0, 0.0])


def generate_take(scene_id, activity_id, duration, seed, skel=None) -> SyntheticTake:
    """Generate one synthetic take; deterministic in all arguments."""
    skel = skel if skel is not None else humanoid22()
    if skel.name != "humanoid22":
        raise DataError(f"take generation supports humanoid22 only, got {skel.name!r}")
    if duration < _MIN_DURATION:
        raise UsageError(f"duration must be >= {_MIN_DURATION} s, got {duration}")
    if scene_id < 0 or seed < 0:
        raise DataError("scene_id and seed must be non-negative")
    act = resolve_activity(activity_id)

    rng = np.random.default_rng(derive_seed("take", scene_id, act, seed))
    scene_rng = np.random.default_rng(derive_seed("scene", scene_id))
    origin = scene_rng.uniform(-4.0, 4.0, size=2)

    n = int(round(duration * FPS))
    dt = 1.0 / FPS
    shape = np.zeros(10)
    shape[0] = rng.uniform(-0.15, 0.15)
    s = limb_scale(shape)

    name = ACTIVITIES[act]
    if name in ("walk-line", "walk-circle"):
        frames, planted_l, planted_r = _generate_walk(
            rng, origin, n, dt, s, shape, circular=(name == "walk-circle")
        )
    elif name == "squat-reach":
        frames, planted_l, planted_r = _generate_squat_reach(rng, origin, n, dt, s, shape)
    elif name == "kick":
        frames, planted_l, planted_r = _generate_kick(rng, origin, n, dt, s, shape)
    else:
        frames, planted_l, planted_r = _generate_shoot_arc(rng, origin, n, dt, s, shape)

    motion = MotionSequence(frames=frames, fps=FPS, skeleton_id=skel.name)
    trajectory = sequence_head_transforms(motion, skel)
    contacts = _intended_contacts(planted_l, planted_r)
    return SyntheticTake(
        scene_id=int(scene_id),
        activity_id=act,
        duration=float(duration),
        seed=int(seed),
        motion=motion,
        trajectory=trajectory,
        contacts=contacts,
    )


def _generate_walk(rng, origin, n, dt, s, shape, circular):
    """Shared straight/circular walking generator."""
    speed = 1.0
    cyc = int(rng.integers(10, 12))  # frames per gait cycle
    stance = int(round(0.6 * cyc))
    off_r = cyc // 2
    if circular:
        radius = float(rng.uniform(1.6, 2.4))
        turn = float(rng.choice([-1.0, 1.0]))
        omega = turn * speed / radius
        psi0 = float(rng.uniform(-np.pi, np.pi))
    else:
        omega = 0.0
        psi0 = 0.0

    def heading(t):
        return psi0 + omega * t

    def path(t):
        if not circular:
            return origin + np.array([speed * t, 0.0])
        # integral of speed * (cos psi, sin psi)
        return origin + (speed / omega) * np.array(
            [np.sin(heading(t)) - np.sin(psi0), np.cos(psi0) - np.cos(heading(t))]
        )

    lat = 0.09 * s

    def make_plant(side, offset):
        def plant_fn(m):
            t_mid = (m * cyc + (stance - 1) / 2.0 - offset) * dt
            psi = heading(t_mid)
            c = path(t_mid)
            xy = c + np.array([-np.sin(psi), np.cos(psi)]) * (side * lat)
            return xy, psi

        return plant_fn

    xy_l, lift_l, head_l, planted_l = _plant_schedule(n, cyc, stance, 0, make_plant(1, 0))
    xy_r, lift_r, head_r, planted_r = _plant_schedule(
        n, cyc, stance, off_r, make_plant(-1, off_r)
    )

    z_plant = _ANKLE_REST_Z * s
    lift_amp = 0.07 * s
    bob_phase = rng.uniform(0.0, 2.0 * np.pi)
    spine_pitch = rng.uniform(0.03, 0.08)
    arm_amp = rng.uniform(0.25, 0.45)

    frames = []
    for i in range(n):
        t = i * dt
        psi = heading(t)
        root_rot = rotation_z(psi)
        bob = 0.01 * s * np.cos(2.0 * np.pi * (2.0 * i / cyc) + bob_phase)
        root_pos = np.array([*path(t), 0.84 * s + bob])
        angles = np.zeros((21, 3))
        angles[SPINE1 - 1] = np.array([0.0, spine_pitch, 0.0])
        gait = 2.0 * np.pi * (i % cyc) / cyc
        _arm_hang(
            angles,
            swing_l=arm_amp * np.sin(gait),
            swing_r=-arm_amp * np.sin(gait),
        )
        target_l = np.array([*xy_l[i], z_plant + lift_amp * lift_l[i]])
        target_r = np.array([*xy_r[i], z_plant + lift_amp * lift_r[i]])
        _solve_leg(angles, root_rot, root_pos, s, 1, target_l, head_l[i])
        _solve_leg(angles, root_rot, root_pos, s, -1, target_r, head_r[i])
        frames.append(
            PoseParams(matrix_to_axis_angle(root_rot), root_pos, angles, shape)
        )
    return frames, planted_l, planted_r


def _stationary_plants(origin, rng, psi0, s):
    """Both feet planted under the hips for standing activities."""
    anchor = origin + rng.uniform(-0.5, 0.5, size=2)
    lat = 0.11 * s
    left = anchor + np.array([-np.sin(psi0), np.cos(psi0)]) * lat
    right = anchor - np.array([-np.sin(psi0), np.cos(psi0)]) * lat
    return anchor, left, right


def _generate_squat_reach(rng, origin, n, dt, s, shape):
    psi0 = float(rng.uniform(-np.pi, np.pi))
    anchor, plant_l, plant_r = _stationary_plants(origin, rng, psi0, s)
    period = float(rng.uniform(2.5, 3.5))
    phase0 = float(rng.uniform(0.0, 2.0 * np.pi))
    depth = float(rng.uniform(0.18, 0.26))
    z_top = 0.92 * s
    z_plant = _ANKLE_REST_Z * s
    root_rot = rotation_z(psi0)

    frames = []
    for i in range(n):
        t = i * dt
        squat = 0.5 - 0.5 * np.cos(2.0 * np.pi * t / period + phase0)  # 0 up, 1 down
        reach = 1.0 - squat  # reach up while standing tall
        root_pos = np.array([*anchor, z_top - depth * s * squat])
        angles = np.zeros((21, 3))
        angles[SPINE1 - 1] = np.array([0.0, 0.06 + 0.28 * squat, 0.0])
        _arm_hang(angles, raise_r=reach, tilt=-0.3)
        _solve_leg(angles, root_rot, root_pos, s, 1, np.array([*plant_l, z_plant]), psi0)
        _solve_leg(angles, root_rot, root_pos, s, -1, np.array([*plant_r, z_plant]), psi0)
        frames.append(PoseParams(matrix_to_axis_angle(root_rot), root_pos, angles, shape))
    planted = np.ones(n, dtype=bool)
    return frames, planted, planted.copy()


def _kick_targets(n, cyc, plant_xy, z_plant, psi0, s):
    """Right-foot targets for repeated kicks: plant, wind back, strike, return.

    Control points are placed on the frame grid so the foot is either exactly
    at the plant or moving well above the contact-speed threshold.
    """
    fwd = np.array([np.cos(psi0), np.sin(psi0)])
    plant = np.array([*plant_xy, z_plant])
    back = np.array([*(plant_xy - 0.28 * fwd), 0.15 * s])
    front = np.array([*(plant_xy + 0.45 * fwd), 0.42 * s])

    n_plant = int(round(0.45 * cyc))
    n_wind = max(int(round(0.15 * cyc)), 3)
    n_strike = max(int(round(0.20 * cyc)), 4)
    n_return = cyc - n_plant - n_wind - n_strike
    # the return leg stops one sample short of the plant so the touchdown
    # step stays above the contact-speed threshold (interior-label convention)
    segments = [
        (plant, back, n_wind, n_wind),
        (back, front, n_strike, n_strike),
        (front, plant, n_return, n_return + 1),
    ]

    targets = np.zeros((n, 3))
    planted = np.zeros(n, dtype=bool)
    momentum = np.zeros(n)  # normalized forward progress of the foot
    for i in range(n):
        k = i % cyc
        if k < n_plant:
            targets[i] = plant
            planted[i] = True
            continue
        j = k - n_plant
        for a, b, length, denom in segments:
            if j < length:
                w = _smoothstep((j + 1) / denom)
                targets[i] = a + w * (b - a)
                break
            j -= length
        momentum[i] = float(np.dot(targets[i][:2] - plant_xy, fwd)) / 0.45
    return targets, planted, momentum


def _generate_kick(rng, origin, n, dt, s, shape):
    psi0 = float(rng.uniform(-np.pi, np.pi))
    anchor, plant_l, plant_r = _stationary_plants(origin, rng, psi0, s)
    cyc = int(rng.integers(26, 34))
    z_plant = _ANKLE_REST_Z * s
    root_rot = rotation_z(psi0)
    targets_r, planted_r, momentum = _kick_targets(n, cyc, plant_r, z_plant, psi0, s)

    frames = []
    for i in range(n):
        dip = 0.01 * s * np.sin(2.0 * np.pi * (i % cyc) / cyc)
        root_pos = np.array([*anchor, 0.83 * s - dip])
        angles = np.zeros((21, 3))
        angles[SPINE1 - 1] = np.array([0.0, 0.05 - 0.10 * momentum[i], 0.0])
        _arm_hang(
            angles,
            swing_l=0.4 * momentum[i],
            swing_r=-0.4 * momentum[i],
        )
        _solve_leg(angles, root_rot, root_pos, s, 1, np.array([*plant_l, z_plant]), psi0)
        _solve_leg(angles, root_rot, root_pos, s, -1, targets_r[i], psi0)
        frames.append(PoseParams(matrix_to_axis_angle(root_rot), root_pos, angles, shape))
    planted_l = np.ones(n, dtype=bool)
    return frames, planted_l, planted_r


def _generate_shoot_arc(rng, origin, n, dt, s, shape):
    psi0 = float(rng.uniform(-np.pi, np.pi))
    anchor, plant_l, plant_r = _stationary_plants(origin, rng, psi0, s)
    period = float(rng.uniform(2.0, 2.6))
    phase0 = float(rng.uniform(0.0, 2.0 * np.pi))
    z_plant = _ANKLE_REST_Z * s
    root_rot = rotation_z(psi0)

    frames = []
    for i in range(n):
        t = i * dt
        cycle = 0.5 - 0.5 * np.cos(2.0 * np.pi * t / period + phase0)  # 0 rest, 1 release
        root_pos = np.array([*anchor, 0.90 * s - 0.10 * s * np.sin(np.pi * cycle)])
        angles = np.zeros((21, 3))
        angles[SPINE1 - 1] = np.array([0.0, 0.04 + 0.15 * cycle, 0.0])
        _arm_hang(angles, raise_l=cycle, raise_r=cycle, tilt=-0.5)
        _solve_leg(angles, root_rot, root_pos, s, 1, np.array([*plant_l, z_plant]), psi0)
        _solve_leg(angles, root_rot, root_pos, s, -1, np.array([*plant_r, z_plant]), psi0)
        frames.append(PoseParams(matrix_to_axis_angle(root_rot), root_pos, angles, shape))
    planted = np.ones(n, dtype=bool)
    return frames, planted, planted.copy()


# --------------------------------------------------------------- device trajectory


def derive_device_trajectory(motion: MotionSequence, skel, calibration: SE3 = None):
    """Per-frame device pose: head transform composed with a fixed calibration
    offset (identity by default, i.e. device frame == head frame)."""
    heads = sequence_head_transforms(motion, skel)
    if calibration is None:
        return heads
    calibration.validate()
    return [se3_compose(h, calibration) for h in heads]


# --------------------------------------------------------------- take containers


def save_take(path, take: SyntheticTake):
    motion = take.motion
    arrays = {
        "root_rotation": np.stack([p.root_rotation for p in motion.frames]).astype(np.float32),
        "root_translation": np.stack(
            [p.root_translation for p in motion.frames]
        ).astype(np.float32),
        "joint_angles": np.stack([p.joint_angles for p in motion.frames]).astype(np.float32),
        "shape": motion.shape.astype(np.float32),
        "traj_rotation": np.stack([t.rotation for t in take.trajectory]).astype(np.float32),
        "traj_translation": np.stack(
            [t.translation for t in take.trajectory]
        ).astype(np.float32),
        "contacts": take.contacts.astype(np.float32),
    }
    meta = {
        "kind": "take",
        "scene_id": take.scene_id,
        "activity_id": take.activity_id,
        "activity": take.activity,
        "duration": take.duration,
        "seed": take.seed,
        "fps": motion.fps,
        "skeleton": motion.skeleton_id,
    }
    write_container(path, arrays, meta)


def load_take(path, skel) -> SyntheticTake:
    arrays, meta = read_container(path)
    if meta.get("kind") != "take":
        raise DataError(f"{path}: container is not a take (kind={meta.get('kind')!r})")
    if meta.get("skeleton") != skel.name:
        raise DataError(
            f"{path}: take uses skeleton {meta.get('skeleton')!r}, expected {skel.name!r}"
        )
    rr = arrays["root_rotation"].astype(np.float64)
    rt = arrays["root_translation"].astype(np.float64)
    ja = arrays["joint_angles"].astype(np.float64)
    shape = arrays["shape"].astype(np.float64)
    n = rr.shape[0]
    frames = [PoseParams(rr[i], rt[i], ja[i], shape) for i in range(n)]
    motion = MotionSequence(frames=frames, fps=float(meta["fps"]), skeleton_id=skel.name)
    traj_r = arrays["traj_rotation"].astype(np.float64)
    traj_t = arrays["traj_translation"].astype(np.float64)
    trajectory = [SE3(traj_r[i], traj_t[i]) for i in range(n)]
    return SyntheticTake(
        scene_id=int(meta["scene_id"]),
        activity_id=int(meta["activity_id"]),
        duration=float(meta["duration"]),
        seed=int(meta["seed"]),
        motion=motion,
        trajectory=trajectory,
        contacts=arrays["contacts"].astype(np.float64),
    )


# --------------------------------------------------------------- windowing


@dataclass(frozen=True)
class ClipRef:
    """A window into a take: [start, start + length) frames."""

    take_key: str
    start: int
    length: int
    split: str


def take_split(take_key: str, val_mod: int = 5) -> str:
    """Deterministic take-level split: roughly 1/val_mod of takes go to val."""
    return "val" if derive_seed("split", take_key) % val_mod == 0 else "train"


def window_dataset(takes, window_s=8.0, train_stride_s=2.0, eval_stride_s=20.0):
    """Enumerate fixed-length clips per take. The split is decided per take
    (never per clip); train takes use the dense stride, val takes the sparse
    one. Clips never straddle takes."""
    clips = []
    for take in takes:
        fps = take.fps
        n = len(take.motion)
        window = int(round(window_s * fps))
        if n < window:
            continue
        split = take_split(take.key)
        stride_s = train_stride_s if split == "train" else eval_stride_s
        stride = max(int(round(stride_s * fps)), 1)
        for start in range(0, n - window + 1, stride):
            clips.append(ClipRef(take.key, start, window, split))
    clips.sort(key=lambda c: (c.take_key, c.start))
    return clips


# --------------------------------------------------------------- feature cache


def encode_take_features(take: SyntheticTake, encoder, d_img=64):
    """Per-frame image features from the device trajectory."""
    feats = np.stack(
        [encoder(take.scene_id, take.activity_id, pose) for pose in take.trajectory]
    ).astype(np.float32)
    if feats.shape != (len(take.motion), d_img):
        raise DataError(
            f"encoder produced shape {feats.shape}, expected {(len(take.motion), d_img)}"
        )
    return feats


def feature_cache(takes, encoder, cache_dir, d_img=64):
    """Write one feature container per take, skipping takes already cached.

    Returns {take_key: path}. A cached file is reused only if its metadata
    matches the take (frames, fps, feature width); a mismatch is an error
    rather than a silent re-encode.
    """
    import os

    os.makedirs(cache_dir, exist_ok=True)
    out = {}
    for take in takes:
        path = os.path.join(cache_dir, take.key + ".features.eem")
        expected = {
            "kind": "features",
            "take": take.key,
            "fps": take.fps,
            "n_frames": len(take.motion),
            "d_img": d_img,
        }
        if os.path.exists(path):
            _, meta = read_container(path)
            if meta != expected:
                raise DataError(
                    f"{path}: cached features do not match the take "
                    f"(cached {meta}, expected {expected})"
                )
        else:
            feats = encode_take_features(take, encoder, d_img)
            write_container(path, {"features": feats}, expected)
        out[take.key] = path
    return out


def load_features(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "features":
        raise DataError(f"{path}: container is not a feature cache file")
    return arrays["features"], meta
