"""Head-centric motion features: encode to/decode from the denoised space.

Each frame's canonical frame is the head transform projected onto the floor
(yaw only, z = 0). Global placement is carried exclusively by per-frame
planar residuals between consecutive canonical frames plus a decode-time
anchor, which makes the features invariant to planar rigid transforms of
the whole motion.

Per-frame feature blocks, in order:
    residual      4   (cos dpsi, sin dpsi, dx, dy) of cM[i-1]^-1 o cM[i]
    head_height   1   head z in meters (unchanged by the canonical frame)
    head_rot      6   canonicalized global head rotation, 6D
    joint_rot     6*(J-1)   local joint rotations, 6D (already invariant)
    joint_pos     3*(J-1)   canonicalized positions of all joints but the
                            head (the head sits at (0, 0, head_height))
    contact       F   per-foot-joint contact labels in {0, 1}
    shape         10  shape vector, repeated per frame

Width D = 4 + 1 + 6 + 6(J-1) + 3(J-1) + F + 10; humanoid22 gives D = 214.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateRotationError, DegenerateYawError
from .se3 import (
    SE3,
    MotionSequence,
    PoseParams,
    Skeleton,
    axis_angle_to_matrix,
    forward_kinematics,
    joint_positions,
    limb_scale,
    matrix_to_axis_angle,
    rot_from_6d,
    rot_to_6d,
    rotation_z,
    se3_compose,
    se3_inverse,
)

# yaw is undefined once the projected reference axis shrinks below sin(1 deg)
_YAW_DEGENERACY = np.sin(np.deg2rad(1.0))

# foot contact thresholds: height below h_c AND speed below v_c
CONTACT_HEIGHT = 0.05  # meters
CONTACT_SPEED = 0.15  # meters / second


@dataclass(frozen=True)
class CanonicalFrame:
    """Yaw-only SE3 at floor height: the per-frame canonicalization frame."""

    yaw: float
    xy: np.ndarray

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1)
        if xy.shape != (2,):
            raise ValueError("xy must have 2 entries")
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "xy", xy)

    @staticmethod
    def identity():
        return CanonicalFrame(0.0, np.zeros(2))

    def to_se3(self) -> SE3:
        return SE3(rotation_z(self.yaw), np.array([self.xy[0], self.xy[1], 0.0]))


# the decode anchor is just the canonical frame that places frame 1 in world
DecodeAnchor = CanonicalFrame


@dataclass(frozen=True)
class FeatureLayout:
    """Column slices of the flattened per-frame feature vector."""

    num_joints: int
    num_feet: int
    residual: slice
    head_height: slice
    head_rot: slice
    joint_rot: slice
    joint_pos: slice
    contact: slice
    shape: slice
    width: int


def feature_layout(skel: Skeleton) -> FeatureLayout:
    j, f = skel.num_joints, len(skel.foot_indices)
    sizes = [4, 1, 6, 6 * (j - 1), 3 * (j - 1), f, 10]
    edges = np.cumsum([0] + sizes)
    sl = [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    return FeatureLayout(j, f, *sl, width=int(edges[-1]))


def _projected_yaw(axis):
    """Yaw of a 3-vector's floor projection, or None when near-vertical."""
    total = np.linalg.norm(axis)
    norm = np.hypot(axis[0], axis[1])
    if total < 1e-12 or norm < _YAW_DEGENERACY * total:
        return None
    return float(np.arctan2(axis[1], axis[0]))


def canonicalize_frame(head: SE3) -> CanonicalFrame:
    """Floor-project a head transform: keep yaw and xy, drop the rest.

    Yaw comes from the head's forward axis (+X column). Raises
    DegenerateYawError when that axis is within 1 degree of vertical.
    """
    yaw = _projected_yaw(head.rotation[:, 0])
    if yaw is None:
        raise DegenerateYawError("head forward axis within 1 degree of vertical")
    return CanonicalFrame(yaw, head.translation[:2].copy())


def _canonical_frames(heads, fallback_lateral=True):
    """Canonical frame per head transform with the documented fallbacks:
    frame 1 may fall back to the lateral (+Y) axis, later frames reuse the
    previous frame's yaw.
    """
    frames = []
    for i, head in enumerate(heads):
        yaw = _projected_yaw(head.rotation[:, 0])
        if yaw is None:
            if i > 0:
                yaw = frames[-1].yaw
            elif fallback_lateral:
                lat = _projected_yaw(head.rotation[:, 1])
                if lat is None:
                    raise DegenerateYawError(
                        "frame 1: both forward and lateral head axes are vertical"
                    )
                yaw = lat - np.pi / 2.0
            else:
                raise DegenerateYawError("frame 1 head yaw is degenerate")
        frames.append(CanonicalFrame(yaw, head.translation[:2].copy()))
    return frames


def frame1_anchor(motion: MotionSequence, skel: Skeleton) -> CanonicalFrame:
    """The anchor that decodes an encoding of `motion` back in place."""
    head = forward_kinematics(skel, motion.frames[0])[skel.head_index]
    return _canonical_frames([head])[0]


def foot_contact_labels(positions, fps, foot_indices, h_c=CONTACT_HEIGHT, v_c=CONTACT_SPEED):
    """Binary contact labels (N, F): low AND slow feet count as planted.

    Speeds are backward differences; frame 1 copies frame 2's speed.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[2] != 3:
        raise ValueError("positions must have shape (N, J, 3)")
    if pos.shape[0] < 2:
        raise ValueError("need at least 2 frames to estimate foot speed")
    feet = pos[:, list(foot_indices), :]  # N x F x 3
    vel = np.linalg.norm(np.diff(feet, axis=0), axis=2) * float(fps)  # (N-1) x F
    speed = np.concatenate([vel[:1], vel], axis=0)  # frame 1 copies frame 2
    low = feet[:, :, 2] < h_c
    slow = speed < v_c
    return (low & slow).astype(np.float64)


def encode(motion: MotionSequence, skel: Skeleton) -> np.ndarray:
    """Encode a motion into (N, D) head-centric features."""
    layout = feature_layout(skel)
    n = len(motion.frames)
    j = skel.num_joints
    transforms = [forward_kinematics(skel, f) for f in motion.frames]
    heads = [tr[skel.head_index] for tr in transforms]
    canon = _canonical_frames(heads)
    positions = np.stack([joint_positions(tr) for tr in transforms])  # N x J x 3

    if n >= 2:
        contacts = foot_contact_labels(positions, motion.fps, skel.foot_indices)
    else:
        # single frame: no speed evidence, fall back to the height test alone
        feet_z = positions[0, list(skel.foot_indices), 2]
        contacts = (feet_z < CONTACT_HEIGHT).astype(np.float64)[None, :]

    body_idx = [k for k in range(j) if k != skel.head_index]
    out = np.zeros((n, layout.width))
    for i in range(n):
        cos_p, sin_p = np.cos(canon[i].yaw), np.sin(canon[i].yaw)
        if i == 0:
            out[i, layout.residual] = (1.0, 0.0, 0.0, 0.0)
        else:
            dpsi = canon[i].yaw - canon[i - 1].yaw
            dxy = canon[i].xy - canon[i - 1].xy
            cp, sp = np.cos(canon[i - 1].yaw), np.sin(canon[i - 1].yaw)
            # rotate the step into the previous canonical frame
            dx = cp * dxy[0] + sp * dxy[1]
            dy = -sp * dxy[0] + cp * dxy[1]
            out[i, layout.residual] = (np.cos(dpsi), np.sin(dpsi), dx, dy)
        head = heads[i]
        out[i, layout.head_height] = head.translation[2]
        inv_yaw = np.array([[cos_p, sin_p, 0.0], [-sin_p, cos_p, 0.0], [0.0, 0.0, 1.0]])
        out[i, layout.head_rot] = rot_to_6d(inv_yaw @ head.rotation)
        angles = motion.frames[i].joint_angles
        rot6 = [rot_to_6d(axis_angle_to_matrix(angles[k])) for k in range(j - 1)]
        out[i, layout.joint_rot] = np.concatenate(rot6)
        rel = positions[i, body_idx, :] - np.array([canon[i].xy[0], canon[i].xy[1], 0.0])
        out[i, layout.joint_pos] = (rel @ inv_yaw.T).reshape(-1)
        out[i, layout.contact] = contacts[i]
        out[i, layout.shape] = motion.frames[i].shape
    return out


def sanitize_features(features, layout: FeatureLayout):
    """Pull denoised features back onto the representation manifold.

    Renormalizes the (cos, sin) residual pair, Gram-Schmidts every 6D
    rotation (identity fallback for degenerate vectors), and thresholds
    contacts at 0.5. Returns a cleaned copy.
    """
    f = np.array(features, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise DataError("non-finite features")
    start = layout.residual.start
    cs = f[:, start : start + 2]
    norms = np.linalg.norm(cs, axis=1, keepdims=True)
    cs = cs / np.maximum(norms, 1e-6)
    cs[norms[:, 0] < 1e-6] = (1.0, 0.0)
    f[:, start : start + 2] = cs
    for i in range(f.shape[0]):
        for sl in _rot6_slices(layout):
            try:
                f[i, sl] = rot_to_6d(rot_from_6d(f[i, sl]))
            except DegenerateRotationError:
                f[i, sl] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    f[:, layout.contact] = (f[:, layout.contact] > 0.5).astype(np.float64)
    return f


def _rot6_slices(layout: FeatureLayout):
    yield layout.head_rot
    base = layout.joint_rot.start
    for k in range(layout.num_joints - 1):
        yield slice(base + 6 * k, base + 6 * (k + 1))


def _accumulate_canonical(features, layout, anchor: CanonicalFrame):
    """Rebuild per-frame canonical frames from residuals and the anchor.

    The frame-1 residual is ignored by contract; the anchor takes its place.
    """
    n = features.shape[0]
    frames = [anchor]
    for i in range(1, n):
        cos_d, sin_d, dx, dy = features[i, layout.residual]
        prev = frames[-1]
        yaw = prev.yaw + np.arctan2(sin_d, cos_d)
        cp, sp = np.cos(prev.yaw), np.sin(prev.yaw)
        xy = prev.xy + np.array([cp * dx - sp * dy, sp * dx + cp * dy])
        frames.append(CanonicalFrame(yaw, xy))
    return frames


def _decode_params(features, anchor, skel, shape_override=None):
    """Shared decode core: recover root transforms and local rotations.

    Returns (root SE3 list, local rotation matrices (N, J-1, 3, 3), shape).
    The root is recovered by walking the head transform back through the
    pelvis-to-head chain, so the decoded head matches the features exactly
    even for off-manifold (denoised) inputs.
    """
    layout = feature_layout(skel)
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != layout.width:
        raise DataError(
            f"feature width {f.shape[-1] if f.ndim else '?'} does not match "
            f"skeleton '{skel.name}' (expected {layout.width})"
        )
    f = sanitize_features(f, layout)
    n = f.shape[0]
    canon = _accumulate_canonical(f, layout, anchor)
    if shape_override is not None:
        shape = np.asarray(shape_override, dtype=np.float64).reshape(10).copy()
    else:
        shape = f[:, layout.shape].mean(axis=0)
    s = limb_scale(shape)

    # pelvis-to-head joint chain, root excluded, ordered from the root down
    chain = [k for k in reversed(skel.chain_to_root(skel.head_index)) if k != 0]

    roots = []
    locals_all = np.zeros((n, skel.num_joints - 1, 3, 3))
    for i in range(n):
        for k in range(skel.num_joints - 1):
            locals_all[i, k] = rot_from_6d(f[i, layout.joint_rot][6 * k : 6 * (k + 1)])
        head_rot = rot_from_6d(f[i, layout.head_rot])
        t_z = float(f[i, layout.head_height][0])
        head_global = se3_compose(
            canon[i].to_se3(), SE3(head_rot, np.array([0.0, 0.0, t_z]))
        )
        walk = SE3.identity()
        for k in chain:
            walk = se3_compose(walk, SE3(locals_all[i, k - 1], s * skel.bind_offsets[k]))
        roots.append(se3_compose(head_global, se3_inverse(walk)))
    return roots, locals_all, shape


def decode(features, anchor: CanonicalFrame, skel: Skeleton, shape_override=None):
    """Decode features into (per-frame per-joint SE3 lists, shape vector).

    joint_pos columns are treated as redundant: rotations plus forward
    kinematics are authoritative for the decoded geometry.
    """
    roots, locals_all, shape = _decode_params(features, anchor, skel, shape_override)
    s = limb_scale(shape)
    out = []
    for i, root in enumerate(roots):
        transforms = [root]
        for k in range(1, skel.num_joints):
            local = SE3(locals_all[i, k - 1], s * skel.bind_offsets[k])
            transforms.append(se3_compose(transforms[int(skel.parents[k])], local))
        out.append(transforms)
    return out, shape


def features_to_motion(features, anchor, skel, fps, shape_override=None) -> MotionSequence:
    """Decode features into a MotionSequence (axis-angle parameters)."""
    roots, locals_all, shape = _decode_params(features, anchor, skel, shape_override)
    frames = []
    for i, root in enumerate(roots):
        angles = np.stack(
            [matrix_to_axis_angle(locals_all[i, k]) for k in range(skel.num_joints - 1)]
        )
        frames.append(
            PoseParams(
                root_rotation=matrix_to_axis_angle(root.rotation),
                root_translation=root.translation.copy(),
                joint_angles=angles,
                shape=shape.copy(),
            )
        )
    return MotionSequence(frames=frames, fps=fps, skeleton_id=skel.name)
