"""Shared test utilities: quick random motions and simple walking clips."""

import numpy as np

from egomotion.se3 import SE3, MotionSequence, PoseParams, rotation_z


def random_motion(rng, skel, n_frames=12, angle_scale=0.25, fps=10.0):
    """A smooth-ish random motion with a well-defined head yaw."""
    j = skel.num_joints
    shape = np.zeros(10)
    shape[0] = rng.uniform(-0.3, 0.3)
    base_angles = rng.uniform(-angle_scale, angle_scale, size=(j - 1, 3))
    drift = rng.uniform(-angle_scale, angle_scale, size=(j - 1, 3)) / max(n_frames, 1)
    yaw0 = rng.uniform(-np.pi, np.pi)
    pos = rng.uniform(-1.0, 1.0, size=3) + np.array([0.0, 0.0, 1.0])
    vel = rng.uniform(-0.1, 0.1, size=3)
    frames = []
    for i in range(n_frames):
        root_aa = np.array([0.1 * np.sin(0.3 * i), 0.1 * np.cos(0.2 * i), yaw0 + 0.05 * i])
        frames.append(
            PoseParams(
                root_rotation=root_aa,
                root_translation=pos + vel * i,
                joint_angles=base_angles + drift * i,
                shape=shape.copy(),
            )
        )
    return MotionSequence(frames=frames, fps=fps, skeleton_id=skel.name)


def straight_walk_motion(skel, n_frames=20, speed=1.0, fps=10.0):
    """Zero pose translating along +X at constant speed."""
    frames = [
        PoseParams(
            root_rotation=np.zeros(3),
            root_translation=np.array([speed * i / fps, 0.0, 0.95]),
            joint_angles=np.zeros((skel.num_joints - 1, 3)),
            shape=np.zeros(10),
        )
        for i in range(n_frames)
    ]
    return MotionSequence(frames=frames, fps=fps, skeleton_id=skel.name)


def planar_transform(yaw, x, y):
    """A floor-plane rigid transform as an SE3."""
    return SE3(rotation_z(yaw), np.array([x, y, 0.0]))


def transform_motion(g: SE3, motion: MotionSequence) -> MotionSequence:
    """Apply a world-frame rigid transform to every frame's root."""
    from egomotion.se3 import axis_angle_to_matrix, matrix_to_axis_angle, se3_compose

    frames = []
    for f in motion.frames:
        root = SE3(axis_angle_to_matrix(f.root_rotation), f.root_translation)
        moved = se3_compose(g, root)
        frames.append(
            PoseParams(
                root_rotation=matrix_to_axis_angle(moved.rotation),
                root_translation=moved.translation,
                joint_angles=f.joint_angles.copy(),
                shape=f.shape.copy(),
            )
        )
    return MotionSequence(frames=frames, fps=motion.fps, skeleton_id=motion.skeleton_id)
