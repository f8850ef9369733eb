"""Rigid-transform algebra, rotation parameterizations, and forward kinematics.

Conventions: right-handed world, +Z up, floor plane at z = 0. Rotation
matrices act on column vectors. Composition (a o b) applies b first, then a.
All quantities are float64 numpy; meters and radians throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotationError

_EPS = 1e-12


def _vec3(x, name="vector"):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must have 3 entries, got shape {np.shape(x)}")
    return a


@dataclass(frozen=True)
class SE3:
    """A rigid transform: 3x3 rotation plus 3-vector translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = _vec3(self.translation, "translation")
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {r.shape}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return SE3(np.eye(3), np.zeros(3))

    def validate(self, tol=1e-6):
        """Check orthonormality and det +1 within tol."""
        r = self.rotation
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("non-finite SE3 entries")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3g})")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise ValueError("rotation determinant is not +1")
        return self

    def apply(self, points):
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return SE3(m[:3, :3], m[:3, 3])


def se3_compose(a: SE3, b: SE3) -> SE3:
    """(a o b): apply b, then a."""
    return SE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(a: SE3) -> SE3:
    rt = a.rotation.T
    return SE3(rt, -rt @ a.translation)


def rotation_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_to_matrix(aa):
    """Rodrigues formula; the vector's norm is the angle in radians."""
    v = _vec3(aa, "axis-angle")
    theta = float(np.linalg.norm(v))
    k = np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )
    if theta < 1e-8:
        # second-order series keeps tiny rotations exact to machine precision
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def matrix_to_axis_angle(r):
    """Inverse Rodrigues via quaternion extraction (stable near 0 and pi)."""
    r = np.asarray(r, dtype=np.float64)
    w, x, y, z = _quat_from_matrix(r)
    vn = np.sqrt(x * x + y * y + z * z)
    if vn < _EPS:
        return 2.0 * np.array([x, y, z])
    theta = 2.0 * np.arctan2(vn, w)
    return np.array([x, y, z]) * (theta / vn)


def _quat_from_matrix(r):
    """Unit quaternion (w >= 0) from a rotation matrix, Shepperd's method."""
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] >= r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    return w, x, y, z


def rot_to_6d(r):
    """First two columns of the rotation matrix, concatenated (6,)."""
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate([r[:, 0], r[:, 1]])


def rot_from_6d(v):
    """Gram-Schmidt the two stored columns back into a rotation matrix.

    Raises DegenerateRotationError when the columns are (near-)zero or
    (near-)parallel, i.e. when no orthonormal frame is recoverable.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (6,):
        raise ValueError(f"6D rotation vector must have 6 entries, got {v.shape}")
    a, b = v[:3], v[3:]
    na = np.linalg.norm(a)
    if na < 1e-8:
        raise DegenerateRotationError("first column has (near-)zero norm")
    c0 = a / na
    b_perp = b - np.dot(c0, b) * c0
    nb = np.linalg.norm(b_perp)
    if nb < 1e-8:
        raise DegenerateRotationError("columns are (near-)parallel")
    c1 = b_perp / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=1)


def geodesic_angle(ra, rb):
    """Rotation angle (radians) between two rotation matrices."""
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    cos_t = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_t, -1.0, 1.0)))


@dataclass(frozen=True)
class Skeleton:
    """A kinematic tree in topological order (parents[i] < i, root at 0).

    bind_offsets[j] is joint j's rest translation in its parent's frame;
    the root's offset must be zero (its placement comes from the pose).
    """

    name: str
    joint_names: tuple
    parents: np.ndarray
    bind_offsets: np.ndarray
    head_index: int
    pelvis_index: int
    foot_indices: tuple

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.bind_offsets, dtype=np.float64)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "bind_offsets", offsets)
        object.__setattr__(self, "foot_indices", tuple(int(i) for i in self.foot_indices))
        self._check()

    def _check(self):
        j = len(self.joint_names)
        if j < 1:
            raise ValueError("skeleton needs at least one joint")
        if self.parents.shape != (j,) or self.bind_offsets.shape != (j, 3):
            raise ValueError("parents/bind_offsets shapes inconsistent with joint count")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise ValueError("exactly one root (index 0, parent -1) is required")
        if np.any(self.parents[1:] >= np.arange(1, j)):
            raise ValueError("parents must satisfy parents[i] < i (topological order)")
        if np.any(self.bind_offsets[0] != 0.0):
            raise ValueError("root bind offset must be zero")
        for idx in (self.head_index, self.pelvis_index, *self.foot_indices):
            if not (0 <= idx < j):
                raise ValueError(f"role index {idx} out of range")
        if j >= 2:
            if self.head_index == 0 or any(i == 0 for i in self.foot_indices):
                raise ValueError("head/foot roles must differ from the root")

    @property
    def num_joints(self):
        return len(self.joint_names)

    def chain_to_root(self, joint):
        """Indices from `joint` up to (and including) the root."""
        chain = [joint]
        while self.parents[chain[-1]] != -1:
            chain.append(int(self.parents[chain[-1]]))
        return chain


@dataclass
class PoseParams:
    """One frame of pose: root transform, local joint angles, shape.

    root_rotation / joint_angles are axis-angle 3-vectors (radians). The
    shape vector has 10 entries; only shape[0] affects this skeleton
    (isotropic limb scale), the rest ride along untouched.
    """

    root_rotation: np.ndarray
    root_translation: np.ndarray
    joint_angles: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        self.root_rotation = _vec3(self.root_rotation, "root_rotation")
        self.root_translation = _vec3(self.root_translation, "root_translation")
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        if self.joint_angles.ndim != 2 or self.joint_angles.shape[1] != 3:
            raise ValueError("joint_angles must have shape (J-1, 3)")
        if self.shape.shape != (10,):
            raise ValueError("shape must have 10 entries")

    @staticmethod
    def zeros(skel: Skeleton):
        return PoseParams(
            np.zeros(3), np.zeros(3), np.zeros((skel.num_joints - 1, 3)), np.zeros(10)
        )

    def copy(self):
        return PoseParams(
            self.root_rotation.copy(),
            self.root_translation.copy(),
            self.joint_angles.copy(),
            self.shape.copy(),
        )

    def check_finite(self):
        for arr in (self.root_rotation, self.root_translation, self.joint_angles, self.shape):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite pose parameters")
        return self


@dataclass
class MotionSequence:
    """A sequence of poses at a fixed frame rate, sharing one shape vector."""

    frames: list
    fps: float
    skeleton_id: str

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("motion needs at least one frame")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        shape0 = self.frames[0].shape
        for f in self.frames[1:]:
            if not np.array_equal(f.shape, shape0):
                raise ValueError("all frames must share an identical shape vector")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape


def limb_scale(shape):
    """Isotropic limb-length factor: s = 1 + 0.1 * shape[0]."""
    return 1.0 + 0.1 * float(np.asarray(shape).reshape(-1)[0])


def forward_kinematics(skel: Skeleton, pose: PoseParams):
    """Global SE3 per joint. Root takes the pose's root transform directly;
    every child composes (local rotation, scaled bind offset) onto its parent.
    """
    j = skel.num_joints
    if pose.joint_angles.shape[0] != j - 1:
        raise ValueError(
            f"pose has {pose.joint_angles.shape[0]} joint angles, "
            f"skeleton '{skel.name}' needs {j - 1}"
        )
    s = limb_scale(pose.shape)
    out = [SE3(axis_angle_to_matrix(pose.root_rotation), pose.root_translation)]
    for i in range(1, j):
        local = SE3(axis_angle_to_matrix(pose.joint_angles[i - 1]), s * skel.bind_offsets[i])
        out.append(se3_compose(out[int(skel.parents[i])], local))
    return out


def joint_positions(transforms):
    """Stack the translations of per-joint transforms into a (J, 3) array."""
    return np.stack([t.translation for t in transforms], axis=0)


def sequence_positions(motion: MotionSequence, skel: Skeleton):
    """FK over all frames: (N, J, 3) world-frame joint positions."""
    return np.stack(
        [joint_positions(forward_kinematics(skel, f)) for f in motion.frames], axis=0
    )


def sequence_head_transforms(motion: MotionSequence, skel: Skeleton):
    """Per-frame head SE3 list."""
    return [forward_kinematics(skel, f)[skel.head_index] for f in motion.frames]
