"""Reference skeletons: a 5-joint test chain and the 22-joint humanoid."""

import numpy as np

from .errors import DataError
from .se3 import Skeleton

# (name, parent, offset x, y, z). +X is the body's forward axis at zero yaw,
# +Y its left, +Z up. Offsets are meters at shape = 0; the standing zero
# pose therefore needs root_translation z = 0.95 for the toes to reach z = 0.
_HUMANOID22 = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("left_hip", 0, (0.0, 0.09, -0.06)),
    ("right_hip", 0, (0.0, -0.09, -0.06)),
    ("spine1", 0, (0.0, 0.0, 0.12)),
    ("left_knee", 1, (0.0, 0.0, -0.40)),
    ("right_knee", 2, (0.0, 0.0, -0.40)),
    ("spine2", 3, (0.0, 0.0, 0.13)),
    ("left_ankle", 4, (0.0, 0.0, -0.45)),
    ("right_ankle", 5, (0.0, 0.0, -0.45)),
    ("spine3", 6, (0.0, 0.0, 0.06)),
    ("left_toe", 7, (0.12, 0.0, -0.04)),
    ("right_toe", 8, (0.12, 0.0, -0.04)),
    ("neck", 9, (0.0, 0.0, 0.19)),
    ("left_collar", 9, (0.0, 0.09, 0.14)),
    ("right_collar", 9, (0.0, -0.09, 0.14)),
    ("head", 12, (0.0, 0.0, 0.15)),
    ("left_shoulder", 13, (0.0, 0.10, 0.03)),
    ("right_shoulder", 14, (0.0, -0.10, 0.03)),
    ("left_elbow", 16, (0.0, 0.26, 0.0)),
    ("right_elbow", 17, (0.0, -0.26, 0.0)),
    ("left_wrist", 18, (0.0, 0.25, 0.0)),
    ("right_wrist", 19, (0.0, -0.25, 0.0)),
]

# convenient named indices for the humanoid
PELVIS, L_HIP, R_HIP, SPINE1 = 0, 1, 2, 3
L_KNEE, R_KNEE, SPINE2, L_ANKLE, R_ANKLE, SPINE3 = 4, 5, 6, 7, 8, 9
L_TOE, R_TOE, NECK, L_COLLAR, R_COLLAR, HEAD = 10, 11, 12, 13, 14, 15
L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST = 16, 17, 18, 19, 20, 21


def humanoid22() -> Skeleton:
    """22-joint humanoid: pelvis root plus 21 articulated joints."""
    names = tuple(row[0] for row in _HUMANOID22)
    parents = np.array([row[1] for row in _HUMANOID22], dtype=np.int64)
    offsets = np.array([row[2] for row in _HUMANOID22], dtype=np.float64)
    return Skeleton(
        name="humanoid22",
        joint_names=names,
        parents=parents,
        bind_offsets=offsets,
        head_index=HEAD,
        pelvis_index=PELVIS,
        foot_indices=(L_ANKLE, R_ANKLE, L_TOE, R_TOE),
    )


def chain5() -> Skeleton:
    """5-joint straight chain used by small kinematics tests."""
    offsets = np.zeros((5, 3))
    offsets[1:, 2] = 0.25
    return Skeleton(
        name="chain5",
        joint_names=("c0", "c1", "c2", "c3", "c4"),
        parents=np.array([-1, 0, 1, 2, 3], dtype=np.int64),
        bind_offsets=offsets,
        head_index=4,
        pelvis_index=0,
        foot_indices=(1,),
    )


_REGISTRY = {"humanoid22": humanoid22, "chain5": chain5}


def get_skeleton(skeleton_id: str) -> Skeleton:
    try:
        return _REGISTRY[skeleton_id]()
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise DataError(f"unknown skeleton '{skeleton_id}' (known: {known})") from None


def wrist_indices(skel: Skeleton):
    """Hand-joint indices used by the hand position error metric."""
    idx = tuple(i for i, n in enumerate(skel.joint_names) if n.endswith("wrist"))
    if not idx:
        raise DataError(f"skeleton '{skel.name}' has no wrist joints")
    return idx
