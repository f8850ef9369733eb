"""Per-frame robust fitting of skeleton parameters to multi-view 2D
keypoints, sequence-level refinement with a temporal smoothness penalty,
and jitter-based segment filtering, on synthetic camera rigs.

The energy is differentiated exactly (reverse-mode through a torch twin of
the forward kinematics); finite differences appear only in tests.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .container import read_container, write_container
from .errors import DataError
from .se3 import SE3, MotionSequence, PoseParams, Skeleton, sequence_positions

BEHIND_CAMERA_Z = 1e-6


@dataclass(frozen=True)
class CameraView:
    """A pinhole camera: intrinsics in pixels plus a world-to-camera SE3."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: SE3

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


@dataclass
class Keypoints2D:
    """Per-view, per-frame 2D joint detections.

    pixels: (views, frames, joints, 2); confidence: (views, frames, joints)
    in [0, 1]. Pixels may be arbitrary where confidence is zero but must be
    finite wherever confidence is positive.
    """

    pixels: np.ndarray
    confidence: np.ndarray
    fps: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.pixels.ndim != 4 or self.pixels.shape[3] != 2:
            raise ValueError("pixels must have shape (views, frames, joints, 2)")
        if self.confidence.shape != self.pixels.shape[:3]:
            raise ValueError("confidence shape must match pixels (views, frames, joints)")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("confidence must lie in [0, 1]")
        observed = self.confidence > 0
        if not np.all(np.isfinite(self.pixels[observed])):
            raise ValueError("pixels must be finite wherever confidence > 0")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def n_views(self):
        return self.pixels.shape[0]

    @property
    def n_frames(self):
        return self.pixels.shape[1]

    @property
    def n_joints(self):
        return self.pixels.shape[2]

    def frame(self, i):
        """One frame's slice: pixels (views, joints, 2), confidence (views, joints)."""
        return self.pixels[:, i], self.confidence[:, i]


@dataclass(frozen=True)
class FitWeights:
    """Energy weights: quadratic pose/shape priors, robust 2D data term,
    sequence-stage smoothness, and the Geman-McClure scale in pixels."""

    lambda_pose: float = 1e-3
    lambda_shape: float = 1e-2
    lambda_2d: float = 1.0
    lambda_smooth: float = 0.1
    rho: float = 10.0

    def __post_init__(self):
        for name in ("lambda_pose", "lambda_shape", "lambda_2d", "lambda_smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def project(view: CameraView, point):
    """Pinhole projection of a world point to pixels; behind-camera raises."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    q = view.extrinsic.rotation @ p + view.extrinsic.translation
    if not q[2] > BEHIND_CAMERA_Z:
        raise DataError("point is behind the camera")
    return np.array([view.fx * q[0] / q[2] + view.cx, view.fy * q[1] / q[2] + view.cy])


def geman_mcclure(residual_norm, rho):
    """Robust penalty r^2 / (r^2 + rho^2), bounded in [0, 1)."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    r2 = float(residual_norm) ** 2
    return r2 / (r2 + float(rho) ** 2)


# ------------------------------------------------------------------ torch twin


def _aa_to_matrix_torch(aa):
    """Batched Rodrigues formula, (..., 3) -> (..., 3, 3), safe at zero."""
    theta = aa.norm(dim=-1, keepdim=True)
    small = theta < 1e-8
    safe = torch.where(small, torch.ones_like(theta), theta)
    # sin(t)/t and (1-cos(t))/t^2 with Taylor fallbacks near zero
    a = torch.where(small, 1.0 - theta**2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta**2 / 24.0, (1.0 - torch.cos(safe)) / safe**2)
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


def _fk_positions_torch(root_aa, root_t, joint_aa, shape, skel: Skeleton):
    """Torch twin of forward kinematics returning (..., J, 3) positions.

    Matches the numpy convention: the root takes the pose transform directly
    and each child composes (local rotation, scaled bind offset) onto its
    parent, so a joint's own rotation only moves its descendants.
    """
    s = 1.0 + 0.1 * shape[..., 0]
    offsets = torch.as_tensor(skel.bind_offsets, dtype=root_t.dtype, device=root_t.device)
    locals_rot = _aa_to_matrix_torch(joint_aa)  # (..., J-1, 3, 3)
    rots = [_aa_to_matrix_torch(root_aa)]
    poss = [root_t]
    for i in range(1, skel.num_joints):
        parent = int(skel.parents[i])
        off = s[..., None] * offsets[i]
        poss.append(poss[parent] + (rots[parent] @ off[..., None]).squeeze(-1))
        rots.append(rots[parent] @ locals_rot[..., i - 1, :, :])
    return torch.stack(poss, dim=-2)


def _stack_views(views, n_frames, dtype=torch.float64):
    """Stack camera parameters; each entry is a CameraView (static) or a
    per-frame list of CameraViews (e.g. an egocentric camera riding on the
    head). Returns rotation (V, N, 3, 3), translation (V, N, 3), and the
    four intrinsics as (V,) tensors."""
    if not views:
        zero = torch.zeros(0, dtype=dtype)
        return (
            torch.zeros((0, n_frames, 3, 3), dtype=dtype),
            torch.zeros((0, n_frames, 3), dtype=dtype),
            zero, zero, zero, zero,
        )
    rot, trans, fx, fy, cx, cy = [], [], [], [], [], []
    for entry in views:
        if isinstance(entry, CameraView):
            seq = [entry] * n_frames
        else:
            seq = list(entry)
            if len(seq) != n_frames:
                raise DataError(
                    f"per-frame view track has {len(seq)} entries, need {n_frames}"
                )
        rot.append(np.stack([v.extrinsic.rotation for v in seq]))
        trans.append(np.stack([v.extrinsic.translation for v in seq]))
        fx.append(seq[0].fx)
        fy.append(seq[0].fy)
        cx.append(seq[0].cx)
        cy.append(seq[0].cy)
    def as_t(x):
        return torch.as_tensor(np.asarray(x), dtype=dtype)

    return as_t(rot), as_t(trans), as_t(fx), as_t(fy), as_t(cx), as_t(cy)


def _data_term(positions, cams, pixels, conf, rho):
    """Robust reprojection term. positions: (N, J, 3); pixels: (V, N, J, 2);
    conf: (V, N, J). Returns (scalar, (N,) count of in-front joint-view pairs)."""
    rot, trans, fx, fy, cx, cy = cams
    # camera-frame points: (V, N, J, 3)
    cam = torch.einsum("vnab,njb->vnja", rot, positions) + trans[:, :, None, :]
    front = cam[..., 2] > BEHIND_CAMERA_Z
    safe_z = torch.where(front, cam[..., 2], torch.ones_like(cam[..., 2]))
    u = fx[:, None, None] * cam[..., 0] / safe_z + cx[:, None, None]
    v = fy[:, None, None] * cam[..., 1] / safe_z + cy[:, None, None]
    observed = conf > 0
    target = torch.where(observed[..., None], pixels, torch.zeros_like(pixels))
    r2 = (u - target[..., 0]) ** 2 + (v - target[..., 1]) ** 2
    valid = front & observed
    gm = r2 / (r2 + rho**2)
    term = torch.where(valid, conf * gm, torch.zeros_like(gm))
    return term.sum(), front.any(dim=0).any(dim=-1)


def _pose_to_tensors(pose: PoseParams, requires_grad=False):
    def t(x):
        return torch.tensor(np.asarray(x), dtype=torch.float64, requires_grad=requires_grad)

    return t(pose.root_rotation), t(pose.root_translation), t(pose.joint_angles), t(pose.shape)


def pack_pose(pose: PoseParams):
    """Flatten pose parameters to one vector:
    [root_rotation | root_translation | joint_angles | shape]."""
    return np.concatenate(
        [
            pose.root_rotation,
            pose.root_translation,
            pose.joint_angles.ravel(),
            pose.shape,
        ]
    )


def unpack_pose(vec, skel: Skeleton):
    vec = np.asarray(vec, dtype=np.float64).ravel()
    j = skel.num_joints
    expected = 6 + 3 * (j - 1) + 10
    if vec.shape[0] != expected:
        raise DataError(f"packed pose needs {expected} entries, got {vec.shape[0]}")
    return PoseParams(
        root_rotation=vec[0:3],
        root_translation=vec[3:6],
        joint_angles=vec[6 : 6 + 3 * (j - 1)].reshape(j - 1, 3),
        shape=vec[6 + 3 * (j - 1) :],
    )


def fitting_energy(pose: PoseParams, views, pixels, confidence, weights: FitWeights, skel):
    """Energy and its exact gradient for one frame.

    pixels: (views, joints, 2); confidence: (views, joints). The energy is
    lambda_pose ||joint_angles||^2 + lambda_shape ||shape||^2 +
    lambda_2d sum conf * gm(reprojection residual); joints behind a camera
    are dropped from that camera's sum. Returns (energy, gradient) with the
    gradient packed in pack_pose order.
    """
    root_aa, root_t, joint_aa, shape = _pose_to_tensors(pose, requires_grad=True)
    cams = _stack_views(views, 1)
    pix = torch.as_tensor(np.asarray(pixels, dtype=np.float64))[:, None]
    conf = torch.as_tensor(np.asarray(confidence, dtype=np.float64))[:, None]
    positions = _fk_positions_torch(root_aa[None], root_t[None], joint_aa[None], shape[None], skel)
    data, any_front = _data_term(positions, cams, pix, conf, weights.rho)
    if weights.lambda_2d > 0 and not bool(any_front.all()):
        raise DataError("all joints are behind every camera")
    energy = (
        weights.lambda_pose * (joint_aa**2).sum()
        + weights.lambda_shape * (shape**2).sum()
        + weights.lambda_2d * data
    )
    energy.backward()

    def g(t):
        return np.zeros(t.shape) if t.grad is None else t.grad.numpy()

    grad = np.concatenate(
        [g(root_aa), g(root_t), g(joint_aa).ravel(), g(shape)]
    )
    return float(energy.detach()), grad


@dataclass
class FitResult:
    """A fit outcome: the best iterate plus convergence diagnostics."""

    pose: PoseParams
    energy: float
    grad_norm: float
    converged: bool


def _lbfgs_minimize(params, closure_energy, max_iter, grad_tol):
    """Run L-BFGS (strong Wolfe) tracking the best iterate seen. Returns
    (best snapshot list, best energy, gradient infinity-norm at the best
    iterate). max_eval is raised above the torch default so the line search
    cannot eat the iteration budget."""
    opt = torch.optim.LBFGS(
        params,
        max_iter=max_iter,
        max_eval=max_iter * 10,
        tolerance_grad=grad_tol,
        tolerance_change=0.0,
        line_search_fn="strong_wolfe",
    )
    best = {"energy": math.inf, "snapshot": [p.detach().clone() for p in params]}

    def closure():
        opt.zero_grad()
        energy = closure_energy()
        value = float(energy.detach())
        if np.isfinite(value) and value < best["energy"]:
            best["energy"] = value
            best["snapshot"] = [p.detach().clone() for p in params]
        energy.backward()
        return energy

    opt.step(closure)
    with torch.no_grad():
        for p, snap in zip(params, best["snapshot"]):
            p.copy_(snap)
    for p in params:
        p.grad = None
    energy = closure_energy()
    energy.backward()
    grad_norm = max(float(p.grad.abs().max()) for p in params)
    return best["snapshot"], float(energy.detach()), grad_norm


def perframe_fit(
    views, pixels, confidence, init: PoseParams, weights: FitWeights, skel,
    max_iter=200, grad_tol=1e-6,
) -> FitResult:
    """Minimize the single-frame energy from `init` with L-BFGS.

    Runs at most `max_iter` iterations with a strong-Wolfe line search and a
    gradient-norm stop; if the gradient has not dropped below the tolerance
    the best iterate is still returned, flagged via converged=False.
    """
    root_aa, root_t, joint_aa, shape = _pose_to_tensors(init, requires_grad=True)
    cams = _stack_views(views, 1)
    pix = torch.as_tensor(np.asarray(pixels, dtype=np.float64))[:, None]
    conf = torch.as_tensor(np.asarray(confidence, dtype=np.float64))[:, None]

    def energy_fn():
        positions = _fk_positions_torch(
            root_aa[None], root_t[None], joint_aa[None], shape[None], skel
        )
        data, any_front = _data_term(positions, cams, pix, conf, weights.rho)
        if weights.lambda_2d > 0 and not bool(any_front.all()):
            raise DataError("all joints are behind every camera")
        return (
            weights.lambda_pose * (joint_aa**2).sum()
            + weights.lambda_shape * (shape**2).sum()
            + weights.lambda_2d * data
        )

    snapshot, energy, grad_norm = _lbfgs_minimize(
        [root_aa, root_t, joint_aa, shape], energy_fn, max_iter, grad_tol
    )
    pose = PoseParams(
        root_rotation=snapshot[0].numpy(),
        root_translation=snapshot[1].numpy(),
        joint_angles=snapshot[2].numpy(),
        shape=snapshot[3].numpy(),
    )
    return FitResult(pose=pose, energy=energy, grad_norm=grad_norm, converged=grad_norm <= grad_tol)


def sequence_fit(
    per_frame, views, kps: Keypoints2D, weights: FitWeights, skel,
    max_iter=200, grad_tol=1e-6,
) -> MotionSequence:
    """Joint refinement over all frames with the body shape fixed to the
    per-frame mean and a temporal smoothness penalty
    lambda_smooth * sum ||params[i+1] - params[i]||^2 on the optimized
    (root rotation, root translation, joint angle) parameters.
    """
    poses = [r.pose if isinstance(r, FitResult) else r for r in per_frame]
    n = len(poses)
    if n < 2:
        raise DataError("sequence fit needs at least 2 frames")
    if kps.n_frames != n:
        raise DataError(f"keypoints cover {kps.n_frames} frames, fits cover {n}")
    shared_shape = np.mean([p.shape for p in poses], axis=0)

    root_aa = torch.tensor(
        np.stack([p.root_rotation for p in poses]), dtype=torch.float64, requires_grad=True
    )
    root_t = torch.tensor(
        np.stack([p.root_translation for p in poses]), dtype=torch.float64, requires_grad=True
    )
    joint_aa = torch.tensor(
        np.stack([p.joint_angles for p in poses]), dtype=torch.float64, requires_grad=True
    )
    shape = torch.as_tensor(shared_shape, dtype=torch.float64)
    cams = _stack_views(views, n)
    pix = torch.as_tensor(kps.pixels)
    conf = torch.as_tensor(kps.confidence)

    def energy_fn():
        positions = _fk_positions_torch(
            root_aa, root_t, joint_aa, shape.expand(n, -1), skel
        )
        data, any_front = _data_term(positions, cams, pix, conf, weights.rho)
        if weights.lambda_2d > 0 and not bool(any_front.all()):
            raise DataError("a frame has all joints behind every camera")
        flat = torch.cat(
            [root_aa, root_t, joint_aa.reshape(n, -1)], dim=1
        )
        smooth = ((flat[1:] - flat[:-1]) ** 2).sum()
        return (
            weights.lambda_pose * (joint_aa**2).sum()
            + n * weights.lambda_shape * (shape**2).sum()
            + weights.lambda_2d * data
            + weights.lambda_smooth * smooth
        )

    snapshot, _, _ = _lbfgs_minimize([root_aa, root_t, joint_aa], energy_fn, max_iter, grad_tol)
    frames = [
        PoseParams(
            root_rotation=snapshot[0][i].numpy(),
            root_translation=snapshot[1][i].numpy(),
            joint_angles=snapshot[2][i].numpy(),
            shape=shared_shape.copy(),
        )
        for i in range(n)
    ]
    return MotionSequence(frames=frames, fps=kps.fps, skeleton_id=skel.name)


def filter_segments(motion: MotionSequence, skel, jitter_threshold=5.0):
    """Kept frame ranges after jitter filtering, as half-open (start, stop).

    A frame is marked when any joint moved faster than `jitter_threshold`
    (m/s, backward difference) getting there; maximal unmarked runs shorter
    than one second are dropped along with the marked frames.
    """
    if len(motion) < 2:
        raise DataError("jitter filtering needs at least 2 frames")
    pos = sequence_positions(motion, skel)
    speed = np.linalg.norm(np.diff(pos, axis=0), axis=2).max(axis=1) * motion.fps
    marked = np.zeros(len(motion), dtype=bool)
    marked[1:] = speed > jitter_threshold
    min_frames = int(np.ceil(motion.fps - 1e-9))
    ranges = []
    start = None
    for i in range(len(motion) + 1):
        bad = i == len(motion) or marked[i]
        if not bad and start is None:
            start = i
        elif bad and start is not None:
            if i - start >= min_frames:
                ranges.append((start, i))
            start = None
    return ranges


# ------------------------------------------------------------------ synthetic rigs


def make_camera_rig(
    n_views=4, radius=3.5, height=1.4, fx=1000.0, fy=1000.0, cx=500.0, cy=500.0,
    target=(0.0, 0.0, 0.9),
):
    """Cameras evenly spaced on a circle, all looking at `target`."""
    target = np.asarray(target, dtype=np.float64)
    views = []
    for k in range(n_views):
        ang = 2.0 * np.pi * k / n_views
        center = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        z_axis = target - center
        z_axis = z_axis / np.linalg.norm(z_axis)
        x_axis = np.cross(z_axis, np.array([0.0, 0.0, 1.0]))
        x_axis = x_axis / np.linalg.norm(x_axis)
        y_axis = np.cross(z_axis, x_axis)
        r_cam_to_world = np.stack([x_axis, y_axis, z_axis], axis=1)
        rot = r_cam_to_world.T
        views.append(
            CameraView(fx=fx, fy=fy, cx=cx, cy=cy, extrinsic=SE3(rot, -rot @ center))
        )
    return views


# camera axes expressed in the head frame: optical axis pitched down from the
# head's forward (+X) axis so the wearer's body stays in front of the camera
_EGO_TILT = np.deg2rad(60.0)
_EGO_AXES = np.stack(
    [
        np.array([0.0, -1.0, 0.0]),  # image right
        np.array([-np.sin(_EGO_TILT), 0.0, -np.cos(_EGO_TILT)]),  # image down
        np.array([np.cos(_EGO_TILT), 0.0, -np.sin(_EGO_TILT)]),  # optical axis
    ]
)


def ego_view(head: SE3, fx=600.0, fy=600.0, cx=320.0, cy=240.0) -> CameraView:
    """A head-mounted camera for one frame: rigidly attached to the head,
    pitched down so the body is visible."""
    rot = _EGO_AXES @ head.rotation.T
    return CameraView(fx=fx, fy=fy, cx=cx, cy=cy, extrinsic=SE3(rot, -rot @ head.translation))


def synthesize_keypoints(
    motion: MotionSequence, skel, views, noise_px=0.0, outlier_frac=0.0,
    outlier_px=50.0, rng=None,
) -> Keypoints2D:
    """Project ground-truth joints into every view, optionally corrupting
    them with Gaussian pixel noise and/or large displaced outliers.
    Behind-camera joints get confidence 0."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(motion)
    positions = sequence_positions(motion, skel)
    cams = _stack_views(views, n)
    with torch.no_grad():
        rot, trans, fx, fy, cx, cy = cams
        cam = torch.einsum("vnab,njb->vnja", rot, torch.as_tensor(positions)) + trans[:, :, None, :]
        front = (cam[..., 2] > BEHIND_CAMERA_Z).numpy()
        safe_z = torch.where(cam[..., 2] > BEHIND_CAMERA_Z, cam[..., 2], torch.ones_like(cam[..., 2]))
        u = (fx[:, None, None] * cam[..., 0] / safe_z + cx[:, None, None]).numpy()
        v = (fy[:, None, None] * cam[..., 1] / safe_z + cy[:, None, None]).numpy()
    pixels = np.stack([u, v], axis=-1)
    pixels[~front] = 0.0
    confidence = front.astype(np.float64)
    if noise_px > 0:
        pixels = pixels + rng.normal(scale=noise_px, size=pixels.shape)
    if outlier_frac > 0:
        flat = confidence.reshape(-1)
        candidates = np.flatnonzero(flat > 0)
        n_out = int(round(outlier_frac * candidates.size))
        chosen = rng.choice(candidates, size=n_out, replace=False)
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n_out)
        offset = outlier_px * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        flat_px = pixels.reshape(-1, 2)
        flat_px[chosen] += offset
        pixels = flat_px.reshape(pixels.shape)
    return Keypoints2D(pixels=pixels, confidence=confidence, fps=motion.fps)


# ------------------------------------------------------------------ rig / keypoint IO


def save_rig(path, views):
    """Write a static camera rig (.rig container)."""
    for v in views:
        if not isinstance(v, CameraView):
            raise DataError("rig files hold static CameraViews only")
    arrays = {
        "fx": np.array([v.fx for v in views]),
        "fy": np.array([v.fy for v in views]),
        "cx": np.array([v.cx for v in views]),
        "cy": np.array([v.cy for v in views]),
        "rotation": np.stack([v.extrinsic.rotation for v in views]),
        "translation": np.stack([v.extrinsic.translation for v in views]),
    }
    write_container(path, arrays, {"kind": "camera_rig", "views": len(views)})


def load_rig(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "camera_rig":
        raise DataError(f"{path}: container is not a camera rig")
    return [
        CameraView(
            fx=float(arrays["fx"][i]),
            fy=float(arrays["fy"][i]),
            cx=float(arrays["cx"][i]),
            cy=float(arrays["cy"][i]),
            extrinsic=SE3(arrays["rotation"][i], arrays["translation"][i]),
        )
        for i in range(arrays["fx"].shape[0])
    ]


def save_keypoints(path, kps: Keypoints2D):
    write_container(
        path,
        {"pixels": kps.pixels, "confidence": kps.confidence},
        {"kind": "keypoints2d", "fps": kps.fps},
    )


def load_keypoints(path) -> Keypoints2D:
    arrays, meta = read_container(path)
    if meta.get("kind") != "keypoints2d":
        raise DataError(f"{path}: container is not 2D keypoints")
    return Keypoints2D(
        pixels=arrays["pixels"], confidence=arrays["confidence"], fps=float(meta["fps"])
    )
