"""Evaluation metrics for motion sequences plus the proxy latent encoder
used by the semantic-similarity and FID metrics.

Positional metrics operate on (N, J, 3) world-frame joint position arrays.
The proxy encoder is a small pooled autoencoder trained locally; semantic
similarity and FID values are therefore only comparable within one fixed
encoder artifact (stated in every written report).
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .container import read_container, write_container
from .errors import DataError
from .util import derive_seed

FOOT_SLIDE_HEIGHT = 0.05  # meters; weight reaches zero at this foot height
LATENT_DIM = 32


def _check_positions(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"position shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise DataError("positions must have shape (frames, joints, 3)")
    return pred, gt


def mpjpe(pred, gt):
    """Mean per-joint position error in meters."""
    pred, gt = _check_positions(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=2).mean())


def procrustes_align(pred, gt):
    """Rigid (rotation + translation, no scale) alignment of one frame's
    joints onto another's. Returns (aligned pred, degenerate flag); for
    collinear joint sets the fallback is translation-only alignment."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pc = pred.mean(axis=0)
    gc = gt.mean(axis=0)
    h = (pred - pc).T @ (gt - gc)
    u, s, vt = np.linalg.svd(h)
    degenerate = bool(s[1] <= max(s[0], 1e-300) * 1e-9)
    if degenerate:
        return pred - pc + gc, True
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return (pred - pc) @ rot.T + gc, False


def mpjpe_pa(pred, gt):
    """MPJPE after per-frame rigid Procrustes alignment of pred onto gt.

    Least-squares Procrustes minimizes the squared error, which on rare
    noise-dominated frames can raise the mean unsquared error; those frames
    keep the identity alignment instead, so alignment never hurts and
    mpjpe_pa <= mpjpe holds for every input.
    """
    pred, gt = _check_positions(pred, gt)
    if pred.shape[1] < 3:
        raise DataError("Procrustes alignment needs at least 3 joints")
    errs = []
    for i in range(pred.shape[0]):
        aligned, _ = procrustes_align(pred[i], gt[i])
        err_aligned = np.linalg.norm(aligned - gt[i], axis=1).mean()
        err_identity = np.linalg.norm(pred[i] - gt[i], axis=1).mean()
        errs.append(min(err_aligned, err_identity))
    return float(np.mean(errs))


def mpjpe_h(pred, gt, hand_indices):
    """MPJPE restricted to the hand joints."""
    pred, gt = _check_positions(pred, gt)
    idx = list(hand_indices)
    if not idx:
        raise DataError("hand_indices must be non-empty")
    return mpjpe(pred[:, idx], gt[:, idx])


def head_errors(pred_heads, gt_heads):
    """(rotation error, translation error) for per-frame head transforms.

    Rotation error is the mean Frobenius norm of R_gt - R_pred (2*sqrt(2)
    at 180 degrees); translation error is the mean Euclidean distance.
    """
    if len(pred_heads) != len(gt_heads):
        raise DataError("head transform lists must have equal length")
    rot = [np.linalg.norm(g.rotation - p.rotation) for p, g in zip(pred_heads, gt_heads)]
    trans = [
        np.linalg.norm(g.translation - p.translation) for p, g in zip(pred_heads, gt_heads)
    ]
    return float(np.mean(rot)), float(np.mean(trans))


def foot_slide(positions, foot_indices, height_threshold=FOOT_SLIDE_HEIGHT):
    """Height-weighted horizontal foot displacement, millimeters per frame.

    Each inter-frame step's horizontal displacement is weighted by
    w = clamp(2 - 2^(h / H), 0, 1) with h the step's midpoint foot height,
    so a foot on the ground counts fully and a foot at or above H not at all.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[0] < 2:
        raise DataError("need (frames >= 2, joints, 3) positions")
    feet = pos[:, list(foot_indices), :]
    disp = np.linalg.norm(np.diff(feet[:, :, :2], axis=0), axis=2)  # (N-1, F) meters
    h = 0.5 * (feet[1:, :, 2] + feet[:-1, :, 2])  # step midpoint height
    w = np.clip(2.0 - np.power(2.0, h / height_threshold), 0.0, 1.0)
    return float((disp * w).mean() * 1000.0)


def foot_contact(positions, foot_indices):
    """Mean |z| of the lowest foot joint per frame (meters). Floating and
    ground penetration both count via the absolute value."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 3:
        raise DataError("positions must have shape (frames, joints, 3)")
    feet_z = pos[:, list(foot_indices), 2]
    lowest = feet_z.min(axis=1)
    return float(np.abs(lowest).mean())


# ------------------------------------------------------------------ proxy encoder


class ProxyMotionEncoder(nn.Module):
    """Small pooled autoencoder over feature sequences.

    embed() maps an (B, N, D) feature clip to a unit-norm latent via a
    per-frame MLP, mean+std pooling over time, and a linear head. The
    decoder reconstructs the pooled statistics and exists only to give the
    training signal.
    """

    def __init__(self, d_in, width=128, latent=LATENT_DIM):
        super().__init__()
        self.d_in = int(d_in)
        self.width = int(width)
        self.latent = int(latent)
        self.frame_mlp = nn.Sequential(
            nn.Linear(d_in, width), nn.GELU(), nn.Linear(width, width)
        )
        self.head = nn.Linear(2 * width, latent)
        self.decoder = nn.Sequential(
            nn.Linear(latent, width), nn.GELU(), nn.Linear(width, 2 * d_in)
        )
        self.register_buffer("norm_mean", torch.zeros(d_in))
        self.register_buffer("norm_std", torch.ones(d_in))
        self.register_buffer("is_trained", torch.zeros(1, dtype=torch.int64))

    @property
    def trained(self):
        return bool(self.is_trained.item())

    def _pool(self, x):
        return torch.cat([x.mean(dim=1), x.std(dim=1, unbiased=False)], dim=-1)

    def embed(self, feats):
        """(B, N, D) or (N, D) float features -> (B, latent) unit-norm."""
        if not self.trained:
            raise DataError("proxy encoder is untrained; train or load one first")
        if isinstance(feats, np.ndarray):
            feats = torch.from_numpy(np.ascontiguousarray(feats, dtype=np.float32))
        if feats.dim() == 2:
            feats = feats.unsqueeze(0)
        x = (feats - self.norm_mean) / self.norm_std
        h = self.frame_mlp(x)
        z = self.head(self._pool(h))
        return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def reconstruction_loss(self, feats):
        x = (feats - self.norm_mean) / self.norm_std
        h = self.frame_mlp(x)
        z = self.head(self._pool(h))
        z = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return nn.functional.mse_loss(self.decoder(z), self._pool(x))


def train_proxy_encoder(clips, seed, steps=300, lr=1e-3, width=128, batch=64):
    """Train the proxy encoder as an autoencoder on (M, N, D) feature clips.

    Deterministic for a fixed (clips, seed): the model is initialized on an
    isolated RNG stream and batches follow a seed-derived order. Returns the
    trained encoder with normalization statistics baked in.
    """
    clips = np.asarray(clips, dtype=np.float32)
    if clips.ndim != 3:
        raise DataError("clips must have shape (clips, frames, width)")
    m, _, d = clips.shape
    if m < 64:
        raise DataError(f"proxy encoder needs at least 64 clips, got {m}")

    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(derive_seed("proxy-init", seed))
        model = ProxyMotionEncoder(d, width=width)
    finally:
        torch.random.set_rng_state(state)

    flat = clips.reshape(-1, d)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-3)
    model.norm_mean.copy_(torch.from_numpy(mean))
    model.norm_std.copy_(torch.from_numpy(std))
    model.is_trained.fill_(1)

    data = torch.from_numpy(clips)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(derive_seed("proxy-batches", seed))
    initial = final = None
    for step in range(steps):
        idx = rng.integers(0, m, size=min(batch, m))
        loss = model.reconstruction_loss(data[idx])
        if initial is None:
            initial = loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
        final = loss.item()
    model.eval()
    model.loss_initial = initial
    model.loss_final = final
    return model


def save_encoder(path, model: ProxyMotionEncoder):
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    meta = {
        "kind": "proxy_encoder",
        "d_in": model.d_in,
        "width": model.width,
        "latent": model.latent,
    }
    write_container(path, arrays, meta)


def load_encoder(path) -> ProxyMotionEncoder:
    arrays, meta = read_container(path)
    if meta.get("kind") != "proxy_encoder":
        raise DataError(f"{path}: container is not a proxy encoder")
    model = ProxyMotionEncoder(meta["d_in"], width=meta["width"], latent=meta["latent"])
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model


def semantic_similarity(pred_feats, gt_feats, encoder: ProxyMotionEncoder):
    """Cosine similarity of the two clips' proxy latents (higher = closer)."""
    with torch.no_grad():
        za = encoder.embed(pred_feats)[0]
        zb = encoder.embed(gt_feats)[0]
    return float((za * zb).sum())


# ------------------------------------------------------------------ FID


def gaussian_stats(latents):
    """Mean and covariance of a set of latent vectors (rows)."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("latents must be a (samples, dim) matrix")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(x.shape[0] - 1, 1)
    return mu, cov


def _psd_sqrt(mat):
    """Symmetric PSD square root via eigendecomposition; negative
    eigenvalues from numerical noise are clamped to zero."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2):
    """Fréchet distance between two Gaussians:
    ||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))."""
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    cov1 = np.asarray(cov1, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    s1 = _psd_sqrt(cov1)
    cross = _psd_sqrt(s1 @ cov2 @ s1)  # tr((cov1 cov2)^1/2) = tr(cross)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1 + cov2 - 2.0 * cross))
    return max(value, 0.0)


def embed_set(clips, encoder: ProxyMotionEncoder, batch=64):
    """Latents for a list/array of feature clips: (M, latent)."""
    out = []
    with torch.no_grad():
        for i in range(0, len(clips), batch):
            chunk = np.asarray(clips[i : i + batch], dtype=np.float32)
            out.append(encoder.embed(chunk).numpy())
    return np.concatenate(out, axis=0)


def fid(pred_clips, gt_clips, encoder: ProxyMotionEncoder):
    """Fréchet distance between proxy-latent distributions of two clip sets."""
    minimum = LATENT_DIM + 1
    if len(pred_clips) < minimum or len(gt_clips) < minimum:
        raise DataError(
            f"fid needs at least {minimum} clips per set, got "
            f"{len(pred_clips)} and {len(gt_clips)}"
        )
    za = embed_set(pred_clips, encoder)
    zb = embed_set(gt_clips, encoder)
    return frechet_distance(*gaussian_stats(za), *gaussian_stats(zb))


# ------------------------------------------------------------------ report


@dataclass
class MetricsReport:
    """Aggregate metrics plus the per-clip breakdown used to compute them."""

    mpjpe: float
    mpjpe_pa: float
    mpjpe_h: float
    head_rot_err: float
    head_trans_err: float
    foot_slide: float
    foot_contact: float
    semantic_sim: float = float("nan")
    fid: float = float("nan")
    per_clip: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mpjpe": self.mpjpe,
            "mpjpe_pa": self.mpjpe_pa,
            "mpjpe_h": self.mpjpe_h,
            "head_rot_err": self.head_rot_err,
            "head_trans_err": self.head_trans_err,
            "foot_slide": self.foot_slide,
            "foot_contact": self.foot_contact,
            "semantic_sim": self.semantic_sim,
            "fid": self.fid,
        }


def evaluate(pred_motions, gt_motions, skel, encoder=None) -> MetricsReport:
    """Full metric suite over paired predicted/ground-truth motions."""
    from .features import encode
    from .se3 import sequence_head_transforms, sequence_positions
    from .skeletons import wrist_indices

    if len(pred_motions) != len(gt_motions) or not pred_motions:
        raise DataError("need equal, non-empty prediction and ground-truth lists")
    hands = wrist_indices(skel)
    per_clip = []
    z_pred, z_gt = [], []
    for k, (pm, gm) in enumerate(zip(pred_motions, gt_motions)):
        if len(pm) != len(gm):
            raise DataError(f"clip {k}: prediction has {len(pm)} frames, truth {len(gm)}")
        pp = sequence_positions(pm, skel)
        gp = sequence_positions(gm, skel)
        row = {
            "clip": k,
            "mpjpe": mpjpe(pp, gp),
            "mpjpe_pa": mpjpe_pa(pp, gp),
            "mpjpe_h": mpjpe_h(pp, gp, hands),
        }
        rot, trans = head_errors(
            sequence_head_transforms(pm, skel), sequence_head_transforms(gm, skel)
        )
        row["head_rot_err"] = rot
        row["head_trans_err"] = trans
        row["foot_slide"] = foot_slide(pp, skel.foot_indices)
        row["foot_contact"] = foot_contact(pp, skel.foot_indices)
        if encoder is not None:
            with torch.no_grad():
                zp = encoder.embed(encode(pm, skel))[0].numpy()
                zg = encoder.embed(encode(gm, skel))[0].numpy()
            row["semantic_sim"] = float(zp @ zg)
            z_pred.append(zp)
            z_gt.append(zg)
        per_clip.append(row)

    def agg(key):
        vals = [r[key] for r in per_clip if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    fid_value = float("nan")
    if encoder is not None and len(z_pred) >= LATENT_DIM + 1:
        fid_value = frechet_distance(
            *gaussian_stats(np.stack(z_pred)), *gaussian_stats(np.stack(z_gt))
        )
    return MetricsReport(
        mpjpe=agg("mpjpe"),
        mpjpe_pa=agg("mpjpe_pa"),
        mpjpe_h=agg("mpjpe_h"),
        head_rot_err=agg("head_rot_err"),
        head_trans_err=agg("head_trans_err"),
        foot_slide=agg("foot_slide"),
        foot_contact=agg("foot_contact"),
        semantic_sim=agg("semantic_sim"),
        fid=fid_value,
        per_clip=per_clip,
    )


_REPORT_CAVEAT = (
    "# semantic_sim and fid use a locally trained proxy motion encoder;\n"
    "# their absolute values are comparable only within one encoder artifact.\n"
)

_UNITS = {
    "mpjpe": "m",
    "mpjpe_pa": "m",
    "mpjpe_h": "m",
    "head_rot_err": "frobenius",
    "head_trans_err": "m",
    "foot_slide": "mm/frame",
    "foot_contact": "m",
    "semantic_sim": "cosine",
    "fid": "latent^2",
}


def write_report(path, report: MetricsReport, per_clip_csv=None):
    """Emit the textual report: caveat header, aligned table, key=value block."""
    lines = [_REPORT_CAVEAT.rstrip("\n"), ""]
    lines.append(f"{'metric':<16} {'value':>12}  unit")
    for key, value in report.to_dict().items():
        lines.append(f"{key:<16} {value:>12.6f}  {_UNITS[key]}")
    lines.append("")
    for key, value in report.to_dict().items():
        lines.append(f"{key}={value!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if per_clip_csv is not None and report.per_clip:
        keys = list(report.per_clip[0].keys())
        with open(per_clip_csv, "w", encoding="utf-8") as fh:
            fh.write(",".join(keys) + "\n")
            for row in report.per_clip:
                fh.write(",".join(repr(row[k]) for k in keys) + "\n")
