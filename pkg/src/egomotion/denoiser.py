"""Transformer-decoder denoiser with trajectory and image conditioning.

Per frame, the noisy motion token f_X(x_t) receives an additive trajectory
embedding f_T(traj), a learned positional embedding, and a timestep
embedding; the stack then cross-attends to projected per-frame image
features. Unobserved conditioning positions are replaced by learnable mask
tokens in the INPUT space (before projection), which makes the output
exactly independent of whatever values sit at masked positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .se3 import SE3
from .util import derive_seed

TRAJ_DIM = 9  # 6D rotation + 3D translation per frame


@dataclass
class DenoiserConfig:
    d_motion: int
    d_img: int = 64
    layers: int = 12
    width: int = 768
    heads: int = 8
    n_max: int = 80
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.d_motion, self.d_img, self.layers, self.width, self.heads, self.n_max) <= 0:
            raise ValueError("all denoiser dimensions must be positive")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    def to_dict(self):
        return {
            "d_motion": self.d_motion,
            "d_img": self.d_img,
            "layers": self.layers,
            "width": self.width,
            "heads": self.heads,
            "n_max": self.n_max,
            "dropout": self.dropout,
        }


@dataclass
class ConditioningBundle:
    """Per-frame conditioning: trajectory tokens, image tokens, masks.

    traj: (B, N, 9) float32; img: (B, N, d_img) float32;
    traj_mask / img_mask: (B, N) bool, True = observed. Values at masked
    positions are ignored by contract.
    """

    traj: torch.Tensor
    img: torch.Tensor
    traj_mask: torch.Tensor
    img_mask: torch.Tensor

    def __post_init__(self):
        if self.traj.dim() == 2:  # allow unbatched construction
            self.traj = self.traj.unsqueeze(0)
            self.img = self.img.unsqueeze(0)
            self.traj_mask = self.traj_mask.unsqueeze(0)
            self.img_mask = self.img_mask.unsqueeze(0)
        b, n, d = self.traj.shape
        if d != TRAJ_DIM:
            raise ValueError(f"traj tokens must have width {TRAJ_DIM}")
        if self.img.shape[:2] != (b, n):
            raise ValueError("img tokens must match traj in batch and length")
        if self.traj_mask.shape != (b, n) or self.img_mask.shape != (b, n):
            raise ValueError("masks must have shape (batch, frames)")
        if not self.traj.is_floating_point():
            self.traj = self.traj.to(torch.float32)
        if not self.img.is_floating_point():
            self.img = self.img.to(torch.float32)
        self.traj_mask = self.traj_mask.to(torch.bool)
        self.img_mask = self.img_mask.to(torch.bool)

    @property
    def n_frames(self):
        return self.traj.shape[1]


class SinusoidalEmbedding(nn.Module):
    """Classic fixed sin/cos embedding of a scalar timestep."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, t, dtype=torch.float32):
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
        ).to(t.device)
        args = t.to(dtype).unsqueeze(-1) * freqs
        emb = torch.cat([args.sin(), args.cos()], dim=-1)
        if self.dim % 2:
            emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
        return emb


class Denoiser(nn.Module):
    """Predicts the clean feature sequence from (x_t, t, conditioning)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.in_proj = nn.Linear(cfg.d_motion, w)  # f_X
        self.traj_proj = nn.Linear(TRAJ_DIM, w)  # f_T
        self.img_proj = nn.Linear(cfg.d_img, w)  # f_I
        self.traj_mask_token = nn.Parameter(torch.randn(TRAJ_DIM) * 0.02)
        self.img_mask_token = nn.Parameter(torch.randn(cfg.d_img) * 0.02)
        self.pos_motion = nn.Parameter(torch.randn(cfg.n_max, w) * 0.02)
        self.pos_img = nn.Parameter(torch.randn(cfg.n_max, w) * 0.02)
        self.time_embed = SinusoidalEmbedding(w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, w))
        layer = nn.TransformerDecoderLayer(
            d_model=w,
            nhead=cfg.heads,
            dim_feedforward=4 * w,
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=cfg.layers)
        self.out_proj = nn.Linear(w, cfg.d_motion)

    def apply_masks(self, cond: ConditioningBundle):
        """Substitute mask tokens at unobserved positions (input space)."""
        traj_full = torch.where(
            cond.traj_mask.unsqueeze(-1),
            cond.traj,
            self.traj_mask_token.view(1, 1, -1).to(cond.traj.dtype),
        )
        img_full = torch.where(
            cond.img_mask.unsqueeze(-1),
            cond.img,
            self.img_mask_token.view(1, 1, -1).to(cond.img.dtype),
        )
        return traj_full, img_full

    def forward(self, x_t, t, cond: ConditioningBundle):
        if x_t.dim() != 3:
            raise ValueError("x_t must have shape (batch, frames, width)")
        b, n, d = x_t.shape
        if d != self.cfg.d_motion:
            raise ValueError(f"motion width {d} != configured {self.cfg.d_motion}")
        if n > self.cfg.n_max:
            raise ValueError(f"sequence length {n} exceeds n_max {self.cfg.n_max}")
        if cond.traj.shape[0] != b or cond.n_frames != n:
            raise ValueError("conditioning bundle shape mismatch")
        if isinstance(t, int):
            t = torch.full((b,), t, dtype=torch.float32, device=x_t.device)
        dtype = self.out_proj.weight.dtype
        traj_full, img_full = self.apply_masks(cond)
        traj_full = traj_full.to(dtype)
        img_full = img_full.to(dtype)
        x_t = x_t.to(dtype)
        temb = self.time_mlp(self.time_embed(t, dtype=dtype))  # B x W
        tokens = (
            self.in_proj(x_t)
            + self.traj_proj(traj_full)
            + self.pos_motion[:n].unsqueeze(0)
            + temb.unsqueeze(1)
        )
        memory = self.img_proj(img_full) + self.pos_img[:n].unsqueeze(0)
        hidden = self.decoder(tgt=tokens, memory=memory)
        return self.out_proj(hidden)


def build_denoiser(cfg: DenoiserConfig, seed: int) -> Denoiser:
    """Construct a denoiser with a reproducible parameter initialization."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(derive_seed("denoiser-init", seed))
    model = Denoiser(cfg)
    torch.random.set_rng_state(gen_state)
    return model


# ------------------------------------------------------------ synthetic images


def _hash_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


@lru_cache(maxsize=256)
def _bucket_rotation(yaw_bucket: int, pitch_bucket: int, d_img: int) -> np.ndarray:
    """Fixed random orthogonal matrix per viewing-direction bucket."""
    rng = _hash_rng("synthetic-encoder-view", yaw_bucket, pitch_bucket, d_img)
    m = rng.standard_normal((d_img, d_img))
    q, r = np.linalg.qr(m)
    # fix the QR sign ambiguity so the result is unique
    q = q * np.sign(np.diag(r))
    return q


def synthetic_encoder(scene_id: int, activity_id: int, head_pose: SE3, d_img: int = 64):
    """Deterministic stand-in for a pretrained image feature extractor.

    A unit-norm base vector per (scene, activity) is rotated by a fixed
    orthogonal map chosen by the head's yaw/pitch bucket, so features vary
    with where the wearer looks but stay tied to scene and activity.
    """
    if scene_id < 0 or activity_id < 0:
        raise ValueError("scene_id and activity_id must be non-negative")
    base = _hash_rng("synthetic-encoder-base", scene_id, activity_id, d_img).standard_normal(
        d_img
    )
    base /= np.linalg.norm(base)
    forward = head_pose.rotation[:, 0]
    yaw = math.atan2(forward[1], forward[0])
    pitch = math.atan2(forward[2], math.hypot(forward[0], forward[1]))
    yaw_bucket = int((yaw + math.pi) / (2 * math.pi) * 8) % 8
    pitch_bucket = min(3, max(0, int((pitch + math.pi / 2) / math.pi * 4)))
    vec = _bucket_rotation(yaw_bucket, pitch_bucket, d_img) @ base
    return vec.astype(np.float32)
