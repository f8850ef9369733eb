"""Noise schedule, forward diffusion, training loss, ancestral sampling,
and single-pass repaint inpainting over feature sequences.

The denoiser predicts the clean sequence (x0 parameterization). Each
reverse step forms the standard DDPM posterior mean from (predicted x0,
current x_t) and adds posterior-variance noise for t > 1; the t = 1 step
is noise-free. All randomness flows through explicit per-call generators,
so a fixed seed gives bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalFailure

COSINE_OFFSET = 0.008
BETA_MAX = 0.999


@dataclass
class NoiseSchedule:
    """alpha_bar[t] for t = 0..t_max, plus derived per-step quantities.

    alpha_bar[0] = 1 exactly; the per-step beta_t = 1 - abar_t/abar_{t-1}
    is clipped to BETA_MAX, and alpha_bar is rebuilt from the clipped
    betas so the table stays consistent (and strictly positive).
    """

    alpha_bar: torch.Tensor  # (t_max+1,) float64
    t_max: int

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.t_max + 1,):
            raise ValueError("alpha_bar must have t_max+1 entries")
        self.betas = torch.zeros(self.t_max + 1, dtype=torch.float64)
        self.betas[1:] = 1.0 - ab[1:] / ab[:-1]
        alphas = 1.0 - self.betas
        # posterior q(x_{t-1} | x_t, x0): mean = c0 * x0_hat + c1 * x_t
        self.posterior_var = torch.zeros(self.t_max + 1, dtype=torch.float64)
        self.coef_x0 = torch.zeros(self.t_max + 1, dtype=torch.float64)
        self.coef_xt = torch.zeros(self.t_max + 1, dtype=torch.float64)
        t = torch.arange(1, self.t_max + 1)
        ab_prev = ab[t - 1]
        ab_t = ab[t]
        one_minus = 1.0 - ab_t
        self.posterior_var[1:] = (1.0 - ab_prev) / one_minus * self.betas[1:]
        self.coef_x0[1:] = torch.sqrt(ab_prev) * self.betas[1:] / one_minus
        self.coef_xt[1:] = torch.sqrt(alphas[1:]) * (1.0 - ab_prev) / one_minus

    def check_t(self, t):
        if not (0 <= t <= self.t_max):
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")


def cosine_schedule(t_max: int) -> NoiseSchedule:
    """Squared-cosine alpha_bar with offset s, beta clipped at BETA_MAX."""
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    s = COSINE_OFFSET
    steps = np.arange(t_max + 1, dtype=np.float64)
    f = np.cos((steps / t_max + s) / (1.0 + s) * np.pi / 2.0) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, BETA_MAX)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(torch.from_numpy(alpha_bar), t_max)


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t: int, noise: torch.Tensor):
    """Forward process: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
    schedule.check_t(t)
    if noise.shape != x0.shape:
        raise ValueError("noise shape must match x0")
    ab = schedule.alpha_bar[t].to(x0.dtype)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def denoise_loss(model, schedule: NoiseSchedule, x0, cond, t: int, noise):
    """MSE between the clean sequence and the model's prediction of it."""
    x_t = q_sample(schedule, x0, t, noise)
    pred = model(x_t, t, cond)
    return ((x0 - pred) ** 2).mean()


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed) & (2**63 - 1))
    return g


def _check_finite(x, t):
    if not torch.isfinite(x).all():
        finite = x[torch.isfinite(x)]
        norm = float(finite.norm()) if finite.numel() else float("nan")
        raise NumericalFailure(
            f"non-finite denoiser output at step t={t} (finite-part norm {norm:.3g})"
        )


def _reverse_steps(schedule: NoiseSchedule, stride: int | None):
    """(t, t_prev) pairs for the reverse pass, last pair always (*, 0).

    With stride=None this is (T, T-1), ..., (1, 0). A stride > 1 walks a
    uniformly thinned subsequence of timesteps (reduced-step inference).
    """
    if stride is None or stride <= 1:
        ts = list(range(schedule.t_max, 0, -1))
    else:
        ts = sorted(set(range(schedule.t_max, 0, -stride)) | {schedule.t_max}, reverse=True)
    pairs = []
    for i, t in enumerate(ts):
        pairs.append((t, ts[i + 1] if i + 1 < len(ts) else 0))
    return pairs


def _posterior_step(schedule, x, x_hat, t, t_prev, gen):
    """One reverse step from level t to level t_prev (generalized DDPM)."""
    ab_t = schedule.alpha_bar[t].to(x.dtype)
    ab_p = schedule.alpha_bar[t_prev].to(x.dtype)
    beta = 1.0 - ab_t / ab_p
    one_minus = 1.0 - ab_t
    mean = (torch.sqrt(ab_p) * beta / one_minus) * x_hat + (
        torch.sqrt(ab_t / ab_p) * (1.0 - ab_p) / one_minus
    ) * x
    if t_prev > 0:
        var = (1.0 - ab_p) / one_minus * beta
        mean = mean + torch.sqrt(var) * torch.randn(
            x.shape, generator=gen, dtype=x.dtype
        )
    return mean


def sample(model, schedule: NoiseSchedule, shape, cond, seed: int, stride=None):
    """Ancestral sampling from pure noise down to a clean sequence.

    `shape` is (B, N, D); the model is called as model(x_t, t, cond) and
    must return the predicted clean sequence. Deterministic per seed.
    """
    if len(shape) != 3:
        raise ValueError("shape must be (batch, frames, width)")
    gen = _generator(seed)
    x = torch.randn(shape, generator=gen, dtype=torch.float32)
    with torch.no_grad():
        for t, t_prev in _reverse_steps(schedule, stride):
            x_hat = model(x, t, cond)
            _check_finite(x_hat, t)
            x = _posterior_step(schedule, x, x_hat, t, t_prev, gen)
    return x


def repaint_forecast(model, schedule: NoiseSchedule, known, n: int, cond, seed: int, stride=None):
    """Sampling loop that pins the first n frames to a known prefix.

    After every reverse step the working estimate's first n frames are
    overwritten with the known frames noised to the step's target level;
    the final output's prefix equals `known[:, :n]` bit-exactly. With
    n = 0 no extra noise is drawn, so the result bit-matches sample()
    under the same seed and stride. A stride > 1 walks the same thinned
    timestep subsequence as sample(stride).
    """
    if known.dim() != 3:
        raise ValueError("known must be (batch, frames, width)")
    b, total, width = known.shape
    if not (0 <= n < total):
        raise ValueError(f"observed prefix n={n} must satisfy 0 <= n < N={total}")
    gen = _generator(seed)
    x = torch.randn((b, total, width), generator=gen, dtype=torch.float32)
    prefix = known[:, :n].to(torch.float32)
    with torch.no_grad():
        for t, t_prev in _reverse_steps(schedule, stride):
            x_hat = model(x, t, cond)
            _check_finite(x_hat, t)
            x = _posterior_step(schedule, x, x_hat, t, t_prev, gen)
            if n > 0:
                noise = torch.randn(prefix.shape, generator=gen, dtype=torch.float32)
                x[:, :n] = q_sample(schedule, prefix, t_prev, noise)
    if n > 0:
        x[:, :n] = prefix
    return x
