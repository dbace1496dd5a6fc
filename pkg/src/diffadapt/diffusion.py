"""Toy latent diffusion with a zero-initialized control branch.

The denoiser is a small U-shaped network (2 down blocks, a bottleneck
modulated by the time + prompt embedding, 2 up blocks). The control branch
is a trainable copy of the encoder that receives the fused spatial condition
and feeds the decoder through zero-initialized 1x1 projections, so at
initialization the conditioned output is bit-identical to the base output.

DDIM sampling is deterministic (eta = 0) and the latent encoder/decoder is a
fixed linear downscale/upscale pair standing in for a pretrained autoencoder.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .gradcheck import max_relative_grad_error


# --- noise schedule ----------------------------------------------------------

@dataclass
class NoiseSchedule:
    """betas[i] is the increment for step i+1; alpha_bars has T+1 entries with
    alpha_bars[0] = 1 (step 0 is the clean state)."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if self.alpha_bars.shape[0] != self.betas.shape[0] + 1:
            raise ValueError("alpha_bars must have len(betas) + 1 entries")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        if self.alpha_bars[0] != 1.0:
            raise ValueError("alpha_bars[0] must be 1")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bars must be strictly decreasing")

    @property
    def timesteps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, tau) -> np.ndarray:
        return self.alpha_bars[np.asarray(tau)]


def make_schedule(
    timesteps: int,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    shape: str = "linear",
) -> NoiseSchedule:
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if shape == "linear":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    elif shape == "cosine":
        s = 0.008
        steps = np.arange(timesteps + 1, dtype=np.float64)
        f = np.cos((steps / timesteps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas, alpha_bars)


def make_step_schedule(timesteps: int, num_steps: int) -> np.ndarray:
    """Strictly decreasing DDIM step sequence from T to 0 (num_steps + 1 entries)."""
    if not 1 <= num_steps <= timesteps:
        raise ValueError(f"num_steps must be in [1, {timesteps}], got {num_steps}")
    steps = np.unique(np.linspace(0, timesteps, num_steps + 1).round().astype(np.int64))[::-1]
    return steps


# --- forward noising and DDIM -------------------------------------------------

def _gather_alpha_bar(schedule: NoiseSchedule, tau, like: torch.Tensor) -> torch.Tensor:
    tau = np.asarray(tau)
    ab = torch.as_tensor(schedule.alpha_bars[tau], dtype=like.dtype, device=like.device)
    if ab.ndim > 0:
        ab = ab.reshape(-1, *([1] * (like.ndim - 1)))
    return ab


def q_sample(z0: torch.Tensor, tau, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noisify z0 to step tau: sqrt(ab)*z0 + sqrt(1-ab)*eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t = np.asarray(tau)
    if (t < 1).any() or (t > schedule.timesteps).any():
        raise ValueError(f"tau must lie in [1, {schedule.timesteps}]")
    ab = _gather_alpha_bar(schedule, tau, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def ddim_step(
    z_tau: torch.Tensor,
    eps_pred: torch.Tensor,
    tau: int,
    tau_prev: int,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """One deterministic DDIM update from tau to tau_prev (eta = 0)."""
    if tau_prev > tau:
        raise ValueError(f"tau_prev ({tau_prev}) must not exceed tau ({tau})")
    ab = float(schedule.alpha_bars[tau])
    ab_prev = float(schedule.alpha_bars[tau_prev])
    if ab <= 0.0:
        raise ValueError(f"alpha_bar[{tau}] is zero; cannot invert the noising step")
    z0_hat = (z_tau - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_pred


def ddim_sample(
    denoiser,
    z_T: torch.Tensor,
    prompt_emb: torch.Tensor | None,
    cond: torch.Tensor | None,
    step_schedule: np.ndarray,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Iterate ddim_step along a strictly decreasing step sequence ending at 0.

    Pure function of (z_T, conditions, parameters); the caller supplies the
    seeded initial noise.
    """
    steps = np.asarray(step_schedule, dtype=np.int64)
    if steps.size == 0:
        raise ValueError("empty step schedule")
    if steps.size < 2 or steps[-1] != 0:
        raise ValueError("step schedule must end at 0")
    if not (np.diff(steps) < 0).all():
        raise ValueError("step schedule must be strictly decreasing")
    if steps[0] > schedule.timesteps:
        raise ValueError(f"step schedule starts past T={schedule.timesteps}")
    z = z_T
    with torch.no_grad():
        for tau, tau_prev in zip(steps[:-1], steps[1:]):
            tau_batch = torch.full((z.shape[0],), int(tau), dtype=torch.long, device=z.device)
            eps = denoiser(z, tau_batch, prompt_emb, cond)
            z = ddim_step(z, eps, int(tau), int(tau_prev), schedule)
    return z


# --- denoiser -----------------------------------------------------------------

@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    width: int = 32
    emb_dim: int = 64
    prompt_dim: int = 64
    cond_channels: int = 32


def sinusoidal_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=tau.device) / max(half - 1, 1)
    )
    args = tau.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        groups = min(8, channels)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(emb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ControlledDenoiser(nn.Module):
    """Noise predictor with a ControlNet-style control branch.

    forward(z, tau, prompt_emb, cond) returns the epsilon prediction; cond is
    the fused spatial condition at latent resolution, or None for the plain
    base path. prompt_emb of None (or all zeros) is the unconditional path.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        w, e = config.width, config.emb_dim

        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.prompt_proj = nn.Linear(config.prompt_dim, e)

        # base encoder (locked during tuning) and bottleneck
        self.in_conv = nn.Conv2d(config.latent_channels, w, 3, padding=1)
        self.res0 = ResBlock(w, e)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.res1 = ResBlock(2 * w, e)
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * w, e)

        # base decoder (unlocked at a smaller learning rate)
        self.up2 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.res_up2 = ResBlock(2 * w, e)
        self.up1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.res_up1 = ResBlock(w, e)
        self.out_norm = nn.GroupNorm(min(8, w), w)
        self.out_conv = nn.Conv2d(w, config.latent_channels, 3, padding=1)

        # control branch: trainable copy of the encoder fed with the condition
        self.control_in = copy.deepcopy(self.in_conv)
        self.control_res0 = copy.deepcopy(self.res0)
        self.control_down1 = copy.deepcopy(self.down1)
        self.control_res1 = copy.deepcopy(self.res1)
        self.control_down2 = copy.deepcopy(self.down2)
        self.control_mid = copy.deepcopy(self.mid)
        self.hint_conv = nn.Conv2d(config.cond_channels, w, 3, padding=1)

        # zero-initialized injection projections into the decoder path
        self.zero0 = nn.Conv2d(w, w, 1)
        self.zero1 = nn.Conv2d(2 * w, 2 * w, 1)
        self.zero_mid = nn.Conv2d(2 * w, 2 * w, 1)
        for z in (self.zero0, self.zero1, self.zero_mid):
            nn.init.zeros_(z.weight)
            nn.init.zeros_(z.bias)

    def _embedding(self, tau: torch.Tensor, prompt_emb: torch.Tensor | None) -> torch.Tensor:
        dtype = self.in_conv.weight.dtype
        emb = self.time_mlp(sinusoidal_embedding(tau, self.config.emb_dim).to(dtype))
        if prompt_emb is not None:
            emb = emb + self.prompt_proj(prompt_emb.to(dtype))
        return emb

    def _encode(self, z, emb, cond=None):
        h0 = self.in_conv(z) if cond is None else self.control_in(z) + self.hint_conv(cond)
        blocks = (
            (self.res0, self.down1, self.res1, self.down2, self.mid)
            if cond is None
            else (self.control_res0, self.control_down1, self.control_res1, self.control_down2, self.control_mid)
        )
        res0, down1, res1, down2, mid = blocks
        r0 = res0(h0, emb)
        r1 = res1(down1(r0), emb)
        hm = mid(down2(r1), emb)
        return r0, r1, hm

    def forward(
        self,
        z: torch.Tensor,
        tau: torch.Tensor,
        prompt_emb: torch.Tensor | None = None,
        cond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if not torch.is_tensor(tau):
            tau = torch.full((z.shape[0],), int(tau), dtype=torch.long, device=z.device)
        emb = self._embedding(tau, prompt_emb)
        r0, r1, hm = self._encode(z, emb)
        if cond is not None:
            if cond.shape[-2:] != z.shape[-2:]:
                raise ValueError(
                    f"condition spatial size {tuple(cond.shape[-2:])} != latent {tuple(z.shape[-2:])}"
                )
            c0, c1, cm = self._encode(z, emb, cond=cond)
            r0 = r0 + self.zero0(c0)
            r1 = r1 + self.zero1(c1)
            hm = hm + self.zero_mid(cm)
        u2 = self.up2(F.interpolate(hm, scale_factor=2, mode="nearest"))
        u2 = self.res_up2(u2 + r1, emb)
        u1 = self.up1(F.interpolate(u2, scale_factor=2, mode="nearest"))
        u1 = self.res_up1(u1 + r0, emb)
        return self.out_conv(F.silu(self.out_norm(u1)))

    def encoder_features(self, z, tau, prompt_emb=None) -> list[torch.Tensor]:
        """Frozen base-encoder features, used as the reference metric embedder."""
        if not torch.is_tensor(tau):
            tau = torch.full((z.shape[0],), int(tau), dtype=torch.long, device=z.device)
        emb = self._embedding(tau, prompt_emb)
        return list(self._encode(z, emb))

    # parameter groups for the asymmetric tuning scheme
    def base_encoder_parameters(self):
        mods = [self.time_mlp, self.prompt_proj, self.in_conv, self.res0,
                self.down1, self.res1, self.down2, self.mid]
        for m in mods:
            yield from m.parameters()

    def base_decoder_parameters(self):
        mods = [self.up2, self.res_up2, self.up1, self.res_up1, self.out_norm, self.out_conv]
        for m in mods:
            yield from m.parameters()

    def control_parameters(self):
        mods = [self.control_in, self.control_res0, self.control_down1, self.control_res1,
                self.control_down2, self.control_mid, self.hint_conv,
                self.zero0, self.zero1, self.zero_mid]
        for m in mods:
            yield from m.parameters()


def controlled_eps(
    denoiser: ControlledDenoiser,
    z_tau: torch.Tensor,
    tau,
    prompt_emb: torch.Tensor | None,
    cond: torch.Tensor | None,
) -> torch.Tensor:
    """Epsilon prediction with (or, for cond=None, without) the control branch."""
    return denoiser(z_tau, tau, prompt_emb, cond)


def training_loss(
    denoiser: ControlledDenoiser,
    z0: torch.Tensor,
    prompt_emb: torch.Tensor | None,
    cond: torch.Tensor | None,
    rng: torch.Generator,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Noise-prediction objective: sample tau and eps, return mean squared error.

    Deterministic given the generator state; differentiable with respect to
    whichever parameters the caller left unlocked.
    """
    batch = z0.shape[0]
    tau = torch.randint(1, schedule.timesteps + 1, (batch,), generator=rng)
    eps = torch.empty_like(z0).normal_(generator=rng)
    z_tau = q_sample(z0, tau.numpy(), eps, schedule)
    pred = denoiser(z_tau, tau.to(z0.device), prompt_emb, cond)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise ValueError(
            f"non-finite diffusion loss (tau={tau.tolist()}, |z0|max={z0.abs().max().item():.3g})"
        )
    return loss


def denoiser_gradcheck(
    denoiser: ControlledDenoiser,
    z: torch.Tensor,
    cond: torch.Tensor,
    epsilon: float = 1e-4,
    max_coords_per_tensor: int | None = 8,
    seed: int = 0,
) -> float:
    """Finite-difference check of the controlled epsilon prediction (64-bit)."""
    denoiser = denoiser.double()
    z = z.detach().double().requires_grad_(True)
    cond = cond.detach().double().requires_grad_(True)
    probe_rng = torch.Generator().manual_seed(seed)
    prompt = torch.zeros(z.shape[0], denoiser.config.prompt_dim, dtype=torch.float64)
    tau = torch.full((z.shape[0],), 7, dtype=torch.long)

    def functional() -> torch.Tensor:
        out = denoiser(z, tau, prompt, cond)
        weights = torch.empty(out.shape, dtype=torch.float64)
        weights.normal_(generator=probe_rng.manual_seed(seed))
        return (out * weights).sum()

    tensors = [z, cond] + [p for p in denoiser.parameters()]
    return max_relative_grad_error(
        functional,
        tensors,
        epsilon=epsilon,
        max_coords_per_tensor=max_coords_per_tensor,
        rng=np.random.default_rng(seed),
    )


# --- fixed latent codec ---------------------------------------------------------

class LatentCodec:
    """Fixed linear downscale/upscale pair standing in for the SD autoencoder.

    encode: area-average downsample by `stride` per RGB channel plus a
    luminance channel, mapped affinely to [-1, 1]. decode inverts the affine
    map and upsamples the RGB channels bilinearly. The pair is invertible up
    to the detail removed by downsampling.
    """

    def __init__(self, stride: int = 4, channels: int = 4):
        if channels not in (3, 4):
            raise ValueError("latent channels must be 3 or 4")
        self.stride = stride
        self.channels = channels

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            warnings.warn("image values outside [0, 1]; clamping before encode")
            img = np.clip(img, 0.0, 1.0)
        h, w = img.shape[:2]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {w}x{h} not divisible by stride {self.stride}")
        low = cv2.resize(img, (w // self.stride, h // self.stride), interpolation=cv2.INTER_AREA)
        planes = [low[:, :, 0], low[:, :, 1], low[:, :, 2]]
        if self.channels == 4:
            planes.append(low.mean(axis=2))
        z = np.stack(planes, axis=0)
        return (2.0 * z - 1.0).astype(np.float32)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        if z.ndim != 3 or z.shape[0] != self.channels:
            raise ValueError(f"expected ({self.channels}, h, w) latent, got {z.shape}")
        rgb = (z[:3] + 1.0) / 2.0
        h, w = rgb.shape[1] * self.stride, rgb.shape[2] * self.stride
        up = cv2.resize(rgb.transpose(1, 2, 0), (w, h), interpolation=cv2.INTER_LINEAR)
        return np.clip(up, 0.0, 1.0).astype(np.float32)

    def encode_batch(self, images: list[np.ndarray]) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.encode(im) for im in images]))
