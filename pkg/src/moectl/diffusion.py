"""Pixel-space toy diffusion: linear beta schedule, analytic forward
noising, a small conditional denoiser (two conv blocks around one
cross-attention block, source image concatenated on the channel axis),
deterministic DDIM sampling, and cross-attention heatmap extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import TextFeature
from .errors import ConfigError, DimensionError, RangeError


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int, beta_start: float = 1e-3,
                  beta_end: float = 0.05) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError(f"timestep count must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas_bar = np.cumprod(1.0 - betas)
    return DiffusionSchedule(betas=betas, alphas_bar=alphas_bar)


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray,
                  schedule: DiffusionSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    if not 1 <= t <= schedule.T:
        raise RangeError(f"timestep {t} outside [1, {schedule.T}]")
    if z0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != image {z0.shape}")
    ab = schedule.alphas_bar[t - 1]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t: int, dim: int) -> np.ndarray:
    i = np.arange(dim)
    angle = t / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Denoiser:
    """Predicts the noise eps from (z_t, t, condition tokens, source image).

    conv(6ch -> C) + time embedding -> relu -> cross-attention over the
    condition tokens -> conv(C -> 3).
    """

    def __init__(self, cond_dim: int = 32, channels: int = 16,
                 attn_dim: int = 16, time_dim: int = 16,
                 image_size: int = 16, seed: int = 13):
        self.cond_dim = cond_dim
        self.channels = channels
        self.attn_dim = attn_dim
        self.time_dim = time_dim
        self.image_size = image_size
        rng = np.random.default_rng(seed)

        def p(name, shape, scale):
            return ad.Parameter(f"denoiser.{name}", rng.normal(0, scale, shape))

        c = channels
        self.conv1_w = p("conv1.w", (c, 6, 3, 3), np.sqrt(2.0 / (6 * 9)))
        self.conv1_b = ad.Parameter("denoiser.conv1.b", np.zeros(c))
        self.time_w = p("time.w", (time_dim, c), 1.0 / np.sqrt(time_dim))
        self.time_b = ad.Parameter("denoiser.time.b", np.zeros(c))
        self.wq = p("attn.wq", (c, attn_dim), 1.0 / np.sqrt(c))
        self.wk = p("attn.wk", (cond_dim, attn_dim), 1.0 / np.sqrt(cond_dim))
        self.wv = p("attn.wv", (cond_dim, attn_dim), 1.0 / np.sqrt(cond_dim))
        self.wo = p("attn.wo", (attn_dim, c), 1.0 / np.sqrt(attn_dim))
        self.conv2_w = p("conv2.w", (3, c, 3, 3), np.sqrt(2.0 / (c * 9)))
        self.conv2_b = ad.Parameter("denoiser.conv2.b", np.zeros(3))

    def parameters(self) -> list[ad.Parameter]:
        return [self.conv1_w, self.conv1_b, self.time_w, self.time_b,
                self.wq, self.wk, self.wv, self.wo,
                self.conv2_w, self.conv2_b]

    def forward(self, z_t: ad.Tensor, t: int, cond: TextFeature,
                src: ad.Tensor, return_attn: bool = False):
        z_t = ad._as_tensor(z_t)
        src = ad._as_tensor(src)
        if z_t.shape != src.shape or z_t.shape[0] != 3:
            raise DimensionError(
                f"z_t {z_t.shape} and src {src.shape} must both be (3,H,W)")
        if cond.width != self.cond_dim:
            raise DimensionError(
                f"condition width {cond.width} != {self.cond_dim}")
        _, h, w = z_t.shape

        x = ad.conv2d(ad.concat([z_t, src], axis=0),
                      self.conv1_w, self.conv1_b)
        temb = ad.add(ad.matmul(
            ad.Tensor(time_embedding(t, self.time_dim).reshape(1, -1)),
            self.time_w), self.time_b)
        x = ad.relu(ad.add(x, ad.reshape(temb, (self.channels, 1, 1))))

        # (C,H,W) -> (P,C) spatial tokens for attention.
        feats = ad.transpose(ad.reshape(x, (self.channels, h * w)))
        q = ad.matmul(feats, self.wq)
        k = ad.matmul(cond.tokens, self.wk)
        v = ad.matmul(cond.tokens, self.wv)
        attn = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)),
                                   1.0 / np.sqrt(self.attn_dim)), axis=-1)
        feats = ad.add(ad.matmul(ad.matmul(attn, v), self.wo), feats)

        x = ad.reshape(ad.transpose(feats), (self.channels, h, w))
        out = ad.conv2d(x, self.conv2_w, self.conv2_b)
        if return_attn:
            return out, attn
        return out


@dataclass
class AttentionHeatmap:
    """Per-token (H,W) maps; each spatial position's token weights sum to 1."""

    maps: np.ndarray  # (L, H, W)

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[0]


def extract_heatmap(denoiser: Denoiser, z_t, t: int, cond: TextFeature,
                    src) -> AttentionHeatmap:
    with ad.no_grad():
        _, attn = denoiser.forward(z_t, t, cond, src, return_attn=True)
    h = w = denoiser.image_size
    l = cond.length
    maps = attn.data.T.reshape(l, h, w)
    return AttentionHeatmap(maps=maps)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced subset of [1..T], always containing T, descending."""
    if not 1 <= steps <= T:
        raise RangeError(f"steps {steps} outside [1, {T}]")
    ts = np.unique(np.linspace(1, T, steps).round().astype(int))
    return ts[::-1]


def ddim_sample(eps_fn, z_T: np.ndarray, schedule: DiffusionSchedule,
                steps: int) -> np.ndarray:
    """Deterministic DDIM (eta=0) reverse pass from z_T.

    eps_fn(z_t, t) -> predicted noise array of z_t's shape.
    """
    ts = ddim_timesteps(schedule.T, steps)
    z = z_T
    for idx, t in enumerate(ts):
        ab_t = schedule.alphas_bar[t - 1]
        t_prev = ts[idx + 1] if idx + 1 < len(ts) else 0
        ab_prev = schedule.alphas_bar[t_prev - 1] if t_prev >= 1 else 1.0
        eps = eps_fn(z, int(t))
        z0_pred = (z - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        z = np.sqrt(ab_prev) * z0_pred + np.sqrt(1.0 - ab_prev) * eps
    return z
