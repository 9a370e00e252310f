"""Full editing model: text encoder -> MoE controller -> conditional
denoiser, plus the noise schedule and deterministic sampling."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .diffusion import Denoiser, DiffusionSchedule, ddim_sample, make_schedule
from .encoder import Instruction, TextEncoder, TextFeature
from .moe import MoEController


@dataclass
class ModelConfig:
    vocab_size: int = 4096
    dim: int = 32
    max_len: int = 16
    n_experts: int = 3
    expert_hidden: int = 0  # 0 -> 4 * dim
    channels: int = 16
    attn_dim: int = 16
    time_dim: int = 16
    image_size: int = 16
    timesteps: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.05
    seed: int = 0
    moe_enabled: bool = True
    gate_init_scale: float = 1.0
    gate_pooling: str = "none"
    freeze_encoder: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


class EditModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        hidden = config.expert_hidden or 4 * config.dim
        self.encoder = TextEncoder(
            vocab_size=config.vocab_size, dim=config.dim,
            max_len=config.max_len, seed=config.seed + 7,
            trainable=not config.freeze_encoder)
        self.controller = MoEController(
            n_experts=config.n_experts, dim=config.dim, hidden=hidden,
            seed=config.seed + 11, gate_pooling=config.gate_pooling,
            gate_init_scale=config.gate_init_scale)
        self.denoiser = Denoiser(
            cond_dim=config.dim, channels=config.channels,
            attn_dim=config.attn_dim, time_dim=config.time_dim,
            image_size=config.image_size, seed=config.seed + 13)
        self.schedule: DiffusionSchedule = make_schedule(
            config.timesteps, config.beta_start, config.beta_end)
        self._encode_cache: dict[str, TextFeature] = {}

    def parameters(self) -> list[ad.Parameter]:
        return (self.encoder.parameters() + self.controller.parameters()
                + self.denoiser.parameters())

    def trainable_parameters(self) -> list[ad.Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def encode(self, instruction: Instruction) -> TextFeature:
        # Frozen encoder output is a pure function of the text: cacheable.
        if self.config.freeze_encoder:
            cached = self._encode_cache.get(instruction.text)
            if cached is None:
                with ad.no_grad():
                    feat = self.encoder.encode(instruction)
                cached = TextFeature(tokens=ad.Tensor(feat.tokens.data))
                self._encode_cache[instruction.text] = cached
            return cached
        return self.encoder.encode(instruction)

    def condition(self, instruction: Instruction) -> TextFeature:
        """c per the MoE blend; with MoE disabled, c is the raw feature."""
        x = self.encode(instruction)
        if not self.config.moe_enabled:
            return x
        return self.controller.forward(x)

    def denoise(self, z_t, t: int, cond: TextFeature, src) -> ad.Tensor:
        return self.denoiser.forward(z_t, t, cond, src)

    def sample(self, instruction: Instruction, src: np.ndarray,
               steps: int | None = None, seed: int = 0) -> np.ndarray:
        """Deterministic DDIM edit of `src` following `instruction`."""
        steps = steps if steps is not None else self.schedule.T
        cond = self.condition(instruction)
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(src.shape)
        src_t = ad.Tensor(src)

        def eps_fn(z_t, t):
            with ad.no_grad():
                return self.denoiser.forward(
                    ad.Tensor(z_t), t, cond, src_t).data

        out = ddim_sample(eps_fn, z, self.schedule, steps)
        return np.clip(out, -1.0, 1.0)
