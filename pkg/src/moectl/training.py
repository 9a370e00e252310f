"""Optimization loop: the dual target/source noise-prediction loss,
plain SGD with checkpoint/resume, and the w-sweep ablation driver."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import EditSample
from .diffusion import forward_noise
from .errors import ConfigError, InputError, NumericError
from .model import EditModel, ModelConfig


@dataclass
class TrainConfig:
    w: float = 0.5
    learning_rate: float = 1e-3
    steps: int = 200
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.w < 0:
            raise ConfigError(f"reconstruction weight must be >= 0, got {self.w}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingBatch:
    samples: list[EditSample]
    ts: np.ndarray        # (B,) timesteps in [1, T]
    eps_tgt: list[np.ndarray]
    eps_src: list[np.ndarray]


def draw_batch(samples: list[EditSample], rng: np.random.Generator,
               batch_size: int, T: int) -> TrainingBatch:
    idx = rng.integers(0, len(samples), batch_size)
    ts = rng.integers(1, T + 1, batch_size)
    shape = samples[0].src_image.shape
    eps_tgt = [rng.standard_normal(shape) for _ in range(batch_size)]
    eps_src = [rng.standard_normal(shape) for _ in range(batch_size)]
    return TrainingBatch(samples=[samples[i] for i in idx], ts=ts,
                         eps_tgt=eps_tgt, eps_src=eps_src)


def _per_sample_terms(batch: TrainingBatch, model: EditModel):
    """Noise-prediction MSE terms per sample: (target-branch, source-branch)."""
    terms = []
    for s, t, e_tgt, e_src in zip(batch.samples, batch.ts,
                                  batch.eps_tgt, batch.eps_src):
        t = int(t)
        cond = model.condition(s.instruction)
        src = ad.Tensor(s.src_image)
        z_tgt = forward_noise(s.tgt_image, t, e_tgt, model.schedule)
        t1 = ad.mse(ad.Tensor(e_tgt), model.denoise(ad.Tensor(z_tgt), t, cond, src))
        z_src = forward_noise(s.src_image, t, e_src, model.schedule)
        t2 = ad.mse(ad.Tensor(e_src), model.denoise(ad.Tensor(z_src), t, cond, src))
        terms.append((t1, t2))
    return terms


def compute_loss(batch: TrainingBatch, model: EditModel, w: float):
    """Batch-mean of target MSE + w * source MSE; returns the scalar loss
    tensor plus the two term means as floats."""
    terms = _per_sample_terms(batch, model)
    b = len(terms)
    sum1 = terms[0][0]
    sum2 = terms[0][1]
    for t1, t2 in terms[1:]:
        sum1 = ad.add(sum1, t1)
        sum2 = ad.add(sum2, t2)
    loss = ad.scale(ad.add(sum1, ad.scale(sum2, w)), 1.0 / b)
    term1 = sum1.item() / b
    term2 = sum2.item() / b
    if not np.isfinite(loss.data):
        bad = [s.id for s in batch.samples]
        raise NumericError(f"non-finite loss over samples {bad}")
    return loss, term1, term2


def single_term_loss(batch: TrainingBatch, model: EditModel) -> ad.Tensor:
    """Standard diffusion loss (target branch only); the w=0 reference."""
    terms = _per_sample_terms(batch, model)
    total = terms[0][0]
    for t1, _ in terms[1:]:
        total = ad.add(total, t1)
    return ad.scale(total, 1.0 / len(terms))


@dataclass
class TrainResult:
    model: EditModel
    losses: list[tuple[int, float, float, float]]  # step, term1, term2, total
    checkpoint_path: Path | None


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def train(model_config: ModelConfig, train_config: TrainConfig,
          samples: list[EditSample], out_dir=None,
          resume_from=None) -> TrainResult:
    """Deterministic SGD training; emits a per-step loss record and a
    checkpoint when out_dir is given."""
    if not samples:
        raise InputError("training dataset is empty")

    model = EditModel(model_config)
    rng = np.random.default_rng(train_config.seed)
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        restore_model(model, ckpt)
        rng.bit_generator.state = ckpt.rng_state
        start_step = ckpt.step

    params = model.trainable_parameters()
    losses = []
    out = Path(out_dir) if out_dir is not None else None
    loss_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        loss_path = out / "loss_curve.csv"
        mode = "a" if resume_from is not None and loss_path.exists() else "w"
        loss_file = open(loss_path, mode, newline="", encoding="utf-8")
        writer = csv.writer(loss_file)
        if mode == "w":
            writer.writerow(["step", "term1", "term2", "total"])

    try:
        for step in range(start_step + 1, train_config.steps + 1):
            batch = draw_batch(samples, rng, train_config.batch_size,
                               model.schedule.T)
            loss, term1, term2 = compute_loss(batch, model, train_config.w)
            if not np.isfinite(loss.data):
                raise NumericError(f"NaN loss at step {step}")
            ad.backward(loss, params)
            for p in params:
                p.data -= train_config.learning_rate * p.grad
            ad.zero_grads(params)
            losses.append((step, term1, term2, float(loss.data)))
            if loss_file is not None:
                writer.writerow([step, f"{term1:.10g}", f"{term2:.10g}",
                                 f"{float(loss.data):.10g}"])
    finally:
        if loss_file is not None:
            loss_file.close()

    ckpt_path = None
    if out is not None:
        ckpt_path = out / "model.ckpt"
        save_model(ckpt_path, model, train_config,
                   step=train_config.steps, rng=rng)
    return TrainResult(model=model, losses=losses, checkpoint_path=ckpt_path)


def save_model(path, model: EditModel, train_config: TrainConfig,
               step: int, rng: np.random.Generator | None = None):
    params = {p.name: p.data for p in model.parameters()}
    config = {"model": model.config.as_dict(),
              "train": train_config.as_dict()}
    save_checkpoint(path, params, config, step,
                    _rng_state(rng) if rng is not None else None)


def restore_model(model: EditModel, ckpt: Checkpoint):
    by_name = {p.name: p for p in model.parameters()}
    for name, value in ckpt.params.items():
        if name not in by_name:
            raise NumericError(f"checkpoint parameter {name!r} not in model")
        by_name[name].data[...] = value
    model._encode_cache.clear()


def load_model(path) -> tuple[EditModel, TrainConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = EditModel(ModelConfig(**ckpt.config["model"]))
    restore_model(model, ckpt)
    return model, TrainConfig(**ckpt.config["train"]), ckpt


def source_fidelity(output: np.ndarray, src: np.ndarray) -> float:
    """1 - msd/4: 1.0 means identical to source, 0.0 maximally far
    (pixel range is [-1,1], so squared distance caps at 4)."""
    msd = float(((output - src) ** 2).mean())
    return 1.0 - msd / 4.0


def ablate_w(ws, model_config: ModelConfig, train_config: TrainConfig,
             samples: list[EditSample], out_dir, probe_count: int = 8,
             sample_steps: int = 10, sample_seed: int = 99) -> list[dict]:
    """Train one model per reconstruction weight (shared seed), edit a
    fixed probe set with each, and record per-w source fidelity."""
    ws = list(ws)
    if not ws:
        raise ConfigError("ws must be non-empty")
    for w in ws:
        if w < 0:
            raise ConfigError(f"reconstruction weight must be >= 0, got {w}")
    out = Path(out_dir)
    probes = samples[:probe_count]
    results = []
    for w in ws:
        cfg = replace(train_config, w=float(w))
        run_dir = out / f"w_{w:g}"
        result = train(model_config, cfg, samples, out_dir=run_dir)
        fidelities = []
        for s in probes:
            edited = result.model.sample(s.instruction, s.src_image,
                                         steps=sample_steps, seed=sample_seed)
            from . import imgio
            imgio.save_image(run_dir / f"{s.id}.png", edited)
            fidelities.append(source_fidelity(edited, s.src_image))
        results.append({"w": float(w),
                        "source_fidelity": float(np.mean(fidelities)),
                        "checkpoint": str(result.checkpoint_path)})
    with open(out / "w_sweep.json", "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2)
    return results
