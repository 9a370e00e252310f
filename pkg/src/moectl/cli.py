"""moectl command-line interface.

Exit codes: 0 success, 2 configuration error, 3 I/O or pipeline error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data, imgio
from .config import RunConfig
from .diffusion import extract_heatmap
from .encoder import Instruction
from .errors import (CheckpointError, ConfigError, InputError, MoectlError,
                     NumericError, PipelineError, RangeError, ReportError,
                     StateError)
from .evaluation import ToyEmbedder, eval_report, save_report
from .model import ModelConfig
from .moe import routing_report
from .training import (TrainConfig, ablate_w, compute_loss, draw_batch,
                       load_model, train)

GRAD_CHECK_TOLERANCE = 1e-5


def _write_loss_plot(csv_path: Path, out_path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, totals = [], []
    with open(csv_path, encoding="utf-8") as f:
        next(f)
        for line in f:
            parts = line.strip().split(",")
            if len(parts) == 4:
                steps.append(int(parts[0]))
                totals.append(float(parts[3]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, totals, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def cmd_dataset_build(args) -> int:
    cfg = RunConfig(args.config)
    per_family = args.per_family or cfg.corpus["per_family"]
    seed = cfg.corpus["seed"]
    samples = data.synth_routing_corpus(per_family, seed,
                                        image_size=cfg.model.image_size)
    embedder = ToyEmbedder()
    for s in samples:
        data.score_sample(s, embedder)
    data.apply_filter(samples, cfg.filter)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = data.save_manifest(samples, out)
    except OSError as e:
        raise PipelineError(f"cannot write dataset to {out}: {e}") from e
    summary = data.filter_summary(samples)
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(f"wrote {manifest} ({summary['kept']} kept / "
          f"{summary['dropped']} dropped of {summary['total']})")
    return 0


def _load_samples(manifest, kept_only=True):
    path = Path(manifest)
    if not path.exists():
        raise PipelineError(f"manifest not found: {path}")
    samples = data.load_manifest(path, kept_only=kept_only)
    if not samples:
        raise InputError(f"manifest {path} has no usable samples")
    return samples


def cmd_train(args) -> int:
    cfg = RunConfig(args.config)
    samples = _load_samples(args.data)
    result = train(cfg.model, cfg.train, samples, out_dir=args.out)
    _write_loss_plot(Path(args.out) / "loss_curve.csv",
                     Path(args.out) / "loss_curve.png")
    print(f"trained {cfg.train.steps} steps; final loss "
          f"{result.losses[-1][3]:.6f}; checkpoint {result.checkpoint_path}")
    return 0


def cmd_edit(args) -> int:
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise StateError(f"checkpoint not found: {ckpt_path}")
    model, _, _ = load_model(ckpt_path)
    src = imgio.load_image(args.image)
    instruction = Instruction(text=args.instruction)
    out = model.sample(instruction, src, steps=args.steps, seed=args.seed)
    imgio.save_image(args.out, out)
    if args.heatmap:
        cond = model.condition(instruction)
        t = model.schedule.T
        eps = np.random.default_rng(args.seed).standard_normal(src.shape)
        hm = extract_heatmap(model.denoiser, ad.Tensor(eps), t, cond,
                             ad.Tensor(src))
        base = Path(args.heatmap)
        base.mkdir(parents=True, exist_ok=True)
        sidecar = []
        for ti in range(hm.n_tokens):
            imgio.save_grayscale(base / f"token{ti:02d}.png", hm.maps[ti])
            sidecar.append(hm.maps[ti].tolist())
        with open(base / "heatmap.json", "w", encoding="utf-8") as f:
            json.dump(sidecar, f)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    samples = _load_samples(args.manifest)
    method_dirs = {}
    for spec_arg in args.methods:
        name, _, d = spec_arg.partition("=")
        if not name or not d:
            raise ConfigError(f"--methods entries must be name=dir, got {spec_arg!r}")
        method_dirs[name] = Path(d)
    report = eval_report(method_dirs, samples, ToyEmbedder())
    save_report(report, args.out)
    print(report.as_text())
    return 0


def cmd_routing_report(args) -> int:
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise StateError(f"checkpoint not found: {ckpt_path}")
    model, _, _ = load_model(ckpt_path)
    samples = _load_samples(args.manifest)
    corpus = [s.instruction for s in samples]
    report = routing_report(model.controller, model, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "routing_report.txt").write_text(report.as_text() + "\n",
                                            encoding="utf-8")
    with open(out / "routing_records.jsonl", "w", encoding="utf-8") as f:
        for rec in report.records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(report.as_text())
    return 0


def cmd_ablate_w(args) -> int:
    cfg = RunConfig(args.config)
    try:
        ws = [float(v) for v in args.ws.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --ws value: {args.ws!r}") from e
    samples = _load_samples(args.data)
    results = ablate_w(ws, cfg.model, cfg.train, samples, args.out,
                       probe_count=args.probes, sample_steps=args.steps)
    # side-by-side probe grid, one row per w
    rows = []
    for r in results:
        run_dir = Path(args.out) / f"w_{r['w']:g}"
        imgs = [imgio.load_image(p) for p in sorted(run_dir.glob("*.png"))]
        rows.append(np.concatenate(imgs, axis=2))
    imgio.save_image(Path(args.out) / "w_sweep_grid.png",
                     np.concatenate(rows, axis=1))
    for r in results:
        print(f"w={r['w']:g}  source_fidelity={r['source_fidelity']:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    model_cfg = ModelConfig(vocab_size=64, dim=8, max_len=8, n_experts=2,
                            expert_hidden=8, channels=4, attn_dim=4,
                            time_dim=4, image_size=8, timesteps=10,
                            seed=args.seed, freeze_encoder=False)
    from .model import EditModel
    model = EditModel(model_cfg)
    samples = data.synth_routing_corpus(2, seed=args.seed, image_size=8)
    rng = np.random.default_rng(args.seed)
    batch = draw_batch(samples, rng, 4, model.schedule.T)
    params = model.trainable_parameters()

    def loss_fn():
        return compute_loss(batch, model, w=0.5)[0]

    err = ad.finite_difference_check(loss_fn, params, step=1e-5)
    print(f"max relative gradient error: {err:.3e} "
          f"(tolerance {GRAD_CHECK_TOLERANCE:g})")
    if err >= GRAD_CHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {err:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moectl",
        description="Instruction-guided toy diffusion editing with a "
                    "mixture-of-experts text-condition controller.")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset pipeline commands")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    build = ds_sub.add_parser("build", help="build the synthetic corpus")
    build.add_argument("--config", default=None)
    build.add_argument("--out", required=True)
    build.add_argument("--per-family", type=int, default=None)
    build.set_defaults(func=cmd_dataset_build)

    tr = sub.add_parser("train", help="train the editing model")
    tr.add_argument("--config", default=None)
    tr.add_argument("--data", required=True, help="manifest path")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ed = sub.add_parser("edit", help="edit one image with an instruction")
    ed.add_argument("--ckpt", required=True)
    ed.add_argument("--image", required=True)
    ed.add_argument("--instruction", required=True)
    ed.add_argument("--out", required=True)
    ed.add_argument("--steps", type=int, default=None)
    ed.add_argument("--seed", type=int, default=0)
    ed.add_argument("--heatmap", default=None,
                    help="directory for cross-attention heatmaps")
    ed.set_defaults(func=cmd_edit)

    ev = sub.add_parser("eval", help="metric report over method outputs")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--methods", nargs="+", required=True,
                    help="name=dir pairs")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    rr = sub.add_parser("routing-report", help="expert specialization report")
    rr.add_argument("--ckpt", required=True)
    rr.add_argument("--manifest", required=True)
    rr.add_argument("--out", required=True)
    rr.set_defaults(func=cmd_routing_report)

    aw = sub.add_parser("ablate-w", help="reconstruction-weight sweep")
    aw.add_argument("--config", default=None)
    aw.add_argument("--ws", required=True, help="comma-separated weights")
    aw.add_argument("--data", required=True)
    aw.add_argument("--out", required=True)
    aw.add_argument("--probes", type=int, default=8)
    aw.add_argument("--steps", type=int, default=10,
                    help="DDIM steps for probe edits")
    aw.set_defaults(func=cmd_ablate_w)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, RangeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (PipelineError, CheckpointError, StateError, ReportError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (NumericError, MoectlError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
