"""Edit-quality metrics over a pluggable embedder: caption-image
similarity (clip_t), directional consistency (clip_d), user-study prefer
score, and the per-task-class report table."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from . import imgio
from .errors import DegenerateInputError, InputError, ReportError

GLOBAL_FAMILIES = {"global-style"}


class Embedder(Protocol):
    def embed_image(self, img: np.ndarray) -> np.ndarray: ...
    def embed_text(self, text: str) -> np.ndarray: ...


class ToyEmbedder:
    """Deterministic stand-in embedder: seeded random projections of an
    8x8 image summary and a bag of hashed words, shared output width k."""

    def __init__(self, k: int = 64, seed: int = 1234, text_buckets: int = 512):
        self.k = k
        self.text_buckets = text_buckets
        rng = np.random.default_rng(seed)
        self._img_proj = rng.normal(0, 1.0, (3 + 3 * 64, k)) / np.sqrt(k)
        self._txt_proj = rng.normal(0, 1.0, (text_buckets, k)) / np.sqrt(k)

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        _, h, w = img.shape
        bh, bw = max(h // 8, 1), max(w // 8, 1)
        small = np.zeros((3, 8, 8))
        for gy in range(8):
            for gx in range(8):
                cell = img[:, gy * bh:(gy + 1) * bh, gx * bw:(gx + 1) * bw]
                small[:, gy, gx] = cell.mean(axis=(1, 2)) if cell.size else 0.0
        feats = np.concatenate([img.mean(axis=(1, 2)), small.reshape(-1)])
        return feats @ self._img_proj

    def embed_text(self, text: str) -> np.ndarray:
        bag = np.zeros(self.text_buckets)
        for word in re.findall(r"[a-z0-9]+", text.lower()):
            h = int.from_bytes(word.encode("utf-8")[-8:], "big")
            bag[h % self.text_buckets] += 1.0
        return bag @ self._txt_proj


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise DegenerateInputError("zero-norm embedding in cosine similarity")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def clip_t(gen_image: np.ndarray, tgt_caption: str, embedder: Embedder) -> float:
    return cosine(embedder.embed_image(gen_image),
                  embedder.embed_text(tgt_caption))


class DirectionalScore(NamedTuple):
    value: float
    degenerate: bool


def clip_d(src_image, gen_image, src_caption: str, tgt_caption: str,
           embedder: Embedder) -> DirectionalScore:
    """Cosine of the image-embedding change against the text-embedding
    change; a near-zero direction scores 0.0 with the degenerate flag set
    (an unedited output earns no directional credit)."""
    img_dir = embedder.embed_image(gen_image) - embedder.embed_image(src_image)
    txt_dir = embedder.embed_text(tgt_caption) - embedder.embed_text(src_caption)
    if np.linalg.norm(img_dir) < 1e-12 or np.linalg.norm(txt_dir) < 1e-12:
        return DirectionalScore(0.0, True)
    return DirectionalScore(cosine(img_dir, txt_dir), False)


@dataclass
class RankingBallot:
    participant: str
    sample: str
    ranking: list[str]  # rank 1 first

    def __post_init__(self):
        if len(set(self.ranking)) != len(self.ranking) or not self.ranking:
            raise InputError(
                f"ballot ({self.participant}, {self.sample}) has duplicate "
                f"or empty method ranking")


def prefer_score(ballots: list[RankingBallot], method: str) -> float:
    """Fraction of ballots ranking `method` first."""
    if not ballots:
        raise InputError("no ballots supplied")
    for b in ballots:
        if method not in b.ranking:
            raise InputError(
                f"ballot ({b.participant}, {b.sample}) lacks method {method!r}")
    top = sum(1 for b in ballots if b.ranking[0] == method)
    return top / len(ballots)


def load_ballots(path) -> list[RankingBallot]:
    """One ballot per line: participant<TAB>sample<TAB>m1,m2,..."""
    ballots = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise InputError(f"malformed ballot at line {lineno}")
            ballots.append(RankingBallot(parts[0], parts[1],
                                         parts[2].split(",")))
    return ballots


@dataclass
class EvalReport:
    methods: list[str]
    # method -> class -> {"clip_t": mean, "clip_d": mean, "count": n}
    table: dict[str, dict[str, dict]]
    records: list[dict]

    def as_text(self) -> str:
        cols = ["global CLIP-T", "global CLIP-D", "local CLIP-T",
                "local CLIP-D"]
        header = "method".ljust(16) + "".join(c.rjust(15) for c in cols)
        lines = [header, "-" * len(header)]
        for m in self.methods:
            row = m.ljust(16)
            for cls in ("global", "local"):
                for metric in ("clip_t", "clip_d"):
                    cell = self.table[m].get(cls)
                    row += (f"{cell[metric]:.4f}".rjust(15)
                            if cell else "-".rjust(15))
            lines.append(row)
        return "\n".join(lines)


def eval_report(method_dirs: dict[str, Path], samples,
                embedder: Embedder) -> EvalReport:
    """Mean clip_t / clip_d per method per task class (global vs local).

    Each method directory must hold one `<sample id>.png` per sample.
    """
    missing = []
    for name, d in method_dirs.items():
        for s in samples:
            if not (Path(d) / f"{s.id}.png").exists():
                missing.append(f"{name}/{s.id}")
    if missing:
        raise ReportError(f"missing method outputs: {', '.join(missing)}")

    records = []
    sums: dict[str, dict[str, list]] = {
        m: {"global": [], "local": []} for m in method_dirs}
    for name, d in method_dirs.items():
        for s in samples:
            gen = imgio.load_image(Path(d) / f"{s.id}.png")
            t = clip_t(gen, s.tgt_caption, embedder)
            dscore = clip_d(s.src_image, gen, s.src_caption, s.tgt_caption,
                            embedder)
            cls = ("global" if s.instruction.family_label in GLOBAL_FAMILIES
                   else "local")
            sums[name][cls].append((t, dscore.value))
            records.append({"method": name, "sample": s.id, "class": cls,
                            "clip_t": t, "clip_d": dscore.value,
                            "clip_d_degenerate": dscore.degenerate})

    table: dict[str, dict[str, dict]] = {}
    for name in method_dirs:
        table[name] = {}
        for cls in ("global", "local"):
            vals = sums[name][cls]
            if vals:
                arr = np.asarray(vals)
                table[name][cls] = {
                    "clip_t": float(arr[:, 0].mean()),
                    "clip_d": float(arr[:, 1].mean()),
                    "count": len(vals),
                }
    return EvalReport(methods=list(method_dirs), table=table, records=records)


def save_report(report: EvalReport, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.as_text() + "\n", encoding="utf-8")
    with open(out / "report.jsonl", "w", encoding="utf-8") as f:
        for rec in report.records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "report_table.json", "w", encoding="utf-8") as f:
        json.dump(report.table, f, indent=2, sort_keys=True)
