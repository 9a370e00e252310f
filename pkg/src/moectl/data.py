"""Dataset construction pipeline: caption rewriting and pairwise image
generation behind client interfaces (deterministic stubs bundled), six
condition extractors, quality scoring, the ordered three-stage filter, and
the synthetic three-family routing corpus."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import imgio
from .encoder import Instruction
from .errors import ConfigError, InputError, PipelineError

CONDITION_METHODS = ("edge", "downsample4", "quantize4", "blur",
                     "colorgrid", "threshold")

COLORS = {
    "red": (1.0, -1.0, -1.0),
    "yellow": (1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "green": (-1.0, 1.0, -1.0),
    "purple": (0.6, -1.0, 0.8),
    "orange": (1.0, 0.2, -1.0),
}

STYLES = ("comic", "cartoon", "sketch", "watercolor", "vintage")
OBJECTS = ("star", "ball", "box", "cross")
PLACES = ("sky", "ground", "corner", "center")


@dataclass
class EditSample:
    id: str
    src_image: np.ndarray
    tgt_image: np.ndarray
    instruction: Instruction
    src_caption: str
    tgt_caption: str
    condition_method: str
    text_scale: float
    provenance: dict
    scores: dict | None = None
    verdict: dict | None = None


@dataclass
class FilterPolicy:
    min_height: int = 16
    min_width: int = 16
    min_aesthetic: float = 4.0
    min_clip: float = 0.2

    def __post_init__(self):
        if self.min_height < 1 or self.min_width < 1:
            raise ConfigError("minimum image dimensions must be >= 1")
        for v in (self.min_aesthetic, self.min_clip):
            if not np.isfinite(v):
                raise ConfigError("filter thresholds must be finite")


# ---------------------------------------------------------------------------
# Clients


class CaptionClient(Protocol):
    def rewrite(self, src_caption: str, instruction: Instruction,
                in_context: list[tuple[str, str, str]]) -> str: ...


class GeneratorClient(Protocol):
    def generate(self, src_image: np.ndarray, condition: np.ndarray,
                 tgt_caption: str, text_scale: float,
                 seed: int) -> np.ndarray: ...


class StubCaptionClient:
    """Deterministic template rewrites standing in for a remote LLM."""

    def rewrite(self, src_caption: str, instruction: Instruction,
                in_context=()) -> str:
        caption = src_caption.strip()
        if not caption:
            raise InputError("source caption is empty")
        text = instruction.text.strip().lower()

        m = re.fullmatch(r"make it an? (.+) painting", text)
        if m:
            if caption.startswith("a photo of "):
                return f"a {m.group(1)} painting of {caption[len('a photo of '):]}"
            return f"a {m.group(1)} painting of {caption}"
        m = re.fullmatch(r"turn it into (.+) style", text)
        if m:
            return f"{caption} in {m.group(1)} style"
        m = re.fullmatch(r"change the color to (.+)", text)
        if m:
            new = m.group(1)
            for color in COLORS:
                if re.search(rf"\b{color}\b", caption):
                    return re.sub(rf"\b{color}\b", new, caption, count=1)
            return f"{caption} colored {new}"
        m = re.fullmatch(r"add (.+) into the (.+)", text)
        if m:
            return f"{caption} with {m.group(1)} in the {m.group(2)}"
        return f"{caption}, {instruction.text.strip()}"


class StubGeneratorClient:
    """Seeded procedural renderer standing in for a conditional generator.

    Blends the condition map with a caption-hash-seeded smooth color field;
    text_scale 0 returns the condition map unchanged.
    """

    def generate(self, src_image, condition, tgt_caption: str,
                 text_scale: float, seed: int) -> np.ndarray:
        if text_scale < 0:
            raise ConfigError(f"text_scale must be >= 0, got {text_scale}")
        mix = text_scale / (1.0 + text_scale)
        if mix == 0.0:
            return condition.copy()
        cap_hash = int.from_bytes(
            hashlib.sha1(tgt_caption.encode("utf-8")).digest()[:4], "big")
        rng = np.random.default_rng((seed << 32) ^ cap_hash)
        _, h, w = condition.shape
        coarse = rng.uniform(-1, 1, (3, 4, 4))
        fy = np.repeat(coarse, int(np.ceil(h / 4)), axis=1)[:, :h, :]
        field = np.repeat(fy, int(np.ceil(w / 4)), axis=2)[:, :, :w]
        return np.clip((1.0 - mix) * condition + mix * field, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Condition extraction


def _luminance(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=0)


def extract_condition(img: np.ndarray, method: str) -> np.ndarray:
    """One of six deterministic structural control maps, same spatial size."""
    if method not in CONDITION_METHODS:
        raise ConfigError(f"unknown condition method {method!r}; "
                          f"expected one of {CONDITION_METHODS}")
    _, h, w = img.shape
    if method == "edge":
        dx = np.abs(np.diff(img, axis=2, append=img[:, :, -1:]))
        dy = np.abs(np.diff(img, axis=1, append=img[:, -1:, :]))
        return np.clip(dx + dy, 0.0, 1.0)
    if method == "downsample4":
        hp, wp = h // 4, w // 4
        small = img[:, :hp * 4, :wp * 4].reshape(3, hp, 4, wp, 4).mean((2, 4))
        return np.repeat(np.repeat(small, 4, axis=1), 4, axis=2)[:, :h, :w]
    if method == "quantize4":
        lum = _luminance(img)
        levels = np.clip(np.floor((lum + 1.0) / 2.0 * 4), 0, 3)
        quant = levels / 3.0 * 2.0 - 1.0
        return np.broadcast_to(quant, (3, h, w)).copy()
    if method == "blur":
        padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
        out = np.zeros_like(img)
        for dy in range(3):
            for dx in range(3):
                out += padded[:, dy:dy + h, dx:dx + w]
        return out / 9.0
    if method == "colorgrid":
        gh, gw = max(h // 4, 1), max(w // 4, 1)
        out = np.empty_like(img)
        for gy in range(0, h, gh):
            for gx in range(0, w, gw):
                cell = img[:, gy:gy + gh, gx:gx + gw]
                out[:, gy:gy + gh, gx:gx + gw] = cell.mean(
                    axis=(1, 2), keepdims=True)
        return out
    # threshold: binary at median luminance, ties -> 1
    lum = _luminance(img)
    binary = (lum >= np.median(lum)).astype(np.float64)
    return np.broadcast_to(binary, (3, h, w)).copy()


# ---------------------------------------------------------------------------
# Scoring and filtering


def aesthetic_score(img: np.ndarray, band=(0.02, 0.5)) -> float:
    """10 * (1 - mean deviation of local luminance contrast from the band)."""
    lum = (_luminance(img) + 1.0) / 2.0
    dx = np.abs(np.diff(lum, axis=1, append=lum[:, -1:]))
    dy = np.abs(np.diff(lum, axis=0, append=lum[-1:, :]))
    contrast = (dx + dy) / 2.0
    lo, hi = band
    deviation = np.maximum(lo - contrast, 0.0) + np.maximum(contrast - hi, 0.0)
    return float(np.clip(10.0 * (1.0 - deviation.mean()), 0.0, 10.0))


def score_sample(sample: EditSample, embedder) -> EditSample:
    from .evaluation import cosine
    h, w = sample.tgt_image.shape[1:]
    clip = cosine(embedder.embed_image(sample.tgt_image),
                  embedder.embed_text(sample.tgt_caption))
    sample.scores = {
        "resolution": [int(h), int(w)],
        "aesthetic": aesthetic_score(sample.tgt_image),
        "clip": float(clip),
    }
    return sample


def apply_filter(samples: list[EditSample],
                 policy: FilterPolicy) -> list[EditSample]:
    """Fixed-order checks (resolution -> aesthetic -> clip); the first
    failing check is each drop's single recorded reason."""
    for s in samples:
        if s.scores is None:
            raise PipelineError(f"sample {s.id} reached the filter unscored")
        h, w = s.scores["resolution"]
        if h < policy.min_height or w < policy.min_width:
            s.verdict = {"keep": False, "reason": "resolution"}
        elif s.scores["aesthetic"] < policy.min_aesthetic:
            s.verdict = {"keep": False, "reason": "aesthetic"}
        elif s.scores["clip"] < policy.min_clip:
            s.verdict = {"keep": False, "reason": "clip"}
        else:
            s.verdict = {"keep": True, "reason": None}
    return samples


def filter_summary(samples: list[EditSample]) -> dict:
    kept = sum(1 for s in samples if s.verdict and s.verdict["keep"])
    reasons: dict[str, int] = {}
    for s in samples:
        if s.verdict and not s.verdict["keep"]:
            reasons[s.verdict["reason"]] = reasons.get(s.verdict["reason"], 0) + 1
    return {"total": len(samples), "kept": kept,
            "dropped": len(samples) - kept, "reasons": reasons}


# ---------------------------------------------------------------------------
# Synthetic routing corpus


def _draw_shape(img, mask, rng, color):
    """Paint one random rect or disk; record it in `mask`."""
    _, h, w = img.shape
    kind = rng.integers(0, 2)
    cy, cx = rng.integers(3, h - 3), rng.integers(3, w - 3)
    r = int(rng.integers(2, 5))
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        m = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        name = "box"
    else:
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        name = "ball"
    img[:, m] = np.asarray(color)[:, None]
    mask |= m
    return name, m


def _style_transform(img: np.ndarray, style: str) -> np.ndarray:
    if style == "comic":
        return np.clip(-img, -1.0, 1.0)
    if style == "cartoon":
        return np.clip(np.sign(img) * 0.85 + 0.1, -1.0, 1.0)
    if style == "sketch":
        lum = _luminance(img)
        return np.clip(np.broadcast_to(-lum * 0.8 + 0.15, img.shape),
                       -1.0, 1.0).copy()
    if style == "watercolor":
        blurred = extract_condition(img, "blur")
        return np.clip(blurred * 0.6 + np.array([0.25, 0.1, 0.35])[:, None, None],
                       -1.0, 1.0)
    # vintage: warm matrix + lift
    mixed = np.stack([
        0.6 * img[0] + 0.3 * img[1] + 0.1 * img[2] + 0.2,
        0.3 * img[0] + 0.5 * img[1] + 0.1 * img[2] + 0.1,
        0.2 * img[0] + 0.3 * img[1] + 0.3 * img[2] - 0.1,
    ])
    return np.clip(mixed, -1.0, 1.0)


def _place_coords(place: str, h: int, w: int):
    return {
        "sky": (2, w // 2),
        "ground": (h - 3, w // 2),
        "corner": (2, 2),
        "center": (h // 2, w // 2),
    }[place]


def synth_routing_corpus(per_family: int, seed: int, image_size: int = 16,
                         caption_client: CaptionClient | None = None
                         ) -> list[EditSample]:
    """Three instruction families with matching procedural image pairs:
    A recolors one shape, B restyles the whole image, C composites a new
    shape into a named region."""
    if per_family < 1:
        raise ConfigError(f"per_family must be >= 1, got {per_family}")
    captions = caption_client or StubCaptionClient()
    rng = np.random.default_rng(seed)
    color_names = list(COLORS)
    samples: list[EditSample] = []
    h = w = image_size

    for fi, family in enumerate(("local-translation", "global-style",
                                 "local-edit")):
        for k in range(per_family):
            sample_seed = int(rng.integers(0, 2**31))
            srng = np.random.default_rng(sample_seed)
            bg = srng.uniform(-0.6, 0.6, 3)
            img = np.tile(bg[:, None, None], (1, h, w))
            mask = np.zeros((h, w), dtype=bool)
            shape_color_name = color_names[int(srng.integers(len(COLORS)))]
            shape_name, shape_mask = _draw_shape(
                img, mask, srng, COLORS[shape_color_name])
            src = np.clip(img, -1.0, 1.0)
            src_caption = f"a {shape_color_name} {shape_name} on a plain background"

            if family == "local-translation":
                new_color = color_names[int(srng.integers(len(COLORS)))]
                while new_color == shape_color_name:
                    new_color = color_names[int(srng.integers(len(COLORS)))]
                text = f"change the color to {new_color}"
                tgt = src.copy()
                tgt[:, shape_mask] = np.asarray(COLORS[new_color])[:, None]
            elif family == "global-style":
                style = STYLES[int(srng.integers(len(STYLES)))]
                text = f"turn it into {style} style"
                tgt = _style_transform(src, style)
            else:
                obj = OBJECTS[int(srng.integers(len(OBJECTS)))]
                place = PLACES[int(srng.integers(len(PLACES)))]
                text = f"add a {obj} into the {place}"
                tgt = src.copy()
                cy, cx = _place_coords(place, h, w)
                yy, xx = np.mgrid[0:h, 0:w]
                om = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= 2
                obj_color = COLORS[color_names[int(srng.integers(len(COLORS)))]]
                tgt[:, om] = np.asarray(obj_color)[:, None]

            instruction = Instruction(text=text, family_label=family)
            samples.append(EditSample(
                id=f"{family}-{k:04d}",
                src_image=src,
                tgt_image=np.clip(tgt, -1.0, 1.0),
                instruction=instruction,
                src_caption=src_caption,
                tgt_caption=captions.rewrite(src_caption, instruction),
                condition_method=CONDITION_METHODS[k % len(CONDITION_METHODS)],
                text_scale=(0.5, 1.0, 1.5)[k % 3],
                provenance={"generator": "procedural-stub",
                            "seed": sample_seed},
            ))
    return samples


# ---------------------------------------------------------------------------
# Manifest persistence


def save_manifest(samples: list[EditSample], out_dir) -> Path:
    out = Path(out_dir)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for s in samples:
            src_rel = f"images/{s.id}_src.png"
            tgt_rel = f"images/{s.id}_tgt.png"
            imgio.save_image(out / src_rel, s.src_image)
            imgio.save_image(out / tgt_rel, s.tgt_image)
            f.write(json.dumps({
                "id": s.id,
                "src_image": src_rel,
                "tgt_image": tgt_rel,
                "instruction": s.instruction.text,
                "family": s.instruction.family_label,
                "src_caption": s.src_caption,
                "tgt_caption": s.tgt_caption,
                "condition_method": s.condition_method,
                "text_scale": s.text_scale,
                "scores": s.scores,
                "provenance": s.provenance,
                "verdict": s.verdict,
            }, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest_path, kept_only: bool = False) -> list[EditSample]:
    path = Path(manifest_path)
    base = path.parent
    samples = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if kept_only and rec["verdict"] and not rec["verdict"]["keep"]:
                continue
            samples.append(EditSample(
                id=rec["id"],
                src_image=imgio.load_image(base / rec["src_image"]),
                tgt_image=imgio.load_image(base / rec["tgt_image"]),
                instruction=Instruction(text=rec["instruction"],
                                        family_label=rec["family"]),
                src_caption=rec["src_caption"],
                tgt_caption=rec["tgt_caption"],
                condition_method=rec["condition_method"],
                text_scale=rec["text_scale"],
                provenance=rec["provenance"],
                scores=rec["scores"],
                verdict=rec["verdict"],
            ))
    return samples
