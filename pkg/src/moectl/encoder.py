"""Toy deterministic text encoder: hashing tokenizer, seeded embedding
table with sinusoidal positions, and one self-attention block."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InputError

BOS_ID = 0

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class Instruction:
    """A human edit instruction, optionally tagged with its task family."""

    text: str
    family_label: str | None = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise InputError("instruction text is empty")


@dataclass
class TextFeature:
    """Sequence of d-dimensional token vectors produced by the encoder."""

    tokens: ad.Tensor  # shape (L, d)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def _hash_token(word: str, vocab_size: int) -> int:
    # Stable across processes (unlike built-in hash); id 0 reserved for BOS.
    h = int.from_bytes(hashlib.sha1(word.encode("utf-8")).digest()[:8], "big")
    return 1 + h % (vocab_size - 1)


def tokenize(instruction: Instruction, vocab_size: int = 4096,
             max_len: int = 16) -> list[int]:
    """Lowercase word split, hashed ids, BOS prepended, truncated to max_len."""
    words = _WORD_RE.findall(instruction.text.lower())
    if not words:
        raise InputError(f"instruction has no tokens: {instruction.text!r}")
    ids = [BOS_ID] + [_hash_token(w, vocab_size) for w in words]
    return ids[:max_len]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    out = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return out


class TextEncoder:
    """Maps instructions to TextFeature sequences. Pure in (params, seed, text)."""

    def __init__(self, vocab_size: int = 4096, dim: int = 32,
                 max_len: int = 16, seed: int = 7, trainable: bool = False):
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(dim)

        def p(name, shape):
            return ad.Parameter(f"encoder.{name}", rng.normal(0, s, shape),
                                trainable=trainable)

        # Unit-variance embeddings with a damped position signal keep the
        # word identity, not the position, as the dominant feature.
        self.embedding = ad.Parameter(
            "encoder.embedding", rng.normal(0, 1.0, (vocab_size, dim)),
            trainable=trainable)
        self.pos_scale = 0.25
        self.wq = p("attn.wq", (dim, dim))
        self.wk = p("attn.wk", (dim, dim))
        self.wv = p("attn.wv", (dim, dim))
        self.wo = p("attn.wo", (dim, dim))

    def parameters(self) -> list[ad.Parameter]:
        return [self.embedding, self.wq, self.wk, self.wv, self.wo]

    def encode(self, instruction: Instruction) -> TextFeature:
        ids = tokenize(instruction, self.vocab_size, self.max_len)
        x = ad.gather_rows(self.embedding, ids)
        x = ad.add(x, self.pos_scale * sinusoidal_positions(len(ids), self.dim))
        q = ad.matmul(x, self.wq)
        k = ad.matmul(x, self.wk)
        v = ad.matmul(x, self.wv)
        attn = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)),
                                   1.0 / np.sqrt(self.dim)), axis=-1)
        x = ad.add(ad.matmul(ad.matmul(attn, v), self.wo), x)
        return TextFeature(tokens=x)
