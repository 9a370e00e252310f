"""Mixture-of-experts controller: n two-layer feed-forward experts blended
by a linear+softmax gate, added residually onto the text feature."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .encoder import Instruction, TextFeature
from .errors import DimensionError, InputError


@dataclass
class GateDecision:
    weights: np.ndarray  # (n,) simplex vector
    dominant: int  # argmax, ties -> lowest index


class Expert:
    """Two-layer feed-forward network, output width equals input width."""

    def __init__(self, index: int, dim: int, hidden: int, rng, prefix: str):
        s1 = np.sqrt(2.0 / dim)
        s2 = np.sqrt(2.0 / hidden)
        self.index = index
        self.w1 = ad.Parameter(f"{prefix}.w1", rng.normal(0, s1, (dim, hidden)))
        self.b1 = ad.Parameter(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = ad.Parameter(f"{prefix}.w2", rng.normal(0, s2, (hidden, dim)))
        self.b2 = ad.Parameter(f"{prefix}.b2", np.zeros(dim))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, tokens: ad.Tensor) -> ad.Tensor:
        h = ad.relu(ad.add(ad.matmul(tokens, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)


class MoEController:
    """Produces the modified condition: per token,
    c = sum_i g_i(token) * expert_i(token) + token."""

    def __init__(self, n_experts: int = 3, dim: int = 32,
                 hidden: int | None = None, seed: int = 11,
                 gate_pooling: str = "none", gate_init_scale: float = 1.0):
        if n_experts < 1:
            raise DimensionError(f"need at least one expert, got {n_experts}")
        if gate_pooling not in ("none", "mean"):
            raise InputError(f"unknown gate_pooling mode {gate_pooling!r}")
        self.n = n_experts
        self.dim = dim
        self.hidden = hidden if hidden is not None else 4 * dim
        self.gate_pooling = gate_pooling
        rng = np.random.default_rng(seed)
        self.experts = [Expert(i + 1, dim, self.hidden, rng,
                               f"controller.expert{i + 1}")
                        for i in range(n_experts)]
        # The init scale sets how decisive routing is before any training;
        # larger scales break the expert symmetry harder at step 0.
        self.gate_w = ad.Parameter("controller.gate.w",
                                   rng.normal(0, gate_init_scale / np.sqrt(dim),
                                              (dim, n_experts)))
        self.gate_b = ad.Parameter("controller.gate.b", np.zeros(n_experts))

    def parameters(self) -> list[ad.Parameter]:
        out = []
        for e in self.experts:
            out.extend(e.parameters())
        out.extend([self.gate_w, self.gate_b])
        return out

    def gate_logits(self, tokens: ad.Tensor) -> ad.Tensor:
        if tokens.shape[-1] != self.dim:
            raise DimensionError(
                f"gate expects width {self.dim}, got {tokens.shape}")
        return ad.add(ad.matmul(tokens, self.gate_w), self.gate_b)

    def gate_forward(self, token) -> GateDecision:
        """Gate decision for one d-vector."""
        t = ad.Tensor(np.asarray(token, dtype=np.float64).reshape(1, -1))
        with ad.no_grad():
            w = ad.softmax(self.gate_logits(t), axis=-1).data[0]
        return GateDecision(weights=w, dominant=int(np.argmax(w)) + 1)

    def gate_weights(self, x: TextFeature) -> ad.Tensor:
        """Per-token (L,n) gate weights; under mean pooling every row is the
        pooled decision repeated."""
        if self.gate_pooling == "mean":
            length = x.length
            pooled = ad.scale(ad.matmul(
                ad.Tensor(np.ones((1, length))), x.tokens), 1.0 / length)
            g = ad.softmax(self.gate_logits(pooled), axis=-1)
            return ad.matmul(ad.Tensor(np.ones((length, 1))), g)
        return ad.softmax(self.gate_logits(x.tokens), axis=-1)

    def forward(self, x: TextFeature) -> TextFeature:
        g = self.gate_weights(x)  # (L, n)
        mix = None
        for i, expert in enumerate(self.experts):
            gi = ad.reshape(ad.gather_rows(ad.transpose(g), [i]), (x.length, 1))
            term = ad.mul(expert.forward(x.tokens), gi)
            mix = term if mix is None else ad.add(mix, term)
        return TextFeature(tokens=ad.add(mix, x.tokens))


def mean_pooled_decision(controller: MoEController,
                         x: TextFeature) -> GateDecision:
    """Dominant expert of the token-mean gate weights (reporting view)."""
    with ad.no_grad():
        g = controller.gate_weights(x).data.mean(axis=0)
    return GateDecision(weights=g, dominant=int(np.argmax(g)) + 1)


@dataclass
class RoutingReport:
    families: list[str]
    counts: np.ndarray  # (n_families, n_experts) dominant-expert counts
    purity: float
    assignment: dict[str, int]  # best one-to-one family -> expert (1-based)
    assignment_weight: int
    records: list[dict]

    def as_text(self) -> str:
        n = self.counts.shape[1]
        header = "family".ljust(18) + "".join(
            f"expert{j + 1}".rjust(10) for j in range(n)) + "  assigned"
        lines = [header, "-" * len(header)]
        for fi, fam in enumerate(self.families):
            row = fam.ljust(18) + "".join(
                f"{int(self.counts[fi, j])}".rjust(10) for j in range(n))
            tag = self.assignment.get(fam)
            lines.append(row + ("  -" if tag is None else f"  expert{tag}"))
        lines.append(f"purity: {self.purity:.4f}")
        return "\n".join(lines)


def routing_report(controller: MoEController, encoder,
                   corpus: list[Instruction]) -> RoutingReport:
    """Dominant-expert histogram per family plus purity and the best
    one-to-one family/expert assignment (brute force over permutations)."""
    if not corpus:
        raise InputError("routing corpus is empty")
    for ins in corpus:
        if not ins.family_label:
            raise InputError(f"instruction lacks family label: {ins.text!r}")

    families = sorted({ins.family_label for ins in corpus})
    fam_index = {f: i for i, f in enumerate(families)}
    counts = np.zeros((len(families), controller.n), dtype=np.int64)
    records = []
    for ins in corpus:
        decision = mean_pooled_decision(controller, encoder.encode(ins))
        counts[fam_index[ins.family_label], decision.dominant - 1] += 1
        records.append({
            "text": ins.text,
            "family": ins.family_label,
            "gate_weights": [float(v) for v in decision.weights],
            "dominant_expert": decision.dominant,
        })

    # Best one-to-one (partial, if experts are scarce) matching by brute
    # force; family and expert counts are tiny.
    n, nf = controller.n, len(families)
    best_pairs, best_weight = [], -1
    if n >= nf:
        for perm in permutations(range(n), nf):
            weight = int(sum(counts[fi, perm[fi]] for fi in range(nf)))
            if weight > best_weight:
                best_weight = weight
                best_pairs = list(enumerate(perm))
    else:
        for perm in permutations(range(nf), n):
            weight = int(sum(counts[perm[ei], ei] for ei in range(n)))
            if weight > best_weight:
                best_weight = weight
                best_pairs = [(perm[ei], ei) for ei in range(n)]
    assignment = {families[fi]: ei + 1 for fi, ei in best_pairs}

    # Purity under the best one-to-one matching: a gate that routes every
    # family to the same expert earns only the largest family's share.
    purity = best_weight / len(corpus)

    return RoutingReport(families=families, counts=counts, purity=purity,
                         assignment=assignment, assignment_weight=best_weight,
                         records=records)
