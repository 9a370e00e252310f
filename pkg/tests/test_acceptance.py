"""Acceptance suite: one test per criterion, each printing a PASS line.

The heavy fixtures (the 300-sample corpus and the 2,000-step training run)
are module-scoped and shared. Pinned values come from fixed-seed runs:
model/train seed 4, corpus seed 0.
"""

import hashlib

import numpy as np
import pytest

import moectl.autodiff as ad
from moectl import data, imgio
from moectl.cli import main as cli_main
from moectl.diffusion import ddim_sample, extract_heatmap, make_schedule
from moectl.encoder import TextFeature, tokenize
from moectl.evaluation import (RankingBallot, ToyEmbedder, clip_d, clip_t,
                               eval_report, prefer_score)
from moectl.model import EditModel, ModelConfig
from moectl.moe import MoEController, routing_report
from moectl.training import (TrainConfig, compute_loss, draw_batch,
                             load_model, single_term_loss, train)

PIN_SEED = 4
CORPUS_SEED = 0
ROUTING_PURITY_THRESHOLD = 0.6  # pinned; fixed-seed run measures 0.86

TINY = dict(vocab_size=64, dim=8, max_len=8, n_experts=2, expert_hidden=8,
            channels=4, attn_dim=4, time_dim=4, image_size=8, timesteps=10)


_CAPTURE = None


@pytest.fixture(autouse=True)
def _capture_handle(capfd):
    global _CAPTURE
    _CAPTURE = capfd
    yield
    _CAPTURE = None


def ok(criterion: int, detail: str):
    # Suspend pytest's capture so the one-line verdicts always appear
    # in plain `pytest -v` output.
    msg = f"ACCEPTANCE {criterion:02d} PASS: {detail}"
    if _CAPTURE is not None:
        with _CAPTURE.disabled():
            print(msg, flush=True)
    else:
        print(msg, flush=True)


@pytest.fixture(scope="module")
def corpus():
    return data.synth_routing_corpus(100, seed=CORPUS_SEED)


@pytest.fixture(scope="module")
def trained(corpus):
    return train(ModelConfig(seed=PIN_SEED),
                 TrainConfig(steps=2000, seed=PIN_SEED), corpus)


def test_criterion_01_gate_simplex():
    controller = MoEController(n_experts=3, dim=32, seed=PIN_SEED)
    rng = np.random.default_rng(PIN_SEED)
    for _ in range(1000):
        d = controller.gate_forward(rng.standard_normal(32) * 3)
        assert abs(d.weights.sum() - 1.0) < 1e-12
        assert np.all((d.weights >= 0.0) & (d.weights <= 1.0))
    ok(1, "1000 gate decisions on the simplex within 1e-12")


def test_criterion_02_residual_identity():
    controller = MoEController(n_experts=3, dim=32, seed=PIN_SEED)
    for e in controller.experts:
        for p in e.parameters():
            p.data[...] = 0.0
    rng = np.random.default_rng(PIN_SEED + 1)
    worst = 0.0
    for _ in range(100):
        x = TextFeature(tokens=ad.Tensor(
            rng.standard_normal((int(rng.integers(1, 16)), 32))))
        out = controller.forward(x)
        worst = max(worst, float(np.abs(out.tokens.data - x.tokens.data).max()))
    assert worst < 1e-15
    ok(2, f"zeroed experts give exact identity (max dev {worst:.1e})")


def test_criterion_03_loss_degeneration():
    samples = data.synth_routing_corpus(6, seed=CORPUS_SEED, image_size=8)
    model = EditModel(ModelConfig(seed=PIN_SEED, **TINY))
    batch = draw_batch(samples, np.random.default_rng(PIN_SEED), 16,
                       model.schedule.T)
    loss, _, _ = compute_loss(batch, model, w=0.0)
    ref = single_term_loss(batch, model)
    assert float(loss.data) == float(ref.data)
    ok(3, "w=0 loss bitwise equals the single-term diffusion loss")


def test_criterion_04_gradient_correctness():
    model = EditModel(ModelConfig(seed=PIN_SEED, freeze_encoder=False, **TINY))
    n_params = sum(p.data.size for p in model.parameters())
    assert n_params <= 20000
    samples = data.synth_routing_corpus(2, seed=CORPUS_SEED, image_size=8)
    batch = draw_batch(samples, np.random.default_rng(PIN_SEED), 4,
                       model.schedule.T)
    params = model.trainable_parameters()

    def loss_fn():
        return compute_loss(batch, model, w=0.5)[0]

    err = ad.finite_difference_check(loss_fn, params, step=1e-5)
    assert err < 1e-5
    ok(4, f"max relative gradient error {err:.2e} over {n_params} params")


def test_criterion_05_sampler_oracle_round_trip():
    schedule = make_schedule(50, 1e-3, 0.05)
    rng = np.random.default_rng(PIN_SEED)
    z0 = rng.uniform(-1, 1, (3, 16, 16))
    eps = rng.standard_normal(z0.shape)
    ab_T = schedule.alphas_bar[-1]
    z_T = np.sqrt(ab_T) * z0 + np.sqrt(1 - ab_T) * eps
    out = ddim_sample(lambda z, t: eps, z_T, schedule, steps=50)
    err = float(np.abs(out - z0).max())
    assert err < 1e-6
    ok(5, f"DDIM oracle round trip at T=50, max abs error {err:.1e}")


def test_criterion_06_routing_specialization(trained, corpus):
    report = routing_report(trained.model.controller, trained.model,
                            [s.instruction for s in corpus])
    majorities = report.counts.argmax(axis=1)
    assert report.purity > 1 / 3
    assert report.purity >= ROUTING_PURITY_THRESHOLD
    assert len(set(majorities)) == len(majorities)
    assert sorted(report.assignment.values()) == [1, 2, 3]
    ok(6, f"routing purity {report.purity:.3f} >= "
          f"{ROUTING_PURITY_THRESHOLD} with bijective assignment "
          f"{report.assignment}")


def test_criterion_07_ablation_direction(corpus, tmp_path):
    from moectl.training import ablate_w
    results = ablate_w([0.0, 0.5, 1.0], ModelConfig(seed=PIN_SEED),
                       TrainConfig(steps=300, seed=PIN_SEED), corpus,
                       tmp_path, probe_count=8, sample_steps=10)
    by_w = {r["w"]: r["source_fidelity"] for r in results}
    assert by_w[1.0] > by_w[0.0]
    ok(7, f"source fidelity rises with w: "
          f"{by_w[0.0]:.4f} (w=0) -> {by_w[1.0]:.4f} (w=1)")


def test_criterion_08_moe_vs_no_moe_harness(corpus, tmp_path):
    probes = corpus[::25]  # 12 probes across all families
    method_dirs = {}
    for name, moe_on in (("with_moe", True), ("without_moe", False)):
        cfg = ModelConfig(seed=PIN_SEED, moe_enabled=moe_on)
        result = train(cfg, TrainConfig(steps=200, seed=PIN_SEED), corpus)
        d = tmp_path / name
        d.mkdir()
        for s in probes:
            out = result.model.sample(s.instruction, s.src_image,
                                      steps=10, seed=PIN_SEED)
            imgio.save_image(d / f"{s.id}.png", out)
        method_dirs[name] = d
    report = eval_report(method_dirs, probes, ToyEmbedder())
    assert set(report.table) == {"with_moe", "without_moe"}
    for method in report.table:
        for cls in ("global", "local"):
            cell = report.table[method][cls]
            assert -1.0 <= cell["clip_t"] <= 1.0
            assert -1.0 <= cell["clip_d"] <= 1.0
    ok(8, "two-row MoE on/off report with all four metric columns in range")


def test_criterion_09_metric_oracles():
    rng = np.random.default_rng(PIN_SEED)
    emb = ToyEmbedder()
    words = ["red", "blue", "ball", "box", "comic", "sky", "style", "star"]
    for _ in range(100):
        img_a = rng.uniform(-1, 1, (3, 16, 16))
        img_b = rng.uniform(-1, 1, (3, 16, 16))
        cap_a = " ".join(rng.choice(words, 4))
        cap_b = " ".join(rng.choice(words, 4))

        def brute_cosine(u, v):
            num = sum(float(x) * float(y) for x, y in zip(u, v))
            nu = sum(float(x) ** 2 for x in u) ** 0.5
            nv = sum(float(y) ** 2 for y in v) ** 0.5
            return num / (nu * nv)

        t = clip_t(img_b, cap_b, emb)
        expected_t = brute_cosine(emb.embed_image(img_b), emb.embed_text(cap_b))
        assert abs(t - expected_t) <= 1e-12

        d = clip_d(img_a, img_b, cap_a, cap_b, emb)
        if not d.degenerate:
            expected_d = brute_cosine(
                emb.embed_image(img_b) - emb.embed_image(img_a),
                emb.embed_text(cap_b) - emb.embed_text(cap_a))
            assert abs(d.value - expected_d) <= 1e-12

    methods = ["a", "b", "c"]
    ballots = [RankingBallot(f"p{i}", "s", list(rng.permutation(methods)))
               for i in range(100)]
    scores = {m: prefer_score(ballots, m) for m in methods}
    recount = {m: sum(1 for b in ballots if b.ranking[0] == m) / 100
               for m in methods}
    assert scores == recount
    assert abs(sum(scores.values()) - 1.0) <= 1e-12
    ok(9, "clip_t, clip_d, prefer_score match brute-force recomputation")


def test_criterion_10_pipeline_conservation_determinism(tmp_path):
    cfg = tmp_path / "pipeline.ini"
    cfg.write_text("[corpus]\nper_family = 100\nseed = 0\n")
    checksums = []
    for run in ("a", "b"):
        out = tmp_path / run
        rc = cli_main(["dataset", "build", "--config", str(cfg),
                       "--out", str(out)])
        assert rc == 0
        manifest = out / "manifest.jsonl"
        checksums.append(hashlib.sha256(manifest.read_bytes()).hexdigest())
        samples = data.load_manifest(manifest)
        assert len(samples) == 300
        kept = sum(1 for s in samples if s.verdict["keep"])
        dropped = [s for s in samples if not s.verdict["keep"]]
        assert kept + len(dropped) == 300
        assert all(d.verdict["reason"] in ("resolution", "aesthetic", "clip")
                   for d in dropped)
    assert checksums[0] == checksums[1]
    ok(10, f"300-sample build conserved (kept+dropped=300) and "
           f"checksum-stable across identical-seed runs")


def test_criterion_11_checkpoint_integrity(tmp_path):
    samples = data.synth_routing_corpus(4, seed=CORPUS_SEED, image_size=8)
    mc = ModelConfig(seed=PIN_SEED, **TINY)

    full = train(mc, TrainConfig(steps=10, seed=PIN_SEED), samples,
                 out_dir=tmp_path / "full")
    model, _, _ = load_model(full.checkpoint_path)
    for p in full.model.parameters():
        loaded = next(q for q in model.parameters() if q.name == p.name)
        assert np.array_equal(p.data, loaded.data)

    part = train(mc, TrainConfig(steps=6, seed=PIN_SEED), samples,
                 out_dir=tmp_path / "part")
    resumed = train(mc, TrainConfig(steps=10, seed=PIN_SEED), samples,
                    out_dir=tmp_path / "resumed",
                    resume_from=part.checkpoint_path)
    for pf, pr in zip(full.model.parameters(), resumed.model.parameters()):
        assert np.array_equal(pf.data, pr.data)
    ok(11, "checkpoint save/load and resumed training are bitwise exact")


def test_supplementary_trained_heatmap_content_word(trained, corpus):
    # Fig.-2-style check on the toy model: after training, the instruction's
    # content word should out-attend BOS on a majority of spatial positions.
    # Pinned from the fixed-seed run (observed fraction ~0.7).
    model = trained.model
    rng = np.random.default_rng(PIN_SEED)
    fractions = []
    for s in corpus[::30]:
        cond = model.condition(s.instruction)
        t = model.schedule.T // 2
        z_t = ad.Tensor(rng.standard_normal(s.src_image.shape))
        hm = extract_heatmap(model.denoiser, z_t, t, cond,
                             ad.Tensor(s.src_image))
        ids = tokenize(s.instruction)
        content_idx = len(ids) - 1  # templates end on the content word
        if s.instruction.family_label == "global-style":
            content_idx = len(ids) - 2  # "... {style} style"
        frac = float((hm.maps[content_idx] > hm.maps[0]).mean())
        fractions.append(frac)
    assert float(np.mean(fractions)) >= 0.5
