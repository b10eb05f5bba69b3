"""Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned below.

Run ``pytest tests/test_acceptance.py -s`` to see the verdict lines as they
are produced; they are also repeated in the terminal summary.
"""
import json
import math
import os
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from fairgan import diffcore as dc
from fairgan.cli import main
from fairgan.datasets import LabeledDataset, benchmark_counts, gen_gaussian_mixture
from fairgan.diffcore import Tensor
from fairgan.explore import ExploreConfig, Validity, assemble_balanced
from fairgan.metrics import (
    ClassHistogram,
    EvalReport,
    FeatureStats,
    evaluate,
    fairness_metric,
    fairness_metric_from_counts,
    fairness_metric_ref,
    fid,
    fid_from_features,
    fid_sensitivity_heatmap,
    inception_score,
    kid,
)
from fairgan.models import ModelConfig, build_classifier, build_discriminator, build_generator
from fairgan import training
from fairgan.training import ClassifierConfig, TrainConfig, bias_loss, lambda_weights, train, train_classifier

from test_diffcore import PRIMITIVE_CASES, rand

# ---------------------------------------------------------------- pinned tolerances

GRAD_TOL_PRIMITIVE = 1e-4
GRAD_TOL_END_TO_END = 1e-3
GRAD_BUDGET_S = 60

PAPER_COUNTS = (6536, 1748, 1213, 306, 171, 26)
PAPER_LAMBDAS = (0.06928, 0.16504, 0.17574, 0.19388, 0.19658, 0.19948)
LAMBDA_TOL = 1e-4
EXACT_TOL = 1e-9
PAPER_FAIRNESS = 0.55410
PAPER_FAIRNESS_TOL = 1e-4

FID_TOL = 1e-3
FID_SELF_TOL = 1e-6
IS_TOL = 1e-9
REF_FORM_TOL = 1e-12

SEEDS = (0, 1, 2)
BENCH_TOTAL = 3000
BENCH_STEPS = 3000
BENCH_PER_CLASS = 600
EVAL_REPEATS, EVAL_SAMPLES = 5, 2000
BIASED_FLOOR = 0.15
SYNZ_RATIO = 0.5
BENCH_BUDGET_S = 20 * 60

EXPLORE_PER_CLASS = 200
EXPLORE_BUDGET_S = 5 * 60

HEATMAP_RATIO = 5.0
HEATMAP_SET_SIZE = 250
HEATMAP_BUDGET_S = 2 * 60

REWEIGHT_STEPS = 100
REWEIGHT_BUDGET_S = 2 * 60


# ---------------------------------------------------------------- 1. gradients


def _primitive_errors(rng):
    errs = {}
    for name in sorted(PRIMITIVE_CASES):
        shapes, fn = PRIMITIVE_CASES[name]
        x = rand(rng, 5, 4, away_from_zero=True)
        extras = [rand(rng, *s) for s in shapes]
        w = Tensor(rng.uniform(-1, 1, size=fn(x, *extras).shape), dtype=np.float64)
        errs[name] = max(dc.check_gradients(lambda: dc.sum_(fn(x, *extras) * w), [x, *extras]))

    x, w, b = rand(rng, 2, 2, 6, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)
    proj = Tensor(rng.uniform(-1, 1, size=(2, 3, 3, 3)))
    errs["conv2d"] = max(dc.check_gradients(
        lambda: dc.sum_(dc.conv2d(x, w, b, stride=2, pad=1) * proj), [x, w, b]))

    x, w, b = rand(rng, 2, 3, 3, 3), rand(rng, 3, 2, 4, 4), rand(rng, 2)
    proj = Tensor(rng.uniform(-1, 1, size=(2, 2, 6, 6)))
    errs["conv_transpose2d"] = max(dc.check_gradients(
        lambda: dc.sum_(dc.conv_transpose2d(x, w, b, stride=2, pad=1) * proj), [x, w, b]))

    logits, labels = rand(rng, 6, 4), rng.integers(0, 4, size=6)
    errs["cross_entropy"] = max(dc.check_gradients(lambda: dc.cross_entropy(logits, labels), [logits]))
    return errs


def _end_to_end_bias_error():
    mc = ModelConfig((2,), 3, latent_dim=3, g_hidden=(5,), c_hidden=(8,), init_std=0.8, seed=4)
    G, C = build_generator(mc), build_classifier(mc)
    for net in (G, C):
        for _, t in net.params.items():
            t.data = t.data.astype(np.float64)
    for _, t in C.params.items():
        t.requires_grad = False
    z = Tensor(np.random.default_rng(1).standard_normal((16, 3)))
    lam = np.array([0.2, 0.3, 0.5])
    f = lambda: bias_loss(C.probs_tensor(G(z)), lam, "soft")  # noqa: E731
    assert f().item() > 0.01
    return max(dc.check_gradients(f, [t for _, t in G.params.items()]))


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    errs = _primitive_errors(np.random.default_rng(11))
    e2e = _end_to_end_bias_error()
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < GRAD_TOL_PRIMITIVE and e2e < GRAD_TOL_END_TO_END and elapsed < GRAD_BUDGET_S
    verdict("1", ok, f"{len(errs)} primitives, worst {worst} rel err {errs[worst]:.2e} (< {GRAD_TOL_PRIMITIVE}); "
                     f"soft bias through G and C {e2e:.2e} (< {GRAD_TOL_END_TO_END}); {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. formulas


def test_criterion_2_formula_oracles(verdict):
    lam = lambda_weights(PAPER_COUNTS)
    lam_err = float(np.max(np.abs(lam - PAPER_LAMBDAS)))
    n, k = sum(PAPER_COUNTS), len(PAPER_COUNTS)
    exact = [float((1 - Fraction(c, n)) / (k - 1)) for c in PAPER_COUNTS]
    probs = np.zeros((6, 6))
    probs[:, 0] = 1.0
    hard = bias_loss(probs, np.full(6, 1 / 6), "hard").item()
    fair = fairness_metric_from_counts(PAPER_COUNTS)
    collapse = fairness_metric(ClassHistogram(np.array([6, 0, 0, 0, 0, 0]), np.eye(6)[0]))
    checks = [
        lam_err <= LAMBDA_TOL,
        abs(lam.sum() - 1.0) <= EXACT_TOL,
        float(np.max(np.abs(lam - exact))) <= EXACT_TOL,
        abs(hard - 5 / 36) <= EXACT_TOL,
        abs(fair - PAPER_FAIRNESS) <= PAPER_FAIRNESS_TOL,
        abs(collapse - math.sqrt(5 / 6)) <= EXACT_TOL,
    ]
    verdict("2", all(checks), f"lambda max err {lam_err:.1e}, sum {lam.sum():.12f}; hard bias {hard:.12f} "
                              f"vs 5/36; fairness {fair:.5f} vs {PAPER_FAIRNESS}; collapse {collapse:.12f} "
                              f"vs sqrt(5/6)")


# ---------------------------------------------------------------- 3. metrics


def _stats(mu, sigma):
    return FeatureStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(sigma, float)), 100)


def test_criterion_3_metric_oracles(verdict):
    f1 = fid(_stats(0, 1), _stats(1, 1))
    f2 = fid(_stats([0, 0], np.eye(2)), _stats([0, 0], 4 * np.eye(2)))
    feats = np.random.default_rng(0).standard_normal((300, 6))
    f0 = fid_from_features(feats, feats)
    k7 = kid(np.array([[1.0], [1.0]]), np.array([[0.0], [0.0]]))
    is1, _ = inception_score(np.full((40, 5), 0.2), splits=4)
    rng = np.random.default_rng(1)
    ref_gap = 0.0
    for _ in range(50):
        c = rng.integers(0, 100, size=int(rng.integers(2, 9))) + 1
        h = ClassHistogram(c, c / c.sum())
        ref_gap = max(ref_gap, abs(fairness_metric_ref(h, np.full(len(c), 1 / len(c))) - fairness_metric(h)))
    checks = [abs(f1 - 1) <= FID_TOL, abs(f2 - 2) <= FID_TOL, abs(f0) <= FID_SELF_TOL, k7 == 7.0,
              abs(is1 - 1) <= IS_TOL, ref_gap <= REF_FORM_TOL]
    verdict("3", all(checks), f"FID {f1:.6f} / {f2:.6f} / self {f0:.1e}; KID {k7!r}; IS {is1:.12f}; "
                              f"reference-vs-uniform form gap {ref_gap:.1e}")


# ---------------------------------------------------------------- 4-6. benchmark runs


def _fresh_gan(seed):
    mc = ModelConfig((2,), 5, seed=seed)
    return build_generator(mc), build_discriminator(mc)


@pytest.fixture(scope="module")
def benchmark():
    """Biased, Syn-z and bias-loss GANs on the imbalanced Gaussian benchmark, per seed."""
    runs = {}
    for s in SEEDS:
        r = {"time": {}}
        t0 = time.perf_counter()
        C, _ = train_classifier(gen_gaussian_mixture(5, [BENCH_PER_CLASS] * 5, seed=100 + s),
                                ClassifierConfig(seed=s))
        data = gen_gaussian_mixture(5, benchmark_counts(BENCH_TOTAL), seed=s)
        G, D = _fresh_gan(s)
        train(G, D, data, TrainConfig(steps=BENCH_STEPS, seed=s))
        r["biased"] = evaluate(G, C, None, EVAL_REPEATS, EVAL_SAMPLES, s).fairness
        r["time"]["shared"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        validity = Validity.calibrated(G, C, D, data.samples, ExploreConfig().tau)
        synz = assemble_balanced(G, C, BENCH_PER_CLASS, ExploreConfig(seed=s), validity=validity)
        G2, D2 = _fresh_gan(s + 1000)
        train(G2, D2, synz, TrainConfig(steps=BENCH_STEPS, seed=s))
        r["synz"] = evaluate(G2, C, None, EVAL_REPEATS, EVAL_SAMPLES, s).fairness
        r["time"]["synz"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        G3, D3 = _fresh_gan(s)
        train(G3, D3, data, TrainConfig(steps=BENCH_STEPS, seed=s, bias_loss=True), classifier=C)
        r["bias"] = evaluate(G3, C, None, EVAL_REPEATS, EVAL_SAMPLES, s).fairness
        r["time"]["bias"] = time.perf_counter() - t0

        r.update(G=G, D=D, C=C, data=data)
        runs[s] = r
    return runs


def _fmt(values):
    return "/".join(f"{v:.3f}" for v in values)


def test_criterion_4_syn_z_rebalancing(benchmark, verdict):
    biased = [benchmark[s]["biased"] for s in SEEDS]
    synz = [benchmark[s]["synz"] for s in SEEDS]
    mb, ms = statistics.median(biased), statistics.median(synz)
    runtime = sum(benchmark[s]["time"]["shared"] + benchmark[s]["time"]["synz"] for s in SEEDS)
    ok = mb >= BIASED_FLOOR and ms <= SYNZ_RATIO * mb and runtime < BENCH_BUDGET_S
    verdict("4", ok, f"biased {_fmt(biased)} (median {mb:.3f} >= {BIASED_FLOOR}); Syn-z {_fmt(synz)} "
                     f"(median {ms:.3f} <= {SYNZ_RATIO * mb:.3f}); {runtime:.0f}s")


def test_criterion_5_bias_loss_ablation(benchmark, verdict):
    plain = [benchmark[s]["biased"] for s in SEEDS]
    bias = [benchmark[s]["bias"] for s in SEEDS]
    mp, mb = statistics.median(plain), statistics.median(bias)
    runtime = sum(benchmark[s]["time"]["shared"] + benchmark[s]["time"]["bias"] for s in SEEDS)
    verdict("5", mb < mp and runtime < BENCH_BUDGET_S,
            f"without {_fmt(plain)} (median {mp:.3f}); with bias loss {_fmt(bias)} (median {mb:.3f}); "
            f"{runtime:.0f}s")


def test_criterion_6_latent_exploration(benchmark, verdict):
    r = benchmark[SEEDS[0]]
    G, D, C = r["G"], r["D"], r["C"]
    cfg = ExploreConfig(seed=SEEDS[0])
    t0 = time.perf_counter()
    validity = Validity.calibrated(G, C, D, r["data"].samples, cfg.tau)
    out = assemble_balanced(G, C, EXPLORE_PER_CLASS, cfg, validity=validity, details=True)
    elapsed = time.perf_counter() - t0

    counts = out.dataset.class_counts
    balanced = list(counts) == [EXPLORE_PER_CLASS] * 5
    probs = C.probs(out.dataset.samples)
    pred = probs.argmax(axis=1)
    pure = float(np.mean((pred == out.dataset.labels) & (probs.max(axis=1) >= cfg.tau)))
    chains = edges = 0
    for results in out.results.values():
        for res in results:
            for i, p in enumerate(res.parents):
                if p >= 0:
                    edges += 1
                    chains += res.distances[i] > res.distances[p]
    ok = balanced and pure == 1.0 and chains == edges and elapsed < EXPLORE_BUDGET_S
    verdict("6", ok, f"counts {[int(c) for c in counts]}; purity {pure:.2%}; {chains}/{edges} parent links "
                     f"strictly farther; {elapsed:.1f}s")


# ---------------------------------------------------------------- 7. FID sensitivity


def test_criterion_7_fid_sensitivity(verdict):
    t0 = time.perf_counter()
    ds = gen_gaussian_mixture(5, [BENCH_PER_CLASS] * 5, seed=7)
    C, _ = train_classifier(gen_gaussian_mixture(5, [BENCH_PER_CLASS] * 5, seed=100), ClassifierConfig(seed=0))
    profiles = {f"class{k}": np.eye(5)[k] for k in range(5)}
    profiles["uniform"] = [1] * 5
    profiles["skewed"] = [60, 20, 10, 7, 3]
    hm = fid_sensitivity_heatmap(ds, C, profiles, set_size=HEATMAP_SET_SIZE, seed=0)
    diag = np.diag(hm.values)
    ratio = hm.values / np.maximum.outer(diag, diag)
    np.fill_diagonal(ratio, np.inf)
    diagnostic = fid_sensitivity_heatmap(ds, C, profiles, set_size=HEATMAP_SET_SIZE, seed=0, diagnostic=True)
    diag0 = float(np.abs(np.diag(diagnostic.values)).max())
    elapsed = time.perf_counter() - t0
    ok = ratio.min() >= HEATMAP_RATIO and diag0 == 0.0 and elapsed < HEATMAP_BUDGET_S
    verdict("7", ok, f"{len(profiles)} profiles; smallest cross/same ratio {ratio.min():.1f} (>= {HEATMAP_RATIO}); "
                     f"diagnostic diagonal max {diag0}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 8. reweighting


def _loss_curve(ds, cfg):
    G, D = _fresh_gan(3)
    losses = []
    train(G, D, ds, cfg, [lambda step, ck, lb: losses.append(lb.as_dict())])
    return losses, G


def test_criterion_8_reweighting_baseline(verdict, monkeypatch):
    t0 = time.perf_counter()
    ds = gen_gaussian_mixture(5, [120] * 5, seed=8)
    base = dict(steps=REWEIGHT_STEPS, batch_size=32, eval_every=1, seed=8)
    plain, G1 = _loss_curve(ds, TrainConfig(**base))
    rew, G2 = _loss_curve(ds, TrainConfig(reweight=True, **base))
    bitwise = plain == rew and all(
        G1.params[n].data.tobytes() == G2.params[n].data.tobytes() for n in G1.params.names())

    # the class weights the training loop hands to the reweighted step
    seen = []
    real_step = training.reweighted_step

    def spy(G, D, batch, labels, weights, cfg, **kw):
        seen.append(np.array(weights))
        return real_step(G, D, batch, labels, weights, cfg, **kw)

    monkeypatch.setattr(training, "reweighted_step", spy)
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(6), PAPER_COUNTS)
    paper_ds = LabeledDataset(rng.uniform(-1, 1, (len(labels), 2)).astype(np.float32), labels, 6)
    mc = ModelConfig((2,), 6, seed=0)
    train(build_generator(mc), build_discriminator(mc), paper_ds, TrainConfig(steps=1, reweight=True))
    lam_err = float(np.max(np.abs(seen[0] - PAPER_LAMBDAS)))
    elapsed = time.perf_counter() - t0
    ok = bitwise and lam_err <= LAMBDA_TOL and elapsed < REWEIGHT_BUDGET_S
    verdict("8", ok, f"uniform-weight run bitwise equal to plain over {len(plain)} steps: {bitwise}; "
                     f"paper-count weights max err {lam_err:.1e}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 9. reproducibility

REPRO_CONFIG = {
    "dataset": {"total": 600, "shares": [40, 25, 15, 12, 8], "balanced_per_class": 120},
    "classifier": {"steps": 300},
    "train": {"steps": 300, "eval_every": 150},
    "eval": {"repeats": 2, "samples": 300},
}


def _pipeline(out, config):
    common = ["--config", config, "--out", str(out), "--quiet"]
    for argv in (["gen-data"], ["train-classifier"], ["train-gan", "--variant", "bias"], ["evaluate", "--variant", "bias"]):
        assert main([*argv, *common]) == 0
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.glob("*/report*.json"))}


def test_criterion_9_reproducibility(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("FGAN_THREADS", "1")
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps(REPRO_CONFIG))
    first = _pipeline(tmp_path / "a", str(config))
    second = _pipeline(tmp_path / "b", str(config))
    same = first.keys() == second.keys() and all(first[k] == second[k] for k in first)
    hashes = {EvalReport.from_json(v.decode()).config_hash[:12] for v in first.values()}
    verdict("9", bool(first) and same, f"{len(first)} EvalReports byte-identical across two runs: {same} "
                                       f"(config hashes {sorted(hashes)})")


# ---------------------------------------------------------------- 10. CIFAR-10 (non-gating)


def test_criterion_10_cifar_pipeline(verdict, tmp_path):
    root = os.environ.get("FGAN_CIFAR_DIR")
    if not root:
        verdict("10", None, "FGAN_CIFAR_DIR not set; imbalanced CIFAR-10 run skipped (non-gating)", gating=False)
    steps = int(os.environ.get("FGAN_CIFAR_STEPS", "2000"))
    config = tmp_path / "cifar.json"
    config.write_text(json.dumps({
        "dataset": {"kind": "cifar10", "num_classes": 10, "path": root, "shares": [1] * 10},
        "train": {"steps": steps, "batch_size": 64, "eval_every": 0},
        "eval": {"repeats": 1, "samples": 1000},
    }))
    out = tmp_path / "runs"
    common = ["--config", str(config), "--out", str(out), "--quiet"]
    ok = all(main([*argv, *common]) == 0 for argv in (
        ["gen-data"], ["train-classifier"], ["train-gan"], ["train-gan", "--variant", "bias"]))
    fids = {}
    if ok:
        for path in out.glob("train-gan-*/report.json"):
            rep = EvalReport.from_json(path.read_text())
            fids[rep.label] = rep.fid
    passed = ok and fids.get("bias") is not None and fids["bias"] <= fids.get("plain", -math.inf)
    verdict("10", passed, f"FID to balanced reference {fids} after {steps} steps", gating=False)
