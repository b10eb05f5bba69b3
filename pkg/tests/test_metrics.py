import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairgan.datasets import gen_gaussian_mixture
from fairgan.errors import ConfigError, DataError, NumericalError, UsageError
from fairgan.metrics import (
    ClassHistogram,
    EvalReport,
    FeatureStats,
    class_histogram,
    evaluate,
    fairness_metric,
    fairness_metric_from_counts,
    fairness_metric_ref,
    fid,
    fid_from_features,
    fid_sensitivity_heatmap,
    inception_score,
    kid,
    profile_counts,
)
from fairgan.models import ModelConfig, build_classifier, build_generator
from fairgan.training import ClassifierConfig, train_classifier

PAPER_COUNTS = (6536, 1748, 1213, 306, 171, 26)


def _hist(counts):
    c = np.asarray(counts)
    return ClassHistogram(c, c / c.sum())


# ---------------------------------------------------------------- fairness


def test_uniform_is_fair():
    assert fairness_metric(_hist([5, 5, 5, 5])) == 0.0


def test_single_class_collapse():
    assert fairness_metric(_hist([10, 0, 0, 0, 0, 0])) == pytest.approx(math.sqrt(5 / 6), abs=1e-9)


def test_paper_counts_hard_mode():
    # direct evaluation of the L2 norm in exact arithmetic
    n = sum(PAPER_COUNTS)
    expected = math.sqrt(sum((1 / 6 - c / n) ** 2 for c in PAPER_COUNTS))
    value = fairness_metric_from_counts(PAPER_COUNTS)
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(0.55410, abs=1e-4)


def test_soft_mode_uses_probability_means():
    h = ClassHistogram([4, 0], [0.75, 0.25])
    assert fairness_metric(h, "hard") == pytest.approx(math.sqrt(0.5))
    assert fairness_metric(h, "soft") == pytest.approx(math.sqrt(2 * 0.25**2))


def test_empty_histogram_is_usage_error():
    with pytest.raises(UsageError):
        fairness_metric(ClassHistogram([0, 0, 0], [0, 0, 0]))


def test_reference_form():
    a = _hist([3, 1])
    assert fairness_metric_ref(a, a) == 0.0
    assert fairness_metric_ref(_hist([5, 0]), _hist([0, 5])) == pytest.approx(math.sqrt(2), abs=1e-12)
    with pytest.raises(ConfigError):
        fairness_metric_ref(_hist([1, 1]), _hist([1, 1, 1]))


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(0, 500), min_size=2, max_size=8).filter(lambda c: sum(c) > 0),
       seed=st.integers(0, 2**31 - 1))
def test_fairness_properties(counts, seed):
    h = _hist(counts)
    k = len(counts)
    value = fairness_metric(h)
    assert 0.0 <= value <= math.sqrt((k - 1) / k) + 1e-12
    uniform = np.full(k, 1.0 / k)
    assert fairness_metric_ref(h, uniform) == pytest.approx(value, abs=1e-12)
    perm = np.random.default_rng(seed).permutation(k)
    assert fairness_metric(_hist(np.asarray(counts)[perm])) == pytest.approx(value, abs=1e-12)


def test_collapsed_generator_histogram():
    mc = ModelConfig((2,), 4, seed=0)
    G, C = build_generator(mc), build_classifier(ModelConfig((2,), 4, seed=1))
    for _, t in G.params.items():
        t.data = np.zeros_like(t.data)
    h = class_histogram(G, C, 300, seed=0, batch=64)
    assert h.total == 300
    assert sorted(h.counts.tolist()) == [0, 0, 0, 300]
    assert h.soft_means.sum() == pytest.approx(1.0, abs=1e-5)


# ---------------------------------------------------------------- FID


def _stats(mu, sigma):
    return FeatureStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(sigma, float)), 100)


def _sqrtm_denman_beavers(a, iters=60):
    y, z = a.copy(), np.eye(len(a))
    for _ in range(iters):
        y, z = 0.5 * (y + np.linalg.inv(z)), 0.5 * (z + np.linalg.inv(y))
    return y


def test_fid_1d_shift():
    assert fid(_stats(0, 1), _stats(1, 1)) == pytest.approx(1.0, abs=1e-3)


def test_fid_2d_scaled_covariance():
    assert fid(_stats([0, 0], np.eye(2)), _stats([0, 0], 4 * np.eye(2))) == pytest.approx(2.0, abs=1e-3)


def test_fid_against_iterative_sqrtm():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 6))
    b = rng.standard_normal((6, 6))
    sa, sb = a @ a.T + 0.1 * np.eye(6), b @ b.T + 0.1 * np.eye(6)
    mu_a, mu_b = rng.standard_normal(6), rng.standard_normal(6)
    root = _sqrtm_denman_beavers(sa @ sb)
    expected = np.sum((mu_a - mu_b) ** 2) + np.trace(sa + sb - 2 * root)
    assert fid(_stats(mu_a, sa), _stats(mu_b, sb)) == pytest.approx(expected, rel=1e-8)


def test_fid_identity_and_symmetry():
    rng = np.random.default_rng(0)
    fa = rng.standard_normal((200, 5))
    fb = rng.standard_normal((150, 5)) * 1.5 + 0.3
    assert fid_from_features(fa, fa) == 0.0
    assert abs(fid_from_features(fa, fb) - fid_from_features(fb, fa)) < 1e-6


def test_fid_errors():
    with pytest.raises(UsageError):
        FeatureStats.from_features(np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        fid(_stats([0, 0], np.eye(2)), _stats([0], [[1]]))
    with pytest.raises(NumericalError):
        fid(_stats([np.nan], [[1]]), _stats([0], [[1]]))


def test_fid_warns_on_large_clamp():
    bad = _stats([0, 0], [[1.0, 0.0], [0.0, -0.5]])
    with pytest.warns(RuntimeWarning, match="clamped"):
        fid(bad, _stats([0, 0], np.eye(2)))


# ---------------------------------------------------------------- KID


def test_kid_hand_case():
    assert kid(np.array([[1.0], [1.0]]), np.array([[0.0], [0.0]])) == 7.0


def test_kid_constant_features():
    assert kid(np.zeros((4, 3)), np.zeros((5, 3))) == 0.0


def test_kid_unbiased_on_same_distribution():
    rng = np.random.default_rng(0)
    est = np.array([kid(rng.standard_normal((20, 4)), rng.standard_normal((20, 4))) for _ in range(200)])
    se = est.std(ddof=1) / math.sqrt(len(est))
    assert abs(est.mean()) < 2 * se


def test_kid_detects_shift():
    rng = np.random.default_rng(1)
    assert kid(rng.standard_normal((50, 4)), rng.standard_normal((50, 4)) + 1.0) > 0.1


def test_kid_needs_two_samples():
    with pytest.raises(UsageError):
        kid(np.zeros((1, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------- IS


def test_is_uniform_rows():
    mean, std = inception_score(np.full((20, 4), 0.25), splits=2)
    assert mean == pytest.approx(1.0, abs=1e-9) and std == pytest.approx(0.0, abs=1e-9)


def test_is_even_one_hot():
    p = np.tile(np.eye(2), (10, 1))
    assert inception_score(p, splits=1)[0] == pytest.approx(2.0, abs=1e-12)


def test_is_single_class():
    p = np.zeros((10, 3))
    p[:, 1] = 1
    assert inception_score(p, splits=5)[0] == pytest.approx(1.0, abs=1e-12)


def test_is_errors():
    with pytest.raises(NumericalError):
        inception_score(np.full((4, 2), 0.7), splits=1)
    with pytest.raises(UsageError):
        inception_score(np.full((3, 2), 0.5), splits=4)


# ---------------------------------------------------------------- heatmap


@pytest.fixture(scope="module")
def benchmark_setup():
    ds = gen_gaussian_mixture(5, (400,) * 5, seed=0)
    C, _ = train_classifier(gen_gaussian_mixture(5, (300,) * 5, seed=1), ClassifierConfig(seed=0))
    return ds, C


def test_profile_counts_largest_remainder():
    assert profile_counts([1, 1, 1], 10).tolist() == [4, 3, 3]
    assert profile_counts([0.6, 0.2, 0.1, 0.07, 0.03], 100).tolist() == [60, 20, 10, 7, 3]


def test_heatmap_single_class_profiles(benchmark_setup):
    ds, C = benchmark_setup
    profiles = {f"c{k}": np.eye(5)[k] for k in range(5)}
    hm = fid_sensitivity_heatmap(ds, C, profiles, set_size=150, seed=0)
    diag = np.diag(hm.values)
    assert np.all(diag > 0)
    for i in range(5):
        for j in range(5):
            if i != j:
                assert hm.values[i, j] >= 5 * max(diag[i], diag[j])
    assert np.array_equal(hm.values, hm.values.T)
    assert hm.sizes[0, 1].tolist() == [150, 150]


def test_heatmap_diagnostic_diagonal_is_zero(benchmark_setup):
    ds, C = benchmark_setup
    hm = fid_sensitivity_heatmap(ds, C, [[1, 1, 1, 1, 1], [6, 2, 1, 0.7, 0.3]], set_size=200, diagnostic=True)
    assert np.all(np.diag(hm.values) == 0.0)
    assert hm.values[0, 1] > 0


def test_heatmap_csv_layout(benchmark_setup):
    ds, C = benchmark_setup
    hm = fid_sensitivity_heatmap(ds, C, {"a": [1, 1, 1, 1, 1], "b": [1, 0, 0, 0, 0]}, set_size=50)
    rows = hm.to_csv().splitlines()
    assert rows[0] == "profile,a,b" and rows[1].startswith("a,")
    assert hm.sizes_csv().splitlines()[1] == "a,a,50,50"


def test_heatmap_insufficient_samples(benchmark_setup):
    ds, C = benchmark_setup
    with pytest.raises(DataError, match="class 0"):
        fid_sensitivity_heatmap(ds, C, [[1, 0, 0, 0, 0]], set_size=300)


# ---------------------------------------------------------------- reports


def test_evaluate_is_deterministic(benchmark_setup):
    ds, C = benchmark_setup
    G = build_generator(ModelConfig((2,), 5, seed=0))
    a = evaluate(G, C, ds, repeats=2, samples=200, seed=4, config_hash="h")
    b = evaluate(G, C, ds, repeats=2, samples=200, seed=4, config_hash="h")
    assert a.to_json() == b.to_json()
    assert a.fid >= 0 and a.inception_score >= 1.0 - 1e-9
    assert sum(a.histogram) == 400
    assert EvalReport.from_json(a.to_json()) == a
    assert 0 <= a.fairness <= math.sqrt(4 / 5)
