"""Fairness and sample-quality metrics.

Fairness is the L2 distance between the per-class expectation vector of a
generator's samples and a reference vector (uniform by default). FID, KID
and IS are computed on the auxiliary classifier's penultimate features and
softmax outputs instead of Inception activations.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datasets import LabeledDataset
from .errors import ConfigError, DataError, NumericalError, UsageError
from .models import ClassifierNet, GeneratorNet

SIMPLEX_TOL = 1e-5
CLAMP_WARN_FRACTION = 1e-3


@dataclass
class ClassHistogram:
    counts: np.ndarray
    soft_means: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.soft_means = np.asarray(self.soft_means, dtype=np.float64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def expectation(self, mode: str = "hard") -> np.ndarray:
        if mode == "hard":
            if self.total == 0:
                raise UsageError("histogram is empty")
            return self.counts / self.total
        if mode == "soft":
            if self.total == 0:
                raise UsageError("histogram is empty")
            return self.soft_means
        raise ConfigError(f"unknown mode {mode!r}")

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> ClassHistogram:
        probs = np.asarray(probs, dtype=np.float64)
        counts = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1])
        soft = probs.mean(axis=0) if len(probs) else np.zeros(probs.shape[1])
        return cls(counts, soft)


def class_histogram(
    G: GeneratorNet, C: ClassifierNet, num_samples: int, seed: int, batch: int = 2048
) -> ClassHistogram:
    """Classify ``num_samples`` generator draws z ~ N(0, I)."""
    rng = np.random.default_rng(seed)
    counts = np.zeros(C.num_classes, dtype=np.int64)
    soft = np.zeros(C.num_classes, dtype=np.float64)
    left = num_samples
    while left > 0:
        n = min(batch, left)
        probs = C.probs(G.generate(G.sample_latents(rng, n))).astype(np.float64)
        counts += np.bincount(np.argmax(probs, axis=1), minlength=C.num_classes)
        soft += probs.sum(axis=0)
        left -= n
    return ClassHistogram(counts, soft / max(num_samples, 1))


def _l2_to(target: np.ndarray, e: np.ndarray) -> float:
    return float(np.sqrt(np.sum((target - e) ** 2)))


def fairness_metric(hist: ClassHistogram, mode: str = "hard") -> float:
    """|| 1/|D| - E_d ||_2 for one histogram."""
    if hist.num_classes < 2:
        raise ConfigError("fairness needs at least 2 classes")
    e = hist.expectation(mode)
    k = len(e)
    # the exact maximum is sqrt((k-1)/k); keep rounding from pushing past it
    return min(_l2_to(np.full(k, 1.0 / k), e), math.sqrt((k - 1) / k))


def fairness_metric_from_counts(counts: Sequence[int]) -> float:
    counts = np.asarray(counts)
    return fairness_metric(ClassHistogram(counts, counts / max(counts.sum(), 1)), "hard")


def fairness_metric_ref(gen, ref, mode: str = "hard") -> float:
    """|| E_ref - E_gen ||_2; arguments are histograms or expectation vectors."""
    e_gen = gen.expectation(mode) if isinstance(gen, ClassHistogram) else np.asarray(gen, np.float64)
    e_ref = ref.expectation(mode) if isinstance(ref, ClassHistogram) else np.asarray(ref, np.float64)
    if e_gen.shape != e_ref.shape:
        raise ConfigError(f"class count mismatch: {e_gen.shape} vs {e_ref.shape}")
    return _l2_to(e_ref, e_gen)


def fairness_eval(
    G: GeneratorNet, C: ClassifierNet, repeats: int = 5, samples: int = 2000, seed: int = 0
) -> dict:
    """Mean and std of hard and soft fairness over independent histograms."""
    if repeats < 1 or samples < 1:
        raise ConfigError("repeats and samples must be >= 1")
    hists = [class_histogram(G, C, samples, seed=[seed, r]) for r in range(repeats)]
    hard = np.array([fairness_metric(h, "hard") for h in hists])
    soft = np.array([fairness_metric(h, "soft") for h in hists])
    return {
        "hard_mean": float(hard.mean()), "hard_std": float(hard.std()),
        "soft_mean": float(soft.mean()), "soft_std": float(soft.std()),
        "histograms": hists,
    }


# ---------------------------------------------------------------- FID


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> FeatureStats:
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise UsageError("feature statistics need at least 2 samples of shape (N, f)")
        mu = f.mean(axis=0)
        c = f - mu
        sigma = c.T @ c / (len(f) - 1)
        return cls(mu, 0.5 * (sigma + sigma.T), len(f))


def _psd_sqrt(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric square root with negative eigenvalues clamped; also clamped mass."""
    w, v = np.linalg.eigh(a)
    clamped = float(-w[w < 0].sum())
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T, clamped


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.mu.shape != b.mu.shape:
        raise ConfigError(f"embedding dims differ: {a.mu.shape} vs {b.mu.shape}")
    if a.n < 2 or b.n < 2:
        raise UsageError("FID needs at least 2 samples per side")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mu)) and np.all(np.isfinite(s.sigma))):
            raise NumericalError("non-finite feature statistics")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        return 0.0
    root_a, clamp_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    clamp_inner = float(-w[w < 0].sum())
    trace_scale = max(np.trace(a.sigma) + np.trace(b.sigma), 1e-300)
    if max(clamp_a, clamp_inner) > CLAMP_WARN_FRACTION * trace_scale:
        warnings.warn("FID: clamped negative eigenvalue mass exceeds 1e-3 of the trace", RuntimeWarning)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    return fid(FeatureStats.from_features(fa), FeatureStats.from_features(fb))


# ---------------------------------------------------------------- KID / IS


def kid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Unbiased MMD^2 with kernel k(x, y) = (x.y / f + 1)^3."""
    x = np.asarray(features_a, dtype=np.float64)
    y = np.asarray(features_b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ConfigError(f"feature shapes {x.shape} and {y.shape} are incompatible")
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise UsageError("KID needs at least 2 samples per side")
    f = x.shape[1]
    kxx = (x @ x.T / f + 1.0) ** 3
    kyy = (y @ y.T / f + 1.0) ** 3
    kxy = (x @ y.T / f + 1.0) ** 3
    return float(
        (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        + (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        - 2.0 * kxy.mean()
    )


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=1) - 1) > SIMPLEX_TOL):
        raise NumericalError("inception score needs rows on the probability simplex")
    if splits < 1 or len(p) < splits:
        raise UsageError(f"need at least {splits} samples for {splits} splits")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------- FID sensitivity


@dataclass
class Heatmap:
    names: list[str]
    values: np.ndarray
    sizes: np.ndarray  # (P, P, 2) samples in set A and set B per cell

    def to_csv(self) -> str:
        lines = ["profile," + ",".join(self.names)]
        for name, row in zip(self.names, self.values):
            lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"

    def sizes_csv(self) -> str:
        lines = ["row,col,n_a,n_b"]
        for i, a in enumerate(self.names):
            for j, b in enumerate(self.names):
                lines.append(f"{a},{b},{self.sizes[i, j, 0]},{self.sizes[i, j, 1]}")
        return "\n".join(lines) + "\n"


def profile_counts(proportions: Sequence[float], size: int) -> np.ndarray:
    """Largest-remainder rounding of ``size * proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    if np.any(p < 0) or p.sum() <= 0:
        raise ConfigError(f"invalid class proportions {list(proportions)}")
    raw = size * p / p.sum()
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: size - counts.sum()]] += 1
    return counts


def _draw_disjoint(labels, counts_a, counts_b, rng):
    a, b = [], []
    for k, (na, nb) in enumerate(zip(counts_a, counts_b)):
        pool = np.flatnonzero(labels == k)
        if na + nb > len(pool):
            raise DataError(f"class {k}: need {na + nb} samples for two disjoint sets, have {len(pool)}")
        pick = rng.choice(pool, size=na + nb, replace=False)
        a.append(pick[:na])
        b.append(pick[na:])
    return np.concatenate(a), np.concatenate(b)


def fid_sensitivity_heatmap(
    dataset: LabeledDataset,
    embedder: ClassifierNet,
    mix_profiles: dict[str, Sequence[float]] | Sequence[Sequence[float]],
    set_size: int = 500,
    seed: int = 0,
    diagnostic: bool = False,
) -> Heatmap:
    """FID between class-mix profiles of one labeled dataset.

    Off-diagonal cells compare a set drawn with profile i against a disjoint
    set drawn with profile j. Diagonal cells compare two disjoint sets with
    the same profile, or in ``diagnostic`` mode a set with itself.
    """
    if not isinstance(mix_profiles, dict):
        mix_profiles = {f"p{i}": p for i, p in enumerate(mix_profiles)}
    names = list(mix_profiles)
    counts = [profile_counts(mix_profiles[n], set_size) for n in names]
    for n, c in zip(names, counts):
        if len(c) != dataset.num_classes:
            raise ConfigError(f"profile {n!r} has {len(c)} entries for {dataset.num_classes} classes")
    feats = embedder.features(dataset.samples).astype(np.float64)
    P = len(names)
    values = np.zeros((P, P))
    sizes = np.zeros((P, P, 2), dtype=np.int64)
    for i in range(P):
        for j in range(i, P):
            rng = np.random.default_rng([seed, i, j])
            if i == j and diagnostic:
                a, _ = _draw_disjoint(dataset.labels, counts[i], np.zeros_like(counts[i]), rng)
                b = a
            else:
                a, b = _draw_disjoint(dataset.labels, counts[i], counts[j], rng)
            values[i, j] = values[j, i] = fid_from_features(feats[a], feats[b])
            sizes[i, j] = sizes[j, i] = (len(a), len(b))
    return Heatmap(names, values, sizes)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    fairness: float
    fairness_std: float
    fairness_soft: float
    fairness_soft_std: float
    histogram: list[int]
    repeats: int
    samples: int
    fid: float | None = None
    kid_x1e3: float | None = None
    inception_score: float | None = None
    inception_score_std: float | None = None
    seed: int = 0
    config_hash: str = ""
    timestamp: str | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    def fairness_str(self) -> str:
        return f"{self.fairness:.4f} ± {self.fairness_std:.4f}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


def evaluate(
    G: GeneratorNet,
    C: ClassifierNet,
    reference: LabeledDataset | None = None,
    repeats: int = 5,
    samples: int = 2000,
    seed: int = 0,
    config_hash: str = "",
    label: str = "",
    is_splits: int = 10,
) -> EvalReport:
    """Fairness over ``repeats`` x ``samples`` draws, plus FID/KID/IS.

    FID and KID compare generator samples against ``reference`` (skipped when
    it is None) in the classifier's penultimate feature space.
    """
    fair = fairness_eval(G, C, repeats, samples, seed)
    hist_total = np.sum([h.counts for h in fair["histograms"]], axis=0)
    rng = np.random.default_rng([seed, 0xF1D])
    fake = G.generate(G.sample_latents(rng, samples))
    report = EvalReport(
        fairness=fair["hard_mean"], fairness_std=fair["hard_std"],
        fairness_soft=fair["soft_mean"], fairness_soft_std=fair["soft_std"],
        histogram=hist_total.tolist(), repeats=repeats, samples=samples,
        seed=seed, config_hash=config_hash, label=label,
    )
    probs = C.probs(fake)
    if samples >= is_splits:
        report.inception_score, report.inception_score_std = inception_score(probs, is_splits)
    if reference is not None and len(reference) >= 2:
        n_ref = min(len(reference), samples)
        ref_idx = np.sort(rng.choice(len(reference), size=n_ref, replace=False))
        f_fake = C.features(fake)
        f_ref = C.features(reference.samples[ref_idx])
        report.fid = fid_from_features(f_fake, f_ref)
        report.kid_x1e3 = 1e3 * kid(f_fake, f_ref)
    return report
