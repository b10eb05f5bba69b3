"""Breadth-first latent-space search for class-t samples of a trained generator.

Starting from a latent vector the classifier already assigns to class t, the
search repeatedly dequeues a vector, keeps it if it is valid and still class
t, and enqueues random mutations of it that lie farther from the start
vector than their parent. Accepted vectors from many start points form a
class-balanced synthetic dataset.
"""
from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledDataset
from .errors import ConfigError, ScarcityError
from .models import ClassifierNet, DiscriminatorNet, GeneratorNet

DEDUP_RADIUS = 1e-6


@dataclass
class ExploreConfig:
    mutations: int = 4
    delta: float = 0.25
    max_iter: int = 50
    tau: float = 0.7
    max_dequeues: int | None = None  # default 200 * max_iter
    seed_tries: int = 50_000
    max_seeds: int = 200
    d_percentile: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.mutations < 1:
            problems.append("mutations must be >= 1")
        if not self.delta > 0:
            problems.append("delta must be positive")
        if self.max_iter < 1:
            problems.append("max_iter must be >= 1")
        if not 0 <= self.tau < 1:
            problems.append("tau must lie in [0, 1)")
        if self.max_dequeues is not None and self.max_dequeues < 1:
            problems.append("max_dequeues must be >= 1")
        if problems:
            raise ConfigError("invalid explore config", problems)

    @property
    def dequeue_cap(self) -> int:
        return self.max_dequeues if self.max_dequeues is not None else 200 * self.max_iter


class Validity:
    """Decides, for a batch of latents, the predicted class and whether each is valid.

    A sample is valid when the classifier's top probability is at least ``tau``
    and, if a discriminator threshold is set, its logit is at least that
    threshold (which keeps the search on the data manifold).
    """

    def __init__(self, G: GeneratorNet, C: ClassifierNet, tau: float = 0.7,
                 D: DiscriminatorNet | None = None, d_threshold: float | None = None):
        self.G, self.C, self.D = G, C, D
        self.tau = tau
        self.d_threshold = d_threshold

    @classmethod
    def calibrated(cls, G, C, D, real: np.ndarray, tau: float, percentile: float = 1.0) -> Validity:
        """Threshold D's logit at ``percentile`` of its logits on real data."""
        thr = float(np.percentile(D.logits(real), percentile))
        return cls(G, C, tau, D, thr)

    def __call__(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = self.G.generate(z)
        probs = self.C.probs(x)
        pred = np.argmax(probs, axis=1)
        conf = probs[np.arange(len(pred)), pred]
        ok = conf >= self.tau
        if self.D is not None and self.d_threshold is not None:
            ok &= self.D.logits(x) >= self.d_threshold
        return pred, conf, ok


@dataclass
class ExploreResult:
    target: int
    start: np.ndarray
    vectors: np.ndarray
    parents: np.ndarray
    distances: np.ndarray
    dequeues: int

    def __len__(self) -> int:
        return len(self.vectors)


def find_seed_vector(
    G: GeneratorNet, C: ClassifierNet, t: int, max_tries: int, seed, *,
    validity: Validity | None = None, tau: float = 0.7, chunk: int = 256,
) -> np.ndarray:
    """Sample z ~ N(0, I) until the classifier assigns class ``t`` validly."""
    check = validity or Validity(G, C, tau)
    rng = np.random.default_rng(seed)
    tried = hits = 0
    while tried < max_tries:
        n = min(chunk, max_tries - tried)
        z = G.sample_latents(rng, n)
        pred, _, ok = check(z)
        match = np.flatnonzero((pred == t) & ok)
        if len(match):
            return z[match[0]]
        hits += int(np.sum(pred == t))
        tried += n
    freq = hits / tried if tried else 0.0
    hint = " but none passed the validity check" if hits else ""
    raise ScarcityError(
        f"no valid class-{t} latent in {max_tries} draws (class {t} predicted for {freq:.4%} of draws{hint})",
        observed_frequency=freq,
    )


def explore(
    G: GeneratorNet, C: ClassifierNet, v_s: np.ndarray, t: int, cfg: ExploreConfig, *,
    validity: Validity | None = None, seed=None,
) -> ExploreResult:
    """Breadth-first mutation search from ``v_s``.

    Each node's class and validity are computed when it is enqueued, in one
    batch per parent; this gives the same result as evaluating at dequeue time.
    """
    check = validity or Validity(G, C, cfg.tau)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    v_s = np.asarray(v_s, dtype=np.float32)
    pred, _, ok = check(v_s[None])
    queue = deque([(v_s, -1, 0.0, int(pred[0]), bool(ok[0]))])
    vectors, parents, dists = [], [], []
    dequeues = 0
    while queue and len(vectors) < cfg.max_iter and dequeues < cfg.dequeue_cap:
        v_c, parent, d_c, cls, valid = queue.popleft()
        dequeues += 1
        if not valid or cls != t:
            continue
        me = len(vectors)
        vectors.append(v_c)
        parents.append(parent)
        dists.append(d_c)
        kids = v_c + rng.uniform(-cfg.delta, cfg.delta, size=(cfg.mutations, len(v_c))).astype(np.float32)
        kd = np.linalg.norm((kids - v_s).astype(np.float64), axis=1)
        keep = kd > d_c
        if not keep.any():
            continue
        kids, kd = kids[keep], kd[keep]
        kpred, _, kok = check(kids)
        for v, d, c, o in zip(kids, kd, kpred, kok):
            queue.append((v, me, float(d), int(c), bool(o)))
    m = G.latent_dim
    return ExploreResult(
        target=t, start=v_s,
        vectors=np.array(vectors, dtype=np.float32).reshape(-1, m),
        parents=np.array(parents, dtype=np.int64),
        distances=np.array(dists, dtype=np.float64),
        dequeues=dequeues,
    )


@dataclass
class BalancedSet:
    dataset: LabeledDataset
    latents: np.ndarray
    results: dict[int, list[ExploreResult]] = field(default_factory=dict)


def _collect_class(G, C, t, per_class, cfg, validity) -> tuple[np.ndarray, list[ExploreResult]]:
    kept: list[np.ndarray] = []
    results = []
    for s in range(cfg.max_seeds):
        v_s = find_seed_vector(G, C, t, cfg.seed_tries, seed=[cfg.seed, t, s, 0], validity=validity)
        res = explore(G, C, v_s, t, cfg, validity=validity, seed=[cfg.seed, t, s, 1])
        results.append(res)
        for v in res.vectors:
            if kept:
                near = np.min(np.linalg.norm(np.asarray(kept) - v, axis=1))
                if near < DEDUP_RADIUS:
                    continue
            kept.append(v)
            if len(kept) == per_class:
                return np.asarray(kept, dtype=np.float32), results
    raise ScarcityError(f"class {t}: only {len(kept)} of {per_class} latents after {cfg.max_seeds} seeds")


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("FGAN_THREADS", "1")))
    except ValueError:
        return 1


def assemble_balanced(
    G: GeneratorNet, C: ClassifierNet, per_class: int, cfg: ExploreConfig, *,
    validity: Validity | None = None, threads: int | None = None, details: bool = False,
) -> LabeledDataset | BalancedSet:
    """Mine exactly ``per_class`` latents per class and decode them through G.

    Classes are searched independently (optionally on worker threads, see
    FGAN_THREADS) and merged in class order, so the output does not depend
    on the thread count. With ``details=True`` the latents and per-seed
    search results are returned alongside the dataset.
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    check = validity or Validity(G, C, cfg.tau)
    classes = list(range(C.num_classes))
    threads = threads or worker_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda t: _collect_class(G, C, t, per_class, cfg, check), classes))
    else:
        parts = [_collect_class(G, C, t, per_class, cfg, check) for t in classes]
    latents = np.concatenate([p[0] for p in parts])
    labels = np.repeat(classes, per_class)
    ds = LabeledDataset(G.generate(latents), labels, C.num_classes)
    if not details:
        return ds
    return BalancedSet(ds, latents, {t: p[1] for t, p in zip(classes, parts)})
