"""Labeled datasets: synthetic mixtures, long-tail subsets, CIFAR-10 and FGDS files."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

FGDS_MAGIC = b"FGDS"
FGLZ_MAGIC = b"FGLZ"
FORMAT_VERSION = 1

CIFAR_RECORD = 3073
CIFAR_PER_FILE = 10_000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_LONG_TAIL_TOTAL = 29_028

# class shares of the default desk-scale benchmark (percent)
BENCHMARK_SHARES = (60, 20, 10, 7, 3)


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim < 2:
            raise ConfigError(f"samples need shape (N, feature dims...), got {self.samples.shape}")
        if len(self.samples) != len(self.labels):
            raise ConfigError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        hist = np.bincount(self.labels, minlength=self.num_classes)
        if self.class_counts is not None and not np.array_equal(np.asarray(self.class_counts), hist):
            raise ConfigError(f"class_counts {list(self.class_counts)} disagree with labels {list(hist)}")
        self.class_counts = hist

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    @property
    def p_bias(self) -> np.ndarray:
        """Empirical class distribution."""
        return self.class_counts / max(len(self), 1)

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.num_classes)

    def split(self, holdout: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
        """Stratified (train, held-out) split."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for k in range(self.num_classes):
            idx = rng.permutation(np.flatnonzero(self.labels == k))
            n_test = int(round(len(idx) * holdout))
            test.append(idx[:n_test])
            train.append(idx[n_test:])
        return self.subset(np.sort(np.concatenate(train))), self.subset(np.sort(np.concatenate(test)))

    def equals(self, other: LabeledDataset) -> bool:
        return (
            self.num_classes == other.num_classes
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class ImbalanceProfile:
    """Per-class target counts, either explicit or ``head * ratio**k``."""

    counts: tuple[int, ...] | None = None
    head: int | None = None
    ratio: float | None = None

    def __post_init__(self):
        if self.counts is None and (self.head is None or self.ratio is None):
            raise ConfigError("profile needs explicit counts or (head, ratio)")
        if self.counts is not None and any(c < 1 for c in self.counts):
            raise ConfigError(f"profile counts must be >= 1, got {self.counts}")
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise ConfigError(f"decay ratio must be in (0, 1], got {self.ratio}")
        if self.head is not None and self.head < 1:
            raise ConfigError("head count must be >= 1")

    def class_counts(self, num_classes: int) -> list[int]:
        if self.counts is not None:
            if len(self.counts) != num_classes:
                raise ConfigError(f"profile has {len(self.counts)} counts for {num_classes} classes")
            return list(self.counts)
        return geometric_counts(self.head, self.ratio, num_classes)


def geometric_counts(head: int, ratio: float, num_classes: int) -> list[int]:
    return [max(1, int(round(head * ratio**k))) for k in range(num_classes)]


def solve_decay_ratio(head: int, num_classes: int, total: int, tol: int = 100) -> float:
    """Bisection for the geometric ratio whose counts add up to ``total``.

    The summed count is non-decreasing in the ratio, so plain bisection on
    (0, 1] converges.
    """
    lo, hi = 1e-9, 1.0
    if not sum(geometric_counts(head, lo, num_classes)) <= total <= head * num_classes:
        raise ConfigError(f"total {total} unreachable with head {head} over {num_classes} classes")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        got = sum(geometric_counts(head, mid, num_classes))
        if abs(got - total) <= tol:
            return mid
        if got < total:
            lo = mid
        else:
            hi = mid
    raise ConfigError(f"no geometric ratio reaches {total} within {tol}")


def cifar_long_tail_profile(total: int = CIFAR_LONG_TAIL_TOTAL, head: int = 5000) -> ImbalanceProfile:
    return ImbalanceProfile(head=head, ratio=solve_decay_ratio(head, 10, total))


def benchmark_counts(total: int, shares: Sequence[float] = BENCHMARK_SHARES) -> list[int]:
    """Split ``total`` by percentage shares, keeping every class at least 1."""
    shares = np.asarray(shares, dtype=np.float64)
    counts = np.maximum(1, np.floor(total * shares / shares.sum()).astype(int))
    counts[0] += total - counts.sum()
    return counts.tolist()


def gen_gaussian_mixture(
    num_classes: int,
    counts: Sequence[int],
    radius: float = 0.6,
    sigma: float = 0.06,
    seed: int = 0,
) -> LabeledDataset:
    """Isotropic 2-D Gaussians with class k centred at angle 2*pi*k/num_classes."""
    if num_classes < 2:
        raise ConfigError("a mixture needs at least 2 classes")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if len(counts) != num_classes:
        raise ConfigError(f"{len(counts)} counts given for {num_classes} classes")
    if any(c <= 0 for c in counts):
        raise ConfigError(f"every class needs a positive count, got {list(counts)}")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(num_classes), counts)
    samples = centres[labels] + sigma * rng.standard_normal((len(labels), 2))
    order = rng.permutation(len(labels))
    return LabeledDataset(samples[order], labels[order], num_classes)


def mixture_centres(num_classes: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_imbalanced(dataset: LabeledDataset, profile: ImbalanceProfile, seed: int) -> LabeledDataset:
    """Subsample each class without replacement down to the profile counts."""
    targets = profile.class_counts(dataset.num_classes)
    rng = np.random.default_rng(seed)
    picked = []
    for k, want in enumerate(targets):
        pool = np.flatnonzero(dataset.labels == k)
        if want > len(pool):
            raise DataError(f"class {k}: profile asks for {want} samples, only {len(pool)} available")
        picked.append(rng.choice(pool, size=want, replace=False))
    idx = np.concatenate(picked)
    return dataset.subset(idx[rng.permutation(len(idx))])


# ---------------------------------------------------------------- CIFAR-10


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 127.5 - 1.0
    return pixels, labels


def load_cifar10(path) -> LabeledDataset:
    """Read CIFAR-10 binary batches from a file or from a directory of train batches."""
    path = Path(path)
    if path.is_dir():
        files = [path / f for f in CIFAR_TRAIN_FILES if (path / f).exists()]
        if not files:
            raise DataError(f"{path}: no CIFAR-10 batch files ({', '.join(CIFAR_TRAIN_FILES)})")
    else:
        files = [path]
    parts = [_read_cifar_file(f) for f in files]
    return LabeledDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10)


# ---------------------------------------------------------------- FGDS / FGLZ


def _write_block(path, magic: bytes, labels: np.ndarray, payload: np.ndarray, num_classes: int) -> None:
    dims = payload.shape[1:]
    if not dims or any(d == 0 for d in dims):
        raise ConfigError(f"refusing to save data with empty feature dims {dims}")
    if labels.size and labels.max() > 0xFFFF:
        raise ConfigError("labels do not fit in u16")
    header = magic + struct.pack(
        f"<IIII{len(dims)}I", FORMAT_VERSION, len(labels), num_classes, len(dims), *dims
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(labels.astype("<u2").tobytes())
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _read_block(path, magic: bytes) -> tuple[np.ndarray, np.ndarray, int]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    if len(buf) < 20:
        raise FormatError(f"{path}: truncated header")
    version, n, num_classes, ndims = struct.unpack_from("<IIII", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 20
    if ndims == 0 or len(buf) < off + 4 * ndims:
        raise FormatError(f"{path}: bad dimension block")
    dims = struct.unpack_from(f"<{ndims}I", buf, off)
    off += 4 * ndims
    width = int(np.prod(dims))
    expected = off + 2 * n + 4 * n * width
    if len(buf) != expected:
        raise FormatError(f"{path}: size {len(buf)} != expected {expected}")
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    payload = np.frombuffer(buf, dtype="<f4", count=n * width, offset=off + 2 * n)
    return labels, payload.astype(np.float32).reshape((n, *dims)), num_classes


def save_dataset(ds: LabeledDataset, path) -> None:
    _write_block(path, FGDS_MAGIC, ds.labels, ds.samples, ds.num_classes)


def load_dataset(path) -> LabeledDataset:
    labels, samples, num_classes = _read_block(path, FGDS_MAGIC)
    return LabeledDataset(samples, labels, num_classes)


def save_latents(path, vectors: np.ndarray, classes: np.ndarray, num_classes: int) -> None:
    """Latent vectors with their target class, in the FGDS layout under magic FGLZ."""
    _write_block(path, FGLZ_MAGIC, np.asarray(classes), np.asarray(vectors), num_classes)


def load_latents(path) -> tuple[np.ndarray, np.ndarray, int]:
    labels, vectors, num_classes = _read_block(path, FGLZ_MAGIC)
    return vectors, labels, num_classes
