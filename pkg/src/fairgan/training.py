"""GAN training: adversarial loss with R1, the fairness hinge loss, reweighting.

The generator objective is the non-saturating logistic loss, optionally plus

    sum_d lambda_d * max(0, 1/|D| - E_d)

where E_d is the share of a fresh latent batch that the auxiliary classifier
assigns to class d. ``hard`` mode counts argmax hits exactly; ``soft`` mode
averages the classifier probabilities so the term has a gradient.
"""
from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .datasets import LabeledDataset
from .diffcore import Tensor
from .errors import ConfigError, DataError, NumericalError, QualityError
from .models import (
    Checkpoint,
    ClassifierNet,
    DiscriminatorNet,
    GeneratorNet,
    ModelConfig,
    build_classifier,
    freeze_discriminator_layers,
)

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-5
AUDIT_SAMPLES = 10_000


@dataclass
class TrainConfig:
    batch_size: int = 128
    steps: int = 3000
    lr: float = 2e-3
    finetune_factor: float = 0.1
    bias_loss: bool = False
    bias_mode: str = "soft"
    bias_batch: int | None = None
    lambdas: str | list[float] = "auto"
    lambda_refresh: int = 500
    reweight: bool = False
    freeze_d: int = 0
    r1_gamma: float = 1.0
    r1_interval: int = 16
    beta1: float = dc.ADAM_BETA1
    beta2: float = dc.ADAM_BETA2
    eps: float = dc.ADAM_EPS
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0

    def violations(self, num_classes: int | None = None) -> list[str]:
        out = []
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.steps < 0:
            out.append("steps must be >= 0")
        if not self.lr > 0:
            out.append("lr must be positive")
        if not self.finetune_factor > 0:
            out.append("finetune_factor must be positive")
        if self.bias_mode not in ("soft", "hard"):
            out.append("bias_mode must be 'soft' or 'hard'")
        if self.r1_gamma < 0:
            out.append("r1_gamma must be >= 0")
        if self.r1_interval < 1:
            out.append("r1_interval must be >= 1")
        if self.lambda_refresh < 0:
            out.append("lambda_refresh must be >= 0")
        if self.freeze_d < 0:
            out.append("freeze_d must be >= 0")
        if isinstance(self.lambdas, str):
            if self.lambdas != "auto":
                out.append("lambdas must be 'auto' or a list of non-negative reals")
        else:
            if any(v < 0 for v in self.lambdas):
                out.append("lambda entries must be >= 0")
            if num_classes is not None and len(self.lambdas) != num_classes:
                out.append(f"lambdas has {len(self.lambdas)} entries for {num_classes} classes")
        if self.bias_loss and num_classes is not None and (self.bias_batch or self.batch_size) < num_classes:
            out.append("bias batch must hold at least one sample per class")
        return out

    def validate(self, num_classes: int | None = None) -> None:
        problems = self.violations(num_classes)
        if problems:
            raise ConfigError("invalid training config", problems)


@dataclass
class LossBreakdown:
    d_adv: float = 0.0
    g_adv: float = 0.0
    r1: float = 0.0
    bias: float = 0.0
    bias_hard: float = 0.0

    @property
    def total(self) -> float:
        """d_adv + r1 + g_adv + bias (the optimised bias term)."""
        return self.d_adv + self.r1 + self.g_adv + self.bias

    @property
    def d_loss(self) -> float:
        return self.d_adv + self.r1

    @property
    def g_loss(self) -> float:
        return self.g_adv + self.bias

    def as_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


# ---------------------------------------------------------------- fairness loss


def lambda_weights(class_counts: Sequence[float]) -> np.ndarray:
    """(1 - count_d / N) / (|D| - 1); sums to one for any counts."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ConfigError("lambda weights need at least 2 classes")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ConfigError(f"class counts must be non-negative with a positive total, got {counts}")
    return (1.0 - counts / counts.sum()) / (len(counts) - 1)


def _check_simplex(p: np.ndarray) -> None:
    if p.ndim != 2:
        raise NumericalError(f"expected (batch, classes) probabilities, got shape {p.shape}")
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise NumericalError("classifier rows are not on the probability simplex")


def hard_expectation(probs: np.ndarray) -> np.ndarray:
    """Share of rows whose argmax (lowest index on ties) is each class."""
    b, k = probs.shape
    onehot = np.zeros((b, k), dtype=np.float64)
    onehot[np.arange(b), np.argmax(probs, axis=1)] = 1.0
    return (1.0 / b) * onehot.sum(axis=0)


def bias_loss(fake_probs, lambdas: Sequence[float], mode: str = "soft") -> Tensor:
    """Weighted hinge on per-class Monte Carlo expectations.

    ``fake_probs`` is a (B, |D|) tensor of classifier probabilities. Hard mode
    returns a constant (no gradient path); soft mode stays differentiable.
    """
    probs = fake_probs if isinstance(fake_probs, Tensor) else Tensor(np.asarray(fake_probs))
    _check_simplex(probs.data)
    lam = np.asarray(lambdas, dtype=np.float64)
    k = probs.shape[1]
    if lam.shape != (k,):
        raise ConfigError(f"{lam.size} lambdas for {k} classes")
    if mode == "hard":
        e = hard_expectation(probs.data)
        return Tensor(np.array(np.dot(lam, np.maximum(0.0, 1.0 / k - e))))
    if mode != "soft":
        raise ConfigError(f"unknown bias loss mode {mode!r}")
    e = dc.mean(probs, axis=0)
    hinge = dc.relu(dc.add(1.0 / k, dc.neg(e)))
    return dc.sum_(dc.mul(hinge, Tensor(lam.astype(probs.dtype))))


# ---------------------------------------------------------------- steps


@contextmanager
def _no_param_grads(*nets):
    """Treat the parameters of ``nets`` as constants for the duration."""
    saved = [(t, t.requires_grad) for net in nets if net is not None for _, t in net.params.items()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def r1_penalty(D: DiscriminatorNet, real: np.ndarray, gamma: float) -> tuple[Tensor, Tensor]:
    """(gamma/2) * E||grad_x D(x)||^2 on real samples; returns (penalty, D(real))."""
    x = Tensor(np.asarray(real, dtype=np.float32), requires_grad=True)
    d_real = D(x)
    (gx,) = dc.grad(dc.sum_(d_real), [x], create_graph=True)
    flat = dc.reshape(gx, (gx.shape[0], -1))
    return dc.mul(dc.mean(dc.sq_norm(flat, axis=1)), gamma / 2.0), d_real


def gan_step(
    G: GeneratorNet,
    D: DiscriminatorNet,
    real_batch: np.ndarray,
    cfg: TrainConfig,
    *,
    step: int,
    rng: np.random.Generator,
    lr: float | None = None,
    classifier: ClassifierNet | None = None,
    lambdas: np.ndarray | None = None,
    sample_weights: np.ndarray | None = None,
) -> LossBreakdown:
    """One discriminator update followed by one generator update."""
    lr = cfg.lr if lr is None else lr
    out = LossBreakdown()
    b = len(real_batch)

    # discriminator
    z = G.sample_latents(rng, b)
    with dc.no_grad():
        fake = G(z)
    do_r1 = cfg.r1_gamma > 0 and step % cfg.r1_interval == 0
    if do_r1:
        r1, d_real = r1_penalty(D, real_batch, cfg.r1_gamma)
    else:
        d_real = D(Tensor(np.asarray(real_batch, dtype=np.float32)))
    real_term = dc.softplus(dc.neg(d_real))
    if sample_weights is not None:
        real_term = dc.mul(real_term, Tensor(np.asarray(sample_weights, dtype=np.float32).reshape(-1, 1)))
    d_adv = dc.add(dc.mean(dc.softplus(D(fake))), dc.mean(real_term))
    loss_d = dc.add(d_adv, dc.mul(r1, float(cfg.r1_interval))) if do_r1 else d_adv
    out.d_adv = float(d_adv.data)
    out.r1 = float(r1.data) if do_r1 else 0.0
    dc.backward(loss_d)
    dc.adam_step(D.params, lr, cfg.beta1, cfg.beta2, cfg.eps)

    # generator
    with _no_param_grads(D, classifier):
        z = G.sample_latents(rng, b)
        g_adv = dc.mean(dc.softplus(dc.neg(D(G(z)))))
        loss_g = g_adv
        if cfg.bias_loss:
            if classifier is None or lambdas is None:
                raise ConfigError("bias loss needs a classifier and lambda weights")
            zb = G.sample_latents(rng, cfg.bias_batch or b)
            probs = classifier.probs_tensor(G(zb))
            out.bias_hard = float(bias_loss(probs.detach(), lambdas, "hard").data)
            term = bias_loss(probs, lambdas, cfg.bias_mode)
            out.bias = float(term.data)
            if term.requires_grad:
                loss_g = dc.add(loss_g, term)
        out.g_adv = float(g_adv.data)
        dc.backward(loss_g)
    dc.adam_step(G.params, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return out


def sample_weights_for(labels: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """Per-sample weights |D| * w_class, so balanced data gives weight 1."""
    return len(class_weights) * np.asarray(class_weights, dtype=np.float64)[labels]


def reweighted_step(
    G: GeneratorNet,
    D: DiscriminatorNet,
    real_batch: np.ndarray,
    labels: np.ndarray | None,
    weights: np.ndarray,
    cfg: TrainConfig,
    *,
    classifier: ClassifierNet | None = None,
    **kwargs,
) -> LossBreakdown:
    """:func:`gan_step` with the real-sample discriminator term reweighted by class.

    Ground-truth ``labels`` are used when given; otherwise the classifier's
    predictions stand in for them.
    """
    if labels is None:
        if classifier is None:
            raise ConfigError("reweighting needs labels or a classifier")
        labels = classifier.predict(real_batch)
    w = sample_weights_for(labels, weights)
    return gan_step(G, D, real_batch, cfg, classifier=classifier, sample_weights=w, **kwargs)


# ---------------------------------------------------------------- loops


def audit_counts(G: GeneratorNet, C: ClassifierNet, num_samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xA0D17])
    z = G.sample_latents(rng, num_samples)
    preds = C.predict(G.generate(z))
    return np.bincount(preds, minlength=C.num_classes)


def resolve_lambdas(cfg: TrainConfig, G: GeneratorNet, C: ClassifierNet | None) -> np.ndarray | None:
    if not cfg.bias_loss:
        return None
    if isinstance(cfg.lambdas, str):
        if C is None:
            raise ConfigError("lambdas='auto' needs a classifier")
        return lambda_weights(audit_counts(G, C, AUDIT_SAMPLES, cfg.seed))
    return np.asarray(cfg.lambdas, dtype=np.float64)


Callback = Callable[[int, Checkpoint, LossBreakdown], None]


def train(
    G: GeneratorNet,
    D: DiscriminatorNet,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    callbacks: Iterable[Callback] = (),
    *,
    classifier: ClassifierNet | None = None,
    start_step: int = 0,
    lr_scale: float = 1.0,
    config_hash: str = "",
) -> list[Checkpoint]:
    """Train ``G`` and ``D`` in place; return checkpoints (initial, periodic, final)."""
    cfg.validate(dataset.num_classes)
    if cfg.bias_loss and classifier is None:
        raise ConfigError("bias_loss requires a trained classifier")
    if tuple(G.out_shape) != dataset.feature_shape:
        raise ConfigError(f"generator emits {G.out_shape}, dataset has {dataset.feature_shape}")
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    freeze_discriminator_layers(D, cfg.freeze_d)
    lr = cfg.lr * lr_scale
    lambdas = resolve_lambdas(cfg, G, classifier)
    class_w = lambda_weights(dataset.class_counts) if cfg.reweight else None
    callbacks = list(callbacks)

    def snapshot(step):
        extra = {"lambdas": None if lambdas is None else lambdas.tolist(), "lr": lr}
        return Checkpoint("gan", {"G": G.clone(), "D": D.clone()}, step, config_hash, cfg.seed, extra)

    history = [snapshot(start_step)]
    rng = np.random.default_rng([cfg.seed, start_step])
    end = start_step + cfg.steps
    for step in range(start_step, end):
        if (cfg.bias_loss and cfg.lambdas == "auto" and cfg.lambda_refresh
                and step > start_step and (step - start_step) % cfg.lambda_refresh == 0):
            lambdas = lambda_weights(audit_counts(G, classifier, AUDIT_SAMPLES, cfg.seed + step))
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch = dataset.samples[idx]
        kwargs = dict(step=step, rng=rng, lr=lr, classifier=classifier, lambdas=lambdas)
        try:
            if class_w is not None:
                losses = reweighted_step(G, D, batch, dataset.labels[idx], class_w, cfg, **kwargs)
            else:
                losses = gan_step(G, D, batch, cfg, **kwargs)
        except NumericalError as exc:
            raise NumericalError(f"training diverged at step {step}: {exc}") from exc
        done = step + 1
        periodic = cfg.checkpoint_every and done % cfg.checkpoint_every == 0
        if periodic and done != end:
            history.append(snapshot(done))
        if callbacks and (done == end or (cfg.eval_every and done % cfg.eval_every == 0)):
            ck = history[-1] if history[-1].step == done else snapshot(done)
            for cb in callbacks:
                cb(done, ck, losses)
    if cfg.steps:
        history.append(snapshot(end))
    return history


def finetune(
    base: Checkpoint,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    callbacks: Iterable[Callback] = (),
    *,
    classifier: ClassifierNet | None = None,
    config_hash: str = "",
) -> list[Checkpoint]:
    """Continue training a copy of ``base`` at ``lr * finetune_factor``."""
    ck = base.clone()
    return train(ck.G, ck.D, dataset, cfg, callbacks, classifier=classifier,
                 start_step=base.step, lr_scale=cfg.finetune_factor, config_hash=config_hash)


class JsonlLogger:
    """Training callback writing one JSON record per call."""

    def __init__(self, stream, classifier: ClassifierNet | None = None, eval_samples: int = 2000,
                 seed: int = 0, clock: Callable[[], float] = time.monotonic):
        self.stream = stream
        self.classifier = classifier
        self.eval_samples = eval_samples
        self.seed = seed
        self.clock = clock
        self.t0 = clock()

    def __call__(self, step: int, ckpt: Checkpoint, losses: LossBreakdown) -> None:
        fairness = None
        if self.classifier is not None:
            from .metrics import fairness_metric_from_counts

            counts = audit_counts(ckpt.G, self.classifier, self.eval_samples, self.seed + step)
            fairness = fairness_metric_from_counts(counts)
        rec = {"step": step, "d_loss": losses.d_loss, "g_loss": losses.g_loss, "r1": losses.r1,
               "bias": losses.bias, "fairness": fairness, "wallclock": round(self.clock() - self.t0, 3)}
        self.stream.write(json.dumps(rec) + "\n")
        self.stream.flush()


# ---------------------------------------------------------------- classifier


@dataclass
class ClassifierConfig:
    steps: int = 600
    batch_size: int = 128
    lr: float = 1e-2
    holdout: float = 0.1
    accuracy_floor: float = 0.90
    beta1: float = dc.ADAM_BETA1
    beta2: float = dc.ADAM_BETA2
    eps: float = dc.ADAM_EPS
    seed: int = 0
    model: dict = field(default_factory=dict)


def accuracy(C: ClassifierNet, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(C.predict(ds.samples) == ds.labels))


def train_classifier(dataset: LabeledDataset, cfg: ClassifierConfig) -> tuple[ClassifierNet, float]:
    """Cross-entropy training with Adam; returns the model and held-out accuracy.

    Raises QualityError when held-out accuracy is below ``cfg.accuracy_floor``.
    """
    train_ds, test_ds = dataset.split(cfg.holdout, cfg.seed)
    if len(test_ds) == 0:
        raise DataError("held-out split is empty; use more data or a larger holdout")
    mcfg = ModelConfig(dataset.feature_shape, dataset.num_classes, seed=cfg.seed, **cfg.model)
    C = build_classifier(mcfg)
    rng = np.random.default_rng([cfg.seed, 0xC1A55])
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(train_ds), size=cfg.batch_size)
        loss = dc.cross_entropy(C(train_ds.samples[idx]), train_ds.labels[idx])
        dc.backward(loss)
        dc.adam_step(C.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    acc = accuracy(C, test_ds)
    log.info("classifier held-out accuracy %.4f", acc)
    if acc < cfg.accuracy_floor:
        raise QualityError(
            f"classifier accuracy {acc:.4f} is below the floor {cfg.accuracy_floor}; "
            "train for more steps or lower the floor explicitly"
        )
    return C, acc
