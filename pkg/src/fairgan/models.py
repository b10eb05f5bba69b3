"""Generator, discriminator and auxiliary classifier networks, plus checkpoints.

Every network is fully described by a JSON-serialisable ``descriptor``; the
graph spec and parameter shapes are derived from it, so a checkpoint only
has to store the descriptor and the raw parameter values.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ParamSet, Tensor, forward, no_grad, softmax
from .diffcore.optim import AdamState
from .errors import ConfigError, FormatError, UsageError

INIT_STD = 0.02

CKPT_MAGIC = b"FGCK"
CKPT_VERSION = 1
KIND_CODES = {"gan": 1, "generator": 2, "discriminator": 3, "classifier": 4}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass
class ModelConfig:
    data_shape: tuple[int, ...]
    num_classes: int
    latent_dim: int = 8
    g_hidden: tuple[int, ...] = (64, 64)
    d_hidden: tuple[int, ...] = (64, 64, 64)
    c_hidden: tuple[int, ...] = (32, 16)
    init_std: float = INIT_STD
    seed: int = 0

    def __post_init__(self):
        self.data_shape = tuple(self.data_shape)
        problems = []
        if not self.data_shape or any(d < 1 for d in self.data_shape):
            problems.append(f"data_shape must be non-empty and positive, got {self.data_shape}")
        elif len(self.data_shape) not in (1, 3):
            problems.append(f"data_shape must be (features,) or (C, H, W), got {self.data_shape}")
        elif len(self.data_shape) == 3 and self.data_shape[1:] != (32, 32):
            problems.append("image models are built for 32x32 inputs")
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.c_hidden and self.c_hidden[-1] < 8:
            problems.append("classifier feature dimension must be >= 8")
        if not self.init_std > 0:
            problems.append("init_std must be positive")
        if problems:
            raise ConfigError("invalid model config", problems)

    @property
    def is_image(self) -> bool:
        return len(self.data_shape) == 3


class Network:
    """A parameterised graph spec. ``layers`` lists parameter names per layer."""

    def __init__(self, kind: str, descriptor: dict, seed: int = 0, init_std: float = INIT_STD):
        self.kind = kind
        self.descriptor = descriptor
        self.graph, shapes = _graph_from_descriptor(descriptor)
        rng = np.random.default_rng([seed, KIND_CODES[kind]])
        self.params = ParamSet()
        self.layers: list[list[str]] = []
        for layer in shapes:
            names = []
            for name, shape in layer:
                if name.endswith(".b"):
                    value = np.zeros(shape, dtype=np.float32)
                else:
                    value = (init_std * rng.standard_normal(shape)).astype(np.float32)
                self.params.add(name, value)
                names.append(name)
            self.layers.append(names)

    def __call__(self, x, trace: dict | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        return forward(self.graph, x, params=self.params, trace=trace)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def clone(self) -> Network:
        return copy.deepcopy(self)

    def frozen_layers(self) -> list[int]:
        return [i for i, names in enumerate(self.layers) if not self.params.is_trainable(names[0])]


class GeneratorNet(Network):
    def __init__(self, descriptor: dict, seed: int = 0, init_std: float = INIT_STD):
        super().__init__("generator", descriptor, seed, init_std)
        self.latent_dim = descriptor["latent_dim"]
        self.out_shape = tuple(descriptor["out_shape"])

    def sample_latents(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim)).astype(np.float32)

    def generate(self, z: np.ndarray) -> np.ndarray:
        with no_grad():
            return self(Tensor(np.asarray(z, dtype=np.float32))).data


class DiscriminatorNet(Network):
    def __init__(self, descriptor: dict, seed: int = 0, init_std: float = INIT_STD):
        super().__init__("discriminator", descriptor, seed, init_std)

    def logits(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self(Tensor(np.asarray(x, dtype=np.float32))).data.reshape(-1)


class ClassifierNet(Network):
    def __init__(self, descriptor: dict, seed: int = 0, init_std: float = INIT_STD):
        super().__init__("classifier", descriptor, seed, init_std)
        self.num_classes = descriptor["num_classes"]
        self.feature_dim = descriptor["feature_dim"]

    def probs_tensor(self, x: Tensor) -> Tensor:
        return softmax(self(x))

    def probs(self, x: np.ndarray, batch: int = 4096) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                out.append(softmax(self(np.asarray(x[i : i + batch], dtype=np.float32))).data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), np.float32)

    def features(self, x: np.ndarray, batch: int = 4096) -> np.ndarray:
        """Penultimate activations, used as the embedding for FID/KID."""
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                trace = {}
                self(np.asarray(x[i : i + batch], dtype=np.float32), trace=trace)
                out.append(trace["features"].data)
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim), np.float32)

    def predict(self, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: lowest-index tie-break
        return np.argmax(self.probs(x), axis=1)


# ---------------------------------------------------------------- descriptors


def _mlp_graph(dims, head=None, tag_last_hidden=False, offset=0):
    graph, shapes = [], []
    n = len(dims) - 1
    for i in range(n):
        w, b = f"l{i + offset}.w", f"l{i + offset}.b"
        graph.append({"op": "affine", "weight": w, "bias": b})
        shapes.append([(w, (dims[i], dims[i + 1])), (b, (dims[i + 1],))])
        if i < n - 1:
            step = {"op": "leaky_relu"}
            if tag_last_hidden and i == n - 2:
                step["tag"] = "features"
            graph.append(step)
    if head:
        graph.append({"op": head})
    return graph, shapes


def _graph_from_descriptor(d: dict):
    arch, role = d["arch"], d["role"]
    if arch == "mlp":
        if role == "generator":
            dims = [d["latent_dim"], *d["hidden"], int(np.prod(d["out_shape"]))]
            graph, shapes = _mlp_graph(dims, head="tanh")
            if len(d["out_shape"]) > 1:
                graph.append({"op": "reshape", "shape": list(d["out_shape"])})
            return graph, shapes
        if role == "discriminator":
            graph, shapes = _mlp_graph([d["in_dim"], *d["hidden"], 1])
            return [{"op": "flatten"}, *graph], shapes
        if role == "classifier":
            graph, shapes = _mlp_graph([d["in_dim"], *d["hidden"], d["num_classes"]], tag_last_hidden=True)
            return [{"op": "flatten"}, *graph], shapes
    if arch == "conv":
        return _conv_graph(d)
    raise ConfigError(f"unknown architecture {arch!r}/{role!r}")


def _conv_graph(d: dict):
    graph, shapes = [], []
    role = d["role"]
    if role == "generator":
        c0 = d["channels"][0]
        graph += [{"op": "affine", "weight": "l0.w", "bias": "l0.b"}, {"op": "leaky_relu"},
                  {"op": "reshape", "shape": [c0, 4, 4]}]
        shapes.append([("l0.w", (d["latent_dim"], c0 * 16)), ("l0.b", (c0 * 16,))])
        chans = d["channels"]
        for i in range(len(chans) - 1):
            w, b = f"l{i + 1}.w", f"l{i + 1}.b"
            graph.append({"op": "conv_transpose2d", "weight": w, "bias": b, "stride": 2, "pad": 1})
            shapes.append([(w, (chans[i], chans[i + 1], 4, 4)), (b, (chans[i + 1],))])
            graph.append({"op": "leaky_relu"} if i < len(chans) - 2 else {"op": "tanh"})
        return graph, shapes
    # discriminator / classifier: conv trunk, then dense head
    chans, strides = d["channels"], d["strides"]
    size = 32
    for i, s in enumerate(strides):
        w, b = f"l{i}.w", f"l{i}.b"
        graph += [{"op": "conv2d", "weight": w, "bias": b, "stride": s, "pad": 1}, {"op": "leaky_relu"}]
        shapes.append([(w, (chans[i + 1], chans[i], 3, 3)), (b, (chans[i + 1],))])
        size = (size + 2 - 3) // s + 1
    graph.append({"op": "flatten"})
    dense = [chans[-1] * size * size, *d["dense"], 1 if role == "discriminator" else d["num_classes"]]
    tail, tail_shapes = _mlp_graph(dense, tag_last_hidden=role == "classifier", offset=len(strides))
    return graph + tail, shapes + tail_shapes


def generator_descriptor(cfg: ModelConfig) -> dict:
    if cfg.is_image:
        return {"role": "generator", "arch": "conv", "latent_dim": cfg.latent_dim,
                "channels": [64, 32, 16, cfg.data_shape[0]], "out_shape": list(cfg.data_shape)}
    return {"role": "generator", "arch": "mlp", "latent_dim": cfg.latent_dim,
            "hidden": list(cfg.g_hidden), "out_shape": list(cfg.data_shape)}


def discriminator_descriptor(cfg: ModelConfig) -> dict:
    if cfg.is_image:
        return {"role": "discriminator", "arch": "conv",
                "channels": [cfg.data_shape[0], 16, 32, 32, 64, 64, 64],
                "strides": [1, 2, 1, 2, 1, 2], "dense": [64]}
    return {"role": "discriminator", "arch": "mlp", "in_dim": int(np.prod(cfg.data_shape)),
            "hidden": list(cfg.d_hidden)}


def classifier_descriptor(cfg: ModelConfig) -> dict:
    if cfg.is_image:
        return {"role": "classifier", "arch": "conv", "channels": [cfg.data_shape[0], 16, 32, 64, 64],
                "strides": [1, 2, 2, 2], "dense": [64], "num_classes": cfg.num_classes, "feature_dim": 64}
    return {"role": "classifier", "arch": "mlp", "in_dim": int(np.prod(cfg.data_shape)),
            "hidden": list(cfg.c_hidden), "num_classes": cfg.num_classes, "feature_dim": cfg.c_hidden[-1]}


_NET_TYPES = {"generator": GeneratorNet, "discriminator": DiscriminatorNet, "classifier": ClassifierNet}


def build_generator(cfg: ModelConfig) -> GeneratorNet:
    return GeneratorNet(generator_descriptor(cfg), cfg.seed, cfg.init_std)


def build_discriminator(cfg: ModelConfig) -> DiscriminatorNet:
    return DiscriminatorNet(discriminator_descriptor(cfg), cfg.seed, cfg.init_std)


def build_classifier(cfg: ModelConfig) -> ClassifierNet:
    return ClassifierNet(classifier_descriptor(cfg), cfg.seed, cfg.init_std)


def freeze_discriminator_layers(d: Network, k: int) -> None:
    """Mark the first ``k`` layers non-trainable and every later layer trainable."""
    if not 0 <= k <= d.num_layers:
        raise UsageError(f"cannot freeze {k} layers of a {d.num_layers}-layer discriminator")
    for i, names in enumerate(d.layers):
        for name in names:
            d.params.set_trainable(name, i >= k)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    kind: str
    nets: dict[str, Network]
    step: int = 0
    config_hash: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ConfigError(f"unknown checkpoint kind {self.kind!r}")

    @property
    def G(self) -> GeneratorNet:
        return self.nets["G"]

    @property
    def D(self) -> DiscriminatorNet:
        return self.nets["D"]

    @property
    def C(self) -> ClassifierNet:
        return self.nets["C"]

    def clone(self) -> Checkpoint:
        return copy.deepcopy(self)


def save_checkpoint(model, path) -> None:
    """Write a :class:`Checkpoint` (or a bare network) as an FGCK file."""
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint(model.kind, {model.kind[0].upper(): model})
    nets_meta = []
    payload = []
    for key, net in ckpt.nets.items():
        pmeta = []
        for name, t in net.params.items():
            st = net.params.state[name]
            pmeta.append({"name": name, "shape": list(t.shape),
                          "trainable": net.params.is_trainable(name), "adam_step": st.step})
            for arr in (t.data, st.m, st.v):
                payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        nets_meta.append({"key": key, "kind": net.kind, "descriptor": net.descriptor, "params": pmeta})
    meta = json.dumps({"nets": nets_meta, "step": ckpt.step, "config_hash": ckpt.config_hash,
                       "seed": ckpt.seed, "extra": ckpt.extra}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IBI", CKPT_VERSION, KIND_CODES[ckpt.kind], len(meta)))
        fh.write(meta)
        for block in payload:
            fh.write(block)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 13:
        raise FormatError(f"{path}: truncated header")
    version, kind_code, meta_len = struct.unpack_from("<IBI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if kind_code not in KIND_NAMES:
        raise FormatError(f"{path}: unknown model kind code {kind_code}")
    try:
        meta = json.loads(buf[13 : 13 + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt descriptor block") from exc
    off = 13 + meta_len
    nets = {}
    for nm in meta["nets"]:
        if nm["kind"] not in _NET_TYPES:
            raise FormatError(f"{path}: unknown network kind {nm['kind']!r}")
        net = _NET_TYPES[nm["kind"]](nm["descriptor"])
        if [p["name"] for p in nm["params"]] != net.params.names():
            raise FormatError(f"{path}: parameter list does not match descriptor")
        for p in nm["params"]:
            shape = tuple(p["shape"])
            count = int(np.prod(shape))
            arrays = []
            for _ in range(3):
                if off + 4 * count > len(buf):
                    raise FormatError(f"{path}: truncated parameter payload")
                arrays.append(np.frombuffer(buf, "<f4", count, off).astype(np.float32).reshape(shape))
                off += 4 * count
            t = net.params[p["name"]]
            if t.shape != shape:
                raise FormatError(f"{path}: parameter {p['name']} has shape {shape}, expected {t.shape}")
            t.data = arrays[0]
            net.params.state[p["name"]] = AdamState(arrays[1], arrays[2], p["adam_step"])
            net.params.set_trainable(p["name"], p["trainable"])
        nets[nm["key"]] = net
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return Checkpoint(KIND_NAMES[kind_code], nets, meta["step"], meta["config_hash"], meta["seed"], meta["extra"])
