"""Command-line pipeline: data, classifier, GAN variants, exploration, evaluation.

Every command writes into a run directory ``<out>/<command>-<hash>`` where the
hash covers exactly the config sections the command depends on, so changing
an unrelated section never invalidates an upstream artifact and two variants
never overwrite each other.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig
from .datasets import (
    ImbalanceProfile,
    LabeledDataset,
    benchmark_counts,
    gen_gaussian_mixture,
    load_cifar10,
    load_dataset,
    make_imbalanced,
    save_dataset,
    save_latents,
    solve_decay_ratio,
)
from .errors import FairGANError, MissingArtifactError, UsageError
from .explore import Validity, assemble_balanced
from .metrics import EvalReport, evaluate, fid_sensitivity_heatmap
from .models import (
    Checkpoint,
    ClassifierNet,
    GeneratorNet,
    build_discriminator,
    build_generator,
    load_checkpoint,
    save_checkpoint,
)
from .training import JsonlLogger, finetune, train, train_classifier

log = logging.getLogger("fairgan")

VARIANTS = ("plain", "bias", "reweight", "syn-scratch", "syn-finetune", "syn-freezed")
HASH_LEN = 12

# config sections each stage depends on
DATA_SECTIONS = ["dataset"]
CLF_SECTIONS = ["dataset", "model", "classifier"]
GAN_SECTIONS = ["dataset", "model", "classifier", "train"]


# ---------------------------------------------------------------- sample grids


def export_sample_grid(G: GeneratorNet, rows: int, cols: int, seed: int, path, classifier: ClassifierNet | None = None):
    """Write ``rows * cols`` generator samples as a PPM image grid or a CSV scatter.

    Images of shape (3, H, W) are tiled into a binary P6 file. 2-D vector
    samples become a CSV of ``x,y,class`` rows, with the classifier's
    prediction as the class (or -1 without a classifier).
    """
    if rows < 1 or cols < 1:
        raise UsageError("grid needs at least one row and one column")
    shape = tuple(G.out_shape)
    z = G.sample_latents(np.random.default_rng(seed), rows * cols)
    x = G.generate(z)
    path = Path(path)
    if len(shape) == 3 and shape[0] == 3:
        _, h, w = shape
        pix = np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
        grid = pix.reshape(rows, cols, 3, h, w).transpose(0, 3, 1, 4, 2).reshape(rows * h, cols * w, 3)
        path.write_bytes(f"P6\n{cols * w} {rows * h}\n255\n".encode() + grid.tobytes())
    elif shape == (2,):
        cls = classifier.predict(x) if classifier is not None else np.full(len(x), -1)
        lines = ["x,y,class"] + [f"{a:.6f},{b:.6f},{c}" for (a, b), c in zip(x.tolist(), cls.tolist())]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise UsageError(f"cannot export a sample grid for data of shape {shape}")
    return path


# ---------------------------------------------------------------- stages


def build_datasets(cfg: PipelineConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """(imbalanced training set, balanced reference set)."""
    d = cfg.section("dataset")
    k = d["num_classes"]
    if d["kind"] == "gaussian":
        data = gen_gaussian_mixture(k, benchmark_counts(d["total"], d["shares"]), d["radius"], d["sigma"], cfg.seed)
        # drawn independently of the training set
        balanced = gen_gaussian_mixture(k, [d["balanced_per_class"]] * k, d["radius"], d["sigma"],
                                        [cfg.seed, 0xBA1])
        return data, balanced
    full = load_cifar10(d["path"])
    ratio = solve_decay_ratio(d["head"], k, d["long_tail_total"])
    data = make_imbalanced(full, ImbalanceProfile(head=d["head"], ratio=ratio), cfg.seed)
    balanced = make_imbalanced(full, ImbalanceProfile(counts=[d["balanced_per_class"]] * k), cfg.seed + 1)
    return data, balanced


def _logger(run: Path, name: str, C: ClassifierNet | None, cfg: PipelineConfig):
    stream = open(run / f"{name}.log.jsonl", "w")
    return stream, JsonlLogger(stream, classifier=C, eval_samples=cfg.section("eval")["samples"], seed=cfg.seed)


def fit_gan(cfg: PipelineConfig, data: LabeledDataset, run: Path, name: str, C: ClassifierNet | None,
            config_hash: str, **train_overrides) -> Checkpoint:
    mc = cfg.model_config(data.feature_shape)
    G, D = build_generator(mc), build_discriminator(mc)
    tc = cfg.train_config(**train_overrides)
    stream, logger = _logger(run, name, C, cfg)
    with stream:
        hist = train(G, D, data, tc, [logger], classifier=C, config_hash=config_hash)
    save_checkpoint(hist[-1], run / f"{name}.fgck")
    return hist[-1]


def mine_synz(cfg: PipelineConfig, ckpt: Checkpoint, C: ClassifierNet, data: LabeledDataset, run: Path):
    e = cfg.section("explore")
    ec = cfg.explore_config()
    validity = None
    if e["use_discriminator"]:
        validity = Validity.calibrated(ckpt.G, C, ckpt.D, data.samples, ec.tau, ec.d_percentile)
    out = assemble_balanced(ckpt.G, C, e["per_class"], ec, validity=validity, details=True)
    save_dataset(out.dataset, run / "synz.fgds")
    save_latents(run / "synz.fglz", out.latents, out.dataset.labels, out.dataset.num_classes)
    stats = {str(t): {"seeds": len(rs), "accepted": int(sum(len(r) for r in rs)),
                      "dequeues": int(sum(r.dequeues for r in rs))} for t, rs in out.results.items()}
    (run / "explore.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return out.dataset


def write_report(cfg: PipelineConfig, G: GeneratorNet, C: ClassifierNet, reference: LabeledDataset,
                 path: Path, label: str, config_hash: str, stamp: bool = False, repeats=None, samples=None):
    e = cfg.section("eval")
    report = evaluate(G, C, reference, repeats or e["repeats"], samples or e["samples"], cfg.seed,
                      config_hash, label, e["is_splits"])
    if stamp:
        report.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    path.write_text(report.to_json())
    log.info("%s fairness %s", label, report.fairness_str())
    return report


def resolve_freeze(cfg: PipelineConfig, D) -> int:
    k = cfg.section("rebalance")["freeze_d"]
    if k is not None:
        return k
    # five of the eight conv layers; on the 4-layer MLP only the input layer
    # (freezing more left too little capacity and the finetuned G collapsed)
    return 5 if D.num_layers >= 8 else max(1, D.num_layers // 4)


# ---------------------------------------------------------------- run dirs


class Workspace:
    def __init__(self, out, cfg: PipelineConfig, config_path=None):
        self.out = Path(out)
        self.cfg = cfg
        self.config_arg = f" --config {config_path}" if config_path else ""

    def stage_hash(self, sections, extra=None) -> str:
        return self.cfg.hash(sections, extra)

    def run_dir(self, command: str, config_hash: str) -> Path:
        run = self.out / f"{command}-{config_hash[:HASH_LEN]}"
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(self.cfg.to_json())
        (run / "config_hash.txt").write_text(config_hash + "\n")
        return run

    def upstream(self, command: str, sections, filename: str, extra=None, flags: str = "") -> Path:
        path = self.out / f"{command}-{self.stage_hash(sections, extra)[:HASH_LEN]}" / filename
        if not path.exists():
            raise MissingArtifactError(
                f"{path} not found; produce it first with `fairgan {command}{self.config_arg}{flags} "
                f"--seed {self.cfg.seed} --out {self.out}`"
            )
        return path

    def datasets(self) -> tuple[LabeledDataset, LabeledDataset]:
        return (load_dataset(self.upstream("gen-data", DATA_SECTIONS, "data.fgds")),
                load_dataset(self.upstream("gen-data", DATA_SECTIONS, "balanced.fgds")))

    def classifier(self) -> ClassifierNet:
        return load_checkpoint(self.upstream("train-classifier", CLF_SECTIONS, "classifier.fgck")).C

    def gan(self, variant: str = "plain") -> Checkpoint:
        path = self.upstream("train-gan", GAN_SECTIONS, "gan.fgck", {"variant": variant},
                             flags=f" --variant {variant}")
        return load_checkpoint(path)


# ---------------------------------------------------------------- commands


def cmd_gen_data(ws: Workspace, args) -> Path:
    h = ws.stage_hash(DATA_SECTIONS)
    run = ws.run_dir("gen-data", h)
    data, balanced = build_datasets(ws.cfg)
    save_dataset(data, run / "data.fgds")
    save_dataset(balanced, run / "balanced.fgds")
    (run / "counts.json").write_text(json.dumps({"data": data.class_counts.tolist(),
                                                 "balanced": balanced.class_counts.tolist()}) + "\n")
    return run


def cmd_train_classifier(ws: Workspace, args) -> Path:
    _, balanced = ws.datasets()
    h = ws.stage_hash(CLF_SECTIONS)
    run = ws.run_dir("train-classifier", h)
    C, acc = train_classifier(balanced, ws.cfg.classifier_config())
    save_checkpoint(Checkpoint("classifier", {"C": C}, config_hash=h, seed=ws.cfg.seed, extra={"accuracy": acc}),
                    run / "classifier.fgck")
    (run / "classifier.json").write_text(json.dumps({"accuracy": acc}) + "\n")
    return run


def _variant_overrides(variant: str) -> dict:
    return {"bias": {"bias_loss": True}, "reweight": {"reweight": True}}.get(variant, {})


def cmd_train_gan(ws: Workspace, args) -> Path:
    variant = args.variant or "plain"
    if variant not in ("plain", "bias", "reweight"):
        raise UsageError(f"train-gan supports plain, bias and reweight; use `rebalance --variant {variant}`")
    data, balanced = ws.datasets()
    C = ws.classifier()
    h = ws.stage_hash(GAN_SECTIONS, {"variant": variant})
    run = ws.run_dir("train-gan", h)
    ck = fit_gan(ws.cfg, data, run, "gan", C, h, **_variant_overrides(variant))
    export_sample_grid(ck.G, 8, 8, ws.cfg.seed, run / _grid_name(ck.G), C)
    write_report(ws.cfg, ck.G, C, balanced, run / "report.json", variant, h, args.timestamp)
    return run


def cmd_explore(ws: Workspace, args) -> Path:
    data, _ = ws.datasets()
    C = ws.classifier()
    ck = ws.gan("plain")
    h = ws.stage_hash(GAN_SECTIONS + ["explore"])
    run = ws.run_dir("explore", h)
    mine_synz(ws.cfg, ck, C, data, run)
    return run


def cmd_rebalance(ws: Workspace, args) -> Path:
    """The full pipeline for one variant, self-contained in one run directory."""
    cfg = ws.cfg
    variant = args.variant or "syn-scratch"
    h = ws.stage_hash(None, {"variant": variant})
    run = ws.run_dir("rebalance", h)
    data, balanced = build_datasets(cfg)
    save_dataset(data, run / "data.fgds")
    C, acc = train_classifier(balanced, cfg.classifier_config())
    save_checkpoint(C, run / "classifier.fgck")
    biased = fit_gan(cfg, data, run, "biased", C, h)
    export_sample_grid(biased.G, 8, 8, cfg.seed, run / ("biased_" + _grid_name(biased.G)), C)
    write_report(cfg, biased.G, C, balanced, run / "report_biased.json", "biased", h, args.timestamp)
    if variant == "plain":
        return run

    stage2_bias = {"bias_loss": True} if cfg.section("rebalance")["second_stage_bias"] else {}
    if variant in ("bias", "reweight"):
        ck = fit_gan(cfg, data, run, "rebalanced", C, h, **_variant_overrides(variant))
    else:
        synz = mine_synz(cfg, biased, C, data, run)
        if variant == "syn-scratch":
            ck = fit_gan(cfg, synz, run, "rebalanced", C, h, **stage2_bias)
        else:
            freeze = resolve_freeze(cfg, biased.D) if variant == "syn-freezed" else 0
            tc = cfg.train_config(freeze_d=freeze, **stage2_bias)
            stream, logger = _logger(run, "rebalanced", C, cfg)
            with stream:
                ck = finetune(biased, synz, tc, [logger], classifier=C, config_hash=h)[-1]
            save_checkpoint(ck, run / "rebalanced.fgck")
    export_sample_grid(ck.G, 8, 8, cfg.seed, run / ("rebalanced_" + _grid_name(ck.G)), C)
    write_report(cfg, ck.G, C, balanced, run / "report_rebalanced.json", variant, h, args.timestamp)
    return run


def cmd_evaluate(ws: Workspace, args) -> Path:
    _, balanced = ws.datasets()
    C = ws.classifier()
    if args.checkpoint:
        ck_path = Path(args.checkpoint)
        if not ck_path.exists():
            raise MissingArtifactError(f"{ck_path} not found; produce it with `fairgan train-gan` or `fairgan rebalance`")
    else:
        variant = args.variant or "plain"
        ck_path = ws.upstream("train-gan", GAN_SECTIONS, "gan.fgck", {"variant": variant},
                              flags=f" --variant {variant}")
    digest = hashlib.sha256(ck_path.read_bytes()).hexdigest()
    e = ws.cfg.section("eval")
    repeats, samples = args.repeats or e["repeats"], args.samples or e["samples"]
    h = ws.stage_hash(CLF_SECTIONS + ["eval"], {"checkpoint": digest, "repeats": repeats, "samples": samples})
    run = ws.run_dir("evaluate", h)
    G = load_checkpoint(ck_path).G
    report = write_report(ws.cfg, G, C, balanced, run / "report.json", ck_path.stem, h, args.timestamp,
                          repeats, samples)
    print(f"fairness {report.fairness_str()}")
    return run


def _profiles(cfg: PipelineConfig, names) -> dict:
    k = cfg.section("dataset")["num_classes"]
    builtin = {"uniform": [1.0] * k, "skewed": list(map(float, cfg.section("dataset")["shares"]))}
    builtin.update({f"class{i}": np.eye(k)[i].tolist() for i in range(k)})
    builtin.update(cfg.section("audit")["profiles"])
    names = names or list(builtin)
    missing = [n for n in names if n not in builtin]
    if missing:
        raise UsageError(f"unknown profiles {missing}; known: {sorted(builtin)}")
    return {n: builtin[n] for n in names}


def cmd_audit_fid(ws: Workspace, args) -> Path:
    _, balanced = ws.datasets()
    C = ws.classifier()
    profiles = _profiles(ws.cfg, [p for p in (args.profiles or "").split(",") if p])
    h = ws.stage_hash(CLF_SECTIONS + ["audit"], {"profiles": profiles, "diagnostic": args.diagnostic})
    run = ws.run_dir("audit-fid", h)
    hm = fid_sensitivity_heatmap(balanced, C, profiles, ws.cfg.section("audit")["set_size"], ws.cfg.seed,
                                 args.diagnostic)
    (run / "heatmap.csv").write_text(hm.to_csv())
    (run / "heatmap_sizes.csv").write_text(hm.sizes_csv())
    print(hm.to_csv(), end="")
    return run


def cmd_report(ws: Workspace, args) -> Path:
    rows = ["| run | label | fairness (hard) | fairness (soft) | FID | KID x1e3 | IS |",
            "|---|---|---|---|---|---|---|"]
    fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
    for path in sorted(ws.out.glob("*/report*.json")):
        r = EvalReport.from_json(path.read_text())
        rows.append(f"| {path.parent.name}/{path.name} | {r.label} | {r.fairness_str()} | "
                    f"{r.fairness_soft:.4f} ± {r.fairness_soft_std:.4f} | {fmt(r.fid)} | {fmt(r.kid_x1e3)} | "
                    f"{fmt(r.inception_score)} |")
    if len(rows) == 2:
        raise MissingArtifactError(f"no reports under {ws.out}; run `fairgan evaluate` or `fairgan rebalance` first")
    text = "\n".join(rows) + "\n"
    (ws.out / "report.md").write_text(text)
    print(text, end="")
    return ws.out


def _grid_name(G: GeneratorNet) -> str:
    return "samples.ppm" if len(G.out_shape) == 3 else "samples.csv"


COMMANDS = {
    "gen-data": (cmd_gen_data, "build the imbalanced training set and a balanced reference set"),
    "train-classifier": (cmd_train_classifier, "train the auxiliary classifier on the balanced set"),
    "train-gan": (cmd_train_gan, "train a GAN (plain, bias or reweight) on the imbalanced set"),
    "explore": (cmd_explore, "mine a class-balanced latent dataset from the plain GAN"),
    "rebalance": (cmd_rebalance, "run the whole pipeline for one rebalancing variant"),
    "evaluate": (cmd_evaluate, "fairness and quality report for a GAN checkpoint"),
    "audit-fid": (cmd_audit_fid, "FID heatmap across class-mix profiles"),
    "report": (cmd_report, "summarise every report under the output directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="runs", help="output root (default: runs)")
        p.add_argument("--quiet", action="store_true")
        if name in ("train-gan", "rebalance", "evaluate"):
            p.add_argument("--variant", choices=VARIANTS)
        if name in ("train-gan", "rebalance", "evaluate"):
            p.add_argument("--timestamp", action="store_true", help="stamp reports with the wall-clock time")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="GAN checkpoint (default: the train-gan output for --variant)")
            p.add_argument("--repeats", type=int)
            p.add_argument("--samples", type=int)
        if name == "audit-fid":
            p.add_argument("--profiles", help="comma-separated profile names (default: all)")
            p.add_argument("--diagnostic", action="store_true", help="compare each diagonal set with itself")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = PipelineConfig.load(args.config, args.seed) if args.config else PipelineConfig.from_dict({}, args.seed)
        ws = Workspace(args.out, cfg, args.config)
        run = COMMANDS[args.command][0](ws, args)
    except FairGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
