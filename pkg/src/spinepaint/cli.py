"""Command-line surface: dataset generation, training, inpainting, evaluation.

Configuration comes from an INI file with sections (schedule, denoiser,
training, codec, classifier, sampler); ``--set section.key=value`` flags
override file values and the effective merged config is dumped into every
run directory. Exit codes: 0 ok, 2 config error, 3 data error,
4 compatibility error, 5 numerical/training failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import classifier as clf_mod
from . import evaluate as eval_mod
from .codec import CodecTrainConfig, load_codec, save_codec, train_codec
from .denoiser import DenoiserConfig, TorchDenoiser
from .errors import (
    CompatibilityError,
    ConfigError,
    DataError,
    InvalidParameterError,
    SpinepaintError,
)
from .geometry import LEVELS, PATHOLOGIES, SEVERITIES, Landmark
from .sampling import (
    INPAINT_BATCH_FNS,
    BatchRNG,
    SamplerConfig,
    sample_insertion_point,
)
from .schedule import build_schedule
from .synthdata import PhantomSpec, SampleDataset, make_dataset
from .training import (
    VARIANT_WEIGHT_MODES,
    TrainConfig,
    load_denoiser,
    train,
)
from .volumeio import read_volume, write_json, write_volume

OUT_ROOT_ENV = "SPINEPAINT_OUT"

CONFIG_SECTIONS = {
    "schedule": {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "denoiser": DenoiserConfig(),
    "training": TrainConfig(),
    "codec": CodecTrainConfig(),
    "classifier": clf_mod.ClassifierConfig(),
    "sampler": SamplerConfig(),
}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = like[0] if like else 1
        return tuple(type(elem)(p) for p in parts)
    return raw


def _section_defaults(name: str) -> dict:
    ref = CONFIG_SECTIONS[name]
    if isinstance(ref, dict):
        return dict(ref)
    return {f.name: getattr(ref, f.name) for f in dataclass_fields(ref)}


def load_config(path: str | None, overrides: list[str] | None) -> dict:
    """Merged config: section defaults <- INI file <- --set overrides."""
    merged = {name: _section_defaults(name) for name in CONFIG_SECTIONS}
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise DataError(f"config file {path} not found")
        for section in parser.sections():
            if section not in merged:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in merged[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                merged[section][key] = _coerce(raw, merged[section][key])
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in merged or key not in merged[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        merged[section][key] = _coerce(raw, merged[section][key])
    return merged


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def _resolve_out(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if not root:
        raise ConfigError(f"--out not given and {OUT_ROOT_ENV} unset")
    return Path(root) / command


def _parse_mix(raw: str) -> dict[str, float]:
    mix = {}
    for part in raw.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"--mix expects name=fraction pairs, got {part!r}")
        name, value = part.split("=", 1)
        mix[name.strip()] = float(value)
    return mix


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _resolve_out(args, "dataset")
    spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text())) \
        if args.spec else PhantomSpec()
    summary = make_dataset(out, args.n, _parse_mix(args.mix), args.seed, spec)
    write_json(out / "run.json", {
        "command": "gen-data", "n": args.n, "seed": args.seed, "mix": args.mix,
        "config_hash": config_hash(spec.to_dict()),
    })
    print(f"wrote {summary['splits']} samples to {out}")
    return 0


def cmd_train_codec(args) -> int:
    out = _resolve_out(args, "codec")
    config_all = load_config(args.config, args.set)
    cfg = CodecTrainConfig(**dict(config_all["codec"], kind=args.kind, seed=args.seed))
    dataset = SampleDataset(args.data)
    train_images = np.stack([dataset.load_image(r) for r in dataset.select(split="train")])
    val_images = np.stack([dataset.load_image(r) for r in dataset.select(split="val")])
    codec, history = train_codec(train_images, val_images, dataset.spec.grid, cfg,
                                 log=print)
    out.mkdir(parents=True, exist_ok=True)
    fp = save_codec(out / "codec.spckpt", codec,
                    extra={"dataset": dataset.fingerprint(), "seed": args.seed})
    write_json(out / "config.json", config_all["codec"] | {"kind": args.kind})
    with open(out / "metrics.csv", "w") as f:
        f.write("step,split,loss\n")
        for row in history:
            f.write(f"{row['step']},{row['split']},{row['loss']}\n")
    write_json(out / "run.json", {
        "command": "train-codec", "data": str(args.data), "kind": args.kind,
        "seed": args.seed, "codec_fingerprint": fp,
        "dataset_fingerprint": dataset.fingerprint(),
        "config_hash": config_hash(config_all["codec"]),
    })
    print(f"codec saved to {out / 'codec.spckpt'} ({fp[:12]})")
    return 0


def cmd_train_classifier(args) -> int:
    out = _resolve_out(args, "classifier")
    config_all = load_config(args.config, args.set)
    cfg = clf_mod.ClassifierConfig(**dict(config_all["classifier"], seed=args.seed))
    dataset = SampleDataset(args.data)
    clf = clf_mod.train_feature_classifier(dataset, args.pathology, cfg, log=print)
    out.mkdir(parents=True, exist_ok=True)
    fp = clf_mod.save_classifier(out / "classifier.spckpt", clf)
    write_json(out / "config.json", config_all["classifier"])
    write_json(out / "run.json", {
        "command": "train-classifier", "data": str(args.data),
        "pathology": args.pathology, "seed": args.seed,
        "classifier_fingerprint": fp, "val_accuracy": clf.val_accuracy,
        "dataset_fingerprint": dataset.fingerprint(),
        "config_hash": config_hash(config_all["classifier"]),
    })
    print(f"classifier saved ({fp[:12]}), val accuracy {clf.val_accuracy:.3f}")
    return 0


def cmd_train(args) -> int:
    out = _resolve_out(args, f"train-{args.variant}")
    config_all = load_config(args.config, args.set)
    sched = build_schedule(**config_all["schedule"])
    codec, codec_fp = load_codec(args.codec)
    weight_mode = VARIANT_WEIGHT_MODES[args.variant]
    train_cfg = TrainConfig(**dict(config_all["training"], weight_mode=weight_mode,
                                   seed=args.seed))
    model_cfg = DenoiserConfig(**dict(config_all["denoiser"],
                                      latent_channels=codec.channels))
    dataset = SampleDataset(args.data)
    train_samples = [dataset.load_sample(r)
                     for r in dataset.select(split="train", condition=args.pathology)]
    val_samples = [dataset.load_sample(r)
                   for r in dataset.select(split="val", condition=args.pathology)]
    result = train(train_samples, val_samples, codec, sched, train_cfg, model_cfg,
                   out, codec_fingerprint=codec_fp, log=print)
    write_json(out / "run.json", {
        "command": "train", "variant": args.variant, "pathology": args.pathology,
        "data": str(args.data), "codec": str(args.codec), "seed": args.seed,
        "checkpoint_fingerprint": result.fingerprint,
        "codec_fingerprint": codec_fp,
        "dataset_fingerprint": dataset.fingerprint(),
        "config_hash": config_hash(config_all),
        "best_step": result.best_step, "best_val": result.best_val,
        "initial_val": result.initial_val,
    })
    print(f"checkpoint {result.checkpoint_path} ({result.fingerprint[:12]}): "
          f"val {result.initial_val:.4f} -> {result.best_val:.4f}")
    return 0


def _inpaint_inputs(args, pathology: str):
    """Yield (input_id, image, grid, landmark) for the requested inputs."""
    if args.input:
        if not args.landmark:
            raise ConfigError("--input requires --landmark y,x[,z] in mm")
        if not args.severity:
            raise ConfigError("--input requires --severity")
        image, grid = read_volume(args.input)
        position = tuple(float(v) for v in args.landmark.split(","))
        level = args.level or LEVELS[0]
        lm = Landmark(position, level, pathology, args.severity)
        return [(Path(args.input).stem, image, grid, lm)], None
    if not args.dataset:
        raise ConfigError("either --input or --dataset is required")
    dataset = SampleDataset(args.dataset)
    condition = args.condition
    records = dataset.select(split=args.split or None, condition=condition,
                             level=args.level or None,
                             severity=None if condition == "normal" else args.severity or None)
    if condition == "normal" and not args.severity:
        raise ConfigError("--severity is required when inpainting normal inputs")
    grouped: dict[tuple, int] = {}
    out = []
    for rec in records:
        sample = dataset.load_sample(rec)
        if condition == "normal":
            rng = np.random.default_rng((args.seed, 0x1A5D, int(rec["id"])))
            lm = sample_insertion_point(sample, pathology, args.severity, rng)
        else:
            lm = sample.landmark
        key = (rec["level"], lm.severity)
        grouped[key] = grouped.get(key, 0) + 1
        if args.limit and grouped[key] > args.limit:
            continue
        out.append((rec["id"], sample.image, sample.grid, lm))
    if not out:
        raise DataError("no inputs selected for inpainting")
    return out, dataset


def cmd_inpaint(args) -> int:
    out = _resolve_out(args, f"inpaint-{args.method}")
    config_all = load_config(args.config, args.set)
    model, header, model_fp = load_denoiser(args.checkpoint)
    codec, codec_fp = load_codec(args.codec)
    if header["codec_fingerprint"] and header["codec_fingerprint"] != codec_fp:
        raise CompatibilityError(
            f"checkpoint was trained against codec {header['codec_fingerprint'][:12]}, "
            f"got {codec_fp[:12]}")
    expected_mode = VARIANT_WEIGHT_MODES[
        {"weighted": "weighted", "masked": "masked", "repaint": "repaint-base"}[args.method]]
    if header["train"]["weight_mode"] != expected_mode:
        raise CompatibilityError(
            f"method {args.method} needs a {expected_mode!r}-trained checkpoint, "
            f"got {header['train']['weight_mode']!r}")
    sched = build_schedule(**header["schedule"])
    pathology = header["pathology"]
    cfg = SamplerConfig(**dict(config_all["sampler"], method=args.method,
                               num_inference_steps=args.steps,
                               scheduler=args.scheduler, seed=args.seed))
    predictor = TorchDenoiser(model)
    inputs, _ = _inpaint_inputs(args, pathology)

    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    records = []
    batch_fn = INPAINT_BATCH_FNS[args.method]
    for gen in range(args.generations):
        for start in range(0, len(inputs), args.batch_size):
            chunk = inputs[start:start + args.batch_size]
            images = np.stack([c[1] for c in chunk])
            landmarks = [c[3] for c in chunk]
            seeds = [int(np.random.SeedSequence(
                entropy=args.seed, spawn_key=(start + j, gen)).generate_state(1)[0])
                for j in range(len(chunk))]
            rng = BatchRNG.from_seeds(seeds)
            outputs = batch_fn(images, landmarks, predictor, codec, sched, cfg, rng=rng)
            for (input_id, _, grid, lm), seed_i, image_out in zip(chunk, seeds, outputs):
                output_id = f"{input_id}-g{gen}"
                rel = f"images/{output_id}.svol"
                write_volume(out / rel, image_out.astype(np.float32), grid)
                records.append({
                    "output_id": output_id, "input_id": input_id,
                    "method": args.method, "level": lm.level,
                    "pathology": pathology, "severity": lm.severity,
                    "gen_index": gen, "seed": seed_i,
                    "landmark": lm.to_record(), "image": rel,
                })
    with open(out / "outputs.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_json(out / "run.json", {
        "command": "inpaint", "method": args.method, "pathology": pathology,
        "seed": args.seed, "steps": args.steps, "scheduler": args.scheduler,
        "generations": args.generations, "checkpoint": str(args.checkpoint),
        "checkpoint_fingerprint": model_fp, "codec_fingerprint": codec_fp,
        "n_outputs": len(records),
        "config_hash": config_hash(config_all["sampler"]),
    })
    print(f"wrote {len(records)} inpainted volumes to {out}")
    return 0


def cmd_evaluate(args) -> int:
    out = _resolve_out(args, "eval")
    clf, clf_fp = clf_mod.load_classifier(args.classifier)
    testset = SampleDataset(args.testset)
    split = None if args.ref_split == "all" else args.ref_split
    reference = eval_mod.reference_patches(testset, clf.pathology, split,
                                           clf.config.patch_extent_mm)
    cells, overall, provenance_runs = [], [], []
    for outputs_dir in args.outputs:
        run, records = eval_mod.load_outputs_dir(outputs_dir)
        if run["pathology"] != clf.pathology:
            raise CompatibilityError(
                f"outputs in {outputs_dir} are {run['pathology']}, classifier is "
                f"{clf.pathology}")
        method_cells, method_overall = eval_mod.evaluate_method(
            run["method"], records, reference, clf, clf.pathology)
        cells.extend(method_cells)
        overall.append(method_overall)
        provenance_runs.append({"dir": str(outputs_dir), **{
            k: run[k] for k in ("method", "seed", "checkpoint_fingerprint",
                                "codec_fingerprint") if k in run}})
    eval_mod.write_report(out, cells, overall, {
        "classifier_fingerprint": clf_fp,
        "classifier_accuracy": clf.val_accuracy,
        "testset_fingerprint": testset.fingerprint(),
        "ref_split": args.ref_split,
        "runs": provenance_runs,
    })
    print(f"report written to {out}")
    return 0


def cmd_report(args) -> int:
    report_csv = Path(args.eval_dir) / "report.csv"
    if not report_csv.exists():
        raise DataError(f"{report_csv} not found")
    import csv as _csv

    cells = []
    with open(report_csv) as f:
        for row in _csv.DictReader(f):
            cells.append(eval_mod.ConditionCell(
                method=row["method"], pathology=row["pathology"], level=row["level"],
                severity=row["severity"],
                support_outputs=int(row["support_outputs"]),
                support_reference=int(row["support_reference"]),
                diversity_groups=int(row["diversity_groups"]),
                fd=float(row["fd"]) if row["fd"] else None,
                ms_ssim=float(row["ms_ssim"]) if row["ms_ssim"] else None,
                pathology_rate=float(row["pathology_rate"]) if row["pathology_rate"] else None,
                in_distribution_rate=float(row["in_distribution_rate"])
                if row["in_distribution_rate"] else None))
    overall = json.loads((Path(args.eval_dir) / "report.json").read_text())["overall"]
    print(eval_mod.render_table(cells, overall), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinepaint",
        description="Gaussian-weighted diffusion inpainting of localized pathology")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<cmd>)")
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--mix", default="normal=0.5,dh=0.25,ccs=0.25",
                   help="condition fractions, e.g. normal=0.35,dh=0.65")
    p.add_argument("--spec", help="JSON phantom spec file")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-codec", help="train (or instantiate) a latent codec")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("identity", "conv_ae"), default="conv_ae")
    p.set_defaults(fn=cmd_train_codec)

    p = sub.add_parser("train-classifier", help="train the frozen evaluation classifier")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pathology", choices=PATHOLOGIES, required=True)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("train", help="train a diffusion denoiser variant")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pathology", choices=PATHOLOGIES, required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--variant", choices=tuple(VARIANT_WEIGHT_MODES), default="weighted")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("inpaint", help="inpaint pathology into images")
    common(p)
    p.add_argument("--input", help="single .svol volume")
    p.add_argument("--landmark", help="insertion point in mm, e.g. 40,47.5")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--condition", default="normal",
                   help="input condition: normal (sample an insertion point) or a "
                        "pathology name (reuse its landmark)")
    p.add_argument("--level", choices=LEVELS)
    p.add_argument("--severity")
    p.add_argument("--method", choices=tuple(INPAINT_BATCH_FNS), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--scheduler", choices=("ddpm_ancestral", "pndm"), default="pndm")
    p.add_argument("--generations", type=int, default=1)
    p.add_argument("--limit", type=int, help="max inputs per (level, severity)")
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(fn=cmd_inpaint)

    p = sub.add_parser("evaluate", help="per-cell FD / MS-SSIM / rate report")
    common(p)
    p.add_argument("--outputs", action="append", required=True,
                   help="inpaint output directory (repeatable, one per method)")
    p.add_argument("--testset", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--ref-split", default="test",
                   help="testset split for reference patches ('all' for every record)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="render a comparison table from an eval dir")
    p.add_argument("--eval-dir", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inpaint" and args.severity:
            # validate severity against the pathologies that allow it
            if all(args.severity not in sevs for sevs in SEVERITIES.values()):
                raise InvalidParameterError(f"unknown severity {args.severity!r}")
        return args.fn(args)
    except SpinepaintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
