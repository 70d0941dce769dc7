"""Command-line entry point for the full pipeline.

Every command resolves its settings from an optional JSON config file plus
flags (flags win), writes a provenance JSON next to its outputs, and exits
0 on success, 2 on usage errors, 3 on data errors, 4 on model errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (
    ClassifierConfig,
    load_classifier,
    predict_many,
    train_classifier,
)
from .datasets import (
    UnbiasedFilterConfig,
    build_toy_manifest,
    filter_unbiased,
    load_manifest,
    save_manifest,
    scan_genimage_root,
)
from .errors import DataError, ModelError, ToolkitError
from .evaluation import (
    EvalMatrix,
    accuracy,
    auc_score,
    cross_validate,
    emit_reports,
    summarize_table,
    timing_benchmark,
)
from .features import (
    METHOD_DIRE,
    METHOD_TSG,
    TSGConfig,
    batch_extract,
    load_feature,
)
from .gradcam import gradcam, overlay, write_sidecar
from .predictor import (
    ToyUNetConfig,
    generate_samples,
    load_pretrained,
    train_toy_ddpm,
)
from .schedule import TOY_SCHEDULE_PARAMS, make_linear_schedule
from .toydata import make_patch_dataset, save_image_batch

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MODEL = 4


class UsageError(ToolkitError):
    """Invalid flag combination; maps to exit code 2."""


def _resolve(args, defaults: dict) -> dict:
    """Merge built-in defaults, config-file values, and explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_provenance(out_location: Path, command: str, config: dict, argv):
    record = {
        "command": command,
        "config": config,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "version": __version__,
    }
    blob = json.dumps(record, sort_keys=True)
    record["run_id"] = hashlib.sha256(blob.encode()).hexdigest()[:12]
    if out_location.suffix:
        path = out_location.with_name(out_location.name + ".provenance.json")
    else:
        out_location.mkdir(parents=True, exist_ok=True)
        path = out_location / "provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


def _tag_path_pairs(values, flag):
    pairs = {}
    for v in values or []:
        if "=" not in v:
            raise UsageError(f"{flag} expects TAG=PATH, got {v!r}")
        tag, path = v.split("=", 1)
        if tag in pairs:
            raise UsageError(f"duplicate tag {tag!r} for {flag}")
        pairs[tag] = path
    return pairs


# ------------------------------------------------------------------ commands


def cmd_extract(args, argv) -> int:
    cfg = _resolve(
        args,
        {
            "manifest": None,
            "model": None,
            "method": METHOD_TSG,
            "t": 0,
            "ddim_steps": 20,
            "out": None,
            "workers": 1,
        },
    )
    for key in ("manifest", "model", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    if cfg["method"] not in (METHOD_TSG, METHOD_DIRE):
        raise UsageError(f"--method must be tsg or dire, got {cfg['method']}")
    manifest = load_manifest(cfg["manifest"])
    handle = load_pretrained(cfg["model"])
    tsg_cfg = TSGConfig(t=cfg["t"], target_resolution=handle.resolution)
    report = batch_extract(
        manifest,
        handle,
        tsg_cfg,
        cfg["method"],
        cfg["out"],
        workers=cfg["workers"],
        dire_k=cfg["ddim_steps"],
    )
    out = Path(cfg["out"])
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    _write_provenance(out, "extract", cfg, argv)
    print(
        f"extracted {report.succeeded} features ({report.failed} failed, "
        f"{report.predictor_calls} predictor calls) -> {out}"
    )
    return EXIT_OK if report.succeeded else EXIT_DATA


def cmd_train(args, argv) -> int:
    cfg = _resolve(
        args,
        {
            "features": None,
            "out": None,
            "arch": "small_cnn",
            "crop": 32,
            "epochs": 5,
            "batch_size": 32,
            "lr": 1e-3,
            "seed": 0,
            "pretrained_backbone": False,
        },
    )
    for key in ("features", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    manifest = load_manifest(cfg["features"])
    clf_cfg = ClassifierConfig(
        architecture=cfg["arch"],
        crop_size=cfg["crop"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        seed=cfg["seed"],
        pretrained_backbone=cfg["pretrained_backbone"],
    )
    ckpt = train_classifier(manifest, clf_cfg)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    _write_provenance(out, "train", cfg, argv)
    val = ckpt.history.get("val_accuracy") or [float("nan")]
    print(f"trained {cfg['arch']} -> {out} (val_acc {val[-1]:.4f})")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    cfg = _resolve(
        args, {"ckpt": None, "features": None, "out": None, "split": None}
    )
    for key in ("ckpt", "features", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    ckpt = load_classifier(cfg["ckpt"])
    manifest = load_manifest(cfg["features"])
    entries = manifest.subset(split=cfg["split"]) if cfg["split"] else manifest.entries
    if not entries:
        raise DataError("no entries selected for evaluation")
    paths = [e.path for e in entries]
    probs = predict_many(ckpt, paths)
    labels01 = np.array([1 if e.label == "synthetic" else 0 for e in entries])
    preds = (probs >= 0.5).astype(int)
    acc = accuracy(preds.tolist(), labels01.tolist())
    try:
        auc = auc_score(probs, labels01)
    except DataError:
        auc = None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w") as fh:
        for e, p in zip(entries, probs):
            fh.write(
                json.dumps(
                    {
                        "path": e.path,
                        "prob_synthetic": float(p),
                        "label": "synthetic" if p >= 0.5 else "real",
                    }
                )
                + "\n"
            )
    metrics = {
        "accuracy": acc,
        "auc": auc,
        "n": len(entries),
        "checkpoint_digest": ckpt.config_digest(),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    _write_provenance(out, "eval", cfg, argv)
    print(f"accuracy {acc:.4f} auc {auc if auc is None else f'{auc:.4f}'} n {len(entries)}")
    return EXIT_OK


def cmd_crossval(args, argv) -> int:
    cfg = _resolve(
        args,
        {"out": None, "diff_tags": None, "gan_tags": None},
    )
    ckpt_paths = _tag_path_pairs(args.ckpt, "--ckpt")
    test_paths = _tag_path_pairs(args.test, "--test")
    if not cfg["out"]:
        raise UsageError("--out is required")
    if not ckpt_paths or not test_paths:
        raise UsageError("need at least one --ckpt TAG=PATH and one --test TAG=PATH")
    ckpts = {tag: load_classifier(p) for tag, p in ckpt_paths.items()}
    tests = {tag: load_manifest(p) for tag, p in test_paths.items()}
    matrix = cross_validate(ckpts, tests)
    meta = {
        "checkpoint_digests": {t: c.config_digest() for t, c in ckpts.items()},
        "seeds": {t: c.config.seed for t, c in ckpts.items()},
        "device": "cpu",
    }
    out = Path(cfg["out"])
    paths = emit_reports(matrix, out, name="crossval", meta=meta)
    if cfg["diff_tags"] or cfg["gan_tags"]:
        grouping = {}
        if cfg["diff_tags"]:
            grouping["diff_based"] = cfg["diff_tags"].split(",")
        if cfg["gan_tags"]:
            grouping["gan"] = cfg["gan_tags"].split(",")
        summary = summarize_table(matrix, grouping)
        (out / "summary.json").write_text(
            json.dumps(
                {"groups": summary.groups, "average": summary.average, "row": summary.row()},
                indent=2,
                sort_keys=True,
            )
        )
        print(f"summary: {summary.row()}")
    _write_provenance(out, "crossval", cfg, argv)
    print(f"cross-validation matrix -> {paths['csv']}")
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    cfg = _resolve(
        args,
        {
            "model": None,
            "images": None,
            "out": None,
            "batch_size_tsg": 5,
            "batch_size_dire": 50,
            "ddim_steps": 20,
            "t": 0,
            "min_images": 100,
        },
    )
    for key in ("model", "images", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    handle = load_pretrained(cfg["model"])
    image_dir = Path(cfg["images"])
    if not image_dir.is_dir():
        raise DataError(f"image directory not found: {image_dir}")
    images = sorted(
        p for p in image_dir.rglob("*") if p.suffix.lower() in {".png", ".jpg", ".jpeg"}
    )
    tsg = timing_benchmark(
        METHOD_TSG,
        handle,
        images,
        batch_size=cfg["batch_size_tsg"],
        t=cfg["t"],
        min_images=cfg["min_images"],
    )
    dire = timing_benchmark(
        METHOD_DIRE,
        handle,
        images,
        batch_size=cfg["batch_size_dire"],
        k=cfg["ddim_steps"],
        min_images=cfg["min_images"],
    )
    ratio = dire.wall_seconds / max(tsg.wall_seconds, 1e-9)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(
        json.dumps(
            {
                "tsg": tsg.to_json(),
                "dire": dire.to_json(),
                "dire_over_tsg_wall_ratio": ratio,
            },
            indent=2,
            sort_keys=True,
        )
    )
    _write_provenance(out, "bench", cfg, argv)
    print(
        f"tsg {tsg.wall_seconds:.2f}s ({tsg.predictor_calls} calls) vs "
        f"dire {dire.wall_seconds:.2f}s ({dire.predictor_calls} calls), "
        f"ratio {ratio:.1f}x"
    )
    return EXIT_OK


def cmd_build_unbiased(args, argv) -> int:
    cfg = _resolve(
        args,
        {
            "root": None,
            "manifest": None,
            "layout": None,
            "out": None,
            "min_quality": 96,
            "jpeg_only": False,
            "balance": True,
            "workers": 1,
        },
    )
    if not cfg["out"]:
        raise UsageError("--out is required")
    if bool(cfg["root"]) == bool(cfg["manifest"]):
        raise UsageError("exactly one of --root or --manifest is required")
    if cfg["root"]:
        layout = json.loads(Path(cfg["layout"]).read_text()) if cfg["layout"] else None
        manifest = scan_genimage_root(cfg["root"], layout=layout, workers=cfg["workers"])
    else:
        manifest = load_manifest(cfg["manifest"])
    filtered = filter_unbiased(
        manifest,
        UnbiasedFilterConfig(
            min_quality=cfg["min_quality"],
            require_balance=cfg["balance"],
            jpeg_only=cfg["jpeg_only"],
        ),
    )
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(filtered, out)
    _write_provenance(out, "build-unbiased", cfg, argv)
    print(f"unbiased manifest {filtered.counts()} -> {out}")
    return EXIT_OK


def cmd_gradcam(args, argv) -> int:
    cfg = _resolve(
        args,
        {
            "ckpt": None,
            "feature": None,
            "image": None,
            "target_class": "auto",
            "layer": None,
            "alpha": 0.5,
            "out": None,
        },
    )
    for key in ("ckpt", "feature", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    if cfg["target_class"] not in ("auto", "real", "synthetic"):
        raise UsageError("--target-class must be auto, real, or synthetic")
    ckpt = load_classifier(cfg["ckpt"])
    feat = load_feature(cfg["feature"])
    target = None if cfg["target_class"] == "auto" else cfg["target_class"]
    hm = gradcam(ckpt, feat, target_class=target, target_layer=cfg["layer"])
    source = cfg["image"] or feat.meta.source_path
    if not source or not Path(source).exists():
        raise DataError(
            f"source image not found ({source!r}); pass --image explicitly"
        )
    out = Path(cfg["out"])
    png = overlay(hm, source, cfg["alpha"], out)
    from .classifier import predict

    prob = predict(ckpt, feat).prob_synthetic
    write_sidecar(png, hm, prob)
    _write_provenance(png, "gradcam", cfg, argv)
    print(f"heatmap ({hm.target_class}, layer {hm.target_layer}) -> {png}")
    return EXIT_OK


def cmd_toy_dataset(args, argv) -> int:
    cfg = _resolve(
        args, {"out": None, "n": 4096, "patch_size": 32, "seed": 0}
    )
    if not cfg["out"]:
        raise UsageError("--out is required")
    paths = make_patch_dataset(
        cfg["out"], n_images=cfg["n"], patch_size=cfg["patch_size"], seed=cfg["seed"]
    )
    _write_provenance(Path(cfg["out"]), "toy-dataset", cfg, argv)
    print(f"wrote {len(paths)} patches -> {cfg['out']}")
    return EXIT_OK


def cmd_toy_train(args, argv) -> int:
    cfg = _resolve(
        args,
        {
            "data": None,
            "out": None,
            "steps": 20000,
            "seed": 0,
            "base_channels": 16,
            "depth": 2,
            "time_embedding_dim": 64,
            "resolution": 32,
            "T": TOY_SCHEDULE_PARAMS["T"],
            "beta_start": TOY_SCHEDULE_PARAMS["beta_start"],
            "beta_end": TOY_SCHEDULE_PARAMS["beta_end"],
            "batch_size": 16,
            "lr": 2e-4,
        },
    )
    for key in ("data", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    manifest = load_manifest(cfg["data"])
    unet_cfg = ToyUNetConfig(
        base_channels=cfg["base_channels"],
        depth=cfg["depth"],
        time_embedding_dim=cfg["time_embedding_dim"],
        resolution=(cfg["resolution"], cfg["resolution"]),
        T=cfg["T"],
    )
    sched = make_linear_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"])
    handle = train_toy_ddpm(
        manifest,
        unet_cfg,
        sched,
        steps=cfg["steps"],
        seed=cfg["seed"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
    )
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    handle.save(out)
    _write_provenance(out, "toy-train", cfg, argv)
    print(
        f"trained toy model ({cfg['steps']} steps, final loss "
        f"{handle.loss_history[-1]:.4f}) -> {out}"
    )
    return EXIT_OK


def cmd_toy_generate(args, argv) -> int:
    cfg = _resolve(
        args, {"model": None, "out": None, "n": 1000, "k": 20, "seed": 0}
    )
    for key in ("model", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    handle = load_pretrained(cfg["model"])
    batch = generate_samples(handle, n=cfg["n"], k=cfg["k"], seed=cfg["seed"], sched=handle.schedule)
    paths = save_image_batch(batch, cfg["out"])
    _write_provenance(Path(cfg["out"]), "toy-generate", cfg, argv)
    print(f"generated {len(paths)} samples -> {cfg['out']}")
    return EXIT_OK


def cmd_toy_manifest(args, argv) -> int:
    cfg = _resolve(
        args,
        {"real": None, "fake": None, "out": None, "split_fraction": 0.8, "seed": 0},
    )
    for key in ("real", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    manifest = build_toy_manifest(
        cfg["real"], cfg["fake"], split_fraction=cfg["split_fraction"], seed=cfg["seed"]
    )
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out)
    _write_provenance(out, "toy-manifest", cfg, argv)
    print(f"toy manifest {manifest.counts()} -> {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsgdetect",
        description=(
            "Detect AI-generated images with diffusion noise-prediction "
            "features; includes a reconstruction-error baseline, dataset "
            "tooling, evaluation, and a toy closed loop."
        ),
    )
    parser.add_argument("--verbose", action="store_true", help="INFO-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config file; flags override it")
        return p

    p = add("extract", cmd_extract, "extract feature maps for a manifest")
    p.add_argument("--manifest")
    p.add_argument("--model")
    p.add_argument("--method", choices=[METHOD_TSG, METHOD_DIRE])
    p.add_argument("--t", type=int)
    p.add_argument("--ddim-steps", type=int, dest="ddim_steps")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)

    p = add("train", cmd_train, "train the binary classifier on features")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--arch", choices=["small_cnn", "resnet50"])
    p.add_argument("--crop", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--pretrained-backbone",
        action=argparse.BooleanOptionalAction,
        dest="pretrained_backbone",
    )

    p = add("eval", cmd_eval, "score a classifier on a feature manifest")
    p.add_argument("--ckpt")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--split", choices=["train", "val"])

    p = add("crossval", cmd_crossval, "cross-generator accuracy matrix")
    p.add_argument("--ckpt", action="append", metavar="TAG=PATH")
    p.add_argument("--test", action="append", metavar="TAG=PATH")
    p.add_argument("--out")
    p.add_argument("--diff-tags", dest="diff_tags")
    p.add_argument("--gan-tags", dest="gan_tags")

    p = add("bench", cmd_bench, "time one-pass vs reconstruction extraction")
    p.add_argument("--model")
    p.add_argument("--images")
    p.add_argument("--out")
    p.add_argument("--batch-size-tsg", type=int, dest="batch_size_tsg")
    p.add_argument("--batch-size-dire", type=int, dest="batch_size_dire")
    p.add_argument("--ddim-steps", type=int, dest="ddim_steps")
    p.add_argument("--t", type=int)
    p.add_argument("--min-images", type=int, dest="min_images")

    p = add("build-unbiased", cmd_build_unbiased, "JPEG-quality-filtered manifest")
    p.add_argument("--root")
    p.add_argument("--manifest")
    p.add_argument("--layout")
    p.add_argument("--out")
    p.add_argument("--min-quality", type=int, dest="min_quality")
    p.add_argument("--jpeg-only", action=argparse.BooleanOptionalAction, dest="jpeg_only")
    p.add_argument("--balance", action=argparse.BooleanOptionalAction)
    p.add_argument("--workers", type=int)

    p = add("gradcam", cmd_gradcam, "classifier heatmap over one feature")
    p.add_argument("--ckpt")
    p.add_argument("--feature")
    p.add_argument("--image")
    p.add_argument("--target-class", dest="target_class", choices=["auto", "real", "synthetic"])
    p.add_argument("--layer")
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")

    toy = sub.add_parser("toy", help="toy closed-loop tooling")
    toysub = toy.add_subparsers(dest="toy_command", required=True)

    def add_toy(name, func, help_):
        p = toysub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config")
        return p

    p = add_toy("dataset", cmd_toy_dataset, "build the natural-patch real set")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--seed", type=int)

    p = add_toy("train", cmd_toy_train, "train the toy noise predictor")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--depth", type=int)
    p.add_argument("--time-embedding-dim", type=int, dest="time_embedding_dim")
    p.add_argument("--resolution", type=int)
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--beta-start", type=float, dest="beta_start")
    p.add_argument("--beta-end", type=float, dest="beta_end")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)

    p = add_toy("generate", cmd_toy_generate, "sample images from a toy model")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)

    p = add_toy("manifest", cmd_toy_manifest, "label real/fake dirs into a manifest")
    p.add_argument("--real")
    p.add_argument("--fake")
    p.add_argument("--out")
    p.add_argument("--split-fraction", type=float, dest="split_fraction")
    p.add_argument("--seed", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(json.dumps({"error": "model", "message": str(exc)}), file=sys.stderr)
        return EXIT_MODEL
    except DataError as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return EXIT_DATA
    except ToolkitError as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
