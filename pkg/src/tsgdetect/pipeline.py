"""Toy closed-loop driver: dataset -> generator -> fakes -> features ->
classifiers -> metrics.

Runs the CLI commands stage by stage into a working directory, skipping
stages whose outputs already exist (all stages are seeded, so cached
artifacts equal recomputed ones). Stage wall times are recorded in
``timings.json`` when a stage actually runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetManifest, ManifestEntry, load_manifest, save_manifest
from .errors import ToolkitError

__all__ = ["ToyLoopParams", "run_closed_loop"]


@dataclass(frozen=True)
class ToyLoopParams:
    n_real: int = 4096
    n_fake: int = 4096
    patch_size: int = 32
    train_steps: int = 20000
    ddim_k: int = 20
    split_fraction: float = 0.8
    t_main: int = 0
    t_late: int = 50
    schedule_T: int = 100
    base_channels: int = 16
    depth: int = 2
    time_embedding_dim: int = 64
    train_batch: int = 16
    classifier_epochs: int = 5
    classifier_batch: int = 32
    dire_eval_per_class: int = 250
    seed_dataset: int = 101
    seed_split: int = 7
    seed_model: int = 5
    seed_generate: int = 11
    seed_classifier: int = 0
    seed_permutation: int = 13

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _cli(argv: list[str], stage: str):
    from .cli import main

    rc = main(argv)
    if rc != 0:
        raise ToolkitError(f"pipeline stage {stage!r} failed with exit code {rc}")


def _count_pngs(directory: Path) -> int:
    return len(list(directory.glob("*.png"))) if directory.is_dir() else 0


class _Stages:
    def __init__(self, workdir: Path, force: bool):
        self.workdir = workdir
        self.force = force
        self.timings_path = workdir / "timings.json"
        self.timings = (
            json.loads(self.timings_path.read_text())
            if self.timings_path.exists()
            else {}
        )

    def run(self, name: str, done, build):
        if not self.force and done():
            return
        t0 = time.time()
        build()
        self.timings[name] = time.time() - t0
        self.timings_path.write_text(json.dumps(self.timings, indent=2, sort_keys=True))


def run_closed_loop(
    workdir: str | Path, params: ToyLoopParams = ToyLoopParams(), force: bool = False
) -> dict:
    """Build (or reuse) every closed-loop artifact under workdir."""
    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    p = params
    (w / "params.json").write_text(json.dumps(p.to_dict(), indent=2, sort_keys=True))

    real_dir = w / "real"
    real_manifest = w / "real_only.jsonl"
    model = w / "toy_model.ckpt"
    fake_dir = w / "fake"
    manifest = w / "toy.jsonl"
    feats_t0 = w / f"feats_t{p.t_main}"
    feats_t50 = w / f"feats_t{p.t_late}"
    clf_t0 = w / f"clf_t{p.t_main}.ckpt"
    clf_t50 = w / f"clf_t{p.t_late}.ckpt"
    eval_t0 = w / f"eval_t{p.t_main}"
    eval_t50 = w / f"eval_t{p.t_late}"
    dire_manifest = w / "dire_val.jsonl"
    feats_dire = w / "feats_dire"
    perm_metrics = w / "perm_metrics.json"

    st = _Stages(w, force)

    st.run(
        "dataset",
        lambda: _count_pngs(real_dir) >= p.n_real,
        lambda: _cli(
            [
                "toy", "dataset",
                "--out", str(real_dir),
                "--n", str(p.n_real),
                "--patch-size", str(p.patch_size),
                "--seed", str(p.seed_dataset),
            ],
            "dataset",
        ),
    )
    st.run(
        "real_manifest",
        real_manifest.exists,
        lambda: _cli(
            [
                "toy", "manifest",
                "--real", str(real_dir),
                "--split-fraction", str(p.split_fraction),
                "--seed", str(p.seed_split),
                "--out", str(real_manifest),
            ],
            "real_manifest",
        ),
    )
    st.run(
        "train_generator",
        model.exists,
        lambda: _cli(
            [
                "toy", "train",
                "--data", str(real_manifest),
                "--out", str(model),
                "--steps", str(p.train_steps),
                "--seed", str(p.seed_model),
                "--base-channels", str(p.base_channels),
                "--depth", str(p.depth),
                "--time-embedding-dim", str(p.time_embedding_dim),
                "--resolution", str(p.patch_size),
                "--T", str(p.schedule_T),
                "--batch-size", str(p.train_batch),
            ],
            "train_generator",
        ),
    )
    st.run(
        "generate",
        lambda: _count_pngs(fake_dir) >= p.n_fake,
        lambda: _cli(
            [
                "toy", "generate",
                "--model", str(model),
                "--out", str(fake_dir),
                "--n", str(p.n_fake),
                "--k", str(p.ddim_k),
                "--seed", str(p.seed_generate),
            ],
            "generate",
        ),
    )
    st.run(
        "manifest",
        manifest.exists,
        lambda: _cli(
            [
                "toy", "manifest",
                "--real", str(real_dir),
                "--fake", str(fake_dir),
                "--split-fraction", str(p.split_fraction),
                "--seed", str(p.seed_split),
                "--out", str(manifest),
            ],
            "manifest",
        ),
    )
    for t_value, out_dir in ((p.t_main, feats_t0), (p.t_late, feats_t50)):
        st.run(
            f"extract_t{t_value}",
            (out_dir / "report.json").exists,
            lambda t=t_value, o=out_dir: _cli(
                [
                    "extract",
                    "--manifest", str(manifest),
                    "--model", str(model),
                    "--method", "tsg",
                    "--t", str(t),
                    "--out", str(o),
                ],
                f"extract_t{t}",
            ),
        )
    for feats, ckpt in ((feats_t0, clf_t0), (feats_t50, clf_t50)):
        st.run(
            f"classifier_{ckpt.stem}",
            ckpt.exists,
            lambda f=feats, c=ckpt: _cli(
                [
                    "train",
                    "--features", str(f / "features.jsonl"),
                    "--out", str(c),
                    "--crop", str(p.patch_size),
                    "--epochs", str(p.classifier_epochs),
                    "--batch-size", str(p.classifier_batch),
                    "--seed", str(p.seed_classifier),
                ],
                f"classifier_{c.stem}",
            ),
        )
    for ckpt, feats, out_dir in (
        (clf_t0, feats_t0, eval_t0),
        (clf_t50, feats_t50, eval_t50),
    ):
        st.run(
            f"eval_{out_dir.name}",
            (out_dir / "metrics.json").exists,
            lambda c=ckpt, f=feats, o=out_dir: _cli(
                [
                    "eval",
                    "--ckpt", str(c),
                    "--features", str(f / "features.jsonl"),
                    "--split", "val",
                    "--out", str(o),
                ],
                f"eval_{o.name}",
            ),
        )

    def build_dire_manifest():
        m = load_manifest(manifest)
        picked: list[ManifestEntry] = []
        for label in ("real", "synthetic"):
            val = sorted(m.subset(label=label, split="val"), key=lambda e: e.path)
            if len(val) < p.dire_eval_per_class:
                raise ToolkitError(
                    f"need {p.dire_eval_per_class} val images per class, "
                    f"have {len(val)} for {label}"
                )
            picked.extend(val[: p.dire_eval_per_class])
        sub = DatasetManifest(entries=picked, provenance={"root": str(w)})
        save_manifest(sub, dire_manifest)

    st.run("dire_manifest", dire_manifest.exists, build_dire_manifest)
    st.run(
        "extract_dire",
        (feats_dire / "report.json").exists,
        lambda: _cli(
            [
                "extract",
                "--manifest", str(dire_manifest),
                "--model", str(model),
                "--method", "dire",
                "--ddim-steps", str(p.ddim_k),
                "--out", str(feats_dire),
            ],
            "extract_dire",
        ),
    )

    def build_permuted_control():
        from .classifier import ClassifierConfig, predict_many, train_classifier
        from .evaluation import accuracy

        fm = load_manifest(feats_t0 / "features.jsonl")
        train = fm.subset(split="train")
        val = fm.subset(split="val")
        rng = np.random.default_rng(p.seed_permutation)
        labels = [e.label for e in train]
        shuffled = [labels[i] for i in rng.permutation(len(labels))]
        entries = [
            ManifestEntry(path=e.path, label=lab, generator=e.generator, split="train")
            for e, lab in zip(train, shuffled)
        ] + val
        ckpt = train_classifier(
            DatasetManifest(entries=entries),
            ClassifierConfig(
                crop_size=p.patch_size,
                epochs=p.classifier_epochs,
                batch_size=p.classifier_batch,
                seed=p.seed_classifier,
            ),
        )
        probs = predict_many(ckpt, [e.path for e in val])
        preds = ["synthetic" if q >= 0.5 else "real" for q in probs]
        acc = accuracy(preds, [e.label for e in val])
        perm_metrics.write_text(
            json.dumps({"accuracy": acc, "n": len(val)}, indent=2, sort_keys=True)
        )

    st.run("permuted_control", perm_metrics.exists, build_permuted_control)

    return {
        "workdir": w,
        "real_dir": real_dir,
        "real_manifest": real_manifest,
        "model": model,
        "fake_dir": fake_dir,
        "manifest": manifest,
        "feats_t0": feats_t0,
        "feats_t50": feats_t50,
        "clf_t0": clf_t0,
        "clf_t50": clf_t50,
        "eval_t0": eval_t0 / "metrics.json",
        "eval_t50": eval_t50 / "metrics.json",
        "dire_manifest": dire_manifest,
        "feats_dire": feats_dire,
        "perm_metrics": perm_metrics,
        "timings": st.timings_path,
        "params": p,
    }
