"""Evaluation protocol: accuracy matrices, summary rows, timing benchmark.

CSV matrix format (normative): first row is the test tags, first column the
train tags, cells are accuracies with 4 decimals. Deterministic formatting,
so re-emitting the same matrix reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ClassifierCheckpoint, predict_many
from .datasets import DatasetManifest
from .errors import DataError, ModelError
from .features import METHOD_DIRE, METHOD_TSG, preprocess
from .predictor import CallCounter
from .schedule import ddim_denoise, ddim_invert


def accuracy(predictions, labels) -> float:
    """Fraction of exact label matches."""
    preds = list(predictions)
    labs = list(labels)
    if not preds:
        raise DataError("cannot score an empty prediction set")
    if len(preds) != len(labs):
        raise DataError(f"length mismatch: {len(preds)} predictions vs {len(labs)} labels")
    return sum(p == l for p, l in zip(preds, labs)) / len(preds)


def auc_score(probs, labels01) -> float:
    """Rank-based area under the ROC curve (ties get half credit)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels01 = np.asarray(labels01)
    if probs.shape != labels01.shape or probs.ndim != 1:
        raise DataError("probs and labels must be equal-length 1-D sequences")
    n_pos = int((labels01 == 1).sum())
    n_neg = int((labels01 == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")
    uniq, inverse, counts = np.unique(probs, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    avg_ranks = starts + (counts + 1) / 2.0
    ranks = avg_ranks[inverse]
    pos_rank_sum = ranks[labels01 == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalMatrix:
    train_tags: list[str]
    test_tags: list[str]
    acc: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        shape = (len(self.train_tags), len(self.test_tags))
        if self.acc.shape != shape or self.counts.shape != shape:
            raise DataError(
                f"matrix shape {self.acc.shape} does not match tags {shape}"
            )
        if np.any(self.acc < 0) or np.any(self.acc > 1):
            raise DataError("accuracies must lie in [0, 1]")

    def cell(self, train_tag: str, test_tag: str) -> float:
        return float(
            self.acc[self.train_tags.index(train_tag), self.test_tags.index(test_tag)]
        )

    def to_json(self) -> dict:
        return {
            "train_tags": self.train_tags,
            "test_tags": self.test_tags,
            "accuracy": self.acc.tolist(),
            "counts": self.counts.tolist(),
        }

    @staticmethod
    def from_json(d: dict) -> "EvalMatrix":
        return EvalMatrix(
            train_tags=list(d["train_tags"]),
            test_tags=list(d["test_tags"]),
            acc=np.asarray(d["accuracy"]),
            counts=np.asarray(d["counts"]),
        )


@dataclass
class TimingReport:
    method: str
    n_images: int
    batch_size: int
    wall_seconds: float
    predictor_calls: int
    device: str = "cpu"
    k: int | None = None

    def __post_init__(self):
        expected = self.n_images if self.method == METHOD_TSG else 2 * (self.k or 0) * self.n_images
        if self.predictor_calls != expected:
            raise ModelError(
                f"predictor call count {self.predictor_calls} violates the "
                f"structural formula ({expected}) for method {self.method}"
            )

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "n_images": self.n_images,
            "batch_size": self.batch_size,
            "wall_seconds": self.wall_seconds,
            "predictor_calls": self.predictor_calls,
            "device": self.device,
            "k": self.k,
        }


def cross_validate(
    ckpts: dict[str, ClassifierCheckpoint],
    test_sets: dict[str, DatasetManifest],
) -> EvalMatrix:
    """acc[i][j]: checkpoint trained on tag i scored on test features of tag j."""
    if not ckpts or not test_sets:
        raise DataError("cross-validation needs at least one checkpoint and test set")
    train_tags = list(ckpts)
    test_tags = list(test_sets)
    cached = {}
    for tag, manifest in test_sets.items():
        entries = manifest.entries
        if not entries:
            raise DataError(f"test set {tag!r} has no feature entries")
        cached[tag] = (
            [e.path for e in entries],
            np.asarray([1 if e.label == "synthetic" else 0 for e in entries]),
        )
    acc = np.zeros((len(train_tags), len(test_tags)))
    counts = np.zeros_like(acc, dtype=np.int64)
    for i, ttag in enumerate(train_tags):
        for j, stag in enumerate(test_tags):
            paths, labels = cached[stag]
            probs = predict_many(ckpts[ttag], paths)
            preds = (probs >= 0.5).astype(int)
            acc[i, j] = accuracy(preds.tolist(), labels.tolist())
            counts[i, j] = len(paths)
    return EvalMatrix(train_tags=train_tags, test_tags=test_tags, acc=acc, counts=counts)


@dataclass
class TableSummary:
    groups: dict[str, float]
    average: float

    def row(self) -> str:
        cells = [f"{v * 100:.1f}" for v in self.groups.values()]
        cells.append(f"{self.average * 100:.1f}")
        return " / ".join(cells)


def summarize_table(matrix: EvalMatrix, grouping: dict[str, list[str]]) -> TableSummary:
    """Group means over per-test-tag column averages, plus their overall mean.

    A test tag's accuracy is the mean over all train-tag classifiers; the
    summary average is the unweighted mean of the group values.
    """
    known = set(matrix.test_tags)
    col_mean = {tag: float(matrix.acc[:, j].mean()) for j, tag in enumerate(matrix.test_tags)}
    groups = {}
    for name, tags in grouping.items():
        if not tags:
            raise DataError(f"group {name!r} is empty")
        unknown = [t for t in tags if t not in known]
        if unknown:
            raise DataError(f"unknown test tags in group {name!r}: {unknown}")
        groups[name] = float(np.mean([col_mean[t] for t in tags]))
    return TableSummary(groups=groups, average=float(np.mean(list(groups.values()))))


def timing_benchmark(
    method: str,
    h,
    images,
    batch_size: int,
    k: int = 20,
    t: int = 0,
    min_images: int = 100,
) -> TimingReport:
    """Wall time to extract features for the full image set.

    Images are pre-decoded so the timing isolates predictor work; a warm-up
    pass runs before the clock starts. The call counter is verified against
    the structural formula afterwards.
    """
    if method not in (METHOD_TSG, METHOD_DIRE):
        raise DataError(f"method must be '{METHOD_TSG}' or '{METHOD_DIRE}'")
    if batch_size < 1:
        raise DataError("batch size must be positive")
    paths = list(images)
    if len(paths) < min_images:
        raise DataError(f"benchmark needs >= {min_images} images, got {len(paths)}")
    decoded = np.stack([preprocess(p, h.resolution) for p in paths])
    n = len(decoded)

    h.predict_noise(decoded[:1], t if method == METHOD_TSG else 0)  # warm-up

    counter = CallCounter(h)
    sched = getattr(h, "schedule", None)
    if method == METHOD_DIRE and sched is None:
        raise ModelError("reconstruction benchmark needs the handle's schedule")
    t0 = time.time()
    for lo in range(0, n, batch_size):
        batch = decoded[lo : lo + batch_size]
        if method == METHOD_TSG:
            counter.predict_noise(batch, t)
        else:
            latent = ddim_invert(batch, k, counter, sched)
            recon = ddim_denoise(latent, k, counter, sched)
            np.abs(batch - recon)
    wall = time.time() - t0
    return TimingReport(
        method=method,
        n_images=n,
        batch_size=batch_size,
        wall_seconds=wall,
        predictor_calls=counter.calls,
        device="cpu",
        k=k if method == METHOD_DIRE else None,
    )


def emit_reports(
    matrix: EvalMatrix,
    out_dir: str | os.PathLike,
    name: str = "crossval",
    meta: dict | None = None,
) -> dict[str, str]:
    """Write the matrix as CSV, JSON (with metadata), and a heatmap PNG."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"report directory {out} is not writable")

    csv_path = out / f"{name}.csv"
    lines = ["," + ",".join(matrix.test_tags)]
    for i, tag in enumerate(matrix.train_tags):
        cells = ",".join(f"{v:.4f}" for v in matrix.acc[i])
        lines.append(f"{tag},{cells}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    json_path = out / f"{name}.json"
    payload = matrix.to_json()
    payload["meta"] = meta or {}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")

    png_path = out / f"{name}.png"
    _plot_matrix(matrix, png_path)
    return {"csv": str(csv_path), "json": str(json_path), "png": str(png_path)}


def _plot_matrix(matrix: EvalMatrix, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 * len(matrix.test_tags) + 2, 1.0 * len(matrix.train_tags) + 2))
    im = ax.imshow(matrix.acc, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(matrix.test_tags)), matrix.test_tags, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.train_tags)), matrix.train_tags)
    ax.set_xlabel("test subset")
    ax.set_ylabel("train subset")
    for i in range(len(matrix.train_tags)):
        for j in range(len(matrix.test_tags)):
            val = matrix.acc[i, j]
            ax.text(
                j,
                i,
                f"{val:.2f}",
                ha="center",
                va="center",
                color="white" if val < 0.6 else "black",
                fontsize=9,
            )
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
