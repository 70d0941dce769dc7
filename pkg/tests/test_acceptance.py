"""Acceptance suite: one test per criterion, each printing a PASS line.

The closed-loop criteria share one session-scoped artifact build (toy
generator trained on natural 32x32 patches, generated fakes, features,
classifiers). Set TSGDETECT_CACHE to a directory to reuse artifacts across
sessions; stages are seeded, so cached artifacts equal recomputed ones.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
lines. The cold closed-loop build takes roughly 40 minutes on one CPU core.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from tsgdetect.classifier import load_classifier, predict, predict_many
from tsgdetect.datasets import (
    DatasetManifest,
    UnbiasedFilterConfig,
    filter_unbiased,
    load_manifest,
    save_manifest,
    scan_genimage_root,
)
from tsgdetect.errors import DataError
from tsgdetect.evaluation import EvalMatrix, cross_validate, emit_reports, timing_benchmark
from tsgdetect.features import load_feature, minmax01, save_feature
from tsgdetect.gradcam import gradcam, run_to_logits
from tsgdetect.jpeg import estimate_jpeg_quality
from tsgdetect.pipeline import ToyLoopParams, run_closed_loop
from tsgdetect.predictor import load_pretrained
from tsgdetect.schedule import NoiseSchedule, forward_marginal, forward_step

PARAMS = ToyLoopParams()


def _pass(name):
    print(f"\nACCEPTANCE {name}: PASS")


@pytest.fixture(scope="session")
def toy_loop(tmp_path_factory):
    cache = os.environ.get("TSGDETECT_CACHE")
    workdir = Path(cache) if cache else tmp_path_factory.mktemp("toyloop")
    arts = run_closed_loop(workdir, PARAMS)
    arts["timings_data"] = json.loads(arts["timings"].read_text())
    return arts


# ---------------------------------------------------------------- criterion 1


def test_schedule_consistency():
    """Stepwise composition reproduces the one-jump marginal: closed form to
    1e-12, Monte-Carlo mean/variance within 4 standard errors, under 30 s."""
    started = time.time()
    rng = np.random.default_rng(2024)
    sched = NoiseSchedule(T=50, betas=rng.uniform(0.001, 0.08, size=50))

    mean_coeff, var = math.sqrt(sched.alpha_bars[0]), 1.0 - sched.alpha_bars[0]
    for t in range(1, 50):
        ratio = sched.alpha_bars[t] / sched.alpha_bars[t - 1]
        mean_coeff *= math.sqrt(ratio)
        var = ratio * var + (1.0 - ratio)
    assert abs(mean_coeff - math.sqrt(sched.alpha_bars[49])) < 1e-12
    assert abs(var - (1.0 - sched.alpha_bars[49])) < 1e-12

    n = 100_000
    x0 = rng.uniform(-1, 1, (4, 4, 1)).astype(np.float32)
    x = forward_marginal(
        np.broadcast_to(x0, (n, 4, 4, 1)).astype(np.float32),
        0,
        rng.standard_normal((n, 4, 4, 1)).astype(np.float32),
        sched,
    )
    for t in range(1, 50):
        x = forward_step(x, t, rng.standard_normal(x.shape).astype(np.float32), sched)
    target_var = 1.0 - sched.alpha_bars[49]
    target_mean = math.sqrt(sched.alpha_bars[49]) * x0.astype(np.float64)
    se_mean = math.sqrt(target_var / n)
    se_var = target_var * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(x.mean(axis=0, dtype=np.float64) - target_mean) < 4 * se_mean)
    assert np.all(np.abs(x.var(axis=0, ddof=1, dtype=np.float64) - target_var) < 4 * se_var)

    elapsed = time.time() - started
    assert elapsed < 30, f"schedule consistency took {elapsed:.1f}s"
    _pass("schedule-consistency")


# ---------------------------------------------------------------- criterion 2


@pytest.mark.slow
def test_structural_speed_claim(toy_loop):
    """One predictor evaluation per image for one-pass extraction, 40 for the
    k=20 reconstruction baseline; wall-time ratio at least 5x."""
    started = time.time()
    handle = load_pretrained(toy_loop["model"])
    manifest = load_manifest(toy_loop["manifest"])
    images = [e.path for e in manifest.subset(label="real", split="val")][:100]
    assert len(images) == 100

    tsg = timing_benchmark("tsg", handle, images, batch_size=5, t=PARAMS.t_main)
    dire = timing_benchmark("dire", handle, images, batch_size=50, k=20)
    assert tsg.predictor_calls == 100
    assert dire.predictor_calls == 4000
    ratio = dire.wall_seconds / tsg.wall_seconds
    assert ratio >= 5.0, f"wall-time ratio only {ratio:.2f}x"

    elapsed = time.time() - started
    assert elapsed < 300, f"speed benchmark took {elapsed:.1f}s"
    print(f"\n  tsg {tsg.wall_seconds:.2f}s vs dire {dire.wall_seconds:.2f}s ({ratio:.1f}x)")
    _pass("structural-speed-claim")


# ---------------------------------------------------------------- criterion 3


@pytest.mark.slow
def test_dire_hypothesis_direction(toy_loop):
    """Reconstruction error is lower on generated images than on held-out
    real images, with a one-sided 95% bootstrap on the mean difference."""
    fm = load_manifest(Path(toy_loop["feats_dire"]) / "features.jsonl")
    errors = {"real": [], "synthetic": []}
    for e in fm.entries:
        errors[e.label].append(float(np.mean(load_feature(e.path).data)))
    real = np.asarray(errors["real"])
    fake = np.asarray(errors["synthetic"])
    assert len(real) >= 200 and len(fake) >= 200

    assert fake.mean() < real.mean(), (
        f"direction violated: fake {fake.mean():.5f} vs real {real.mean():.5f}"
    )
    rng = np.random.default_rng(5150)
    diffs = np.empty(10_000)
    for i in range(len(diffs)):
        r = rng.choice(real, size=len(real), replace=True).mean()
        f = rng.choice(fake, size=len(fake), replace=True).mean()
        diffs[i] = r - f
    lower_5pct = np.quantile(diffs, 0.05)
    assert lower_5pct > 0, f"bootstrap 5th percentile {lower_5pct:.6f} not above 0"

    timings = toy_loop["timings_data"]
    assert timings["extract_dire"] < 1200, "reconstruction stage exceeded 20 min"
    print(
        f"\n  dire mean error: real {real.mean():.5f} fake {fake.mean():.5f} "
        f"(bootstrap 5th pct {lower_5pct:.6f})"
    )
    _pass("dire-hypothesis-direction")


# ---------------------------------------------------------------- criterion 4


@pytest.mark.slow
def test_closed_loop_detection(toy_loop):
    """Toy generator (>=4k reals, >=20k steps, >=1k fakes); one-pass t=0
    features reach val accuracy >= 0.85 and AUC >= 0.90; a label-permuted
    control stays at chance."""
    assert PARAMS.n_real >= 4000 and PARAMS.train_steps >= 20_000 and PARAMS.n_fake >= 1000
    assert len(list(Path(toy_loop["real_dir"]).glob("*.png"))) >= 4000
    assert len(list(Path(toy_loop["fake_dir"]).glob("*.png"))) >= 1000
    train_prov = json.loads(
        (Path(toy_loop["model"]).parent / (Path(toy_loop["model"]).name + ".provenance.json")).read_text()
    )
    assert train_prov["config"]["steps"] >= 20_000

    metrics = json.loads(toy_loop["eval_t0"].read_text())
    assert metrics["accuracy"] >= 0.85, f"val accuracy {metrics['accuracy']:.4f} < 0.85"
    assert metrics["auc"] >= 0.90, f"val AUC {metrics['auc']:.4f} < 0.90"

    perm = json.loads(toy_loop["perm_metrics"].read_text())
    assert 0.40 <= perm["accuracy"] <= 0.60, (
        f"label-permuted control at {perm['accuracy']:.4f}, outside [0.40, 0.60]"
    )

    timings = toy_loop["timings_data"]
    closed_loop_stages = [
        "dataset", "real_manifest", "train_generator", "generate", "manifest",
        f"extract_t{PARAMS.t_main}", f"classifier_clf_t{PARAMS.t_main}",
        f"eval_eval_t{PARAMS.t_main}", "permuted_control",
    ]
    total = sum(timings[s] for s in closed_loop_stages)
    assert total < 7200, f"closed loop took {total:.0f}s when built"
    print(
        f"\n  acc {metrics['accuracy']:.4f} auc {metrics['auc']:.4f} "
        f"permuted {perm['accuracy']:.4f} (cold build {total:.0f}s)"
    )
    _pass("closed-loop-detection")


# ---------------------------------------------------------------- criterion 5


@pytest.mark.slow
def test_timestep_ablation_direction(toy_loop):
    """Accuracy at t=0 is at least the late-timestep accuracy minus 2 points."""
    acc_t0 = json.loads(toy_loop["eval_t0"].read_text())["accuracy"]
    acc_t50 = json.loads(toy_loop["eval_t50"].read_text())["accuracy"]
    assert acc_t0 >= acc_t50 - 0.02, (
        f"ordering violated: t={PARAMS.t_main} acc {acc_t0:.4f} vs "
        f"t={PARAMS.t_late} acc {acc_t50:.4f}"
    )
    print(f"\n  acc(t={PARAMS.t_main}) {acc_t0:.4f} vs acc(t={PARAMS.t_late}) {acc_t50:.4f}")
    _pass("timestep-ablation-direction")


# ---------------------------------------------------------------- criterion 6


def test_jpeg_unbiased_builder(tmp_path):
    """Encode 20 JPEGs per class per quality in {50,75,90,96,100}; quality
    estimation round-trips within 1; the min-quality-96 filter retains
    exactly the q in {96,100} files, balanced."""
    started = time.time()
    rng = np.random.default_rng(7)
    qualities = (50, 75, 90, 96, 100)
    root = tmp_path / "root"
    expected_kept = set()
    for cls in ("ai", "nature"):
        for q in qualities:
            for i in range(20):
                p = root / "gen" / "train" / cls / f"q{q}_{i:02d}.jpg"
                p.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(
                    rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
                ).save(p, "JPEG", quality=q)
                if q >= 96:
                    expected_kept.add(str(p))

    manifest = scan_genimage_root(root)
    assert len(manifest.entries) == 200
    for e in manifest.entries:
        encoded_q = int(Path(e.path).name.split("_")[0][1:])
        assert abs(e.jpeg_quality - encoded_q) <= 1
        assert estimate_jpeg_quality(e.path) == e.jpeg_quality

    filtered = filter_unbiased(manifest, UnbiasedFilterConfig(min_quality=96))
    assert {e.path for e in filtered.entries} == expected_kept
    counts = filtered.counts()
    assert counts["real/train"] == counts["synthetic/train"] == 40

    elapsed = time.time() - started
    assert elapsed < 60, f"unbiased builder took {elapsed:.1f}s"
    _pass("jpeg-unbiased-builder")


# ---------------------------------------------------------------- criterion 7


@pytest.mark.slow
def test_gradcam_correctness(toy_loop):
    """Analytic gradients at the target layer match central finite
    differences within 1e-3 relative error on 10 random probes; heatmaps are
    nonnegative and max-normalized on 100 random features."""
    started = time.time()
    ckpt = load_classifier(toy_loop["clf_t0"])

    model = ckpt.model.double()
    rng = np.random.default_rng(99)
    data = rng.standard_normal((PARAMS.patch_size, PARAMS.patch_size, 3)).astype(np.float32)
    x = torch.from_numpy(minmax01(data)).permute(2, 0, 1)[None].double()
    with torch.enable_grad():
        logits, acts = run_to_logits(model, x, "block3")
        (grad,) = torch.autograd.grad(logits[0, 1], acts)
    hstep = 1e-5
    for _ in range(10):
        v = torch.from_numpy(rng.standard_normal(tuple(acts.shape)))
        v = v / v.norm()
        with torch.no_grad():
            plus, _ = run_to_logits(model, x, "block3", replace_activations=acts + hstep * v)
            minus, _ = run_to_logits(model, x, "block3", replace_activations=acts - hstep * v)
        fd = float((plus[0, 1] - minus[0, 1]) / (2 * hstep))
        an = float((grad * v).sum())
        assert abs(fd - an) / max(abs(an), 1e-12) <= 1e-3

    ckpt_f32 = load_classifier(toy_loop["clf_t0"])
    degenerate = 0
    for seed in range(100):
        feat = np.random.default_rng(seed).standard_normal(
            (PARAMS.patch_size, PARAMS.patch_size, 3)
        ).astype(np.float32)
        hm = gradcam(ckpt_f32, feat, target_class="synthetic")
        assert hm.data.min() >= 0.0
        if hm.degenerate:
            degenerate += 1
            assert hm.data.max() == 0.0
        else:
            assert hm.data.max() == 1.0
    elapsed = time.time() - started
    assert elapsed < 300, f"gradcam checks took {elapsed:.1f}s"
    print(f"\n  10 probes within 1e-3; {100 - degenerate}/100 maps non-degenerate")
    _pass("gradcam-correctness")


# ---------------------------------------------------------------- criterion 8


@pytest.mark.slow
def test_format_round_trips(toy_loop, tmp_path):
    """Feature files, manifests, both checkpoint kinds, and matrix CSV/JSON
    round-trip bit-stably."""
    started = time.time()

    # feature file: load -> save -> identical bytes and data
    fm = load_manifest(Path(toy_loop["feats_t0"]) / "features.jsonl")
    feat_path = Path(fm.entries[0].path)
    feat = load_feature(feat_path)
    save_feature(feat, tmp_path / "copy.tsgfeat")
    assert (tmp_path / "copy.tsgfeat").read_bytes() == feat_path.read_bytes()
    np.testing.assert_array_equal(load_feature(tmp_path / "copy.tsgfeat").data, feat.data)

    # manifest: load -> save -> identical bytes
    man_path = Path(toy_loop["manifest"])
    m = load_manifest(man_path)
    save_manifest(m, tmp_path / "copy.jsonl")
    assert (tmp_path / "copy.jsonl").read_bytes() == man_path.read_bytes()

    # predictor checkpoint: reload and compare predictions bit for bit
    h1 = load_pretrained(toy_loop["model"])
    h1.save(tmp_path / "model.ckpt")
    h2 = load_pretrained(tmp_path / "model.ckpt")
    probe = np.random.default_rng(3).uniform(-1, 1, (2, *h1.resolution, 3)).astype(np.float32)
    np.testing.assert_array_equal(h1.predict_noise(probe, 0), h2.predict_noise(probe, 0))
    assert h1.metadata() == h2.metadata()

    # classifier checkpoint: reload and compare probabilities
    c1 = load_classifier(toy_loop["clf_t0"])
    c1.save(tmp_path / "clf.ckpt")
    c2 = load_classifier(tmp_path / "clf.ckpt")
    r1 = predict(c1, feat)
    r2 = predict(c2, feat)
    assert r1 == r2

    # matrix: CSV re-emit byte-identical, JSON round-trips to equal values
    val_entries = [e for e in fm.entries if e.split == "val"][:60]
    tests = {"toy": DatasetManifest(entries=val_entries)}
    matrix = cross_validate({"toy": c1}, tests)
    emit_reports(matrix, tmp_path / "r1", name="m")
    emit_reports(matrix, tmp_path / "r2", name="m")
    assert (tmp_path / "r1" / "m.csv").read_bytes() == (tmp_path / "r2" / "m.csv").read_bytes()
    restored = EvalMatrix.from_json(json.loads((tmp_path / "r1" / "m.json").read_text()))
    np.testing.assert_array_equal(restored.acc, matrix.acc)
    np.testing.assert_array_equal(restored.counts, matrix.counts)

    elapsed = time.time() - started
    assert elapsed < 60, f"format round-trips took {elapsed:.1f}s"
    _pass("format-round-trips")
