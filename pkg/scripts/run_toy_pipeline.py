#!/usr/bin/env python3
"""Run the full toy closed loop and print the headline numbers.

Builds (or reuses) every artifact under --workdir: the natural-patch real
set, the toy noise predictor, generated fakes, one-pass features at two
timesteps, classifiers, reconstruction-error maps for the direction check,
and the label-permutation control. Re-running skips completed stages.

    python scripts/run_toy_pipeline.py --workdir runs/toyloop
    python scripts/run_toy_pipeline.py --workdir runs/smoke --scale smoke
"""

import argparse
import json
from pathlib import Path

from tsgdetect.pipeline import ToyLoopParams, run_closed_loop

SCALES = {
    # acceptance scale: >=4k real, >=20k steps, >=1k fakes
    "full": ToyLoopParams(),
    # minutes-scale sanity run; numbers below are NOT acceptance-grade
    "smoke": ToyLoopParams(
        n_real=256,
        n_fake=256,
        train_steps=800,
        classifier_epochs=3,
        dire_eval_per_class=25,
    ),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--scale", choices=sorted(SCALES), default="full")
    ap.add_argument("--force", action="store_true", help="rebuild every stage")
    args = ap.parse_args()

    params = SCALES[args.scale]
    arts = run_closed_loop(Path(args.workdir), params, force=args.force)

    t0 = json.loads(arts["eval_t0"].read_text())
    t50 = json.loads(arts["eval_t50"].read_text())
    perm = json.loads(arts["perm_metrics"].read_text())
    timings = json.loads(arts["timings"].read_text())

    print(f"\n=== toy closed loop ({args.scale}) @ {arts['workdir']} ===")
    print(f"one-pass t={params.t_main}:  acc {t0['accuracy']:.4f}  auc {t0['auc']:.4f}")
    print(f"one-pass t={params.t_late}: acc {t50['accuracy']:.4f}  auc {t50['auc']:.4f}")
    print(f"label-permuted control: acc {perm['accuracy']:.4f} (expect ~0.5)")
    total = sum(timings.values())
    print(f"stage timings ({total:.0f}s total when built cold):")
    for stage, secs in sorted(timings.items()):
        print(f"  {stage:24s} {secs:8.1f}s")


if __name__ == "__main__":
    main()
