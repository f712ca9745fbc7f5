"""Sweep guidance strength and temperatures on a reduced bench.

Used to pick the packaged defaults; rerun after any backbone change.

    python3 scripts/tune_defaults.py --pairs 6 --images 2 --etas 50,100,200,400
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

sys.path.insert(0, "src")

from spatialguide.backbone import denoise_with_responses
from spatialguide.evaluator import evaluate_image, visor_metrics
from spatialguide.experiment import ExperimentConfig, apply_loss_mask
from spatialguide.guidance import sample
from spatialguide.prompt import generate_benchmark


def mini_bench(config: ExperimentConfig, pairs: int, images: int) -> dict:
    triplets = generate_benchmark(
        config.backbone.vocabulary, pairs, config.benchmark.base_seed
    )
    schedule = config.schedule.build()
    judgments = []
    from spatialguide.evaluator import ImageJudgment

    for pi, triplet in enumerate(triplets):
        for ii in range(images):
            z, _ = sample(
                triplet,
                schedule,
                config.backbone,
                config.guidance,
                seed=config.benchmark.base_seed + ii,
            )
            outcome = evaluate_image(
                z.channel_mean(), triplet, config.backbone, config.detector
            )
            judgments.append(
                ImageJudgment(
                    prompt_index=pi,
                    image_index=ii,
                    both_present=outcome.both_present,
                    relation_correct=outcome.relation_correct,
                    t2i_score=outcome.t2i_score,
                )
            )
    m = visor_metrics(judgments, images)
    return {
        "oa": m.object_accuracy,
        "uncond": m.visor_uncond,
        "cond": m.visor_cond,
        "t2i": m.t2i_spatial,
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=6)
    ap.add_argument("--images", type=int, default=2)
    ap.add_argument("--etas", type=str, default="50,100,200,400,800")
    ap.add_argument("--masks", type=str, default="000,100,110,111")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()

    from spatialguide.experiment import load_config

    base = load_config(None, args.overrides)
    etas = [float(e) for e in args.etas.split(",")]
    masks = [tuple(c == "1" for c in m) for m in args.masks.split(",")]

    for eta in etas:
        for mask in masks:
            label = "".join("1" if f else "0" for f in mask)
            config = apply_loss_mask(
                replace(base, guidance=replace(base.guidance, eta=eta)), mask
            )
            t0 = time.monotonic()
            row = mini_bench(config, args.pairs, args.images)
            dt = time.monotonic() - t0
            print(
                f"eta={eta:7.1f} mask={label} oa={row['oa']:6.2f} "
                f"uncond={row['uncond']:6.2f} cond={row['cond']:6.2f} "
                f"t2i={row['t2i']:5.3f}  ({dt:.0f}s)"
            )


if __name__ == "__main__":
    main()
