"""Closed-loop probe: which object pairs produce correct relations when guided.

Runs the real sampler on chosen pairs x relations x seeds and reports
per-pair correctness with the current guidance settings. Fast feedback for
vocabulary and guidance tuning.
"""

from __future__ import annotations

import argparse
import itertools
import sys
import time

sys.path.insert(0, "src")

from spatialguide.backbone import BackboneConfig, ScheduleConfig
from spatialguide.evaluator import DetectorConfig, evaluate_image
from spatialguide.guidance import GuidanceConfig, sample
from spatialguide.losses import LossConfig
from spatialguide.prompt import PromptTriplet, Relation, VocabEntry, Vocabulary, render_prompt

LADDER = [
    (3, 6.0),
    (5, 4.8),
    (7, 4.3),
    (9, 4.05),
    (11, 3.75),
    (13, 3.65),
    (15, 3.6),
    (17, 3.6),
]


def ladder_vocab(entries) -> Vocabulary:
    return Vocabulary(
        tuple(VocabEntry(f"obj{side}x{int(round(sig * 100)):03d}", side, sig) for side, sig in entries)
    )


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--eta", type=float, default=200.0)
    ap.add_argument("--gamma", type=float, default=7.5)
    ap.add_argument("--normalize", action="store_true")
    ap.add_argument("--clip", type=float, default=None)
    ap.add_argument("--from-step", type=int, default=1)
    ap.add_argument("--to-step", type=int, default=None)
    ap.add_argument("--seeds", type=int, default=2)
    ap.add_argument("--pairs", type=int, default=0, help="0 = all pairs")
    ap.add_argument("--relations", default="left,above")
    ap.add_argument("--ls", type=float, default=0.5)
    ap.add_argument("--lp", type=float, default=1.0)
    ap.add_argument("--lb", type=float, default=0.5)
    args = ap.parse_args()

    vocab = ladder_vocab(LADDER)
    backbone = BackboneConfig(vocabulary=vocab)
    schedule = ScheduleConfig().build()
    loss = LossConfig(lambda_spatial=args.ls, lambda_presence=args.lp, lambda_balance=args.lb)
    guidance = GuidanceConfig(
        gamma=args.gamma,
        eta=args.eta,
        loss=loss,
        guide_from_step=args.from_step,
        guide_to_step=args.to_step,
        normalize_gradient=args.normalize,
        clip_gradient_norm=args.clip,
    )
    detector = DetectorConfig()
    relations = [Relation(r) for r in args.relations.split(",")]

    ids = vocab.identifiers()
    pairs = list(itertools.combinations(ids, 2))
    if args.pairs:
        pairs = pairs[: args.pairs]
    t0 = time.time()
    total_ok = total = both = 0
    lines = []
    for a, b in pairs:
        ok = n = 0
        for rel in relations:
            trip = PromptTriplet(a, rel, b, render_prompt(a, rel, b, vocab))
            for seed in range(args.seeds):
                latent, _ = sample(trip, schedule, backbone, guidance, seed=1000 + seed)
                outcome = evaluate_image(latent.channel_mean(), trip, backbone, detector)
                n += 1
                ok += int(outcome.relation_correct)
                both += int(outcome.both_present)
        total_ok += ok
        total += n
        lines.append(f"  {a:12s} {b:12s} {ok}/{n}")
    for line in lines:
        print(line)
    print(
        f"\ncorrect {total_ok}/{total} = {100*total_ok/total:.1f}%  present {both}/{total}"
        f"  ({time.time()-t0:.0f}s, eta={args.eta} norm={args.normalize} clip={args.clip}"
        f" window=[{args.from_step},{args.to_step}] l=({args.ls},{args.lp},{args.lb}))"
    )


if __name__ == "__main__":
    main()
