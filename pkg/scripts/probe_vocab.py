"""Probe a candidate vocabulary's pair dynamics under the real sampler.

Reads a vocabulary as a JSON list of [identifier, side, sigma], runs every
(unordered) pair through the guided sampler for a handful of relations and
seeds, and reports per-pair accuracy plus aggregate OA / conditional accuracy
per loss row. Static pair analytics (energy, cosine, safety margin, drive)
print alongside so dead pairs can be traced to their cause.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from spatialguide.backbone import BackboneConfig, ScheduleConfig, template_self_response
from spatialguide.evaluator import DetectorConfig, detect_object, classify_relation
from spatialguide.guidance import GuidanceConfig, sample
from spatialguide.grid import gaussian_template
from spatialguide.losses import LossConfig
from spatialguide.prompt import PromptTriplet, Relation, VocabEntry, Vocabulary, render_prompt

RELATIONS = [Relation.LEFT, Relation.RIGHT, Relation.ABOVE, Relation.BELOW]


def load_vocab(path: str) -> Vocabulary:
    spec = json.loads(Path(path).read_text())
    return Vocabulary(tuple(VocabEntry(str(n), int(s), float(g)) for n, s, g in spec))


def pair_analytics(vocab: Vocabulary) -> dict[tuple[str, str], dict[str, float]]:
    grids = {e.identifier: gaussian_template(e.template_side, e.template_sigma) for e in vocab.entries}
    out = {}
    for a, b in itertools.combinations([e.identifier for e in vocab.entries], 2):
        ta, tb = grids[a].data, grids[b].data
        sa, sb = ta.shape[0], tb.shape[0]
        big, small = (ta, tb) if sa >= sb else (tb, ta)
        pad = (big.shape[0] - small.shape[0]) // 2
        emb = np.zeros_like(big)
        emb[pad : pad + small.shape[0], pad : pad + small.shape[0]] = small
        ea, eb = float((ta * ta).sum()), float((tb * tb).sum())
        cross = float((big * emb).sum())
        cos = cross / np.sqrt(ea * eb)
        ratio = min(ea, eb) / max(ea, eb)
        out[(a, b)] = {
            "ea": ea,
            "eb": eb,
            "cos": cos,
            "margin": ratio - cos * cos,
            "drive": ea + eb - 2.0 * cross,
        }
    return out


def run_row(vocab, pairs, relations, seeds, guidance, backbone, schedule, detector):
    both = 0
    correct_given_both = 0
    total = 0
    per_pair = {}
    for a, b in pairs:
        ok = 0
        present = 0
        n = 0
        for rel in relations:
            for seed in seeds:
                trip = PromptTriplet(a, rel, b, render_prompt(a, rel, b, vocab))
                latent, _ = sample(trip, schedule, backbone, guidance, seed=7000 + seed)
                image = latent.channel_mean()
                da = detect_object(image, a, backbone, detector)
                db = detect_object(image, b, backbone, detector)
                n += 1
                total += 1
                if da.present and db.present:
                    present += 1
                    both += 1
                    if classify_relation(da.center, db.center) == rel:
                        ok += 1
                        correct_given_both += 1
        per_pair[(a, b)] = (ok, present, n)
    oa = 100.0 * both / total
    cond = 100.0 * correct_given_both / both if both else 0.0
    uncond = 100.0 * correct_given_both / total
    return per_pair, oa, cond, uncond


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("vocab_json")
    ap.add_argument("--eta", type=float, default=2000.0)
    ap.add_argument("--gamma", type=float, default=7.5)
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--relations", type=int, default=2, help="first k of L,R,A,B")
    ap.add_argument("--rows", default="s", help="comma list: n(one),s(patial),p(resence),f(ull)")
    ap.add_argument("--ls", type=float, default=0.5)
    ap.add_argument("--lp", type=float, default=1.0)
    ap.add_argument("--lb", type=float, default=0.5)
    ap.add_argument("--max-pairs", type=int, default=0)
    ap.add_argument("--quiet-pairs", action="store_true")
    args = ap.parse_args()

    vocab = load_vocab(args.vocab_json)
    backbone = BackboneConfig(vocabulary=vocab)
    schedule = ScheduleConfig().build()
    detector = DetectorConfig()
    analytics = pair_analytics(vocab)

    pairs = list(itertools.combinations([e.identifier for e in vocab.entries], 2))
    if args.max_pairs:
        pairs = pairs[: args.max_pairs]
    relations = RELATIONS[: args.relations]
    seeds = list(range(args.seeds))

    def loss_cfg(ls: float, lp: float, lb: float) -> LossConfig:
        return LossConfig(lambda_spatial=ls, lambda_presence=lp, lambda_balance=lb)

    row_losses = {
        "n": ("none", loss_cfg(0.0, 0.0, 0.0), 0.0),
        "s": ("spatial", loss_cfg(args.ls, 0.0, 0.0), args.eta),
        "p": ("spat+pres", loss_cfg(args.ls, args.lp, 0.0), args.eta),
        "f": ("full", loss_cfg(args.ls, args.lp, args.lb), args.eta),
    }

    results = {}
    for key in args.rows.split(","):
        name, loss, eta = row_losses[key]
        guidance = GuidanceConfig(gamma=args.gamma, eta=eta, loss=loss)
        t0 = time.time()
        per_pair, oa, cond, uncond = run_row(
            vocab, pairs, relations, seeds, guidance, backbone, schedule, detector
        )
        dt = time.time() - t0
        results[key] = per_pair
        print(f"[{name:9s}] OA {oa:5.1f}  cond {cond:5.1f}  uncond {uncond:5.1f}   ({dt:.0f}s)")

    if not args.quiet_pairs:
        print()
        header = "pair".ljust(26) + "  " + "  ".join(k.rjust(9) for k in results)
        print(header + "     cos   margin   drive    E_a    E_b")
        for a, b in pairs:
            cells = []
            for key, per_pair in results.items():
                ok, present, n = per_pair[(a, b)]
                cells.append(f"{ok}/{present}/{n}".rjust(9))
            st = analytics[(a, b)]
            print(
                f"{a:>12s} {b:>12s}  "
                + "  ".join(cells)
                + f"  {st['cos']:6.3f}  {st['margin']:+7.3f}  {st['drive']:6.1f}  {st['ea']:5.1f}  {st['eb']:5.1f}"
            )


if __name__ == "__main__":
    main()
