"""Anneal a 16-entry template set maximizing live pairs.

live pair: safety = min(E ratio) - cos^2 > eps  (race keeps blobs apart)
           drive  = ||T_i - T_j||^2 > dmin      (guidance can separate them)
"""

from __future__ import annotations

import itertools
import random
import sys

import numpy as np

sys.path.insert(0, "src")

from spatialguide.grid import gaussian_template_array

SAFETY_EPS = 0.003
DRIVE_MIN = 0.20


def embedded(template: np.ndarray, side: int) -> np.ndarray:
    out = np.zeros((side, side))
    s = template.shape[0]
    off = (side - s) // 2
    out[off : off + s, off : off + s] = template
    return out


def build_pool():
    sides = (3, 5, 7, 9, 11, 13, 15, 17)
    sigmas = [round(s, 3) for s in np.arange(0.5, 8.001, 0.05)]
    pool = []
    for side in sides:
        for sig in sigmas:
            t = gaussian_template_array(side, sig)
            e = float(np.sum(t * t))
            pool.append(((side, sig), t, e))
    return pool


def main() -> None:
    pool = build_pool()
    n = len(pool)
    print(f"pool size {n}")
    maxside = 17
    flat = np.stack([embedded(t, maxside).ravel() for _, t, _ in pool])
    energies = np.array([e for _, _, e in pool])
    gram = flat @ flat.T
    norms = np.sqrt(energies)
    cos = gram / np.outer(norms, norms)
    ratio = np.minimum.outer(energies, energies) / np.maximum.outer(energies, energies)
    safety = ratio - cos**2
    drive = energies[:, None] + energies[None, :] - 2 * gram
    live = (safety > SAFETY_EPS) & (drive > DRIVE_MIN)

    def score(idx):
        s = safety[np.ix_(idx, idx)]
        d = drive[np.ix_(idx, idx)]
        lv = live[np.ix_(idx, idx)]
        iu = np.triu_indices(len(idx), 1)
        nlive = int(lv[iu].sum())
        # soft margin bonus keeps gradient toward robust pairs
        margin = np.minimum(s[iu], 0.02).sum() + 0.02 * np.minimum(d[iu], 2.0).sum()
        return nlive + 0.3 * margin, nlive

    rng = random.Random(7)
    idx = rng.sample(range(n), 16)
    cur, cur_live = score(idx)
    best, best_idx, best_live = cur, list(idx), cur_live
    temp = 1.0
    for it in range(40000):
        temp = max(0.02, 1.0 * (0.99985**it))
        j = rng.randrange(16)
        cand = rng.randrange(n)
        if cand in idx:
            continue
        trial = list(idx)
        trial[j] = cand
        val, nl = score(trial)
        if val > cur or rng.random() < np.exp((val - cur) / temp):
            idx, cur, cur_live = trial, val, nl
            if val > best:
                best, best_idx, best_live = val, list(idx), nl
    idx = best_idx
    print(f"best live pairs: {best_live}/120  score={best:.3f}")
    chosen = sorted(pool[i][0] for i in idx)
    for side, sig in chosen:
        t = gaussian_template_array(side, sig)
        print(f"  side={side:2d} sigma={sig:.2f} E={float(np.sum(t*t)):7.3f}")

    # report the dead pairs
    sel = [pool[i] for i in idx]
    print("\ndead pairs:")
    ndead = 0
    for (p, tp, ep), (q, tq, eq) in itertools.combinations(sel, 2):
        side = max(p[0], q[0])
        a, b = embedded(tp, side), embedded(tq, side)
        cr = float(np.sum(a * b))
        c = cr / np.sqrt(ep * eq)
        saf = min(ep / eq, eq / ep) - c * c
        dr = ep + eq - 2 * cr
        if not (saf > SAFETY_EPS and dr > DRIVE_MIN):
            ndead += 1
            print(f"  {p} vs {q}: safety={saf:+.4f} drive={dr:.3f} cos={c:.4f}")
    print(f"dead: {ndead}")


if __name__ == "__main__":
    main()
