"""Search for a 16-entry template vocabulary with race-safe, well-separated shapes.

Pair health for the belief race and guidance coupling:
  safety  s_ij = min(E_i/E_j, E_j/E_i) - cos_ij^2   (>0: each blob keeps its own
          belief argmax once separated, and both guidance kernels are well signed)
  drive   d_ij = E_i + E_j - 2<T_i,T_j>             (separation rate scale)
"""

from __future__ import annotations

import itertools
import sys

import numpy as np

sys.path.insert(0, "src")

from spatialguide.grid import gaussian_template_array


def embedded(template: np.ndarray, side: int) -> np.ndarray:
    out = np.zeros((side, side))
    s = template.shape[0]
    off = (side - s) // 2
    out[off : off + s, off : off + s] = template
    return out


def pair_stats(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    side = max(a.shape[0], b.shape[0])
    ea = embedded(a, side)
    eb = embedded(b, side)
    e_a = float(np.sum(ea * ea))
    e_b = float(np.sum(eb * eb))
    cross = float(np.sum(ea * eb))
    cos = cross / np.sqrt(e_a * e_b)
    safety = min(e_a / e_b, e_b / e_a) - cos * cos
    drive = e_a + e_b - 2.0 * cross
    return safety, drive, cos


def main() -> None:
    sides = (3, 5, 7, 9, 11, 13)
    sigmas = np.round(np.arange(0.55, 4.001, 0.05), 3)
    pool = [(s, float(sig)) for s in sides for sig in sigmas]
    templates = {p: gaussian_template_array(p[0], p[1]) for p in pool}
    energies = {p: float(np.sum(templates[p] ** 2)) for p in pool}

    # precompute pair scores lazily with a cache
    cache: dict[tuple, tuple[float, float, float]] = {}

    def stats(p, q):
        key = (p, q) if p <= q else (q, p)
        if key not in cache:
            cache[key] = pair_stats(templates[key[0]], templates[key[1]])
        return cache[key]

    def pair_score(p, q):
        safety, drive, cos = stats(p, q)
        # prioritize safety up to a modest margin, then distinctness
        return min(safety, 0.05) * 4.0 + min(drive, 1.5)

    # greedy: seed with the best-scoring pair, grow by max-min score
    best_seed = max(itertools.combinations(pool[::7], 2), key=lambda pq: pair_score(*pq))
    chosen = list(best_seed)
    while len(chosen) < 16:
        best_cand, best_val = None, -np.inf
        for cand in pool:
            if cand in chosen:
                continue
            val = min(pair_score(cand, c) for c in chosen)
            if val > best_val:
                best_val, best_cand = val, cand
        chosen.append(best_cand)
        print(f"added {best_cand} minscore={best_val:.4f} E={energies[best_cand]:.3f}")

    # local improvement: try swapping each member for any pool candidate
    def subset_objective(subset):
        vals = sorted(min(pair_score(p, q) for q in subset if q is not p) for p in subset)
        return tuple(vals)  # lexicographic max-min

    improved = True
    while improved:
        improved = False
        for i, member in enumerate(list(chosen)):
            for cand in pool:
                if cand in chosen:
                    continue
                trial = list(chosen)
                trial[i] = cand
                if subset_objective(trial) > subset_objective(chosen):
                    chosen = trial
                    improved = True
                    break
            if improved:
                break

    chosen.sort()
    print("\nchosen entries:")
    for p in chosen:
        print(f"  side={p[0]:2d} sigma={p[1]:.2f} E={energies[p]:7.3f}")

    print("\npair matrix (safety / drive / cos):")
    n_unsafe = 0
    worst = []
    for p, q in itertools.combinations(chosen, 2):
        safety, drive, cos = stats(p, q)
        if safety <= 0:
            n_unsafe += 1
        worst.append((safety, drive, cos, p, q))
    worst.sort()
    for safety, drive, cos, p, q in worst[:20]:
        print(f"  {p} vs {q}: safety={safety:+.4f} drive={drive:.3f} cos={cos:.4f}")
    print(f"\nunsafe pairs: {n_unsafe}/120")
    drives = sorted(w[1] for w in worst)
    print(f"drive quantiles: min={drives[0]:.3f} p10={drives[12]:.3f} med={drives[60]:.3f}")


if __name__ == "__main__":
    main()
