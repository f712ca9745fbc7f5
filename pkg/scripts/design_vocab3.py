"""Tune one sigma per side on a side ladder, maximizing worst-pair health."""

from __future__ import annotations

import itertools
import sys

import numpy as np

sys.path.insert(0, "src")

from spatialguide.grid import gaussian_template_array


def embedded(t: np.ndarray, side: int) -> np.ndarray:
    out = np.zeros((side, side))
    s = t.shape[0]
    off = (side - s) // 2
    out[off : off + s, off : off + s] = t
    return out


def pair_health(p, q):
    (s1, g1), (s2, g2) = p, q
    a = gaussian_template_array(s1, g1)
    b = gaussian_template_array(s2, g2)
    side = max(s1, s2)
    ea, eb = embedded(a, side), embedded(b, side)
    e1, e2 = float(np.sum(ea * ea)), float(np.sum(eb * eb))
    cr = float(np.sum(ea * eb))
    cos = cr / np.sqrt(e1 * e2)
    safety = min(e1 / e2, e2 / e1) - cos * cos
    drive = e1 + e2 - 2 * cr
    return safety, drive


def objective(entries):
    vals = []
    for p, q in itertools.combinations(entries, 2):
        s, d = pair_health(p, q)
        vals.append(s - max(0.0, (0.3 - d)) * 0.05)
    return min(vals)


def tune(sides):
    sigmas = {s: 0.55 * (s + 1) / 2 for s in sides}
    grid = np.arange(0.5, 9.01, 0.05)
    for _ in range(6):
        moved = False
        for s in sides:
            best_v, best_g = -np.inf, sigmas[s]
            for g in grid:
                sigmas[s] = round(float(g), 2)
                v = objective([(k, sigmas[k]) for k in sides])
                if v > best_v:
                    best_v, best_g = v, sigmas[s]
            if abs(best_g - sigmas[s]) > 1e-9:
                moved = True
            sigmas[s] = best_g
        if not moved:
            break
    return sigmas


def report(sides):
    sigmas = tune(sides)
    entries = [(s, sigmas[s]) for s in sides]
    print(f"\n=== ladder {sides}")
    for s in sides:
        t = gaussian_template_array(s, sigmas[s])
        print(f"  side={s:2d} sigma={sigmas[s]:.2f} E={float(np.sum(t*t)):8.3f}")
    worst = []
    for p, q in itertools.combinations(entries, 2):
        saf, dr = pair_health(p, q)
        worst.append((saf, dr, p, q))
    worst.sort()
    for saf, dr, p, q in worst[:8]:
        print(f"  {p} vs {q}: safety={saf:+.4f} drive={dr:.3f}")
    print(f"  min safety {worst[0][0]:+.4f}; min drive {min(w[1] for w in worst):.3f}")
    return entries


for ladder in [(3, 5, 7, 9, 11, 13, 15, 17), tuple(range(3, 22, 2)), tuple(range(3, 26, 2)), tuple(range(3, 32, 2))]:
    report(ladder)
