"""Summary statistics of attention maps: centroids, spread, relation offsets.

Coordinates are normalised to (0, 1): the cell in row h, column w (1-based)
has centre ((w - 0.5) / W, (h - 0.5) / H). x grows rightward, y downward.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .backbone import LAYERS, LEVEL_ORDER, AttentionStack, Level
from .grid import ScalarGrid
from .prompt import Relation


@dataclass(frozen=True)
class Centroid:
    x: float
    y: float

    def __post_init__(self) -> None:
        for name, value in (("x", self.x), ("y", self.y)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"centroid {name}={value} outside [0, 1]")


@dataclass(frozen=True)
class LayerStat:
    centroid: Centroid
    variance: float

    def __post_init__(self) -> None:
        # 0.5 is the largest spatial second moment reachable inside the unit square.
        if not 0.0 <= self.variance <= 0.5:
            raise ValueError(f"variance {self.variance} outside [0, 0.5]")


@dataclass(frozen=True)
class TokenStats:
    """LayerStat per (level, layer) for one prompt token."""

    entries: Mapping[tuple[Level, int], LayerStat]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", dict(self.entries))

    def stat(self, level: Level, layer: int) -> LayerStat:
        key = (Level(level), layer)
        if key not in self.entries:
            raise ValueError(f"no stats for {key}")
        return self.entries[key]

    def keys(self) -> tuple[tuple[Level, int], ...]:
        return tuple(self.entries.keys())


@lru_cache(maxsize=64)
def cell_centers(extent: int) -> np.ndarray:
    """Normalised centre coordinates of cells along one axis."""
    centers = (np.arange(extent, dtype=np.float64) + 0.5) / extent
    centers.flags.writeable = False
    return centers


def centroid_arrays(p: np.ndarray) -> tuple[float, float]:
    col_mass = p.sum(axis=0)
    row_mass = p.sum(axis=1)
    mass = float(p.sum())
    cx = float(col_mass @ cell_centers(p.shape[1])) / mass
    cy = float(row_mass @ cell_centers(p.shape[0])) / mass
    return cx, cy


def variance_arrays(p: np.ndarray, cx: float, cy: float) -> float:
    xs = cell_centers(p.shape[1]) - cx
    ys = cell_centers(p.shape[0]) - cy
    mass = float(p.sum())
    return float(p.sum(axis=0) @ (xs * xs) + p.sum(axis=1) @ (ys * ys)) / mass


def centroid(attention: ScalarGrid) -> Centroid:
    """Mass-weighted mean position of a probability map."""
    attention.require_distribution("attention map")
    cx, cy = centroid_arrays(attention.data)
    return Centroid(x=cx, y=cy)


def variance(attention: ScalarGrid, center: Centroid) -> float:
    """Mass-weighted mean squared distance from the given centroid (isotropic)."""
    attention.require_distribution("attention map")
    return variance_arrays(attention.data, center.x, center.y)


def layer_stat(attention: ScalarGrid) -> LayerStat:
    c = centroid(attention)
    return LayerStat(centroid=c, variance=variance(attention, c))


def relation_delta(centroid_a: Centroid, centroid_b: Centroid, relation: Relation) -> float:
    """Signed separation along the relation's axis; positive means satisfied.

    NEAR has no preferred side, so its delta is the absolute horizontal gap
    (small when satisfied), matching how the margin loss consumes it.
    """
    rel = Relation(relation)
    if rel is Relation.LEFT:
        return centroid_b.x - centroid_a.x
    if rel is Relation.RIGHT:
        return centroid_a.x - centroid_b.x
    if rel is Relation.ABOVE:
        return centroid_b.y - centroid_a.y
    if rel is Relation.BELOW:
        return centroid_a.y - centroid_b.y
    return abs(centroid_a.x - centroid_b.x)


def stats_for_token(
    stack: AttentionStack, token: str, levels: Sequence[Level] = LEVEL_ORDER
) -> TokenStats:
    """Centroid and variance for every (level, layer) map of one token."""
    entries = {}
    for level in LEVEL_ORDER:
        if level not in tuple(Level(lv) for lv in levels):
            continue
        if not stack.has_level(level):
            raise ValueError(f"attention stack lacks level {level}")
        for layer in LAYERS:
            entries[(level, layer)] = layer_stat(stack.map(level, layer, token))
    return TokenStats(entries=entries)


def uniform_map_variance(extent: int) -> float:
    """Closed-form variance of the uniform map on an extent x extent grid."""
    return (1.0 - 1.0 / (extent * extent)) / 6.0
