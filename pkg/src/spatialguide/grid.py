"""Dense 2D float fields and the handful of array ops everything else builds on.

Conventions used throughout the package:

* grids are row-major, indexed (row, col) with the origin at the top-left;
* cross-correlation centres an odd-sided template on each output cell and
  treats everything outside the input as zero;
* probability maps ("distributions") are nonnegative and sum to 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DISTRIBUTION_TOL = 1e-9


def _validated_array(values: object, ndim: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    if arr.ndim != ndim or min(arr.shape, default=0) < 1:
        raise ValueError(f"{what} must be {ndim}D with positive dimensions, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} values must all be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    """Immutable H x W field of finite float64 values."""

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validated_array(self.data, 2, "grid"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the cells (read-only)."""
        return self.data.reshape(-1)

    @classmethod
    def zeros(cls, height: int, width: int) -> "ScalarGrid":
        return cls(np.zeros((height, width)))

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "ScalarGrid":
        return cls(np.full((height, width), float(value)))

    @classmethod
    def from_flat(cls, height: int, width: int, values: Sequence[float]) -> "ScalarGrid":
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (height * width,):
            raise ValueError(
                f"expected {height * width} values for a {height}x{width} grid, got {arr.shape}"
            )
        return cls(arr.reshape(height, width))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScalarGrid):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def allclose(self, other: "ScalarGrid", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.data.shape == other.data.shape and bool(
            np.allclose(self.data, other.data, atol=atol, rtol=rtol)
        )

    def total(self) -> float:
        return float(self.data.sum())

    def peak_cell(self) -> tuple[int, int]:
        """0-based (row, col) of the maximum; ties resolve to the first in row-major order."""
        flat_index = int(np.argmax(self.data))
        return flat_index // self.width, flat_index % self.width

    def is_distribution(self, tol: float = DISTRIBUTION_TOL) -> bool:
        return bool((self.data >= -tol).all()) and abs(self.total() - 1.0) <= tol

    def require_distribution(self, what: str = "grid", tol: float = DISTRIBUTION_TOL) -> None:
        if not self.is_distribution(tol):
            raise ValueError(
                f"{what} is not a probability map (sum={self.total()!r}, min={self.data.min()!r})"
            )

    def to_json_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "values": self.values.tolist()}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ScalarGrid":
        try:
            return cls.from_flat(int(payload["height"]), int(payload["width"]), payload["values"])
        except KeyError as exc:
            raise ValueError(f"grid JSON missing key {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ScalarGrid":
        return cls.from_json_dict(json.loads(text))

    def to_pgm_bytes(self) -> bytes:
        """Binary PGM (P5), min-max scaled so the peak maps to 255; flat grids render black."""
        lo = float(self.data.min())
        hi = float(self.data.max())
        if hi > lo:
            scaled = np.rint((self.data - lo) * (255.0 / (hi - lo)))
        else:
            scaled = np.zeros_like(self.data)
        header = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + scaled.astype(np.uint8).tobytes()

    def write_pgm(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_pgm_bytes())


@dataclass(frozen=True, eq=False)
class Latent:
    """Immutable C x H x W stack of scalar grids, the sampler state."""

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validated_array(self.data, 3, "latent"))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Latent":
        return cls(np.zeros((channels, height, width)))

    @classmethod
    def from_grids(cls, grids: Iterable[ScalarGrid]) -> "Latent":
        planes = [g.data for g in grids]
        if not planes:
            raise ValueError("latent needs at least one channel")
        shape = planes[0].shape
        if any(p.shape != shape for p in planes):
            raise ValueError("all latent channels must share the same height and width")
        return cls(np.stack(planes))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Latent):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def channel(self, index: int) -> ScalarGrid:
        if not 0 <= index < self.channels:
            raise ValueError(f"channel {index} out of range for {self.channels}-channel latent")
        return ScalarGrid(self.data[index])

    def channel_mean(self) -> ScalarGrid:
        return ScalarGrid(self.data.mean(axis=0))


def _require_odd_template(template: np.ndarray, against: tuple[int, int]) -> None:
    th, tw = template.shape
    if th % 2 == 0 or tw % 2 == 0:
        raise ValueError(f"template sides must be odd, got {th}x{tw}")
    if th > against[0] or tw > against[1]:
        raise ValueError(f"template {th}x{tw} exceeds input {against[0]}x{against[1]}")


def cross_correlate_array(arr: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Same-size sliding dot product with the template centred on each cell, zero padded."""
    _require_odd_template(template, arr.shape)
    return ndimage.correlate(arr, template, mode="constant", cval=0.0)


def cross_correlate(grid: ScalarGrid, template: ScalarGrid) -> ScalarGrid:
    return ScalarGrid(cross_correlate_array(grid.data, template.data))


def normalized_response_array(
    arr: np.ndarray, template: np.ndarray, energy_floor: float
) -> np.ndarray:
    """Correlation normalized by the local window energy, amplitude invariant.

    The raw correlation is divided by sqrt(template energy x window energy),
    with energy_floor x the template energy added under the root so
    near-empty windows score near zero instead of amplifying noise
    directions. A clean unit stamp of the template's own shape peaks at
    1/sqrt(1 + floor) while any other shape peaks strictly lower at equal
    amplitude (Cauchy-Schwarz), independent of how bright either blob is.
    """
    raw = cross_correlate_array(arr, template)
    window_energy = cross_correlate_array(arr * arr, np.ones_like(template))
    template_energy = float((template * template).sum())
    return normalize_response_parts(raw, window_energy, template_energy, energy_floor)


def normalize_response_parts(
    raw: np.ndarray,
    window_energy: np.ndarray,
    template_energy: float,
    energy_floor: float,
) -> np.ndarray:
    """The normalization step of normalized_response_array, from parts.

    Split out so callers scoring many templates can share the raw responses
    and reuse one window-energy map per stamp size.
    """
    denom = np.sqrt(template_energy) * np.sqrt(
        np.maximum(window_energy, 0.0) + energy_floor * template_energy
    )
    return raw / denom


def downsample_avg_array(arr: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    h, w = arr.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide grid {h}x{w}")
    if factor == 1:
        return arr.copy()
    return arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def downsample_avg(grid: ScalarGrid, factor: int) -> ScalarGrid:
    """Block-average pooling by an integer factor that must divide both sides."""
    return ScalarGrid(downsample_avg_array(grid.data, factor))


def spatial_softmax_array(arr: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    # Max subtraction keeps the exponentials in range for any input scale.
    z = (arr - arr.max()) / temperature
    e = np.exp(z)
    return e / e.sum()

def spatial_softmax(grid: ScalarGrid, temperature: float) -> ScalarGrid:
    """Softmax over all cells jointly, yielding a probability map."""
    return ScalarGrid(spatial_softmax_array(grid.data, temperature))


def gaussian_template_array(side: int, sigma: float) -> np.ndarray:
    if side < 1 or side % 2 == 0:
        raise ValueError(f"template side must be odd and positive, got {side}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    c = (side - 1) / 2.0
    ax = np.arange(side, dtype=np.float64) - c
    sq = ax[:, None] ** 2 + ax[None, :] ** 2
    values = np.exp(-sq / (2.0 * sigma * sigma))
    return values / values.max()


def gaussian_template(side: int, sigma: float) -> ScalarGrid:
    """Isotropic Gaussian bump on an odd-sided square, normalised to unit peak."""
    return ScalarGrid(gaussian_template_array(side, sigma))


def flip180(arr: np.ndarray) -> np.ndarray:
    """180 degree rotation; pairs with cross-correlation to form its adjoint."""
    return arr[::-1, ::-1]


def canonical_json(payload: object) -> str:
    """Deterministic JSON used for every artifact that must be byte-stable."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
