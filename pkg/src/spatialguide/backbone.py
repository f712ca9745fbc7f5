"""Toy denoising backbone with analytically reachable cross-attention maps.

Images are sums of Gaussian stamps, one per object. The denoiser matches
each object's stamp against the noisy latent by cross-correlation, softmaxes
the response into a location belief, and reconstructs a clean estimate by
re-stamping at the believed locations. The same response maps, pooled to
three resolutions and sharpened per layer, double as the attention maps the
guidance loss differentiates through. Every stage is a closed-form array op,
so gradients can be derived by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Mapping

import numpy as np

from .grid import (
    Latent,
    ScalarGrid,
    cross_correlate_array,
    downsample_avg_array,
    gaussian_template_array,
    spatial_softmax_array,
)
from .prompt import PromptTriplet, Vocabulary, default_vocabulary

TOKEN_A = "a"
TOKEN_B = "b"
TOKENS = (TOKEN_A, TOKEN_B)

#: Floor for adaptive softmax temperatures so a flat response stays defined.
MIN_TEMPERATURE = 1e-12

LAYERS = (1, 2, 3)


class Level(str, Enum):
    """Attention resolution tiers, coarsest first."""

    COARSE = "coarse"
    MID = "mid"
    FINE = "fine"


LEVEL_ORDER: tuple[Level, ...] = (Level.COARSE, Level.MID, Level.FINE)


@dataclass(frozen=True)
class Schedule:
    """Variance schedule: betas plus cumulative products, 1-based in t.

    alpha_bar(0) is defined as 1 so the final reverse step lands on the
    clean estimate.
    """

    betas: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.betas, dtype=np.float64, copy=True)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("schedule needs at least one beta")
        if not ((arr > 0) & (arr < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        arr.flags.writeable = False
        object.__setattr__(self, "betas", arr)
        bars = np.cumprod(1.0 - arr)
        bars.flags.writeable = False
        object.__setattr__(self, "_alpha_bars", bars)

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    def _check_t(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.steps:
            raise ValueError(f"step t={t} outside [{lo}, {self.steps}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t: int) -> float:
        self._check_t(t, allow_zero=True)
        if t == 0:
            return 1.0
        return float(self._alpha_bars[t - 1])

    def noise_scale(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar(t))

    def signal_scale(self, t: int) -> float:
        return math.sqrt(self.alpha_bar(t))

    def step_size(self, t: int) -> float:
        """Weight the reverse update applies to the predicted noise at step t.

        Positive for every t, which is what makes an added +grad term in the
        noise prediction move the next latent downhill on the loss.
        """
        self._check_t(t)
        ab_t = self.alpha_bar(t)
        ab_prev = self.alpha_bar(t - 1)
        return math.sqrt(ab_prev / ab_t) * math.sqrt(1.0 - ab_t) - math.sqrt(1.0 - ab_prev)


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )

    def build(self) -> Schedule:
        return make_schedule(self.steps, self.beta_start, self.beta_end)


def make_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Linear beta ramp; a single step collapses to [beta_start]."""
    ScheduleConfig(steps, beta_start, beta_end)
    if steps == 1:
        return Schedule(np.array([beta_start]))
    return Schedule(np.linspace(beta_start, beta_end, steps))


@lru_cache(maxsize=256)
def _template_cached(side: int, sigma: float) -> np.ndarray:
    return gaussian_template_array(side, sigma)


@dataclass(frozen=True)
class BackboneConfig:
    """Geometry, temperatures, and vocabulary of the toy model."""

    height: int = 32
    width: int = 32
    channels: int = 1
    coarse_factor: int = 4
    mid_factor: int = 2
    fine_factor: int = 1
    # Base temperature per level; layers within a level sharpen it. Scaled
    # to the response ranges the walk actually produces, so no layer's
    # softmax saturates into a zero-gradient one-hot map. Level temperatures
    # are fractions of the pooled response's max magnitude, not absolute
    # values: template energies and latent scales vary widely across the
    # vocabulary and the walk. The coarse base is deliberately soft: broad
    # coarse maps keep a long-range pull between object centroids, which is
    # what separates two objects whose initial responses land on the same
    # cell. Sharp coarse maps freeze that state instead.
    coarse_temperature: float = 2.0
    mid_temperature: float = 0.3
    fine_temperature: float = 0.15
    layer_scales: tuple[float, float, float] = (1.0, 0.5, 0.25)
    # Location-belief softmax adapts to the response range.
    location_temperature_scale: float = 0.05
    clean_clip: float = 1.5
    vocabulary: Vocabulary = field(default_factory=default_vocabulary)

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("latent dimensions must be positive")
        for name in ("coarse_factor", "mid_factor", "fine_factor"):
            f = getattr(self, name)
            if f < 1:
                raise ValueError(f"{name} must be >= 1, got {f}")
            if self.height % f or self.width % f:
                raise ValueError(f"{name}={f} must divide {self.height}x{self.width}")
        for name in ("coarse_temperature", "mid_temperature", "fine_temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.layer_scales) != len(LAYERS) or any(s <= 0 for s in self.layer_scales):
            raise ValueError("layer_scales must be three positive factors")
        if not self.location_temperature_scale > 0:
            raise ValueError("location_temperature_scale must be positive")
        if not self.clean_clip > 0:
            raise ValueError("clean_clip must be positive")
        if len(self.vocabulary) < 2:
            raise ValueError("vocabulary needs at least two objects")
        biggest = max(e.template_side for e in self.vocabulary.entries)
        if biggest > min(self.height, self.width):
            raise ValueError("largest template exceeds the latent")

    def level_factor(self, level: Level) -> int:
        return {
            Level.COARSE: self.coarse_factor,
            Level.MID: self.mid_factor,
            Level.FINE: self.fine_factor,
        }[Level(level)]

    def level_base_temperature(self, level: Level) -> float:
        return {
            Level.COARSE: self.coarse_temperature,
            Level.MID: self.mid_temperature,
            Level.FINE: self.fine_temperature,
        }[Level(level)]

    def attention_temperature_scale(self, level: Level, layer: int) -> float:
        """Softmax temperature as a fraction of the pooled response's max magnitude."""
        if layer not in LAYERS:
            raise ValueError(f"layer must be one of {LAYERS}, got {layer}")
        return self.level_base_temperature(level) * self.layer_scales[layer - 1]

    def template(self, identifier: str) -> np.ndarray:
        entry = self.vocabulary.get(identifier)
        return _template_cached(entry.template_side, entry.template_sigma)


@dataclass(frozen=True, eq=False)
class AttentionStack:
    """Per-token probability maps keyed by (level, layer); tokens are 'a' and 'b'."""

    maps: Mapping[tuple[Level, int, str], ScalarGrid]
    levels: tuple[Level, ...]

    def __post_init__(self) -> None:
        maps = dict(self.maps)
        levels = tuple(self.levels)
        if not levels:
            raise ValueError("attention stack needs at least one level")
        shapes: dict[Level, tuple[int, int]] = {}
        for level in levels:
            for layer in LAYERS:
                for token in TOKENS:
                    key = (level, layer, token)
                    if key not in maps:
                        raise ValueError(f"missing attention map {key}")
                    grid = maps[key]
                    grid.require_distribution(f"attention map {key}")
                    shape = (grid.height, grid.width)
                    if shapes.setdefault(level, shape) != shape:
                        raise ValueError(f"inconsistent resolution within level {level}")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "levels", levels)

    def map(self, level: Level, layer: int, token: str) -> ScalarGrid:
        key = (Level(level), layer, token)
        if key not in self.maps:
            raise ValueError(f"no attention map for {key}")
        return self.maps[key]

    def has_level(self, level: Level) -> bool:
        return Level(level) in self.levels


@dataclass(frozen=True, eq=False)
class DenoiserOutput:
    eps_conditional: Latent
    eps_unconditional: Latent
    attention: AttentionStack


def placement_cell(coord: float, extent: int) -> int:
    """0-based cell index for a normalised coordinate in [0, 1]."""
    if not 0.0 <= coord <= 1.0:
        raise ValueError(f"placement coordinate {coord} outside [0, 1]")
    return min(max(math.ceil(coord * extent) - 1, 0), extent - 1)


def _stamp(canvas: np.ndarray, template: np.ndarray, row: int, col: int) -> None:
    """Add the template centred at (row, col), clipping at the borders."""
    th, tw = template.shape
    rh, rw = th // 2, tw // 2
    r0, r1 = row - rh, row + rh + 1
    c0, c1 = col - rw, col + rw + 1
    tr0 = max(0, -r0)
    tc0 = max(0, -c0)
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, canvas.shape[0]), min(c1, canvas.shape[1])
    canvas[r0:r1, c0:c1] += template[tr0 : tr0 + (r1 - r0), tc0 : tc0 + (c1 - c0)]


def synthesize_clean(
    triplet: PromptTriplet,
    placement_a: tuple[float, float],
    placement_b: tuple[float, float],
    config: BackboneConfig,
) -> Latent:
    """Ground-truth image: both stamps added at given (x, y) in [0, 1]^2, then clipped.

    x runs left to right, y top to bottom; the stamp centre falls in the cell
    that contains the coordinate.
    """
    canvas = np.zeros((config.height, config.width))
    for identifier, (x, y) in (
        (triplet.object_a, placement_a),
        (triplet.object_b, placement_b),
    ):
        row = placement_cell(y, config.height)
        col = placement_cell(x, config.width)
        _stamp(canvas, config.template(identifier), row, col)
    np.clip(canvas, -config.clean_clip, config.clean_clip, out=canvas)
    plane = ScalarGrid(canvas)
    return Latent.from_grids([plane] * config.channels)


def add_noise(clean: Latent, t: int, schedule: Schedule, seed: int) -> tuple[Latent, Latent]:
    """Forward noising at step t; returns (noisy latent, the exact noise used)."""
    schedule._check_t(t)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(clean.data.shape)
    noisy = schedule.signal_scale(t) * clean.data + schedule.noise_scale(t) * eps
    return Latent(noisy), Latent(eps)


def location_temperature(responses: np.ndarray, scale: float) -> float:
    return max(scale * float(np.abs(responses).max()), MIN_TEMPERATURE)


def _responses(zbar: np.ndarray, config: BackboneConfig) -> dict[str, np.ndarray]:
    return {
        entry.identifier: cross_correlate_array(zbar, config.template(entry.identifier))
        for entry in config.vocabulary.entries
    }


def _location_belief(response: np.ndarray, config: BackboneConfig) -> np.ndarray:
    return spatial_softmax_array(
        response, location_temperature(response, config.location_temperature_scale)
    )


def _reconstruct(identifiers: list[str], responses: dict[str, np.ndarray], config: BackboneConfig):
    est = np.zeros_like(next(iter(responses.values())))
    for identifier in identifiers:
        belief = _location_belief(responses[identifier], config)
        est += cross_correlate_array(belief, config.template(identifier))
    return est


def template_self_response(template: np.ndarray) -> float:
    """Response of a template to its own unit-amplitude stamp (its energy)."""
    return float((template * template).sum())


def _subtract_stamp(
    canvas: np.ndarray, template: np.ndarray, row: int, col: int, coeff: float
) -> None:
    half = template.shape[0] // 2
    r0, r1 = max(0, row - half), min(canvas.shape[0], row + half + 1)
    c0, c1 = max(0, col - half), min(canvas.shape[1], col + half + 1)
    tr0, tc0 = r0 - (row - half), c0 - (col - half)
    canvas[r0:r1, c0:c1] -= coeff * template[tr0 : tr0 + (r1 - r0), tc0 : tc0 + (c1 - c0)]


def _top_two_identifiers(
    zbar: np.ndarray, responses: dict[str, np.ndarray], config: BackboneConfig
) -> list[str]:
    """The two strongest-responding objects, by greedy matched-filter pursuit.

    Scores are peak response over the template's root energy, the
    matched-filter convention: the score of a template on its own stamp is
    the explained signal, so among templates consistent with a blob the one
    that accounts for the most of it wins, and window-size games cannot
    help a truncated near twin. The second pick is scored on the residual
    after subtracting the first pick's least-squares stamp; without that
    subtraction a near twin of the first object, scored at the already
    claimed site, would outrank the other object's own shape whenever the
    first blob is brighter. Ties keep vocabulary order (max over a stable
    iteration order).
    """
    order = config.vocabulary.identifiers()

    def snr(resps: Mapping[str, np.ndarray]) -> dict[str, float]:
        return {
            name: float(resps[name].max())
            / math.sqrt(template_self_response(config.template(name)))
            for name in order
        }

    scores = snr(responses)
    first = max(order, key=scores.__getitem__)
    template = config.template(first)
    response = responses[first]
    flat = int(np.argmax(response))
    row, col = flat // zbar.shape[1], flat % zbar.shape[1]
    coeff = max(0.0, float(response[row, col]) / template_self_response(template))
    residual = zbar.copy()
    _subtract_stamp(residual, template, row, col, coeff)
    rescored = snr(_responses(residual, config))
    second = max((name for name in order if name != first), key=rescored.__getitem__)
    return [first, second]


def pooled_response(response: np.ndarray, config: BackboneConfig, level: Level) -> np.ndarray:
    return downsample_avg_array(response, config.level_factor(level))


def adaptive_temperature(pooled: np.ndarray, scale: float) -> float:
    """Temperature proportional to the pooled map's max magnitude (0 for a zero map)."""
    return scale * float(np.max(np.abs(pooled)))


def attention_from_response(response: np.ndarray, config: BackboneConfig, level: Level, layer: int) -> np.ndarray:
    pooled = pooled_response(response, config, level)
    temperature = adaptive_temperature(pooled, config.attention_temperature_scale(level, layer))
    if temperature == 0.0:
        return np.full_like(pooled, 1.0 / pooled.size)
    return spatial_softmax_array(pooled, temperature)


def _attention_stack(
    responses_ab: dict[str, np.ndarray], config: BackboneConfig
) -> AttentionStack:
    maps = {}
    for level in LEVEL_ORDER:
        for layer in LAYERS:
            for token in TOKENS:
                arr = attention_from_response(responses_ab[token], config, level, layer)
                maps[(level, layer, token)] = ScalarGrid(arr)
    return AttentionStack(maps=maps, levels=LEVEL_ORDER)


def _eps_from_estimate(z: np.ndarray, clean_estimate: np.ndarray, t: int, schedule: Schedule):
    return (z - schedule.signal_scale(t) * clean_estimate[None, :, :]) / schedule.noise_scale(t)


def denoise_with_responses(
    z: Latent, t: int, triplet: PromptTriplet, schedule: Schedule, config: BackboneConfig
) -> tuple[DenoiserOutput, dict[str, np.ndarray]]:
    """Denoiser pass that also exposes the raw per-token responses for reuse."""
    schedule._check_t(t)
    if (z.height, z.width, z.channels) != (config.height, config.width, config.channels):
        raise ValueError(
            f"latent {z.channels}x{z.height}x{z.width} does not match configured "
            f"{config.channels}x{config.height}x{config.width}"
        )
    for name in (triplet.object_a, triplet.object_b):
        config.vocabulary.get(name)

    zbar = z.data.mean(axis=0)
    responses = _responses(zbar, config)

    cond_clean = _reconstruct([triplet.object_a, triplet.object_b], responses, config)
    uncond_clean = _reconstruct(_top_two_identifiers(zbar, responses, config), responses, config)

    eps_cond = _eps_from_estimate(z.data, cond_clean, t, schedule)
    eps_uncond = _eps_from_estimate(z.data, uncond_clean, t, schedule)

    responses_ab = {TOKEN_A: responses[triplet.object_a], TOKEN_B: responses[triplet.object_b]}
    attention = _attention_stack(responses_ab, config)
    return (
        DenoiserOutput(
            eps_conditional=Latent(eps_cond),
            eps_unconditional=Latent(eps_uncond),
            attention=attention,
        ),
        responses_ab,
    )


def denoise(
    z: Latent, t: int, triplet: PromptTriplet, schedule: Schedule, config: BackboneConfig
) -> DenoiserOutput:
    """Predict conditional and unconditional noise and emit attention maps.

    The conditional branch re-stamps the two prompt objects at their believed
    locations; the unconditional branch does the same for the two strongest
    responders regardless of the prompt.
    """
    output, _ = denoise_with_responses(z, t, triplet, schedule, config)
    return output
