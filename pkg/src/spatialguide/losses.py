"""Margin, presence, and balance losses over attention statistics.

The spatial term pushes the relation delta past a margin through a GeLU of
the shortfall; presence penalises diffuse coarse maps so both objects
condense; balance keeps the two tokens' mid-level spreads comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .backbone import LAYERS, Level
from .prompt import Relation
from .stats import TokenStats, relation_delta

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

#: Levels whose layers feed the spatial term, and the per-term sources.
SPATIAL_LEVELS: tuple[Level, ...] = (Level.COARSE, Level.MID)
PRESENCE_LEVEL = Level.COARSE
BALANCE_LEVEL = Level.MID


def gelu(x: float) -> float:
    """Exact GeLU, x * Phi(x) with Phi the standard normal CDF."""
    return x * 0.5 * (1.0 + math.erf(x / SQRT2))


def gelu_grad(x: float) -> float:
    """d/dx gelu(x) = Phi(x) + x * phi(x)."""
    return 0.5 * (1.0 + math.erf(x / SQRT2)) + x * INV_SQRT_2PI * math.exp(-0.5 * x * x)


@dataclass(frozen=True)
class LossConfig:
    """Weights and margin geometry of the compound guidance loss.

    All-zero weights are allowed and simply mean guidance contributes
    nothing; ablations switch terms off by zeroing their weight.
    """

    alpha: float = 1.5
    margin: float = 0.25
    lambda_spatial: float = 0.5
    lambda_presence: float = 1.0
    lambda_balance: float = 0.5

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.margin <= 1.0:
            raise ValueError(f"margin must lie in [0, 1], got {self.margin}")
        for name in ("lambda_spatial", "lambda_presence", "lambda_balance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def any_active(self) -> bool:
        return self.lambda_spatial > 0 or self.lambda_presence > 0 or self.lambda_balance > 0


@dataclass(frozen=True)
class LossBreakdown:
    spatial: float
    presence: float
    balance: float
    total: float

    def to_json_dict(self) -> dict:
        return {
            "spatial": self.spatial,
            "presence": self.presence,
            "balance": self.balance,
            "total": self.total,
        }


def spatial_loss(delta: float, config: LossConfig) -> float:
    """GeLU of the sharpened margin shortfall; exactly zero at delta == margin."""
    return gelu(config.alpha * (config.margin - delta))


def presence_loss(variance_a: float, variance_b: float) -> float:
    return variance_a + variance_b


def balance_loss(variance_a: float, variance_b: float) -> float:
    return abs(variance_a - variance_b)


def _require_keys(stats: TokenStats, token: str) -> None:
    for level in SPATIAL_LEVELS:
        for layer in LAYERS:
            stats.stat(level, layer)  # raises when missing


def compound_loss(
    stats_a: TokenStats, stats_b: TokenStats, relation: Relation, config: LossConfig
) -> LossBreakdown:
    """Weighted sum of the three terms, each averaged over its layer set.

    Spatial averages over all coarse and mid layers, presence over coarse
    layers only, balance over mid layers only.
    """
    _require_keys(stats_a, "a")
    _require_keys(stats_b, "b")

    spatial_terms = []
    presence_terms = []
    balance_terms = []
    for level in SPATIAL_LEVELS:
        for layer in LAYERS:
            sa = stats_a.stat(level, layer)
            sb = stats_b.stat(level, layer)
            delta = relation_delta(sa.centroid, sb.centroid, relation)
            spatial_terms.append(spatial_loss(delta, config))
            if level is PRESENCE_LEVEL:
                presence_terms.append(presence_loss(sa.variance, sb.variance))
            if level is BALANCE_LEVEL:
                balance_terms.append(balance_loss(sa.variance, sb.variance))

    spatial = sum(spatial_terms) / len(spatial_terms)
    presence = sum(presence_terms) / len(presence_terms)
    balance = sum(balance_terms) / len(balance_terms)
    total = (
        config.lambda_spatial * spatial
        + config.lambda_presence * presence
        + config.lambda_balance * balance
    )
    return LossBreakdown(spatial=spatial, presence=presence, balance=balance, total=total)
