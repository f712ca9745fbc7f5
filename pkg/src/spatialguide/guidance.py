"""Inference-time spatial guidance: loss gradient, guided noise, reverse walk.

The loss looks at the denoiser's attention maps, so its gradient with
respect to the latent runs backward through channel mean, template
cross-correlation, average pooling, tempered softmax, and the centroid /
variance reductions. All adjoints are written out by hand; a finite
difference oracle in the tests pins them down.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .backbone import (
    LAYERS,
    TOKEN_A,
    TOKEN_B,
    TOKENS,
    BackboneConfig,
    Level,
    Schedule,
    cross_correlate_array,
    denoise_with_responses,
    pooled_response,
)
from .grid import Latent, flip180, spatial_softmax_array
from .losses import (
    SPATIAL_LEVELS,
    LossBreakdown,
    LossConfig,
    balance_loss,
    gelu_grad,
    presence_loss,
    spatial_loss,
)
from .prompt import PromptTriplet, Relation
from .stats import Centroid, cell_centers, centroid_arrays, relation_delta, variance_arrays


class NumericalAbortError(RuntimeError):
    """Sampling produced a non-finite latent; carries the offending step."""

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"non-finite latent at step t={step}")
        self.step = step


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free mixing plus the gradient nudge on the noise prediction."""

    gamma: float = 7.5
    # The loss lives on softmax-normalised maps, so its raw gradient is tiny
    # relative to the noise prediction; eta rescales it to a force comparable
    # with the classifier-free term. Tuned on the toy backbone.
    eta: float = 2000.0
    loss: LossConfig = field(default_factory=LossConfig)
    guide_from_step: int = 1
    guide_to_step: int | None = None
    normalize_gradient: bool = False
    clip_gradient_norm: float | None = None

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.guide_from_step < 1:
            raise ValueError("guide_from_step must be >= 1")
        if self.guide_to_step is not None and self.guide_to_step < self.guide_from_step:
            raise ValueError("guide_to_step must be >= guide_from_step")
        if self.clip_gradient_norm is not None and not self.clip_gradient_norm > 0:
            raise ValueError("clip_gradient_norm must be positive when set")

    def active_at(self, t: int, total_steps: int) -> bool:
        upper = self.guide_to_step if self.guide_to_step is not None else total_steps
        return (
            self.eta > 0
            and self.loss.any_active
            and self.guide_from_step <= t <= min(upper, total_steps)
        )


@dataclass(frozen=True)
class StepTrace:
    """Per-step observability record emitted by sample()."""

    t: int
    loss: LossBreakdown
    gradient_norm: float
    centroids: Mapping[str, Mapping[str, dict]]

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "loss": self.loss.to_json_dict(),
            "gradient_norm": self.gradient_norm,
            "centroids": {tok: dict(per) for tok, per in self.centroids.items()},
        }


def _sign(x: float) -> float:
    # Subgradient choice at the |.| kink: 0.
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


_DELTA_COEFFS = {
    # relation -> (d delta / d cx_a, d cy_a, d cx_b, d cy_b)
    Relation.LEFT: (-1.0, 0.0, 1.0, 0.0),
    Relation.RIGHT: (1.0, 0.0, -1.0, 0.0),
    Relation.ABOVE: (0.0, -1.0, 0.0, 1.0),
    Relation.BELOW: (0.0, 1.0, 0.0, -1.0),
}


def _delta_coefficients(relation: Relation, cx_a: float, cx_b: float):
    if relation is Relation.NEAR:
        s = _sign(cx_a - cx_b)
        return (s, 0.0, -s, 0.0)
    return _DELTA_COEFFS[relation]


class _MapNode:
    """Forward state of one attention map, enough to run its backward pass."""

    __slots__ = ("p", "tau", "scale", "amp_flat", "amp_sign", "u", "cx", "cy", "v", "mass")

    def __init__(self, pooled: np.ndarray, scale: float):
        amp_flat = int(np.argmax(np.abs(pooled)))
        amp = float(np.abs(pooled.ravel()[amp_flat]))
        self.scale = scale
        self.amp_flat = amp_flat
        self.amp_sign = float(np.sign(pooled.ravel()[amp_flat]))
        self.tau = scale * amp
        if self.tau == 0.0:
            self.p = np.full_like(pooled, 1.0 / pooled.size)
            self.u = np.zeros_like(pooled)
        else:
            self.u = pooled / self.tau
            self.p = spatial_softmax_array(pooled, self.tau)
        self.cx, self.cy = centroid_arrays(self.p)
        self.v = variance_arrays(self.p, self.cx, self.cy)
        self.mass = float(self.p.sum())


def _map_backward(node: _MapNode, gx: float, gy: float, gv: float) -> np.ndarray:
    """Gradient wrt the pre-softmax pooled response of one map.

    Uses d centroid_x / d p_hw = (x_w - cx) / mass and
    d variance / d p_hw = (dist^2_hw - v) / mass; the variance's feedback
    through the centroid vanishes because it is evaluated at the centroid.
    The softmax adjoint maps the cell gradient onto the logits; because the
    temperature tracks the pooled map's max magnitude, the max cell picks up
    an extra rank-one term -sign(D_m) scale <g_u, u> / tau.
    """
    p = node.p
    xs = cell_centers(p.shape[1]) - node.cx
    ys = cell_centers(p.shape[0]) - node.cy
    g_p = gx * xs[None, :] + gy * ys[:, None]
    if gv != 0.0:
        dist2 = xs[None, :] ** 2 + (ys * ys)[:, None]
        g_p = g_p + gv * (dist2 - node.v)
    g_p = g_p / node.mass
    if node.tau == 0.0:
        return np.zeros_like(p)
    inner = float((p * g_p).sum())
    g_u = p * (g_p - inner)
    g_pooled = g_u / node.tau
    tau_term = node.amp_sign * node.scale * float((g_u * node.u).sum()) / node.tau
    g_pooled.ravel()[node.amp_flat] -= tau_term
    return g_pooled


def _forward_nodes(
    responses_ab: Mapping[str, np.ndarray], config: BackboneConfig
) -> dict[tuple[Level, int, str], _MapNode]:
    nodes = {}
    for token in TOKENS:
        for level in SPATIAL_LEVELS:
            for layer in LAYERS:
                pooled = pooled_response(responses_ab[token], config, level)
                nodes[(level, layer, token)] = _MapNode(
                    pooled, config.attention_temperature_scale(level, layer)
                )
    return nodes


def _breakdown_from_nodes(
    nodes: Mapping[tuple[Level, int, str], _MapNode],
    relation: Relation,
    loss_config: LossConfig,
) -> LossBreakdown:
    spatial_terms = []
    presence_terms = []
    balance_terms = []
    for level in SPATIAL_LEVELS:
        for layer in LAYERS:
            na = nodes[(level, layer, TOKEN_A)]
            nb = nodes[(level, layer, TOKEN_B)]
            delta = relation_delta(Centroid(na.cx, na.cy), Centroid(nb.cx, nb.cy), relation)
            spatial_terms.append(spatial_loss(delta, loss_config))
            if level is Level.COARSE:
                presence_terms.append(presence_loss(na.v, nb.v))
            if level is Level.MID:
                balance_terms.append(balance_loss(na.v, nb.v))
    spatial = sum(spatial_terms) / len(spatial_terms)
    presence = sum(presence_terms) / len(presence_terms)
    balance = sum(balance_terms) / len(balance_terms)
    total = (
        loss_config.lambda_spatial * spatial
        + loss_config.lambda_presence * presence
        + loss_config.lambda_balance * balance
    )
    return LossBreakdown(spatial=spatial, presence=presence, balance=balance, total=total)


def _gradient_core(
    responses_ab: Mapping[str, np.ndarray],
    triplet: PromptTriplet,
    backbone_config: BackboneConfig,
    loss_config: LossConfig,
) -> tuple[np.ndarray, LossBreakdown, dict[tuple[Level, int, str], _MapNode]]:
    """Loss and its gradient wrt the channel-mean plane, from raw responses."""
    nodes = _forward_nodes(responses_ab, backbone_config)
    relation = triplet.relation
    breakdown = _breakdown_from_nodes(nodes, relation, loss_config)

    spatial_count = len(SPATIAL_LEVELS) * len(LAYERS)
    g_spatial_each = loss_config.lambda_spatial / spatial_count
    g_presence_each = loss_config.lambda_presence / len(LAYERS)
    g_balance_each = loss_config.lambda_balance / len(LAYERS)

    # Accumulate per token and level across layers, then upsample once.
    g_pooled: dict[tuple[str, Level], np.ndarray] = {}
    for level in SPATIAL_LEVELS:
        for layer in LAYERS:
            na = nodes[(level, layer, TOKEN_A)]
            nb = nodes[(level, layer, TOKEN_B)]
            delta = relation_delta(Centroid(na.cx, na.cy), Centroid(nb.cx, nb.cy), relation)
            g_delta = (
                g_spatial_each
                * gelu_grad(loss_config.alpha * (loss_config.margin - delta))
                * (-loss_config.alpha)
            )
            ca_x, ca_y, cb_x, cb_y = _delta_coefficients(relation, na.cx, nb.cx)

            gva = gvb = 0.0
            if level is Level.COARSE:
                gva += g_presence_each
                gvb += g_presence_each
            if level is Level.MID:
                s = _sign(na.v - nb.v)
                gva += g_balance_each * s
                gvb -= g_balance_each * s

            for token, node, gx_c, gy_c, gv in (
                (TOKEN_A, na, ca_x, ca_y, gva),
                (TOKEN_B, nb, cb_x, cb_y, gvb),
            ):
                g_logits = _map_backward(node, g_delta * gx_c, g_delta * gy_c, gv)
                key = (token, level)
                if key in g_pooled:
                    g_pooled[key] += g_logits
                else:
                    g_pooled[key] = g_logits

    identifier_of = {TOKEN_A: triplet.object_a, TOKEN_B: triplet.object_b}
    g_zbar = np.zeros((backbone_config.height, backbone_config.width))
    for token in TOKENS:
        g_response = np.zeros_like(g_zbar)
        for level in SPATIAL_LEVELS:
            factor = backbone_config.level_factor(level)
            # Average-pooling adjoint: spread evenly over each block.
            g_response += np.kron(
                g_pooled[(token, level)], np.ones((factor, factor))
            ) / (factor * factor)
        template = backbone_config.template(identifier_of[token])
        # Cross-correlation adjoint: correlate with the 180-degree flip.
        g_zbar += cross_correlate_array(g_response, flip180(template))
    return g_zbar, breakdown, nodes


def _grad_to_latent(g_zbar: np.ndarray, channels: int) -> Latent:
    # Channel-mean adjoint: every channel receives 1/C of the plane gradient.
    plane = g_zbar / channels
    return Latent(np.repeat(plane[None, :, :], channels, axis=0))


def loss_gradient(
    z: Latent,
    t: int,
    triplet: PromptTriplet,
    schedule: Schedule,
    backbone_config: BackboneConfig,
    loss_config: LossConfig,
) -> tuple[Latent, LossBreakdown]:
    """Gradient of the compound loss wrt the latent, plus the loss itself.

    The attention pipeline does not look at t, but t is validated so callers
    cannot drift outside the schedule.
    """
    schedule._check_t(t)
    if (z.channels, z.height, z.width) != (
        backbone_config.channels,
        backbone_config.height,
        backbone_config.width,
    ):
        raise ValueError("latent shape does not match backbone config")
    zbar = z.data.mean(axis=0)
    responses_ab = {
        TOKEN_A: cross_correlate_array(zbar, backbone_config.template(triplet.object_a)),
        TOKEN_B: cross_correlate_array(zbar, backbone_config.template(triplet.object_b)),
    }
    g_zbar, breakdown, _ = _gradient_core(responses_ab, triplet, backbone_config, loss_config)
    return _grad_to_latent(g_zbar, z.channels), breakdown


def guided_noise(
    eps_unconditional: Latent,
    eps_conditional: Latent,
    gradient: Latent,
    config: GuidanceConfig,
) -> Latent:
    """Classifier-free mix of the two noise branches plus the scaled gradient."""
    if eps_unconditional.data.shape != eps_conditional.data.shape:
        raise ValueError("noise branches must share a shape")
    if gradient.data.shape != eps_conditional.data.shape:
        raise ValueError("gradient must match the noise shape")
    g = gradient.data
    norm = float(np.linalg.norm(g))
    if config.normalize_gradient and norm > 0:
        g = g / norm
        norm = 1.0
    if config.clip_gradient_norm is not None and norm > config.clip_gradient_norm:
        g = g * (config.clip_gradient_norm / norm)
    mixed = (
        eps_unconditional.data
        + config.gamma * (eps_conditional.data - eps_unconditional.data)
        + config.eta * g
    )
    return Latent(mixed)


def implied_clean(z: Latent, t: int, eps: Latent, schedule: Schedule) -> Latent:
    """Clean-image estimate implied by a noise prediction at step t."""
    schedule._check_t(t)
    return Latent((z.data - schedule.noise_scale(t) * eps.data) / schedule.signal_scale(t))


def reverse_step(z: Latent, t: int, eps: Latent, schedule: Schedule) -> Latent:
    """Deterministic update from step t to t-1 reusing the predicted noise.

    At t=1 the output is exactly the implied clean estimate.
    """
    if z.data.shape != eps.data.shape:
        raise ValueError("latent and noise must share a shape")
    x0 = implied_clean(z, t, eps, schedule)
    return Latent(
        schedule.signal_scale(t - 1) * x0.data + schedule.noise_scale(t - 1) * eps.data
    )


def initial_latent(config: BackboneConfig, seed: int) -> Latent:
    rng = np.random.default_rng(seed)
    return Latent(rng.standard_normal((config.channels, config.height, config.width)))


def sample(
    triplet: PromptTriplet,
    schedule: Schedule,
    backbone_config: BackboneConfig,
    guidance_config: GuidanceConfig,
    seed: int,
    keep_trace: bool = False,
) -> tuple[Latent, list[StepTrace]]:
    """Full reverse walk from pure noise under guided noise predictions.

    Returns the final latent and, when keep_trace is set, one StepTrace per
    step in descending t. Raises NumericalAbortError if the latent leaves
    the finite range.
    """
    z = initial_latent(backbone_config, seed)
    traces: list[StepTrace] = []
    zero_grad = Latent.zeros(backbone_config.channels, backbone_config.height, backbone_config.width)
    for t in range(schedule.steps, 0, -1):
        output, responses_ab = denoise_with_responses(
            z, t, triplet, schedule, backbone_config
        )
        if guidance_config.active_at(t, schedule.steps):
            g_zbar, breakdown, nodes = _gradient_core(
                responses_ab, triplet, backbone_config, guidance_config.loss
            )
            gradient = _grad_to_latent(g_zbar, backbone_config.channels)
        else:
            nodes = _forward_nodes(responses_ab, backbone_config)
            breakdown = _breakdown_from_nodes(nodes, triplet.relation, guidance_config.loss)
            gradient = zero_grad
        eps = guided_noise(output.eps_unconditional, output.eps_conditional, gradient, guidance_config)
        z_next = reverse_step(z, t, eps, schedule)
        if not np.isfinite(z_next.data).all():
            raise NumericalAbortError(t)
        if keep_trace:
            centroids = {
                token: {
                    f"{level.value}/{layer}": {
                        "x": nodes[(level, layer, token)].cx,
                        "y": nodes[(level, layer, token)].cy,
                    }
                    for level in SPATIAL_LEVELS
                    for layer in LAYERS
                }
                for token in TOKENS
            }
            traces.append(
                StepTrace(
                    t=t,
                    loss=breakdown,
                    gradient_norm=float(np.linalg.norm(gradient.data)),
                    centroids=centroids,
                )
            )
        z = z_next
    return z, traces
