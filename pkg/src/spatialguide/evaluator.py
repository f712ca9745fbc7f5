"""Detection and spatial-relation scoring of generated images.

Objects are detected by matched filtering with their own stamps, using an
energy-normalized response: the raw correlation is divided by the local
window energy (plus a floor that keeps empty windows quiet). Normalization
makes the filter prefer its own shape over any other stamp at equal
amplitude, so each object localizes at its own blob even when another
object's blob carries more raw energy. An object counts as present when its
normalized peak clears a fraction of the self-response of a clean unit
stamp. Judgments follow two conventions: a lenient one (both detected and
the dominant-axis relation agrees) and a stricter score that additionally
demands axis dominance and little box overlap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import BackboneConfig
from .grid import ScalarGrid, normalized_response_array
from .prompt import PromptTriplet, Relation

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds for matched-filter detection and relation scoring."""

    theta_detect: float = 0.4
    theta_iou: float = 0.1
    near_distance_factor: float = 3.0
    energy_floor: float = 0.25

    def __post_init__(self) -> None:
        if not 0 < self.theta_detect <= 1:
            raise ValueError(f"theta_detect must be in (0, 1], got {self.theta_detect}")
        if not 0 <= self.theta_iou <= 1:
            raise ValueError(f"theta_iou must be in [0, 1], got {self.theta_iou}")
        if not self.near_distance_factor > 0:
            raise ValueError("near_distance_factor must be positive")
        if not self.energy_floor >= 0:
            raise ValueError("energy_floor must be nonnegative")


@dataclass(frozen=True)
class Detection:
    """Outcome of matched filtering one object against one image."""

    present: bool
    confidence: float
    center: tuple[float, float] | None
    box: Box | None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.present and (self.center is None or self.box is None):
            raise ValueError("present detections need a center and a box")


def detection_self_response(energy_floor: float) -> float:
    """Normalized peak response of a clean unit-amplitude stamp: 1/sqrt(1+floor)."""
    return 1.0 / math.sqrt(1.0 + energy_floor)


def _parabolic_offset(left: float, center: float, right: float) -> float:
    """Sub-cell shift of a peak from its three-point neighbourhood.

    Vertex of the parabola through (-1, left), (0, center), (1, right),
    clamped to half a cell. Zero when the points are not concave, which
    covers plateaus and argmax cells that sit against a larger neighbour.
    """
    curvature = left - 2.0 * center + right
    if curvature >= 0.0:
        return 0.0
    return max(-0.5, min(0.5, 0.5 * (left - right) / curvature))


def detect_object(
    image: ScalarGrid, identifier: str, backbone: BackboneConfig, detector: DetectorConfig
) -> Detection:
    """Matched-filter detection: correlate with the object's stamp, threshold the peak.

    The response is energy-normalized, so a unit-amplitude blob of the
    object's own shape scores the clean self-response while blobs of other
    shapes score strictly less at equal amplitude (Cauchy-Schwarz).
    Confidence is the peak over the self-response, clamped to [0, 1]. The
    box is the stamp support centred on the peak cell, clipped to the image.
    """
    template = backbone.template(identifier)
    if image.height != backbone.height or image.width != backbone.width:
        raise ValueError("image does not match backbone geometry")
    response = normalized_response_array(image.data, template, detector.energy_floor)
    self_response = detection_self_response(detector.energy_floor)
    peak = float(response.max())
    confidence = min(1.0, max(0.0, peak / self_response))
    present = peak >= detector.theta_detect * self_response
    if not present:
        return Detection(present=False, confidence=confidence, center=None, box=None)
    flat = int(np.argmax(response))
    row, col = flat // image.width, flat % image.width
    # Refine the peak to sub-cell precision along each axis; blob centres
    # rarely sit on the cell lattice and the relation tests compare centres.
    d_col = d_row = 0.0
    if 0 < col < image.width - 1:
        d_col = _parabolic_offset(
            float(response[row, col - 1]),
            float(response[row, col]),
            float(response[row, col + 1]),
        )
    if 0 < row < image.height - 1:
        d_row = _parabolic_offset(
            float(response[row - 1, col]),
            float(response[row, col]),
            float(response[row + 1, col]),
        )
    center = ((col + 0.5 + d_col) / image.width, (row + 0.5 + d_row) / image.height)
    half = template.shape[0] // 2
    box = (
        max(0.0, (col - half) / image.width),
        max(0.0, (row - half) / image.height),
        min(1.0, (col + half + 1) / image.width),
        min(1.0, (row + half + 1) / image.height),
    )
    return Detection(present=True, confidence=confidence, center=center, box=box)


def box_iou(box_a: Box, box_b: Box) -> float:
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def classify_relation(center_a: tuple[float, float], center_b: tuple[float, float]) -> Relation:
    """Dominant-axis relation of A relative to B; exact ties go to the x axis.

    Coincident centers therefore classify as RIGHT (dx = 0 is not < 0).
    """
    dx = center_a[0] - center_b[0]
    dy = center_a[1] - center_b[1]
    if abs(dx) >= abs(dy):
        return Relation.LEFT if dx < 0 else Relation.RIGHT
    return Relation.ABOVE if dy < 0 else Relation.BELOW


def _mean_box_side(box: Box) -> float:
    return ((box[2] - box[0]) + (box[3] - box[1])) / 2.0


def _near_positional(det_a: Detection, det_b: Detection, detector: DetectorConfig) -> bool:
    assert det_a.center is not None and det_b.center is not None
    dist = math.hypot(
        det_a.center[0] - det_b.center[0], det_a.center[1] - det_b.center[1]
    )
    mean_side = (_mean_box_side(det_a.box) + _mean_box_side(det_b.box)) / 2.0
    return dist < detector.near_distance_factor * mean_side


def _strict_directional(
    relation: Relation, det_a: Detection, det_b: Detection, detector: DetectorConfig
) -> bool:
    dx = det_a.center[0] - det_b.center[0]
    dy = det_a.center[1] - det_b.center[1]
    if relation is Relation.LEFT:
        ok = dx < 0 and abs(dx) > abs(dy)
    elif relation is Relation.RIGHT:
        ok = dx > 0 and abs(dx) > abs(dy)
    elif relation is Relation.ABOVE:
        ok = dy < 0 and abs(dy) > abs(dx)
    else:
        ok = dy > 0 and abs(dy) > abs(dx)
    return ok and box_iou(det_a.box, det_b.box) < detector.theta_iou


@dataclass(frozen=True)
class EvaluationOutcome:
    both_present: bool
    relation_correct: bool
    t2i_score: float
    detection_a: Detection
    detection_b: Detection


def evaluate_image(
    image: ScalarGrid,
    triplet: PromptTriplet,
    backbone: BackboneConfig,
    detector: DetectorConfig,
) -> EvaluationOutcome:
    """Score one image against its prompt under both conventions.

    relation_correct uses the lenient dominant-axis test; t2i_score is the
    stricter convention (strict axis dominance plus an IoU cap for the
    directional relations, confidence-weighted proximity for NEAR).
    """
    det_a = detect_object(image, triplet.object_a, backbone, detector)
    det_b = detect_object(image, triplet.object_b, backbone, detector)
    both = det_a.present and det_b.present
    if not both:
        return EvaluationOutcome(False, False, 0.0, det_a, det_b)

    if triplet.relation is Relation.NEAR:
        positional = _near_positional(det_a, det_b, detector)
        correct = positional
        score = min(det_a.confidence, det_b.confidence) if positional else 0.0
    else:
        correct = classify_relation(det_a.center, det_b.center) == triplet.relation
        score = (
            1.0 if _strict_directional(triplet.relation, det_a, det_b, detector) else 0.0
        )
    return EvaluationOutcome(True, correct, score, det_a, det_b)


@dataclass(frozen=True)
class ImageJudgment:
    """One image's scores within a benchmark run."""

    prompt_index: int
    image_index: int
    both_present: bool
    relation_correct: bool
    t2i_score: float
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.prompt_index < 0 or self.image_index < 0:
            raise ValueError("indices must be nonnegative")
        if self.relation_correct and not self.both_present:
            raise ValueError("relation_correct requires both_present")
        if not 0.0 <= self.t2i_score <= 1.0:
            raise ValueError(f"t2i_score {self.t2i_score} outside [0, 1]")

    def to_json_dict(self) -> dict:
        payload = {
            "prompt_index": self.prompt_index,
            "image_index": self.image_index,
            "both_present": self.both_present,
            "relation_correct": self.relation_correct,
            "t2i_score": self.t2i_score,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        return payload

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ImageJudgment":
        try:
            return cls(
                prompt_index=int(payload["prompt_index"]),
                image_index=int(payload["image_index"]),
                both_present=bool(payload["both_present"]),
                relation_correct=bool(payload["relation_correct"]),
                t2i_score=float(payload["t2i_score"]),
                seed=int(payload["seed"]) if "seed" in payload else None,
            )
        except KeyError as exc:
            raise ValueError(f"judgment JSON missing key {exc}") from exc


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate VISOR-style percentages plus the stricter mean score."""

    object_accuracy: float
    visor_uncond: float
    visor_cond: float
    visor_at: tuple[float, ...]
    t2i_spatial: float
    prompt_count: int
    images_per_prompt: int

    def to_json_dict(self) -> dict:
        return {
            "object_accuracy": self.object_accuracy,
            "visor_uncond": self.visor_uncond,
            "visor_cond": self.visor_cond,
            "visor_at": {str(k + 1): v for k, v in enumerate(self.visor_at)},
            "t2i_spatial": self.t2i_spatial,
            "prompt_count": self.prompt_count,
            "images_per_prompt": self.images_per_prompt,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "MetricsReport":
        visor_at = payload["visor_at"]
        ordered = tuple(visor_at[str(k)] for k in range(1, len(visor_at) + 1))
        return cls(
            object_accuracy=float(payload["object_accuracy"]),
            visor_uncond=float(payload["visor_uncond"]),
            visor_cond=float(payload["visor_cond"]),
            visor_at=ordered,
            t2i_spatial=float(payload["t2i_spatial"]),
            prompt_count=int(payload["prompt_count"]),
            images_per_prompt=int(payload["images_per_prompt"]),
        )


def visor_metrics(judgments: Sequence[ImageJudgment], images_per_prompt: int) -> MetricsReport:
    """Aggregate per-image judgments into the benchmark report.

    Every prompt must contribute exactly images_per_prompt judgments.
    Ordering of the input does not matter; aggregation sorts by
    (prompt_index, image_index) first.
    """
    if images_per_prompt < 1:
        raise ValueError("images_per_prompt must be >= 1")
    items = sorted(judgments, key=lambda j: (j.prompt_index, j.image_index))
    if not items:
        raise ValueError("no judgments to aggregate")
    seen = set()
    per_prompt: dict[int, list[ImageJudgment]] = {}
    for j in items:
        key = (j.prompt_index, j.image_index)
        if key in seen:
            raise ValueError(f"duplicate judgment for prompt {j.prompt_index} image {j.image_index}")
        seen.add(key)
        per_prompt.setdefault(j.prompt_index, []).append(j)
    for prompt_index, group in per_prompt.items():
        if len(group) != images_per_prompt:
            raise ValueError(
                f"prompt {prompt_index} has {len(group)} judgments, expected {images_per_prompt}"
            )

    total = len(items)
    present_count = sum(j.both_present for j in items)
    correct_count = sum(j.relation_correct for j in items)
    object_accuracy = 100.0 * present_count / total
    visor_uncond = 100.0 * correct_count / total
    # Conditional accuracy over images where both objects appeared; the
    # empty case scores 0 by convention.
    visor_cond = 100.0 * correct_count / present_count if present_count else 0.0
    prompt_counts = [sum(j.relation_correct for j in group) for group in per_prompt.values()]
    visor_at = tuple(
        100.0 * sum(c >= k for c in prompt_counts) / len(prompt_counts)
        for k in range(1, images_per_prompt + 1)
    )
    t2i = sum(j.t2i_score for j in items) / total
    return MetricsReport(
        object_accuracy=object_accuracy,
        visor_uncond=visor_uncond,
        visor_cond=visor_cond,
        visor_at=visor_at,
        t2i_spatial=t2i,
        prompt_count=len(per_prompt),
        images_per_prompt=images_per_prompt,
    )


def write_judgments_jsonl(judgments: Iterable[ImageJudgment], path: str | Path) -> None:
    lines = [
        json.dumps(j.to_json_dict(), sort_keys=True, separators=(",", ":")) for j in judgments
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_judgments_jsonl(path: str | Path) -> list[ImageJudgment]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(ImageJudgment.from_json_dict(json.loads(line)))
    return out
