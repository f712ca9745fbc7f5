"""Benchmark runs, ablations, grid search, gradient checking, persistence.

A run is fully described by an ExperimentConfig; its canonical JSON form is
hashed into the run record so artifacts can be traced back to an exact
configuration. Metrics files are written in canonical JSON and are
byte-identical across reruns and worker counts.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, ScheduleConfig
from .evaluator import (
    DetectorConfig,
    ImageJudgment,
    MetricsReport,
    evaluate_image,
    visor_metrics,
    write_judgments_jsonl,
)
from .grid import Latent, ScalarGrid, canonical_json
from .guidance import GuidanceConfig, NumericalAbortError, StepTrace, loss_gradient, sample
from .losses import LossConfig
from .prompt import (
    DIRECTIONAL_RELATIONS,
    PromptTriplet,
    Vocabulary,
    VocabEntry,
    generate_benchmark,
    render_prompt,
    write_triplets_jsonl,
)


class ConfigError(ValueError):
    """Configuration input that cannot be turned into a valid run."""


@dataclass(frozen=True)
class BenchmarkConfig:
    """How many prompts to build and how many images to draw per prompt.

    Image i of every prompt uses seed base_seed + i, so different guidance
    settings see identical noise and prompts pair up across runs.
    """

    pair_count: int = 40
    images_per_prompt: int = 4
    base_seed: int = 42

    def __post_init__(self) -> None:
        if self.pair_count < 1:
            raise ValueError("pair_count must be >= 1")
        if self.images_per_prompt < 1:
            raise ValueError("images_per_prompt must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def to_dict(self) -> dict:
        b = self.backbone
        g = self.guidance
        return {
            "backbone": {
                "height": b.height,
                "width": b.width,
                "channels": b.channels,
                "coarse_factor": b.coarse_factor,
                "mid_factor": b.mid_factor,
                "fine_factor": b.fine_factor,
                "coarse_temperature": b.coarse_temperature,
                "mid_temperature": b.mid_temperature,
                "fine_temperature": b.fine_temperature,
                "layer_scales": list(b.layer_scales),
                "location_temperature_scale": b.location_temperature_scale,
                "clean_clip": b.clean_clip,
                "vocabulary": [
                    {
                        "identifier": e.identifier,
                        "display_name": e.display_name,
                        "template_side": e.template_side,
                        "template_sigma": e.template_sigma,
                    }
                    for e in b.vocabulary.entries
                ],
            },
            "schedule": {
                "steps": self.schedule.steps,
                "beta_start": self.schedule.beta_start,
                "beta_end": self.schedule.beta_end,
            },
            "guidance": {
                "gamma": g.gamma,
                "eta": g.eta,
                "guide_from_step": g.guide_from_step,
                "guide_to_step": g.guide_to_step,
                "normalize_gradient": g.normalize_gradient,
                "clip_gradient_norm": g.clip_gradient_norm,
                "loss": {
                    "alpha": g.loss.alpha,
                    "margin": g.loss.margin,
                    "lambda_spatial": g.loss.lambda_spatial,
                    "lambda_presence": g.loss.lambda_presence,
                    "lambda_balance": g.loss.lambda_balance,
                },
            },
            "benchmark": {
                "pair_count": self.benchmark.pair_count,
                "images_per_prompt": self.benchmark.images_per_prompt,
                "base_seed": self.benchmark.base_seed,
            },
            "detector": {
                "theta_detect": self.detector.theta_detect,
                "theta_iou": self.detector.theta_iou,
                "near_distance_factor": self.detector.near_distance_factor,
                "energy_floor": self.detector.energy_floor,
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        merged = cls().to_dict()
        _deep_merge(merged, payload, path="")
        try:
            backbone_d = dict(merged["backbone"])
            vocab_entries = backbone_d.pop("vocabulary")
            layer_scales = tuple(backbone_d.pop("layer_scales"))
            vocab = Vocabulary(
                tuple(
                    VocabEntry(
                        identifier=e["identifier"],
                        template_side=int(e["template_side"]),
                        template_sigma=float(e["template_sigma"]),
                        display_name=e.get("display_name", ""),
                    )
                    for e in vocab_entries
                )
            )
            backbone = BackboneConfig(vocabulary=vocab, layer_scales=layer_scales, **backbone_d)
            guidance_d = dict(merged["guidance"])
            loss = LossConfig(**guidance_d.pop("loss"))
            guidance = GuidanceConfig(loss=loss, **guidance_d)
            return cls(
                backbone=backbone,
                schedule=ScheduleConfig(**merged["schedule"]),
                guidance=guidance,
                benchmark=BenchmarkConfig(**merged["benchmark"]),
                detector=DetectorConfig(**merged["detector"]),
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("ascii")).hexdigest()


def _deep_merge(base: dict, overlay: dict, path: str) -> None:
    """Overlay onto defaults, rejecting keys the schema does not know."""
    if not isinstance(overlay, dict):
        raise ConfigError(f"expected an object at {path or 'top level'}")
    for key, value in overlay.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            _deep_merge(base[key], value, here)
        else:
            base[key] = value


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Build a config from an optional JSON file plus key=value overrides."""
    payload: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            payload = _maybe_toml(text, exc)
    merged = ExperimentConfig.from_dict(payload).to_dict()
    for assignment in overrides:
        _apply_override(merged, assignment)
    return ExperimentConfig.from_dict(merged)


def _maybe_toml(text: str, json_error: Exception) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        raise ConfigError(f"config file is not valid JSON: {json_error}") from json_error
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file is neither valid JSON nor TOML: {exc}") from exc


def _apply_override(config_dict: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw_value = assignment.split("=", 1)
    parts = key.strip().split(".")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = config_dict
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key {key!r} is a section, not a value")
    node[leaf] = value


@dataclass(frozen=True)
class RunRecord:
    command: str
    config_hash: str
    duration_seconds: float
    workers: int
    judgment_count: int
    aborts: tuple[dict, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "duration_seconds": self.duration_seconds,
            "workers": self.workers,
            "judgment_count": self.judgment_count,
            "aborts": list(self.aborts),
        }


@dataclass(frozen=True)
class BenchResult:
    metrics: MetricsReport
    judgments: tuple[ImageJudgment, ...]
    record: RunRecord
    out_dir: Path


def _bench_job(args: tuple) -> tuple:
    """Worker body: draw one image, judge it. Must stay picklable and pure."""
    (
        prompt_index,
        image_index,
        triplet,
        seed,
        backbone,
        schedule_cfg,
        guidance,
        detector,
        keep_trace,
        keep_image,
    ) = args
    schedule = schedule_cfg.build()
    abort_step = None
    traces: list[StepTrace] = []
    try:
        latent, traces = sample(
            triplet, schedule, backbone, guidance, seed=seed, keep_trace=keep_trace
        )
        image = latent.channel_mean()
        outcome = evaluate_image(image, triplet, backbone, detector)
        judged = ImageJudgment(
            prompt_index=prompt_index,
            image_index=image_index,
            both_present=outcome.both_present,
            relation_correct=outcome.relation_correct,
            t2i_score=outcome.t2i_score,
            seed=seed,
        )
    except NumericalAbortError as exc:
        abort_step = exc.step
        image = None
        judged = ImageJudgment(
            prompt_index=prompt_index,
            image_index=image_index,
            both_present=False,
            relation_correct=False,
            t2i_score=0.0,
            seed=seed,
        )
    trace_dicts = [t.to_json_dict() for t in traces] if keep_trace else None
    image_values = (
        np.asarray(image.data) if (keep_image and image is not None) else None
    )
    return prompt_index, image_index, judged, abort_step, trace_dicts, image_values


def _run_jobs(jobs: list[tuple], workers: int) -> list[tuple]:
    if workers <= 1:
        results = [_bench_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_job, jobs, chunksize=4))
    # Aggregation order is fixed regardless of completion order.
    results.sort(key=lambda r: (r[0], r[1]))
    return results


def _write_metrics_files(out_dir: Path, metrics: MetricsReport) -> None:
    (out_dir / "metrics.json").write_text(canonical_json(metrics.to_json_dict()) + "\n")
    (out_dir / "metrics.csv").write_text(_metrics_csv_text(metrics))


def _metrics_header(images_per_prompt: int) -> list[str]:
    return (
        ["object_accuracy", "visor_uncond", "visor_cond"]
        + [f"visor_at_{k}" for k in range(1, images_per_prompt + 1)]
        + ["t2i_spatial", "prompt_count", "images_per_prompt"]
    )


def _metrics_row(metrics: MetricsReport) -> list:
    return (
        [metrics.object_accuracy, metrics.visor_uncond, metrics.visor_cond]
        + list(metrics.visor_at)
        + [metrics.t2i_spatial, metrics.prompt_count, metrics.images_per_prompt]
    )


def _metrics_csv_text(metrics: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_metrics_header(metrics.images_per_prompt))
    writer.writerow(_metrics_row(metrics))
    return buf.getvalue()


def run_bench(
    config: ExperimentConfig,
    out_dir: str | Path,
    workers: int = 1,
    keep_trace: bool = False,
    dump_images: bool = False,
    command: str = "bench",
) -> BenchResult:
    """Generate the benchmark, sample every image, judge, aggregate, persist."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()

    triplets = generate_benchmark(
        config.backbone.vocabulary, config.benchmark.pair_count, config.benchmark.base_seed
    )
    jobs = [
        (
            pi,
            ii,
            triplet,
            config.benchmark.base_seed + ii,
            config.backbone,
            config.schedule,
            config.guidance,
            config.detector,
            keep_trace,
            dump_images,
        )
        for pi, triplet in enumerate(triplets)
        for ii in range(config.benchmark.images_per_prompt)
    ]
    results = _run_jobs(jobs, workers)

    judgments = tuple(r[2] for r in results)
    aborts = tuple(
        {"prompt_index": r[0], "image_index": r[1], "step": r[3]}
        for r in results
        if r[3] is not None
    )
    metrics = visor_metrics(judgments, config.benchmark.images_per_prompt)

    (out / "config.json").write_text(canonical_json(config.to_dict()) + "\n")
    write_triplets_jsonl(triplets, out / "benchmark.jsonl")
    write_judgments_jsonl(judgments, out / "judgments.jsonl")
    _write_metrics_files(out, metrics)
    if keep_trace:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
        for pi, ii, _, _, trace_dicts, _ in results:
            if trace_dicts is not None:
                lines = [canonical_json(d) for d in trace_dicts]
                (trace_dir / f"prompt{pi:04d}_img{ii}.jsonl").write_text(
                    "\n".join(lines) + ("\n" if lines else "")
                )
    if dump_images:
        image_dir = out / "images"
        image_dir.mkdir(exist_ok=True)
        for pi, ii, _, abort_step, _, image_values in results:
            if image_values is not None:
                ScalarGrid(image_values).write_pgm(image_dir / f"prompt{pi:04d}_img{ii}.pgm")

    record = RunRecord(
        command=command,
        config_hash=config.config_hash(),
        duration_seconds=time.monotonic() - started,
        workers=workers,
        judgment_count=len(judgments),
        aborts=aborts,
    )
    (out / "record.json").write_text(json.dumps(record.to_json_dict(), indent=2) + "\n")
    return BenchResult(metrics=metrics, judgments=judgments, record=record, out_dir=out)


#: Ablation rows in a fixed order: every on/off mask over the three terms.
ABLATION_MASKS: tuple[tuple[bool, bool, bool], ...] = tuple(
    itertools.product((False, True), repeat=3)
)


def mask_label(mask: tuple[bool, bool, bool]) -> str:
    names = ("spatial", "presence", "balance")
    on = [n for n, flag in zip(names, mask) if flag]
    return "+".join(on) if on else "none"


def apply_loss_mask(config: ExperimentConfig, mask: tuple[bool, bool, bool]) -> ExperimentConfig:
    """Zero the weights of switched-off terms, keeping the configured values otherwise."""
    loss = config.guidance.loss
    masked = replace(
        loss,
        lambda_spatial=loss.lambda_spatial if mask[0] else 0.0,
        lambda_presence=loss.lambda_presence if mask[1] else 0.0,
        lambda_balance=loss.lambda_balance if mask[2] else 0.0,
    )
    return replace(config, guidance=replace(config.guidance, loss=masked))


@dataclass(frozen=True)
class AblationRow:
    mask: tuple[bool, bool, bool]
    label: str
    metrics: MetricsReport


def run_ablation(
    config: ExperimentConfig, out_dir: str | Path, workers: int = 1
) -> list[AblationRow]:
    """Benchmark every subset of loss terms with shared seeds and prompts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mask in ABLATION_MASKS:
        label = mask_label(mask)
        sub = out / f"row_{''.join('1' if f else '0' for f in mask)}_{label.replace('+', '_')}"
        result = run_bench(
            apply_loss_mask(config, mask), sub, workers=workers, command="ablate"
        )
        rows.append(AblationRow(mask=mask, label=label, metrics=result.metrics))

    header = ["spatial_on", "presence_on", "balance_on", "label"] + _metrics_header(
        config.benchmark.images_per_prompt
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([int(row.mask[0]), int(row.mask[1]), int(row.mask[2]), row.label] + _metrics_row(row.metrics))
    (out / "ablation.csv").write_text(buf.getvalue())
    return rows


MAX_GRID_COMBOS = 256


@dataclass(frozen=True)
class GridRow:
    alpha: float
    margin: float
    lambda_spatial: float
    lambda_presence: float
    lambda_balance: float
    metrics: MetricsReport


def run_gridsearch(
    config: ExperimentConfig,
    out_dir: str | Path,
    alphas: Sequence[float],
    margins: Sequence[float],
    lambda_spatials: Sequence[float],
    lambda_presences: Sequence[float],
    lambda_balances: Sequence[float],
    workers: int = 1,
) -> list[GridRow]:
    """run_bench per loss-parameter combination; rows land in grid.csv.

    The combination count is capped so a typo cannot schedule days of work.
    """
    axes = [list(alphas), list(margins), list(lambda_spatials), list(lambda_presences), list(lambda_balances)]
    if any(not axis for axis in axes):
        raise ConfigError("every grid axis needs at least one value")
    combos = list(itertools.product(*axes))
    if len(combos) > MAX_GRID_COMBOS:
        raise ConfigError(
            f"grid has {len(combos)} combinations, limit is {MAX_GRID_COMBOS}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (alpha, margin, ls, lp, lb) in enumerate(combos):
        try:
            loss = LossConfig(
                alpha=alpha,
                margin=margin,
                lambda_spatial=ls,
                lambda_presence=lp,
                lambda_balance=lb,
            )
        except ValueError as exc:
            raise ConfigError(f"grid point {i} invalid: {exc}") from exc
        sub_config = replace(config, guidance=replace(config.guidance, loss=loss))
        result = run_bench(sub_config, out / f"combo_{i:03d}", workers=workers, command="gridsearch")
        rows.append(
            GridRow(
                alpha=alpha,
                margin=margin,
                lambda_spatial=ls,
                lambda_presence=lp,
                lambda_balance=lb,
                metrics=result.metrics,
            )
        )

    header = [
        "alpha",
        "margin",
        "lambda_spatial",
        "lambda_presence",
        "lambda_balance",
    ] + _metrics_header(config.benchmark.images_per_prompt)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [row.alpha, row.margin, row.lambda_spatial, row.lambda_presence, row.lambda_balance]
            + _metrics_row(row.metrics)
        )
    (out / "grid.csv").write_text(buf.getvalue())
    return rows


def best_grid_rows(rows: Sequence[GridRow]) -> list[GridRow]:
    """Rows sorted by the headline metric, best first; ties keep grid order."""
    return sorted(
        rows,
        key=lambda r: (-r.metrics.visor_uncond, -r.metrics.visor_cond, -r.metrics.object_accuracy),
    )


@dataclass(frozen=True)
class ProbeResult:
    probe: int
    t: int
    relation: str
    max_rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    probes: tuple[ProbeResult, ...]
    max_rel_err: float
    threshold: float
    passed: bool
    duration_seconds: float


def run_gradcheck(
    config: ExperimentConfig,
    probes: int = 10,
    cells_per_probe: int = 16,
    fd_step: float = 1e-4,
    threshold: float = 1e-4,
    seed: int = 1234,
    gradient_scale: float = 1.0,
) -> GradCheckReport:
    """Compare the analytic loss gradient against central finite differences.

    gradient_scale multiplies the analytic side; anything but 1.0 should
    make the check fail, which is how the check itself is tested.
    """
    if probes < 1 or cells_per_probe < 1:
        raise ConfigError("probes and cells_per_probe must be >= 1")
    started = time.monotonic()
    backbone = config.backbone
    schedule = config.schedule.build()
    loss_cfg = config.guidance.loss
    vocab_ids = backbone.vocabulary.identifiers()
    results = []
    for probe in range(probes):
        rng = np.random.default_rng(seed + probe)
        z = Latent(rng.standard_normal((backbone.channels, backbone.height, backbone.width)))
        t = int(rng.integers(1, schedule.steps + 1))
        a_idx, b_idx = rng.choice(len(vocab_ids), size=2, replace=False)
        relation = DIRECTIONAL_RELATIONS[int(rng.integers(len(DIRECTIONAL_RELATIONS)))]
        triplet = PromptTriplet(
            object_a=vocab_ids[int(a_idx)],
            relation=relation,
            object_b=vocab_ids[int(b_idx)],
            text=render_prompt(vocab_ids[int(a_idx)], relation, vocab_ids[int(b_idx)], backbone.vocabulary),
        )
        analytic, _ = loss_gradient(z, t, triplet, schedule, backbone, loss_cfg)

        def total_at(arr: np.ndarray) -> float:
            _, breakdown = loss_gradient(
                Latent(arr), t, triplet, schedule, backbone, loss_cfg
            )
            return breakdown.total

        max_err = 0.0
        cells = rng.integers(
            [0, 0, 0],
            [backbone.channels, backbone.height, backbone.width],
            size=(cells_per_probe, 3),
        )
        for c, h, w in cells:
            bumped = z.data.copy()
            bumped[c, h, w] += fd_step
            plus = total_at(bumped)
            bumped[c, h, w] -= 2 * fd_step
            minus = total_at(bumped)
            fd = (plus - minus) / (2 * fd_step)
            an = float(analytic.data[c, h, w]) * gradient_scale
            rel_err = abs(fd - an) / max(abs(an), 1e-8)
            max_err = max(max_err, rel_err)
        results.append(
            ProbeResult(probe=probe, t=t, relation=relation.value, max_rel_err=max_err)
        )
    overall = max(r.max_rel_err for r in results)
    return GradCheckReport(
        probes=tuple(results),
        max_rel_err=overall,
        threshold=threshold,
        passed=overall < threshold,
        duration_seconds=time.monotonic() - started,
    )


@dataclass(frozen=True)
class SampleResult:
    judgment_both_present: bool
    judgment_relation_correct: bool
    t2i_score: float
    final_image: ScalarGrid
    traces: tuple
    out_dir: Path


def run_single_sample(
    config: ExperimentConfig,
    triplet: PromptTriplet,
    seed: int,
    out_dir: str | Path,
    keep_trace: bool = False,
    dump_images: bool = False,
) -> SampleResult:
    """Draw one image for one prompt and judge it; aborts propagate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = config.schedule.build()
    latent, traces = sample(
        triplet, schedule, config.backbone, config.guidance, seed=seed, keep_trace=keep_trace
    )
    image = latent.channel_mean()
    outcome = evaluate_image(image, triplet, config.backbone, config.detector)
    (out / "config.json").write_text(canonical_json(config.to_dict()) + "\n")
    (out / "image.json").write_text(image.to_json() + "\n")
    if dump_images:
        image.write_pgm(out / "image.pgm")
    if keep_trace:
        lines = [canonical_json(t.to_json_dict()) for t in traces]
        (out / "trace.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    result_payload = {
        "prompt": triplet.to_json_dict(),
        "seed": seed,
        "both_present": outcome.both_present,
        "relation_correct": outcome.relation_correct,
        "t2i_score": outcome.t2i_score,
    }
    (out / "judgment.json").write_text(canonical_json(result_payload) + "\n")
    return SampleResult(
        judgment_both_present=outcome.both_present,
        judgment_relation_correct=outcome.relation_correct,
        t2i_score=outcome.t2i_score,
        final_image=image,
        traces=tuple(traces),
        out_dir=out,
    )
