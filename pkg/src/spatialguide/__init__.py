"""Spatial-relation guidance for a toy diffusion sampler."""

from .backbone import (
    AttentionStack,
    BackboneConfig,
    DenoiserOutput,
    Level,
    Schedule,
    ScheduleConfig,
    add_noise,
    denoise,
    make_schedule,
    synthesize_clean,
)
from .evaluator import (
    Detection,
    DetectorConfig,
    ImageJudgment,
    MetricsReport,
    classify_relation,
    detect_object,
    evaluate_image,
    visor_metrics,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    load_config,
    run_ablation,
    run_bench,
    run_gradcheck,
    run_gridsearch,
    run_single_sample,
)
from .grid import (
    Latent,
    ScalarGrid,
    cross_correlate,
    downsample_avg,
    gaussian_template,
    spatial_softmax,
)
from .guidance import (
    GuidanceConfig,
    NumericalAbortError,
    StepTrace,
    guided_noise,
    loss_gradient,
    reverse_step,
    sample,
)
from .losses import LossBreakdown, LossConfig, compound_loss, gelu, spatial_loss
from .prompt import (
    MalformedPromptError,
    PromptError,
    PromptTriplet,
    Relation,
    UnknownObjectError,
    Vocabulary,
    VocabEntry,
    default_vocabulary,
    generate_benchmark,
    parse_prompt,
    render_prompt,
)
from .stats import Centroid, LayerStat, TokenStats, centroid, relation_delta, stats_for_token, variance

__all__ = [
    "AttentionStack",
    "BackboneConfig",
    "Centroid",
    "ConfigError",
    "DenoiserOutput",
    "Detection",
    "DetectorConfig",
    "ExperimentConfig",
    "GuidanceConfig",
    "ImageJudgment",
    "Latent",
    "LayerStat",
    "Level",
    "LossBreakdown",
    "LossConfig",
    "MalformedPromptError",
    "MetricsReport",
    "NumericalAbortError",
    "PromptError",
    "PromptTriplet",
    "Relation",
    "ScalarGrid",
    "Schedule",
    "ScheduleConfig",
    "StepTrace",
    "TokenStats",
    "UnknownObjectError",
    "VocabEntry",
    "Vocabulary",
    "add_noise",
    "centroid",
    "classify_relation",
    "compound_loss",
    "cross_correlate",
    "default_vocabulary",
    "denoise",
    "detect_object",
    "downsample_avg",
    "evaluate_image",
    "gaussian_template",
    "gelu",
    "generate_benchmark",
    "guided_noise",
    "load_config",
    "loss_gradient",
    "make_schedule",
    "parse_prompt",
    "relation_delta",
    "render_prompt",
    "reverse_step",
    "run_ablation",
    "run_bench",
    "run_gradcheck",
    "run_gridsearch",
    "run_single_sample",
    "sample",
    "spatial_loss",
    "spatial_softmax",
    "stats_for_token",
    "synthesize_clean",
    "variance",
    "visor_metrics",
]
