"""Command line front end.

Subcommands: bench, ablate, gridsearch, gradcheck, metrics, sample.
Exit codes: 0 success, 2 configuration problems, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .evaluator import read_judgments_jsonl, visor_metrics
from .experiment import (
    ConfigError,
    ExperimentConfig,
    best_grid_rows,
    load_config,
    run_ablation,
    run_bench,
    run_gradcheck,
    run_gridsearch,
    run_single_sample,
)
from .grid import canonical_json
from .guidance import NumericalAbortError
from .prompt import PromptError, parse_prompt

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_common(parser: argparse.ArgumentParser, default_out: str) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON (or TOML) config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config value, e.g. guidance.eta=150 (repeatable)",
    )
    parser.add_argument("--out", type=Path, default=Path(default_out), help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override benchmark.base_seed")
    parser.add_argument("--workers", type=int, default=1, help="parallel sampling processes")
    parser.add_argument("--trace", action="store_true", help="write per-step trace files")
    parser.add_argument("--dump-images", action="store_true", help="write final images as PGM")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialguide",
        description="Spatial-relation guidance experiments on a toy diffusion backbone",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="run the relation benchmark under the configured guidance")
    _add_common(p, "runs/bench")

    p = sub.add_parser("ablate", help="benchmark every on/off subset of the loss terms")
    _add_common(p, "runs/ablate")

    p = sub.add_parser("gridsearch", help="sweep loss parameters, one benchmark per combination")
    _add_common(p, "runs/gridsearch")
    p.add_argument("--alpha", type=_float_list, default=[1.0, 1.5, 2.0])
    p.add_argument("--margin", type=_float_list, default=[0.15, 0.25])
    p.add_argument("--lambda-spatial", type=_float_list, default=[0.5])
    p.add_argument("--lambda-presence", type=_float_list, default=[1.0])
    p.add_argument("--lambda-balance", type=_float_list, default=[0.5])
    p.add_argument(
        "--pairs",
        type=int,
        default=4,
        help="object pairs per combination (grid searches shrink the bench)",
    )

    p = sub.add_parser("gradcheck", help="compare analytic loss gradients to finite differences")
    _add_common(p, "runs/gradcheck")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--cells", type=int, default=16)
    p.add_argument("--fd-step", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-4)

    p = sub.add_parser("metrics", help="recompute aggregate metrics from a judgments file")
    p.add_argument("--judgments", type=Path, required=True)
    p.add_argument("--images-per-prompt", type=int, default=4)
    p.add_argument("--out", type=Path, default=None, help="also write metrics.json here")

    p = sub.add_parser("sample", help="draw and judge a single image for one prompt")
    _add_common(p, "runs/sample")
    p.add_argument("--prompt", required=True, help="prompt text, e.g. 'a cat above a dog'")

    return parser


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from exc


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"benchmark.base_seed={args.seed}")
    return load_config(args.config, overrides)


def _print_metrics(metrics) -> None:
    print(f"object_accuracy  {metrics.object_accuracy:7.2f}")
    print(f"visor_uncond     {metrics.visor_uncond:7.2f}")
    print(f"visor_cond       {metrics.visor_cond:7.2f}")
    for k, value in enumerate(metrics.visor_at, start=1):
        print(f"visor_at_{k}       {value:7.2f}")
    print(f"t2i_spatial      {metrics.t2i_spatial:7.4f}")


def _cmd_bench(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    result = run_bench(
        config,
        args.out,
        workers=args.workers,
        keep_trace=args.trace,
        dump_images=args.dump_images,
    )
    print(f"bench: {result.record.judgment_count} images -> {result.out_dir}")
    _print_metrics(result.metrics)
    if result.record.aborts:
        print(f"aborted samples: {len(result.record.aborts)}")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    rows = run_ablation(config, args.out, workers=args.workers)
    print(f"ablate: {len(rows)} rows -> {args.out}")
    for row in rows:
        m = row.metrics
        print(
            f"{row.label:26s} oa={m.object_accuracy:6.2f} uncond={m.visor_uncond:6.2f} "
            f"cond={m.visor_cond:6.2f} t2i={m.t2i_spatial:6.4f}"
        )
    return EXIT_OK


def _cmd_gridsearch(args: argparse.Namespace) -> int:
    overrides = list(args.overrides) + [f"benchmark.pair_count={args.pairs}"]
    if args.seed is not None:
        overrides.append(f"benchmark.base_seed={args.seed}")
    config = load_config(args.config, overrides)
    rows = run_gridsearch(
        config,
        args.out,
        alphas=args.alpha,
        margins=args.margin,
        lambda_spatials=args.lambda_spatial,
        lambda_presences=args.lambda_presence,
        lambda_balances=args.lambda_balance,
        workers=args.workers,
    )
    print(f"gridsearch: {len(rows)} combinations -> {args.out}")
    for row in best_grid_rows(rows)[:10]:
        m = row.metrics
        print(
            f"alpha={row.alpha:4.2f} margin={row.margin:4.2f} ls={row.lambda_spatial:4.2f} "
            f"lp={row.lambda_presence:4.2f} lb={row.lambda_balance:4.2f} "
            f"uncond={m.visor_uncond:6.2f} cond={m.visor_cond:6.2f}"
        )
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    report = run_gradcheck(
        config,
        probes=args.probes,
        cells_per_probe=args.cells,
        fd_step=args.fd_step,
        threshold=args.threshold,
    )
    for probe in report.probes:
        print(
            f"probe {probe.probe:2d} t={probe.t:3d} relation={probe.relation:6s} "
            f"max_rel_err={probe.max_rel_err:.3e}"
        )
    print(
        f"gradcheck {'PASS' if report.passed else 'FAIL'}: max_rel_err="
        f"{report.max_rel_err:.3e} threshold={report.threshold:.1e} "
        f"({report.duration_seconds:.1f}s)"
    )
    args.out.mkdir(parents=True, exist_ok=True)
    payload = {
        "passed": report.passed,
        "max_rel_err": report.max_rel_err,
        "threshold": report.threshold,
        "probes": [
            {"probe": p.probe, "t": p.t, "relation": p.relation, "max_rel_err": p.max_rel_err}
            for p in report.probes
        ],
    }
    (args.out / "gradcheck.json").write_text(canonical_json(payload) + "\n")
    return EXIT_OK if report.passed else 1


def _cmd_metrics(args: argparse.Namespace) -> int:
    judgments = read_judgments_jsonl(args.judgments)
    try:
        metrics = visor_metrics(judgments, args.images_per_prompt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _print_metrics(metrics)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.json").write_text(canonical_json(metrics.to_json_dict()) + "\n")
    return EXIT_OK


def _cmd_sample(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    try:
        triplet = parse_prompt(args.prompt, config.backbone.vocabulary)
    except PromptError as exc:
        raise ConfigError(f"bad prompt: {exc}") from exc
    seed = args.seed if args.seed is not None else config.benchmark.base_seed
    result = run_single_sample(
        config,
        triplet,
        seed=seed,
        out_dir=args.out,
        keep_trace=args.trace,
        dump_images=args.dump_images,
    )
    print(f"sample: prompt={triplet.text!r} seed={seed} -> {result.out_dir}")
    print(
        f"both_present={result.judgment_both_present} "
        f"relation_correct={result.judgment_relation_correct} t2i={result.t2i_score:.3f}"
    )
    return EXIT_OK


_COMMANDS = {
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "gridsearch": _cmd_gridsearch,
    "gradcheck": _cmd_gradcheck,
    "metrics": _cmd_metrics,
    "sample": _cmd_sample,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
