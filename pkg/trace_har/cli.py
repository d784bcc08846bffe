#!/usr/bin/env python3
"""
Command-line entry point: run, eval, summarize, align, report, validate
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .backends import make_backend
from .config import RunConfig, load_config, load_env_settings
from .database import CACHE_FILENAME
from .db_operations import ResponseCache
from .errors import BackendUnavailableError, ConfigError, TraceError
from .evaluation import aggregate_reports, apply_label_map, common_span, evaluate_timelines, format_table
from .inference import (
    ReasoningClient,
    load_home_inputs,
    plan_tasks,
    prepare_evidence,
    run_task,
)
from .ingest import parse_ground_truth
from .label_maps import load_label_map
from .plots import plot_short_segments, plot_timeline_strip
from .schemas import DecodeParams, RunReport
from .startup_validator import StartupValidator
from .utils import TimeUtils

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILENAME = "trace.log"


def setup_logging(level: str, output_dir: Optional[Path] = None) -> None:
    """stdout plus output_dir/trace.log"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(output_dir / LOG_FILENAME))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, handlers=handlers, force=True)


# Parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trace-har",
        description="Activity timelines from smart-home sensors and recognizer predictions",
        epilog="Any config field can be overridden with --key.path=value (e.g. --window.window_units=5).",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, help="run configuration YAML")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config field (repeatable)")
        sub.add_argument("--log-level", help="logging level (default from config or LOG_LEVEL)")

    run = subparsers.add_parser("run", help="run the pipeline for every configured home")
    common(run)
    run.add_argument("--jobs", type=int, help="homes/folds to run in parallel")
    run.add_argument("--check-backend", action="store_true", help="check backend reachability first")
    run.add_argument("--no-cache", action="store_true", help="bypass the response cache")
    run.set_defaults(handler=cmd_run)

    evaluate = subparsers.add_parser("eval", help="score a timeline CSV against ground truth")
    common(evaluate)
    evaluate.add_argument("--pred", type=Path, required=True, help="predicted timeline CSV (start,end,label)")
    evaluate.add_argument("--gt", type=Path, required=True, help="ground-truth CSV (start,end,label)")
    evaluate.add_argument("--label-map", help="map applied to ground-truth labels (built-in name or YAML)")
    evaluate.add_argument("--pred-label-map", help="map applied to predicted labels")
    evaluate.add_argument("--coarse-map", help="fine-to-coarse map applied to both sides")
    evaluate.add_argument("--name", default="eval", help="report directory name under the output directory")
    evaluate.add_argument("--plots", action="store_true", help="write SVG plots")
    evaluate.set_defaults(handler=cmd_eval)

    summarize = subparsers.add_parser("summarize", help="write per-interval observation summaries")
    common(summarize)
    summarize.add_argument("--home", help="only this home id")
    summarize.set_defaults(handler=cmd_summarize)

    align = subparsers.add_parser("align", help="write per-interval evidence bundles")
    common(align)
    align.add_argument("--home", help="only this home id")
    align.set_defaults(handler=cmd_align)

    report = subparsers.add_parser("report", help="aggregate evaluation reports across folds")
    common(report)
    report.add_argument("reports", nargs="+", type=Path, help="evaluation JSON files")
    report.add_argument("--section", default="refined", help="section of evaluation.json files to aggregate")
    report.set_defaults(handler=cmd_report)

    validate = subparsers.add_parser("validate", help="check inputs, output directory and backend")
    common(validate)
    validate.add_argument("--check-backend", action="store_true", help="also check backend reachability")
    validate.set_defaults(handler=cmd_validate)
    return parser


def _split_overrides(parser: argparse.ArgumentParser, argv: Sequence[str]) -> Tuple[argparse.Namespace, List[str]]:
    args, unknown = parser.parse_known_args(argv)
    overrides = list(getattr(args, "overrides", []) or [])
    for item in unknown:
        if not item.startswith("--") or "=" not in item:
            parser.error(f"unrecognized argument: {item}")
        overrides.append(item)
    return args, overrides


def _prepare(args: argparse.Namespace, overrides: Sequence[str]) -> RunConfig:
    config = load_config(args.config, overrides)
    env = load_env_settings()
    level = args.log_level or env.log_level or config.log_level
    setup_logging(level, Path(config.output_dir))
    return config


# Commands
def cmd_run(args: argparse.Namespace, config: RunConfig) -> int:
    env = load_env_settings()
    if args.jobs is not None:
        config = config.model_copy(update={"jobs": args.jobs})
    if config.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    config.check_paths()

    if args.check_backend or config.backend.check_reachable:
        validator = StartupValidator(config, env, check_backend=True)
        if not validator.run_validation():
            if validator.backend_unreachable:
                raise BackendUnavailableError("backend unreachable: " + "; ".join(validator.errors))
            raise ConfigError("; ".join(validator.errors))

    output_dir = Path(config.output_dir)
    backend = make_backend(config.backend, env)
    cache = None
    if config.backend.cache and not args.no_cache:
        cache = ResponseCache(output_dir / CACHE_FILENAME)
        logger.info(f"Response cache has {cache.size()} entries")
    decode = DecodeParams(temperature=config.backend.temperature, max_tokens=config.backend.max_tokens)

    work = []
    for home in config.homes:
        inputs = load_home_inputs(home, config)
        for task in plan_tasks(inputs, config):
            work.append((task, inputs))
    logger.info(f"Running {len(work)} task(s) with {config.jobs} job(s), backend {backend.name}/{backend.model}")

    def execute(item):
        task, inputs = item
        client = ReasoningClient(
            backend,
            max_attempts=config.backend.max_attempts,
            retry_delay=config.backend.retry_delay_s,
            cache=cache,
            decode_params=decode,
        )
        return task, run_task(task, inputs, config, client)

    try:
        if config.jobs == 1:
            results = [execute(item) for item in work]
        else:
            with ThreadPoolExecutor(max_workers=config.jobs) as pool:
                results = list(pool.map(execute, work))
    finally:
        if cache is not None:
            cache.close()

    reports: List[RunReport] = [report for _, (report, _) in results]
    _write_fold_summaries(results, output_dir)

    steps = sum(r.steps for r in reports)
    unavailable = sum(r.unavailable_windows for r in reports)
    degraded = sum(len(r.degraded_windows) for r in reports)
    logger.info(f"Finished {len(reports)} task(s): {steps} steps, {degraded} degraded window stage(s)")
    if steps and unavailable == steps:
        raise BackendUnavailableError("backend was unavailable for every inference window")
    return 0


def _write_fold_summaries(results, output_dir: Path) -> None:
    """Per home with scored folds: aggregate.json and summary.txt"""
    by_home: Dict[str, List[Dict]] = {}
    for task, (_, scores) in results:
        if task.fold is not None and scores is not None:
            by_home.setdefault(task.home_id, []).append(scores)
    for home_id, fold_scores in by_home.items():
        aggregate = {
            section: aggregate_reports([s[section] for s in fold_scores])
            for section in ("refined", "cross_reference", "env_baseline")
        }
        directory = output_dir / home_id
        (directory / "aggregate.json").write_text(json.dumps(aggregate, indent=2), encoding="utf-8")
        table = format_table({f"{home_id} {section}": values for section, values in aggregate.items()})
        (directory / "summary.txt").write_text(table, encoding="utf-8")
        logger.info(f"{home_id} across {len(fold_scores)} folds:\n{table}")


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    for path in (args.pred, args.gt):
        if not path.is_file():
            raise ConfigError(f"file not found: {path}")
    pred = parse_ground_truth(args.pred)
    gt = parse_ground_truth(args.gt)

    gt_map = load_label_map(args.label_map or config.eval.label_map)
    if gt_map is not None:
        gt = apply_label_map(gt, gt_map)
    pred_map = load_label_map(args.pred_label_map)
    if pred_map is not None:
        pred = apply_label_map(pred, pred_map)
    label_space = list(config.labels)
    coarse = load_label_map(args.coarse_map or config.eval.coarse_map)
    if coarse is not None:
        pred, gt = apply_label_map(pred, coarse), apply_label_map(gt, coarse)
        label_space = sorted(set(coarse.mapping.values()))

    unit = TimeUtils.unit_delta(config.window.unit_seconds)
    hull = common_span(pred, gt)
    span_start = TimeUtils.floor_to_unit(hull[0], unit)
    span_end = TimeUtils.ceil_to_unit(hull[1], unit)
    report = evaluate_timelines(
        pred, gt, unit, label_space,
        fixed_label_space=config.eval.fixed_label_space,
        span_start=span_start,
        span_end=span_end,
        emd_max_len=config.eval.emd_max_len,
        short_max_len=config.eval.short_max_len,
    )
    report["label_map"] = gt_map.name if gt_map is not None else None
    report["coarse_map"] = coarse.name if coarse is not None else None

    directory = Path(config.output_dir) / args.name
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    table = format_table({args.pred.stem: report})
    (directory / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)

    if args.plots or config.eval.plots:
        plot_timeline_strip(pred, gt, directory / "timeline.svg", labels=label_space)
        plot_short_segments(report["short_segments"]["pred"], report["short_segments"]["gt"], directory / "short_segments.svg")
    logger.info(f"Wrote evaluation report to {directory}")
    return 0


def _selected_homes(config: RunConfig, home_id: Optional[str]):
    homes = [h for h in config.homes if home_id is None or h.home_id == home_id]
    if not homes:
        raise ConfigError(f"no configured home matches '{home_id}'" if home_id else "no homes configured")
    return homes


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")


def cmd_summarize(args: argparse.Namespace, config: RunConfig) -> int:
    config.check_paths()
    for home in _selected_homes(config, args.home):
        evidence = prepare_evidence(load_home_inputs(home, config), config)
        directory = Path(config.output_dir) / home.home_id
        directory.mkdir(parents=True, exist_ok=True)
        _write_jsonl(directory / "summaries.jsonl", (
            {
                "start": s.window_start.isoformat(),
                "end": s.window_end.isoformat(),
                **s.to_prompt_dict(),
                "carried_location": s.carried_location,
                "out_of_home": s.out_of_home,
            }
            for s in evidence.summaries
        ))
        logger.info(f"Wrote {len(evidence.summaries)} summaries to {directory / 'summaries.jsonl'}")
    return 0


def cmd_align(args: argparse.Namespace, config: RunConfig) -> int:
    config.check_paths()
    for home in _selected_homes(config, args.home):
        evidence = prepare_evidence(load_home_inputs(home, config), config)
        directory = Path(config.output_dir) / home.home_id
        directory.mkdir(parents=True, exist_ok=True)
        _write_jsonl(directory / "bundles.jsonl", (b.to_prompt_dict() for b in evidence.bundles))
        logger.info(f"Wrote {len(evidence.bundles)} evidence bundles to {directory / 'bundles.jsonl'}")
    return 0


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    reports = []
    for path in args.reports:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read report {path}: {e}")
        reports.append(document.get(args.section, document) if "accuracy" not in document else document)

    aggregate = aggregate_reports(reports)
    directory = Path(config.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "aggregate.json").write_text(json.dumps(aggregate, indent=2), encoding="utf-8")
    table = format_table({f"{args.section} (n={len(reports)})": aggregate})
    (directory / "aggregate.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_validate(args: argparse.Namespace, config: RunConfig) -> int:
    validator = StartupValidator(config, load_env_settings(), check_backend=args.check_backend or None)
    if validator.run_validation():
        return 0
    return BackendUnavailableError.exit_code if validator.backend_unreachable else ConfigError.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entry point; maps errors to exit codes 0/2/3/4"""
    parser = build_parser()
    args, overrides = _split_overrides(parser, sys.argv[1:] if argv is None else argv)
    if getattr(args, "handler", None) is None:
        parser.print_help()
        return 0

    setup_logging("INFO")
    try:
        config = _prepare(args, overrides)
        return args.handler(args, config)
    except TraceError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if e.hint:
            logger.error(f"hint: {e.hint}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
