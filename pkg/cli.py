import argparse
import json
import logging
import os
import sys

from pydantic import ValidationError

from analysis import AnalysisReport, analyze, summary_table, write_report
from bandit import BanditState
from configs import ExperimentConfig, RunManifest, SimConfig, format_validation_error
from events import read_event_log, save_event_log
from NudgeEngine import DecisionRecord, NudgeEngine, StageError
from recommender import load_stock
from simulator import PharmacySimulator, stock_list
from stat_functions import DEFAULT_ALPHA, STRATA
from utils import NudgeEngineError, file_checksum, resolve_path, utc_now

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_MISSING = 4
EXIT_CHECKSUM = 5

MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def load_config(model, path):
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, f"missing inputs: {path}")
    try:
        return model.parse_file(path)
    except ValidationError as e:
        raise CliError(EXIT_CONFIG, f"invalid config {path}:\n  " + "\n  ".join(format_validation_error(e)))
    except ValueError as e:
        raise CliError(EXIT_CONFIG, f"invalid config {path}: {e}")


def with_seed(config, seed):
    if seed is None:
        return config
    return config.copy(update={"seed": seed})


def require(*paths):
    missing = [p for p in paths if p is not None and not os.path.exists(p)]
    if missing:
        raise CliError(EXIT_MISSING, "missing inputs: " + ", ".join(missing))


def update_manifest(out_dir, command, artifacts, config_paths=None, seeds=None, started_at=None):
    """Record checksums of the written artifacts; earlier commands' entries are kept."""
    path = os.path.join(out_dir, MANIFEST)
    manifest = RunManifest.parse_file(path) if os.path.exists(path) else RunManifest(command=command, output_dir=out_dir, started_at=started_at or utc_now())
    manifest.command = command
    manifest.config_paths = {**manifest.config_paths, **(config_paths or {})}
    manifest.seeds = {**manifest.seeds, **(seeds or {})}
    manifest.artifacts = {**manifest.artifacts, **{name: file_checksum(os.path.join(out_dir, name)) for name in artifacts}}
    manifest.finished_at = utc_now()
    with open(path, "w") as file:
        file.write(manifest.json(indent=4))
    return manifest


def cmd_simulate(args):
    started = utc_now()
    config = with_seed(load_config(SimConfig, args.config), args.seed)
    os.makedirs(args.out, exist_ok=True)

    print(f"\n{'='*60}")
    print("Nudge Engine Simulator")
    print(f"{'='*60}")
    print(f"Pharmacies: {config.n_pharmacies}  Skus: {config.n_skus}  History: {config.history_weeks} weeks")
    print(f"Uplift: {config.uplift_effect}  Responder fraction: {config.responder_fraction}  Seed: {config.seed}")
    print(f"Output directory: {args.out}")
    print(f"{'='*60}\n")

    simulator = PharmacySimulator(config)
    events = simulator.history()
    save_event_log(os.path.join(args.out, "events.jsonl"), events)
    simulator.to_file(os.path.join(args.out, "population.json"))
    with open(os.path.join(args.out, "stock.txt"), "w") as file:
        file.writelines(sku + "\n" for sku in stock_list(config))

    update_manifest(args.out, "simulate", ["events.jsonl", "population.json", "stock.txt"], {"simulate": args.config}, {"simulate": config.seed}, started)
    print(f"Wrote {len(events)} events for {len(simulator.population)} pharmacies")
    return EXIT_OK


def cmd_run(args):
    started = utc_now()
    config = with_seed(load_config(ExperimentConfig, args.config), args.seed)
    if args.stock:
        config = config.copy(update={"stock_path": args.stock})
    elif config.stock_path:
        config = config.copy(update={"stock_path": str(resolve_path(config.stock_path, os.path.dirname(os.path.abspath(args.config))))})
    require(args.events, args.population, config.stock_path)
    os.makedirs(args.out, exist_ok=True)

    print(f"\n{'='*60}")
    print(f"Nudge Engine Experiment: {config.name}")
    print(f"{'='*60}")
    print(f"Weeks: {config.duration_weeks}  First decision: {config.decision_time(1).isoformat()}")
    print(f"Pure control fraction: {config.pure_control_fraction}  Seed: {config.seed}")
    print(f"Mode: {'closed loop' if args.population else 'replay'}")
    print(f"{'='*60}\n")

    simulator = PharmacySimulator.from_file(args.population) if args.population else None
    stock = load_stock(config.stock_path) if config.stock_path else None
    checkpoint = os.path.join(args.out, "checkpoint.json")
    if args.resume and os.path.exists(checkpoint):
        engine = NudgeEngine.resume(config, args.out, simulator, stock)
    else:
        if args.resume:
            logger.warning("No checkpoint in %s, starting from week 1", args.out)
        engine = NudgeEngine(config, read_event_log(args.events), simulator, stock, args.out)

    try:
        result = engine.run(args.stop_after_week)
    except StageError as e:
        raise CliError(EXIT_RUN, f"run failed in week {e.week}: {e}")
    engine.checkpoint(args.out)

    update_manifest(args.out, "run", ["decisions.jsonl", "events.jsonl", "bandit_state.json", "checkpoint.json"], {"run": args.config}, {"run": config.seed}, started)
    print(f"Completed {result.weeks_completed} of {config.duration_weeks} weeks, {len(result.decisions)} decisions")
    return EXIT_OK


def cmd_analyze(args):
    started = utc_now()
    require(args.decisions, args.events, args.state)
    strata = [s for s in args.strata.split(",") if s] if args.strata else []
    unknown = sorted(set(strata) - set(STRATA))
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown strata {unknown}, expected a subset of {list(STRATA)}")

    with open(args.decisions, "r") as file:
        decisions = [DecisionRecord.parse_raw(line) for line in file if line.strip()]
    with open(args.state, "r") as file:
        state = BanditState.from_dict(json.load(file))
    events = read_event_log(args.events)

    print(f"\n{'='*60}")
    print("Nudge Engine Analysis")
    print(f"{'='*60}")
    print(f"Decisions: {len(decisions)}  Events: {len(events)}  Alpha: {args.alpha}")
    print(f"Strata: {', '.join(strata) or 'none'}  t-SNE: {'off' if args.no_tsne else 'on'}")
    print(f"{'='*60}\n")

    report = analyze(decisions, events, state, alpha=args.alpha, strata=strata, tsne=not args.no_tsne, seed=args.seed or 0)
    paths = write_report(report, args.out)
    update_manifest(args.out, "analyze", [os.path.basename(p) for p in paths.values()], seeds={"analyze": args.seed or 0}, started_at=started)
    for note in report.notes:
        print(f"Note: {note}")
    return EXIT_OK


def cmd_report(args):
    path = os.path.join(args.out, MANIFEST)
    require(path, os.path.join(args.out, "analysis.json"))
    manifest = RunManifest.parse_file(path)
    mismatched = [name for name, checksum in sorted(manifest.artifacts.items()) if not os.path.exists(os.path.join(args.out, name)) or file_checksum(os.path.join(args.out, name)) != checksum]
    if mismatched:
        raise CliError(EXIT_CHECKSUM, "checksum mismatch: " + ", ".join(mismatched))

    report = AnalysisReport.parse_file(os.path.join(args.out, "analysis.json"))
    rows = summary_table(report)
    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value}" for name, value in rows]
    with open(os.path.join(args.out, "summary.txt"), "w") as file:
        file.write("\n".join(lines) + "\n")

    print(f"\n{'='*60}")
    print(f"Results ({report.n_weeks} weeks, alpha {report.alpha})")
    print(f"{'='*60}")
    for line in lines:
        print(line)
    print(f"{'='*60}\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nudge-engine",
        description="Adaptive nudging experiments: simulate, run, analyze, report",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s simulate --config configs/sim.json --out out/sim
  %(prog)s run --config configs/xp1.json --events out/sim/events.jsonl --population out/sim/population.json --out out/xp1
  %(prog)s analyze --decisions out/xp1/decisions.jsonl --events out/xp1/events.jsonl --state out/xp1/bandit_state.json --out out/xp1
  %(prog)s report --out out/xp1

Environment:
  NUDGE_ENGINE_THREADS  caps the number of worker threads
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Print debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="Generate a synthetic pharmacy population and its event history")
    simulate.add_argument("--config", required=True, help="Simulation config (JSON)")
    simulate.add_argument("--out", required=True, help="Output directory")
    simulate.add_argument("--seed", type=int, default=None, help="Override the config seed")
    simulate.set_defaults(func=cmd_simulate)

    run = commands.add_parser("run", help="Run an experiment over a recorded log or a simulated population")
    run.add_argument("--config", required=True, help="Experiment config (JSON)")
    run.add_argument("--events", required=True, help="Event log (JSONL) covering at least the history")
    run.add_argument("--out", required=True, help="Output directory")
    run.add_argument("--population", default=None, help="population.json of the simulator for a closed-loop run")
    run.add_argument("--seed", type=int, default=None, help="Override the config seed")
    run.add_argument("--stock", default=None, help="Stock list overriding the config stock_path")
    run.add_argument("--resume", action="store_true", help="Continue from the checkpoint in --out")
    run.add_argument("--stop-after-week", type=int, default=None, help="Stop after this week (checkpoint kept)")
    run.set_defaults(func=cmd_run)

    analyze_parser = commands.add_parser("analyze", help="Impact analysis of a finished run")
    analyze_parser.add_argument("--decisions", required=True)
    analyze_parser.add_argument("--events", required=True)
    analyze_parser.add_argument("--state", required=True, help="bandit_state.json of the run")
    analyze_parser.add_argument("--out", required=True)
    analyze_parser.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="Significance level (default: 0.10)")
    analyze_parser.add_argument("--strata", default=",".join(STRATA), help="Comma-separated strata (default: all)")
    analyze_parser.add_argument("--no-tsne", action="store_true", help="Skip the context embedding")
    analyze_parser.add_argument("--seed", type=int, default=0, help="Seed of the embedding")
    analyze_parser.set_defaults(func=cmd_analyze)

    report = commands.add_parser("report", help="Verify checksums and print the results table")
    report.add_argument("--out", required=True)
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as e:
        print(f"\nError: {e}", file=sys.stderr)
        return e.code
    except KeyboardInterrupt:
        print("\n\nCancelled by user.")
        return 1
    except NudgeEngineError as e:
        print(f"\nError: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
