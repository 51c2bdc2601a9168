import argparse
import logging
import sys
import typing
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from agents.runner import DEFAULT_PROFILE_BUDGETS, ExperimentRunner
from config.experiment import ExperimentConfig, apply_overrides, load_experiment, load_sweep
from config.settings import Settings, SimConfig, configure_logging

logger = logging.getLogger("augserve")


def _flag_type(annotation):
    # Optional[int] -> int
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    return args[0] if args else annotation


def _add_sim_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("system constants (override the config file)")
    for name, info in SimConfig.model_fields.items():
        flag = "--" + name.replace("_", "-")
        kind = _flag_type(info.annotation)
        if kind is bool:
            group.add_argument(flag, dest=f"sim_{name}", action=argparse.BooleanOptionalAction)
        else:
            group.add_argument(flag, dest=f"sim_{name}", type=kind, metavar=name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="augserve",
        description="Simulate scheduling of augmented LLM requests that pause on external calls.",
    )
    parser.add_argument("--config", help="experiment YAML file")
    parser.add_argument("--scheduler", choices=["fcfs", "random", "augserve"])
    parser.add_argument(
        "--workload",
        choices=["poisson", "gamma", "fixed-count", "trace"],
        help="arrival process; --cv implies gamma and --requests implies fixed-count",
    )
    parser.add_argument("--rate", type=float, help="arrival rate (req/s)")
    parser.add_argument("--cv", type=float, help="inter-arrival coefficient of variation")
    parser.add_argument("--duration-s", type=float, help="arrival window (s)")
    parser.add_argument("--requests", type=int, help="request count for fixed-count runs")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--run-id")
    parser.add_argument("--trace", help="replay a JSONL trace file")
    parser.add_argument("--save-trace", help="write the generated workload as JSONL")
    parser.add_argument("--event-log", action="store_true", help="write events.jsonl")
    parser.add_argument("--budget-mode", choices=["dynamic", "static"])
    parser.add_argument("--static-budget", type=int, help="tokens per iteration in static mode")
    parser.add_argument(
        "--predictor", choices=["oracle", "noisy_duration", "bucket_length", "combined", "trace"]
    )
    parser.add_argument(
        "--profile-budget",
        nargs="*",
        type=int,
        metavar="TOKENS",
        help=f"sweep static budgets (default {list(DEFAULT_PROFILE_BUDGETS)}) plus the dynamic one",
    )
    parser.add_argument("--sweep", help="sweep YAML file (base config plus grid)")
    parser.add_argument("--workers", type=int, help="parallel sweep processes")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    _add_sim_flags(parser)
    return parser


def _overrides(args: argparse.Namespace, base: ExperimentConfig) -> Dict:
    overrides = {
        "strategy": args.scheduler,
        "workload.rate": args.rate,
        "workload.cv": args.cv,
        "workload.duration_s": args.duration_s,
        "workload.requests": args.requests,
        "workload.seed": args.seed,
        "output_dir": args.out,
        "run_id": args.run_id,
        "budget.mode": args.budget_mode,
        "budget.static_tokens": args.static_budget,
        "predictor.kind": args.predictor,
    }
    if args.event_log:
        overrides["event_log"] = True

    kind = args.workload
    if args.trace:
        kind = "trace"
        overrides["workload.trace_path"] = args.trace
    elif kind is None and base.workload.kind in ("poisson", "gamma"):
        if args.requests is not None:
            kind = "fixed-count"
        elif args.cv is not None:
            kind = "gamma"
    overrides["workload.kind"] = kind

    for name in SimConfig.model_fields:
        overrides[f"sim.{name}"] = getattr(args, f"sim_{name}")
    return overrides


def _load_base(path: Optional[str], settings: Settings) -> ExperimentConfig:
    if path:
        return load_experiment(path)
    if Path(settings.DEFAULT_CONFIG_PATH).is_file():
        logger.debug("Using default config %s", settings.DEFAULT_CONFIG_PATH)
        return load_experiment(settings.DEFAULT_CONFIG_PATH)
    return ExperimentConfig()


def main(argv: Optional[List[str]] = None) -> int:
    settings = Settings()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or settings.LOG_LEVEL)
    runner = ExperimentRunner()

    try:
        if args.sweep:
            sweep = load_sweep(args.sweep)
            if args.out:
                base = apply_overrides(sweep.base, {"output_dir": args.out})
                sweep = sweep.model_copy(update={"base": base})
            result = runner.run_sweep(sweep, workers=args.workers)
        else:
            base = _load_base(args.config, settings)
            config = apply_overrides(base, _overrides(args, base))
            if args.profile_budget is not None:
                budgets = args.profile_budget or list(DEFAULT_PROFILE_BUDGETS)
                result = runner.profile_budget(config, budgets)
            else:
                result = runner.run_experiment(config, save_trace_path=args.save_trace)
    except ValidationError as e:
        print(f"Invalid configuration:\n{e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1

    if not result["success"]:
        print(f"Error ({result['source']}): {result['error']}", file=sys.stderr)
        return 1

    if "line" in result:
        print(result["line"])
    elif "suggested_target_max" in result:
        for row in result["rows"]:
            print(
                f"{row['budget_mode']:>7} {str(row['static_tokens']):>5} "
                f"goodput={row['goodput']:.4f} attainment={row['attainment']:.2%}"
            )
        print(f"suggested target_max: {result['suggested_target_max']}")
    else:
        print(f"sweep of {len(result['rows'])} runs written to {result['output']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
