import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from agents.engine import ServingEngine
from agents.guardrails import SimulationError, TraceFormatError
from agents.predictor import Predictor
from agents.scheduler import RankingStrategy, RequestScheduler
from config.experiment import ExperimentConfig, SweepConfig, apply_overrides
from config.settings import Settings
from utils.metrics import aggregate, write_requests_csv, write_summary_json
from utils.workload import build_workload, save_trace, to_profiles

logger = logging.getLogger(__name__)

DEFAULT_PROFILE_BUDGETS = (100, 500, 1000, 1500, 2000)

SWEEP_COLUMNS = [
    "run_id",
    "success",
    "strategy",
    "workload",
    "rate",
    "cv",
    "budget_mode",
    "static_tokens",
    "completed",
    "incomplete",
    "goodput",
    "attainment",
    "ttft_mean",
    "ttft_p50",
    "ttft_p95",
    "error",
]

PROFILE_COLUMNS = [
    "budget_mode",
    "static_tokens",
    "target_max",
    "goodput",
    "attainment",
    "ttft_p95",
    "completed",
]


def summary_line(summary: Dict) -> str:
    ttft = summary["ttft"]
    return (
        f"{summary['run_id']}: goodput={summary['goodput']:.4f} req/s "
        f"attainment={summary['attainment']:.2%} "
        f"ttft_mean={ttft['mean']:.3f}s ttft_p95={ttft['p95']:.3f}s"
    )


class ExperimentRunner:
    def __init__(self):
        self.settings = Settings()

    def run_experiment(self, config: ExperimentConfig, save_trace_path: Optional[str] = None) -> Dict:
        """Run one experiment end to end and write its artifacts."""

        run_id = config.resolved_run_id()
        run_dir = Path(config.output_dir) / run_id

        # Step 1: Workload
        try:
            records = build_workload(config.workload)
            if save_trace_path:
                save_trace(records, save_trace_path)
                logger.info("Workload saved to %s", save_trace_path)
            profiles = to_profiles(records)
        except (TraceFormatError, ValueError, OSError) as e:
            return {"success": False, "error": f"Workload failed: {e}", "source": "workload"}

        # Step 2: Simulation
        try:
            horizon = config.workload.duration_s if config.workload.horizon_kind == "horizon" else None
            predictor = Predictor(
                kind=config.predictor.kind,
                mse_target=config.predictor.mse_target,
                edges=config.predictor.edges,
                accuracy=config.predictor.accuracy,
                seed=config.workload.seed,
            )
            scheduler = RequestScheduler(
                config.sim, RankingStrategy(config.strategy, seed=config.workload.seed), predictor
            )
            engine = ServingEngine(
                config.sim,
                scheduler,
                profiles,
                budget_mode=config.budget.mode,
                static_budget=config.budget.static_tokens,
                horizon=horizon,
                keep_event_log=config.event_log,
                max_iterations=config.sim.max_iterations or self.settings.MAX_ITERATIONS,
            )
            logger.info(
                "Trying %s with %d requests (%s budget)",
                run_id,
                len(profiles),
                config.budget.mode,
            )
            result = engine.run()
        except SimulationError as e:
            logger.warning("Simulation %s failed: %s", run_id, e)
            return {"success": False, "error": f"Simulation failed: {e}", "source": "engine"}
        except ValueError as e:
            return {"success": False, "error": f"Setup failed: {e}", "source": "setup"}

        # Step 3: Metrics and artifacts
        try:
            horizon_used = horizon if horizon is not None else result.makespan
            summary = aggregate(
                result.records,
                horizon_used,
                config.sim,
                incomplete=result.incomplete,
                rejected=result.rejected,
            )
            summary.update(
                {
                    "run_id": run_id,
                    "strategy": config.strategy,
                    "budget": config.budget.model_dump(),
                    "seed": config.workload.seed,
                    "horizon_kind": config.workload.horizon_kind,
                    "event_log_hash": result.event_hash,
                    "iterations": result.iterations,
                    "end_time": result.end_time,
                    "preemptions": result.preemptions,
                    "policy_counts": result.policy_counts,
                    "overhead": result.overhead,
                    "config": config.model_dump(mode="json"),
                }
            )
            write_requests_csv(result.records, run_dir / "requests.csv")
            write_summary_json(summary, run_dir / "summary.json")
            if config.event_log:
                result.event_log.write_jsonl(run_dir / "events.jsonl")
        except (OSError, ValueError) as e:
            return {"success": False, "error": f"Writing artifacts failed: {e}", "source": "metrics"}

        line = summary_line(summary)
        logger.info("Run successful: %s", line)
        return {
            "success": True,
            "summary": summary,
            "line": line,
            "output_dir": str(run_dir),
            "source": "engine",
        }

    def run_sweep(self, sweep: SweepConfig, workers: Optional[int] = None) -> Dict:
        runs = sweep.expand()
        workers = workers or sweep.workers or self.settings.SWEEP_WORKERS
        logger.info("Sweep of %d runs with %d worker(s)", len(runs), workers)

        configs = [config for _, config in runs]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_isolated, configs))
        else:
            results = [self.run_experiment(config) for config in configs]

        rows = [_sweep_row(config, result) for config, result in zip(configs, results)]
        out_path = Path(sweep.base.output_dir) / "sweep_summary.csv"
        _write_rows(out_path, SWEEP_COLUMNS, rows)

        failed = [row["run_id"] for row in rows if not row["success"]]
        if failed:
            return {
                "success": False,
                "error": f"{len(failed)} sweep run(s) failed: {', '.join(failed)}",
                "source": "sweep",
                "rows": rows,
            }
        return {"success": True, "rows": rows, "output": str(out_path), "source": "sweep"}

    def profile_budget(
        self, config: ExperimentConfig, budgets: Sequence[int] = DEFAULT_PROFILE_BUDGETS
    ) -> Dict:
        """Goodput at each static budget, then the dynamic budget profiled at the best one.

        The dynamic row runs with ``sim.target_max`` set to the suggested static
        budget, so its clamp range is centred on what the sweep measured.
        """
        base_id = config.resolved_run_id()
        rows: List[Dict] = []
        for tokens in budgets:
            overrides = {
                "budget.mode": "static",
                "budget.static_tokens": tokens,
                "run_id": f"{base_id}-static{tokens}",
            }
            result = self.run_experiment(apply_overrides(config, overrides))
            if not result["success"]:
                return result
            rows.append(_profile_row("static", tokens, config.sim.target_max, result["summary"]))

        # ties go to the smaller budget
        best = max(rows, key=lambda row: (row["goodput"], -row["static_tokens"]))
        target_max = best["static_tokens"]
        overrides = {
            "budget.mode": "dynamic",
            "sim.target_max": target_max,
            "run_id": f"{base_id}-dynamic",
        }
        result = self.run_experiment(apply_overrides(config, overrides))
        if not result["success"]:
            return result
        rows.append(_profile_row("dynamic", "", target_max, result["summary"]))

        out_path = Path(config.output_dir) / "budget_profile.csv"
        _write_rows(out_path, PROFILE_COLUMNS, rows)
        logger.info("Suggested target_max: %d", target_max)
        return {
            "success": True,
            "rows": rows,
            "suggested_target_max": target_max,
            "output": str(out_path),
            "source": "profile",
        }


def _profile_row(mode: str, static_tokens, target_max: int, summary: Dict) -> Dict:
    return {
        "budget_mode": mode,
        "static_tokens": static_tokens,
        "target_max": target_max,
        "goodput": summary["goodput"],
        "attainment": summary["attainment"],
        "ttft_p95": summary["ttft"]["p95"],
        "completed": summary["completed"],
    }


def _run_isolated(config: ExperimentConfig) -> Dict:
    return ExperimentRunner().run_experiment(config)


def _sweep_row(config: ExperimentConfig, result: Dict) -> Dict:
    row = {
        "run_id": config.resolved_run_id(),
        "success": result["success"],
        "strategy": config.strategy,
        "workload": config.workload.kind,
        "rate": config.workload.rate,
        "cv": config.workload.cv,
        "budget_mode": config.budget.mode,
        "static_tokens": config.budget.static_tokens,
        "error": result.get("error", ""),
    }
    summary = result.get("summary")
    if summary:
        row.update(
            completed=summary["completed"],
            incomplete=summary["incomplete"],
            goodput=summary["goodput"],
            attainment=summary["attainment"],
            ttft_mean=summary["ttft"]["mean"],
            ttft_p50=summary["ttft"]["p50"],
            ttft_p95=summary["ttft"]["p95"],
        )
    return row


def _write_rows(path: Path, columns: Sequence[str], rows: Sequence[Dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
