"""Per-request serving metrics and run-level aggregates.

Percentiles use the nearest-rank method and means use ``math.fsum`` so the
summary does not depend on record order and golden files stay bit-stable.
"""

import csv
import json
import logging
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from config.settings import SimConfig

logger = logging.getLogger(__name__)

DEFAULT_SLO_SCALES = (1.0, 5.0)


@dataclass(frozen=True)
class MetricsRecord:
    request_id: int
    arrival: float
    first_token_time: float
    finish_time: float
    generated_len: int
    ttft: float
    e2e: float
    norm_latency: float
    tpot: float
    queueing_delay: float
    n_calls: int
    preemptions: int
    slo_ok: bool


CSV_HEADER = [f.name for f in fields(MetricsRecord)]


def meets_slo(ttft: float, norm_latency: float, cfg: SimConfig, scale: float = 1.0) -> bool:
    return ttft < scale * cfg.slo_ttft and norm_latency < scale * cfg.slo_norm_latency


def finalize(
    request_id: int,
    arrival: float,
    first_token_time: float,
    finish_time: float,
    generated_len: int,
    cfg: SimConfig,
    queueing_delay: float = 0.0,
    n_calls: int = 0,
    preemptions: int = 0,
) -> MetricsRecord:
    if not arrival <= first_token_time <= finish_time:
        raise ValueError(
            f"request {request_id}: expected arrival <= first_token <= finish, got "
            f"{arrival}, {first_token_time}, {finish_time}"
        )
    if generated_len < 1:
        raise ValueError(f"request {request_id}: generated_len must be >= 1, got {generated_len}")

    ttft = first_token_time - arrival
    e2e = finish_time - arrival
    norm_latency = e2e / generated_len
    tpot = (finish_time - first_token_time) / max(generated_len - 1, 1)
    return MetricsRecord(
        request_id=request_id,
        arrival=arrival,
        first_token_time=first_token_time,
        finish_time=finish_time,
        generated_len=generated_len,
        ttft=ttft,
        e2e=e2e,
        norm_latency=norm_latency,
        tpot=tpot,
        queueing_delay=queueing_delay,
        n_calls=n_calls,
        preemptions=preemptions,
        slo_ok=meets_slo(ttft, norm_latency, cfg),
    )


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Smallest value with at least ``pct`` percent of the data at or below it."""
    ordered = np.sort(np.asarray(values, dtype=float))
    if ordered.size == 0:
        return 0.0
    rank = max(1, math.ceil(pct * ordered.size / 100.0 - 1e-9))
    return float(ordered[min(rank, ordered.size) - 1])


def _describe(values: List[float]) -> Dict[str, float]:
    if not values:
        return {"mean": 0.0, "p50": 0.0, "p95": 0.0}
    return {
        "mean": math.fsum(values) / len(values),
        "p50": nearest_rank(values, 50),
        "p95": nearest_rank(values, 95),
    }


def aggregate(
    records: Iterable[MetricsRecord],
    horizon: float,
    cfg: SimConfig,
    incomplete: int = 0,
    rejected: int = 0,
    slo_scales: Sequence[float] = DEFAULT_SLO_SCALES,
) -> Dict:
    """Goodput, attainment and latency statistics of completed requests."""
    records = list(records)
    completed = len(records)
    empty = completed == 0
    if empty:
        logger.warning("No completed requests; aggregate metrics are zero")

    def rates(scale: float) -> Dict[str, float]:
        ok = sum(1 for r in records if meets_slo(r.ttft, r.norm_latency, cfg, scale))
        return {
            "goodput": ok / horizon if horizon > 0 else 0.0,
            "attainment": ok / completed if completed else 0.0,
        }

    slo_ok = sum(1 for r in records if r.slo_ok)
    return {
        "completed": completed,
        "incomplete": incomplete,
        "rejected": rejected,
        "slo_ok": slo_ok,
        "horizon": horizon,
        "goodput": slo_ok / horizon if horizon > 0 else 0.0,
        "attainment": slo_ok / completed if completed else 0.0,
        "slo_scaled": {f"{scale:g}x": rates(scale) for scale in slo_scales},
        "ttft": _describe([r.ttft for r in records]),
        "norm_latency": _describe([r.norm_latency for r in records]),
        "tpot": _describe([r.tpot for r in records]),
        "queueing_delay": _describe([r.queueing_delay for r in records]),
        "empty": empty,
    }


def write_requests_csv(records: Iterable[MetricsRecord], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: r.request_id)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for record in ordered:
            writer.writerow(astuple(record))


def write_summary_json(summary: Dict, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
