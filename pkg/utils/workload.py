"""Request streams: synthetic arrival processes, shape sampling and trace files.

Trace files are UTF-8 JSON lines, one request per line::

    {"arrival_time": 0.4, "l_pre": 96, "segments": [
        {"gen_len": 20, "api_duration_s": 0.5, "api_return_len": 40, "api_kind": "qa"},
        {"gen_len": 12}]}

Every segment but the last carries a call; predicted fields
(``gen_len_pred``, ``api_duration_pred``) are optional.
"""

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from agents.guardrails import TraceFormatError
from config.experiment import ShapeSpec, WorkloadSpec
from utils.cost_model import CallSpec, RequestProfile, Segment

logger = logging.getLogger(__name__)


class TraceSegment(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gen_len: int = Field(ge=0)
    api_duration_s: Optional[float] = Field(None, ge=0)
    api_return_len: Optional[int] = Field(None, ge=0)
    api_kind: Optional[str] = None
    gen_len_pred: Optional[float] = Field(None, ge=0)
    api_duration_pred: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _call_fields_together(self) -> "TraceSegment":
        if (self.api_duration_s is None) != (self.api_return_len is None):
            raise ValueError("a call needs both api_duration_s and api_return_len")
        return self

    @property
    def has_call(self) -> bool:
        return self.api_duration_s is not None


class TraceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arrival_time: float = Field(ge=0)
    l_pre: int = Field(ge=1)
    segments: List[TraceSegment] = Field(min_length=1)
    request_id: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _calls_between_segments(self) -> "TraceRecord":
        *inner, last = self.segments
        missing = [i for i, segment in enumerate(inner) if not segment.has_call]
        if missing:
            raise ValueError(f"segments {missing} end without a call; only the last may")
        if last.has_call:
            raise ValueError(f"segment {len(inner)} is the last and must not carry a call")
        return self


# ----- arrival processes ----------------------------------------------


def _check_rate(rate: float) -> None:
    if rate <= 0:
        raise ValueError(f"rate must be > 0, got {rate}")


def gamma_interarrivals(rng: np.random.Generator, rate: float, cv: float, size: int) -> np.ndarray:
    """Gamma gaps with mean ``1/rate`` and coefficient of variation ``cv``."""
    _check_rate(rate)
    if cv <= 0:
        raise ValueError(f"cv must be > 0, got {cv}")
    return rng.gamma(shape=1.0 / cv**2, scale=cv**2 / rate, size=size)


def _arrivals_until(rng: np.random.Generator, draw, horizon: float) -> List[float]:
    arrivals = []
    t = 0.0
    while True:
        t += float(draw(rng))
        if t >= horizon:
            return arrivals
        arrivals.append(t)


def poisson_arrivals(rng: np.random.Generator, rate: float, horizon: float) -> List[float]:
    _check_rate(rate)
    return _arrivals_until(rng, lambda g: g.exponential(1.0 / rate), horizon)


def gamma_arrivals(rng: np.random.Generator, rate: float, cv: float, horizon: float) -> List[float]:
    _check_rate(rate)
    if cv <= 0:
        raise ValueError(f"cv must be > 0, got {cv}")
    return _arrivals_until(rng, lambda g: g.gamma(1.0 / cv**2, cv**2 / rate), horizon)


# ----- shapes ----------------------------------------------------------


def _lognormal(rng: np.random.Generator, median: float, sigma: float) -> float:
    if sigma == 0:
        return float(median)
    return float(rng.lognormal(np.log(median), sigma))


def _length(rng: np.random.Generator, median: float, sigma: float, low: int, high: int) -> int:
    return int(np.clip(round(_lognormal(rng, median, sigma)), low, high))


def sample_shape(rng: np.random.Generator, shape: ShapeSpec, arrival_time: float) -> TraceRecord:
    l_pre = _length(rng, shape.prompt_median, shape.prompt_sigma, shape.prompt_min, shape.prompt_max)

    if rng.random() < shape.no_call_fraction:
        n_calls = 0
    else:
        n_calls = int(rng.integers(shape.calls_min, shape.calls_max + 1))

    kinds = sorted(shape.api_kinds)
    weights = np.array([shape.api_kinds[k].weight for k in kinds], dtype=float)
    weights /= weights.sum()

    segments = []
    for _ in range(n_calls):
        gen_len = _length(
            rng, shape.output_median, shape.output_sigma, shape.output_min, shape.output_max
        )
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        api = shape.api_kinds[kind]
        duration = _lognormal(rng, api.duration_median_s, api.duration_sigma)
        returned = (
            _length(rng, api.return_median, api.return_sigma, 0, shape.return_max)
            if api.return_median > 0
            else 0
        )
        segments.append(
            TraceSegment(
                gen_len=gen_len, api_duration_s=duration, api_return_len=returned, api_kind=kind
            )
        )
    segments.append(
        TraceSegment(
            gen_len=_length(
                rng, shape.output_median, shape.output_sigma, shape.output_min, shape.output_max
            )
        )
    )
    return TraceRecord(arrival_time=arrival_time, l_pre=l_pre, segments=segments)


def _with_shapes(arrivals: Sequence[float], shape: ShapeSpec, seed: int) -> List[TraceRecord]:
    # shapes draw from their own stream so they do not shift with the arrival count
    rng = np.random.default_rng([seed, 1])
    records = []
    for index, arrival in enumerate(arrivals):
        record = sample_shape(rng, shape, arrival)
        record.request_id = index
        records.append(record)
    return records


def gen_poisson(rate: float, horizon: float, shape: ShapeSpec, seed: int) -> List[TraceRecord]:
    arrivals = poisson_arrivals(np.random.default_rng([seed, 0]), rate, horizon)
    return _with_shapes(arrivals, shape, seed)


def gen_gamma(
    rate: float, cv: float, horizon: float, shape: ShapeSpec, seed: int
) -> List[TraceRecord]:
    arrivals = gamma_arrivals(np.random.default_rng([seed, 0]), rate, cv, horizon)
    return _with_shapes(arrivals, shape, seed)


def gen_fixed_count(rate: float, count: int, shape: ShapeSpec, seed: int) -> List[TraceRecord]:
    """Poisson arrivals truncated to exactly ``count`` requests."""
    _check_rate(rate)
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng([seed, 0])
    arrivals = np.cumsum(rng.exponential(1.0 / rate, size=count)).tolist()
    return _with_shapes(arrivals, shape, seed)


def build_workload(spec: WorkloadSpec) -> List[TraceRecord]:
    if spec.kind == "poisson":
        records = gen_poisson(spec.rate, spec.duration_s, spec.shape, spec.seed)
    elif spec.kind == "gamma":
        records = gen_gamma(spec.rate, spec.cv, spec.duration_s, spec.shape, spec.seed)
    elif spec.kind == "fixed-count":
        records = gen_fixed_count(spec.rate, spec.requests, spec.shape, spec.seed)
    else:
        records = load_trace(spec.trace_path)
    logger.info("Workload %s: %d requests", spec.kind, len(records))
    return records


# ----- trace files -----------------------------------------------------


def _describe_validation(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "record"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def load_trace(path) -> List[TraceRecord]:
    path = Path(path)
    records: List[TraceRecord] = []
    last_arrival = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(f"invalid JSON ({e.msg})", line=line_no) from e
            try:
                record = TraceRecord.model_validate(payload)
            except ValidationError as e:
                raise TraceFormatError(_describe_validation(e), line=line_no) from e
            if last_arrival is not None and record.arrival_time < last_arrival:
                raise TraceFormatError(
                    f"arrival_time {record.arrival_time} precedes previous {last_arrival}",
                    line=line_no,
                )
            last_arrival = record.arrival_time
            records.append(record)

    if not records:
        raise TraceFormatError(f"{path}: trace is empty")
    logger.debug("Loaded %d trace records from %s", len(records), path)
    return records


def save_trace(records: Iterable[TraceRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.model_dump(exclude_none=True)))
            f.write("\n")


def to_profiles(records: Sequence[TraceRecord]) -> List[RequestProfile]:
    """Fresh request profiles for one run; ids default to the record index."""
    profiles = []
    for index, record in enumerate(records):
        segments = []
        for segment in record.segments:
            call = None
            if segment.has_call:
                call = CallSpec(
                    duration_true=segment.api_duration_s,
                    return_len_true=segment.api_return_len,
                    duration_pred=segment.api_duration_pred,
                    kind_tag=segment.api_kind or "generic",
                )
            segments.append(
                Segment(gen_len_true=segment.gen_len, call=call, gen_len_pred=segment.gen_len_pred)
            )
        request_id = record.request_id if record.request_id is not None else index
        profiles.append(RequestProfile(request_id, record.arrival_time, record.l_pre, segments))
    return profiles
