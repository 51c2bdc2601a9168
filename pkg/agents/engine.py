"""Iteration-level discrete-event simulation of a serving engine.

The clock advances in whole forward iterations of ``t_fwd`` seconds. At every
iteration boundary the engine delivers arrivals and completed calls, asks the
scheduler for a batch, and applies it. A prefill or recompute chunk produces
no token; every decode step produces exactly one.
"""

import hashlib
import heapq
import json
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

from agents.guardrails import GuardrailsValidator, SimulationError
from agents.scheduler import (
    BatchPlan,
    PausedHolder,
    QueueName,
    RequestScheduler,
    Stage,
    WorkDemand,
)
from config.settings import Settings, SimConfig
from utils.cost_model import PolicyChoice, RequestProfile, Segment
from utils.metrics import MetricsRecord, finalize
from utils.token_budget import MemoryLedger, compute_token_budget

logger = logging.getLogger(__name__)

_TIME_EPS = 1e-9


class EventKind(IntEnum):
    """Tie-break order of events sharing a timestamp."""

    ARRIVAL = 0
    CALL_COMPLETE = 1


class EngineEvent(NamedTuple):
    timestamp: float
    kind: EventKind
    request_id: int


class Phase(str, Enum):
    PREFILLING = "prefilling"
    DECODING = "decoding"
    WAITING_CALL = "waiting_call"
    SWAPPING_OUT = "swapping_out"
    SWAPPED_OUT = "swapped_out"
    SWAPPING_IN = "swapping_in"
    RECOMPUTING = "recomputing"
    ASSIMILATING_RETURN = "assimilating_return"
    SEGMENT_END = "segment_end"
    DONE = "done"


@dataclass
class SimClock:
    t_fwd: float
    iteration: int = 0

    @property
    def now(self) -> float:
        # derived from the index so long runs do not accumulate float drift
        return self.iteration * self.t_fwd

    @property
    def next_boundary(self) -> float:
        return (self.iteration + 1) * self.t_fwd

    def tick(self) -> None:
        self.iteration += 1

    def jump_to(self, timestamp: float) -> None:
        """Move to the first boundary at or after ``timestamp``."""
        target = math.ceil(timestamp / self.t_fwd - _TIME_EPS)
        self.iteration = max(self.iteration, target)


@dataclass
class RequestRuntime:
    """Execution progress of one request; the scheduler never writes it."""

    profile: RequestProfile
    kv_resident: int = 0
    kv_cpu: int = 0
    prefill_done: int = 0
    generated: int = 0
    assimilated: int = 0
    pending_return: int = 0
    seg_index: int = 0
    seg_generated: int = 0
    paused: bool = False
    policy: Optional[PolicyChoice] = None
    call_until: Optional[float] = None
    done: bool = False
    first_token_time: Optional[float] = None
    finish_time: Optional[float] = None
    preemptions: int = 0
    policies: List[str] = field(default_factory=list)

    @property
    def request_id(self) -> int:
        return self.profile.request_id

    @property
    def l_total(self) -> int:
        """Context processed so far; never decreases."""
        return self.prefill_done + self.generated + self.assimilated

    @property
    def segment(self) -> Segment:
        return self.profile.segments[self.seg_index]

    @property
    def caught_up(self) -> bool:
        return (
            self.kv_cpu == 0
            and self.kv_resident == self.l_total
            and self.prefill_done == self.profile.l_pre
            and self.pending_return == 0
        )

    @property
    def phase(self) -> Phase:
        if self.done:
            return Phase.DONE
        if self.paused:
            if self.policy is PolicyChoice.SWAP and self.kv_resident > 0:
                return Phase.SWAPPING_OUT
            if self.kv_cpu > 0:
                return Phase.SWAPPED_OUT
            return Phase.WAITING_CALL
        if self.kv_cpu > 0:
            return Phase.SWAPPING_IN
        if self.kv_resident < self.l_total:
            return Phase.RECOMPUTING
        if self.prefill_done < self.profile.l_pre:
            return Phase.PREFILLING
        if self.pending_return > 0:
            return Phase.ASSIMILATING_RETURN
        if self.seg_generated < self.segment.gen_len_true:
            return Phase.DECODING
        return Phase.SEGMENT_END

    def demand(self) -> WorkDemand:
        phase = self.phase
        if phase is Phase.SWAPPING_IN:
            return WorkDemand("swap_in", self.kv_cpu, self.kv_resident)
        if phase is Phase.RECOMPUTING:
            return WorkDemand("chunk", self.l_total - self.kv_resident, self.kv_resident)
        if phase is Phase.PREFILLING:
            return WorkDemand("chunk", self.profile.l_pre - self.prefill_done, self.kv_resident)
        if phase is Phase.ASSIMILATING_RETURN:
            return WorkDemand("chunk", self.pending_return, self.kv_resident)
        if phase is Phase.DECODING:
            return WorkDemand("decode", 1, self.kv_resident)
        return WorkDemand("none", 0, self.kv_resident)


class EventLog:
    """Ordered engine events; the digest is kept even when records are not."""

    def __init__(self, keep: bool = False):
        self.keep = keep
        self.records: List[Dict] = []
        self._digest = hashlib.sha256()

    def emit(self, timestamp: float, event: str, request_id: int, **extra) -> None:
        record = {"t": timestamp, "event": event, "request_id": request_id, **extra}
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        self._digest.update(line.encode("utf-8"))
        self._digest.update(b"\n")
        if self.keep:
            self.records.append(record)

    @property
    def hexdigest(self) -> str:
        return self._digest.hexdigest()

    def write_jsonl(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
                f.write("\n")


@dataclass
class SimulationResult:
    records: List[MetricsRecord]
    incomplete: int
    rejected: int
    iterations: int
    end_time: float
    makespan: float
    event_hash: str
    event_log: EventLog
    overhead: Dict[str, float]
    preemptions: int
    policy_counts: Dict[str, int]


class ServingEngine:
    def __init__(
        self,
        cfg: SimConfig,
        scheduler: RequestScheduler,
        profiles: Sequence[RequestProfile],
        budget_mode: str = "dynamic",
        static_budget: int = 512,
        horizon: Optional[float] = None,
        keep_event_log: bool = False,
        max_iterations: Optional[int] = None,
    ):
        if budget_mode not in ("dynamic", "static"):
            raise ValueError(f"unknown budget mode {budget_mode!r}")
        if budget_mode == "static" and static_budget < 1:
            raise ValueError(f"static budget must be >= 1, got {static_budget}")

        self.cfg = cfg
        self.scheduler = scheduler
        self.budget_mode = budget_mode
        self.static_budget = static_budget
        self.horizon = horizon
        self.max_iterations = max_iterations or cfg.max_iterations or Settings().MAX_ITERATIONS

        self.clock = SimClock(cfg.t_fwd)
        self.ledger = MemoryLedger.from_config(cfg)
        self.guard = GuardrailsValidator(cfg)
        self.log = EventLog(keep=keep_event_log)

        self.runtimes: Dict[int, RequestRuntime] = {}
        self.records: List[MetricsRecord] = []
        self.rejected = 0
        self._events: List[EngineEvent] = []
        self._profiles: Dict[int, RequestProfile] = {}
        self._timers = {"predict_s": 0.0, "schedule_s": 0.0, "execute_s": 0.0}

        for profile in profiles:
            if profile.request_id in self._profiles:
                raise ValueError(f"duplicate request id {profile.request_id}")
            self._profiles[profile.request_id] = profile
            heapq.heappush(
                self._events,
                EngineEvent(profile.arrival_time, EventKind.ARRIVAL, profile.request_id),
            )

    # ----- events ------------------------------------------------------

    def _emit(self, t: float, event: str, request_id: int, **extra) -> None:
        self.log.emit(t, event, request_id, ledger=self.ledger.snapshot(), **extra)

    def deliver_events(self) -> None:
        """Handle every arrival and call return due by the current iteration start."""
        now = self.clock.now
        while self._events and self._events[0].timestamp <= now + _TIME_EPS:
            event = heapq.heappop(self._events)
            started = time.perf_counter()
            if event.kind is EventKind.ARRIVAL:
                self._on_arrival(event, now)
            else:
                self._on_call_complete(event, now)
            self._timers["predict_s"] += time.perf_counter() - started

    def _on_arrival(self, event: EngineEvent, now: float) -> None:
        profile = self._profiles[event.request_id]
        ok, message = self.guard.validate_input(profile)
        if not ok:
            self.rejected += 1
            logger.warning("Rejected %s", message)
            self._emit(event.timestamp, "reject", profile.request_id, reason=message)
            return
        self.runtimes[profile.request_id] = RequestRuntime(profile)
        state = self.scheduler.on_arrival(profile, now)
        self._emit(
            event.timestamp,
            "arrival",
            profile.request_id,
            l_pre=profile.l_pre,
            policy=state.policy_current.value,
        )

    def _on_call_complete(self, event: EngineEvent, now: float) -> None:
        rt = self.runtimes[event.request_id]
        state = self.scheduler.on_call_return(rt.request_id, now)
        used = state.policy_applied or PolicyChoice.DISCARD
        rt.paused = False
        rt.call_until = None
        rt.pending_return = rt.segment.call.return_len_true
        rt.seg_index += 1
        rt.seg_generated = 0
        if used is not PolicyChoice.DISCARD and rt.kv_resident > 0:
            self.ledger.resume(rt.kv_resident * self.cfg.m_per_token)
        self._emit(
            event.timestamp,
            "call_complete",
            rt.request_id,
            policy=used.value,
            queue=state.queue.value,
            value=state.sched_value,
        )
        self._settle(rt, now)

    # ----- state transitions -------------------------------------------

    def _settle(self, rt: RequestRuntime, t: float) -> None:
        """Resolve a caught-up request: resume, issue its call, or finish."""
        if rt.done or rt.paused or not rt.caught_up:
            return
        state = self.scheduler.states[rt.request_id]
        state.l_total = rt.l_total
        if state.stage is Stage.RETURNED:
            self.scheduler.on_resumed(rt.request_id)
        if rt.seg_generated < rt.segment.gen_len_true:
            return
        if rt.segment.call is not None:
            self._issue_call(rt, t)
        else:
            self._finish(rt, t)

    def _issue_call(self, rt: RequestRuntime, t: float) -> None:
        m = self.cfg.m_per_token
        call = rt.segment.call
        policy = self.scheduler.on_call_issued(rt.request_id, t)
        rt.paused = True
        rt.policy = policy
        rt.call_until = t + call.duration_true
        rt.policies.append(policy.value)
        if policy is PolicyChoice.DISCARD:
            self.ledger.release_active(rt.kv_resident * m)
            rt.kv_resident = 0
        else:
            self.ledger.pause(rt.kv_resident * m)
        heapq.heappush(
            self._events, EngineEvent(rt.call_until, EventKind.CALL_COMPLETE, rt.request_id)
        )
        self._emit(
            t,
            "call_start",
            rt.request_id,
            policy=policy.value,
            context=rt.l_total,
            kind=call.kind_tag,
            until=rt.call_until,
        )

    def _finish(self, rt: RequestRuntime, t: float) -> None:
        if rt.l_total != rt.profile.peak_context:
            raise SimulationError(
                f"request {rt.request_id} finished with {rt.l_total} context tokens, "
                f"expected {rt.profile.peak_context}"
            )
        self.ledger.release_active(rt.kv_resident * self.cfg.m_per_token)
        rt.kv_resident = 0
        rt.done = True
        rt.finish_time = t
        state = self.scheduler.states[rt.request_id]
        self.scheduler.on_finished(rt.request_id)

        admitted = state.first_admit_time if state.first_admit_time is not None else t
        record = finalize(
            request_id=rt.request_id,
            arrival=rt.profile.arrival_time,
            first_token_time=rt.first_token_time,
            finish_time=t,
            generated_len=rt.generated,
            cfg=self.cfg,
            queueing_delay=max(0.0, admitted - rt.profile.arrival_time),
            n_calls=rt.profile.n_calls,
            preemptions=rt.preemptions,
        )
        ok, message = self.guard.validate_output(record)
        if not ok:
            raise SimulationError(message)
        self.records.append(record)
        self._emit(t, "finish", rt.request_id, generated=rt.generated)

    def _demote(self, request_id: int, t: float) -> None:
        rt = self.runtimes[request_id]
        self.ledger.release_paused(rt.kv_resident * self.cfg.m_per_token)
        rt.kv_resident = 0
        rt.kv_cpu = 0
        rt.policy = PolicyChoice.DISCARD
        rt.preemptions += 1
        self.scheduler.on_demoted(request_id)
        self._emit(t, "demote", request_id)

    def _evict(self, request_id: int, t: float) -> None:
        rt = self.runtimes[request_id]
        self.ledger.release_active(rt.kv_resident * self.cfg.m_per_token)
        rt.kv_resident = 0
        rt.kv_cpu = 0
        rt.preemptions += 1
        self.scheduler.on_evicted(request_id)
        self._emit(t, "preempt", request_id)

    def _apply_entry(self, rt: RequestRuntime, tokens: int, kind: str, t_end: float) -> None:
        m = self.cfg.m_per_token
        if kind == "swap_out":
            self.ledger.release_paused(tokens * m)
            rt.kv_resident -= tokens
            rt.kv_cpu += tokens
            return

        phase = rt.phase
        if phase is Phase.SWAPPING_IN:
            rt.kv_cpu -= tokens
        elif phase is Phase.RECOMPUTING:
            pass
        elif phase is Phase.PREFILLING:
            rt.prefill_done += tokens
        elif phase is Phase.ASSIMILATING_RETURN:
            rt.pending_return -= tokens
            rt.assimilated += tokens
        elif phase is Phase.DECODING:
            rt.generated += tokens
            rt.seg_generated += tokens
            if rt.first_token_time is None:
                rt.first_token_time = t_end
        else:
            raise SimulationError(
                f"request {rt.request_id}: granted {tokens} {kind} tokens in phase {phase.value}"
            )
        rt.kv_resident += tokens
        self.ledger.allocate_active(tokens * m)

    # ----- iteration ---------------------------------------------------

    def paused_holders(self) -> List[PausedHolder]:
        holders = []
        for rt in self.runtimes.values():
            if rt.paused and rt.kv_resident > 0:
                holders.append(
                    PausedHolder(rt.request_id, rt.kv_resident, rt.policy is PolicyChoice.SWAP)
                )
        return holders

    def _demand_of(self, request_id: int) -> WorkDemand:
        return self.runtimes[request_id].demand()

    def token_budget(self) -> int:
        if self.budget_mode == "static":
            return self.static_budget
        return compute_token_budget(self.ledger, self.cfg)

    def plan_iteration(self) -> BatchPlan:
        started = time.perf_counter()
        budget = self.token_budget()
        self.guard.check_budget(budget, dynamic=self.budget_mode == "dynamic")
        ranked = self.scheduler.rank_queues(self.clock.now)
        plan = self.scheduler.build_batch(
            ranked, budget, self.ledger, self._demand_of, self.paused_holders()
        )
        self.guard.check_batch(plan.tokens, budget)
        self._timers["schedule_s"] += time.perf_counter() - started
        return plan

    def advance_iteration(self, plan: BatchPlan) -> None:
        """Execute one forward iteration and move the clock to its end."""
        started = time.perf_counter()
        now = self.clock.now
        t_end = self.clock.next_boundary

        for rid in plan.demoted:
            self._demote(rid, now)
        for rid in plan.evicted:
            self._evict(rid, now)

        admitted = plan.admitted
        for rid in admitted:
            if self.scheduler.states[rid].queue is not QueueName.RUNNING:
                self._emit(now, "admit", rid, tokens=self.runtimes[rid].demand().remaining)
        self.scheduler.on_admitted(admitted, now)

        for entry in plan.entries:
            self._apply_entry(self.runtimes[entry.request_id], entry.tokens, entry.kind, t_end)
        for rid in dict.fromkeys(admitted):
            rt = self.runtimes[rid]
            self.scheduler.states[rid].l_total = rt.l_total
            self._settle(rt, t_end)

        self.guard.check_ledger(self.ledger)
        self.clock.tick()
        self._timers["execute_s"] += time.perf_counter() - started

    def _live(self) -> bool:
        return any(not rt.done for rt in self.runtimes.values())

    def _has_paused_gpu_work(self) -> bool:
        return any(
            rt.paused and rt.policy is PolicyChoice.SWAP and rt.kv_resident > 0
            for rt in self.runtimes.values()
        )

    def _past_horizon(self) -> bool:
        return self.horizon is not None and self.clock.now >= self.horizon - _TIME_EPS

    def run(self) -> SimulationResult:
        wall_started = time.perf_counter()
        iterations = 0
        while True:
            if self._past_horizon():
                break
            self.deliver_events()
            if not self._events and not self._live():
                break

            if not self.scheduler.has_schedulable() and not self._has_paused_gpu_work():
                if not self._events:
                    raise SimulationError("live requests remain but no event is pending")
                self.clock.jump_to(self._events[0].timestamp)
                continue

            self.advance_iteration(self.plan_iteration())
            iterations += 1
            if iterations >= self.max_iterations:
                raise SimulationError(
                    f"no termination after {iterations} iterations at t={self.clock.now:.3f}"
                )

        end_time = self.clock.now
        incomplete = sum(1 for rt in self.runtimes.values() if not rt.done)
        makespan = max((r.finish_time for r in self.records), default=0.0)
        wall = time.perf_counter() - wall_started

        policy_counts: Dict[str, int] = {p.value: 0 for p in PolicyChoice}
        for rt in self.runtimes.values():
            for policy in rt.policies:
                policy_counts[policy] += 1

        overhead = dict(self._timers)
        overhead["wall_s"] = wall
        overhead["schedule_ms_per_iteration"] = (
            1000.0 * self._timers["schedule_s"] / iterations if iterations else 0.0
        )
        overhead["schedule_fraction"] = (
            (self._timers["predict_s"] + self._timers["schedule_s"]) / wall if wall > 0 else 0.0
        )

        logger.info(
            "Simulation ended at t=%.3f after %d iterations: %d finished, %d incomplete, %d rejected",
            end_time,
            iterations,
            len(self.records),
            incomplete,
            self.rejected,
        )
        return SimulationResult(
            records=sorted(self.records, key=lambda r: r.request_id),
            incomplete=incomplete,
            rejected=self.rejected,
            iterations=iterations,
            end_time=end_time,
            makespan=makespan,
            event_hash=self.log.hexdigest,
            event_log=self.log,
            overhead=overhead,
            preemptions=sum(rt.preemptions for rt in self.runtimes.values()),
            policy_counts=policy_counts,
        )
