"""Queue management and per-iteration batch construction.

Requests live in exactly one of five queues. Each iteration the queues are
ranked by the configured strategy and a batch is filled tier by tier:
running, then swapped, then the merged waiting tier (resume and new).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from agents.guardrails import StateMachineError
from agents.predictor import Predictor
from config.settings import SimConfig
from utils.cost_model import (
    CostBreakdown,
    PolicyChoice,
    RequestProfile,
    final_value,
    priority_score,
    select_policy,
    stage1_value,
    stage2_value,
)
from utils.token_budget import MemoryLedger

logger = logging.getLogger(__name__)

_MEM_EPS = 1e-9


class Stage(str, Enum):
    NEW = "new"
    PRE_CALL = "pre_call"
    PAUSED_ON_CALL = "paused_on_call"
    RETURNED = "returned"
    FINISHED = "finished"


# PRE_CALL -> FINISHED covers the final segment, which issues no call
ALLOWED_TRANSITIONS = {
    Stage.NEW: {Stage.PRE_CALL},
    Stage.PRE_CALL: {Stage.PAUSED_ON_CALL, Stage.FINISHED},
    Stage.PAUSED_ON_CALL: {Stage.RETURNED},
    Stage.RETURNED: {Stage.PRE_CALL, Stage.FINISHED},
    Stage.FINISHED: set(),
}


class QueueName(str, Enum):
    RUNNING = "running"
    SWAPPED = "swapped"
    WAITING_RESUME = "waiting_resume"
    WAITING_NEW = "waiting_new"
    PAUSED = "paused"


STRATEGY_KINDS = ("fcfs", "random", "augserve")


@dataclass(frozen=True)
class RankingStrategy:
    kind: str = "augserve"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}, expected one of {STRATEGY_KINDS}")


@dataclass
class SchedState:
    request_id: int
    arrival_time: float
    stage: Stage = Stage.NEW
    sched_value: float = 0.0
    last_schedule_time: float = 0.0
    queue: QueueName = QueueName.WAITING_NEW
    l_total: int = 0
    policy_current: PolicyChoice = PolicyChoice.DISCARD
    # policy actually applied to the outstanding (or last) call
    policy_applied: Optional[PolicyChoice] = None
    round_index: int = 0
    l_out_pred: float = 0.0
    t_api_pred: float = 0.0
    costs: Optional[CostBreakdown] = None
    first_admit_time: Optional[float] = None

    def advance(self, stage: Stage) -> None:
        if stage not in ALLOWED_TRANSITIONS[self.stage]:
            raise StateMachineError(
                f"request {self.request_id}: illegal stage transition "
                f"{self.stage.value} -> {stage.value}"
            )
        self.stage = stage


class WorkDemand(NamedTuple):
    """What a request would do if granted tokens this iteration."""

    kind: str  # decode | chunk | swap_in | none
    remaining: int
    resident: int


class PausedHolder(NamedTuple):
    """A paused request still holding GPU memory."""

    request_id: int
    gpu_tokens: int
    swapping_out: bool


class BatchEntry(NamedTuple):
    request_id: int
    tokens: int
    kind: str


@dataclass
class RankedQueues:
    running: List[int]
    swapped: List[int]
    waiting_resume: List[int]
    waiting_new: List[int]
    # waiting_resume and waiting_new merged into one tier
    waiting: List[int]


@dataclass
class BatchPlan:
    budget: int
    free_mem: float
    preemptable_mem: float
    entries: List[BatchEntry] = field(default_factory=list)
    demoted: List[int] = field(default_factory=list)
    evicted: List[int] = field(default_factory=list)
    tokens: int = 0

    @property
    def budget_left(self) -> int:
        return self.budget - self.tokens

    @property
    def admitted(self) -> List[int]:
        return [entry.request_id for entry in self.entries if entry.kind != "swap_out"]

    def grant(self, request_id: int, tokens: int, kind: str, mem: float) -> None:
        self.entries.append(BatchEntry(request_id, tokens, kind))
        self.tokens += tokens
        self.free_mem -= mem

    def revoke_swap_out(self, request_id: int) -> None:
        for entry in list(self.entries):
            if entry.request_id == request_id and entry.kind == "swap_out":
                self.entries.remove(entry)
                self.tokens -= entry.tokens


def _tokens_for(demand: WorkDemand, budget_left: int, cfg: SimConfig) -> int:
    if demand.kind == "decode":
        return 1
    if demand.kind == "swap_in":
        return min(max(1, int(cfg.s_fwd_in)), demand.remaining, budget_left)
    if demand.kind == "chunk":
        return min(demand.remaining, budget_left)
    return 0


def rank_queues(
    queues: Dict[QueueName, List[int]],
    states: Dict[int, SchedState],
    strategy: RankingStrategy,
    now: float,
    alpha: float,
    rng: Optional[np.random.Generator] = None,
) -> RankedQueues:
    """Order every schedulable queue; no request changes queue here."""

    def arrival_key(rid: int) -> Tuple[float, int]:
        return states[rid].arrival_time, rid

    def score_key(rid: int) -> Tuple[float, float, int]:
        state = states[rid]
        wait = max(0.0, now - state.last_schedule_time)
        return priority_score(state.sched_value, wait, alpha), state.arrival_time, rid

    waiting_resume = queues[QueueName.WAITING_RESUME]
    waiting_new = queues[QueueName.WAITING_NEW]

    if strategy.kind == "augserve":
        key = score_key
    else:
        key = arrival_key

    if strategy.kind == "random":
        if rng is None:
            raise ValueError("random strategy needs a seeded generator")
        running = list(queues[QueueName.RUNNING])
        pool = sorted(waiting_resume + waiting_new, key=arrival_key)
        waiting = [pool[i] for i in rng.permutation(len(pool))]
    else:
        running = sorted(queues[QueueName.RUNNING], key=key)
        waiting = sorted(waiting_resume + waiting_new, key=key)

    return RankedQueues(
        running=running,
        swapped=sorted(queues[QueueName.SWAPPED], key=key),
        waiting_resume=sorted(waiting_resume, key=key),
        waiting_new=sorted(waiting_new, key=key),
        waiting=waiting,
    )


def build_batch(
    ranked: RankedQueues,
    token_budget: int,
    ledger: MemoryLedger,
    cfg: SimConfig,
    demand_of: Callable[[int], WorkDemand],
    paused_holders: Sequence[PausedHolder] = (),
) -> BatchPlan:
    """Fill one iteration: pending swap-outs, then running, swapped, waiting.

    A request that cannot be hosted is skipped rather than blocking the rest
    of its tier. Room is made by demoting paused contexts (at most
    ``gamma * kv_paused``), and for running requests by evicting GPU holders
    ranked below them: swapped requests with a residue, then running
    requests not granted tokens yet.
    """
    m = cfg.m_per_token
    plan = BatchPlan(
        budget=max(0, token_budget),
        free_mem=ledger.g_free,
        preemptable_mem=cfg.gamma * ledger.kv_paused,
    )
    if plan.budget <= 0:
        return plan

    # swapping-out contexts first, then Preserve contexts, largest first
    demotion_order = sorted(
        (h for h in paused_holders if h.gpu_tokens > 0),
        key=lambda h: (not h.swapping_out, -h.gpu_tokens, h.request_id),
    )

    swap_out_rate = max(1, int(cfg.s_fwd_out))
    for holder in sorted(paused_holders, key=lambda h: h.request_id):
        if plan.budget_left <= 0:
            return plan
        if holder.swapping_out and holder.gpu_tokens > 0:
            tokens = min(swap_out_rate, holder.gpu_tokens, plan.budget_left)
            plan.grant(holder.request_id, tokens, "swap_out", 0.0)

    def make_room(mem_needed: float) -> bool:
        for holder in demotion_order:
            if plan.free_mem + _MEM_EPS >= mem_needed:
                break
            if holder.request_id in plan.demoted:
                continue
            holder_mem = holder.gpu_tokens * m
            if holder_mem > plan.preemptable_mem + _MEM_EPS:
                continue
            plan.demoted.append(holder.request_id)
            plan.revoke_swap_out(holder.request_id)
            plan.free_mem += holder_mem
            plan.preemptable_mem -= holder_mem
        return plan.free_mem + _MEM_EPS >= mem_needed

    granted = set()
    running = ranked.running
    for index, rid in enumerate(running):
        if plan.budget_left <= 0:
            return plan
        if rid in plan.evicted:
            continue
        demand = demand_of(rid)
        tokens = _tokens_for(demand, plan.budget_left, cfg)
        if tokens <= 0:
            continue
        mem = tokens * m
        if not make_room(mem):
            # swapped requests may still hold GPU residue from a partial swap-out
            victims = list(reversed(ranked.swapped)) + list(reversed(running[index + 1:]))
            for victim in victims:
                if plan.free_mem + _MEM_EPS >= mem:
                    break
                if victim in plan.evicted or victim in granted:
                    continue
                victim_resident = demand_of(victim).resident
                if victim_resident <= 0:
                    continue
                plan.evicted.append(victim)
                plan.free_mem += victim_resident * m
            if plan.free_mem + _MEM_EPS < mem:
                logger.debug("running request %d skipped: no memory for %d tokens", rid, tokens)
                continue
        plan.grant(rid, tokens, demand.kind, mem)
        granted.add(rid)

    for tier in (ranked.swapped, ranked.waiting):
        for rid in tier:
            if plan.budget_left <= 0:
                return plan
            if rid in plan.evicted:
                continue
            demand = demand_of(rid)
            tokens = _tokens_for(demand, plan.budget_left, cfg)
            if tokens <= 0:
                continue
            # the whole remaining phase must fit before a queued request starts
            if not make_room(max(demand.remaining, tokens) * m):
                continue
            plan.grant(rid, tokens, demand.kind, tokens * m)

    return plan


class RequestScheduler:
    def __init__(self, cfg: SimConfig, strategy: RankingStrategy, predictor: Predictor):
        self.cfg = cfg
        self.strategy = strategy
        self.predictor = predictor
        self.states: Dict[int, SchedState] = {}
        self.profiles: Dict[int, RequestProfile] = {}
        self.queues: Dict[QueueName, List[int]] = {name: [] for name in QueueName}
        self._rng = np.random.default_rng(strategy.seed)

    # ----- bookkeeping -------------------------------------------------

    def _move(self, state: SchedState, queue: QueueName) -> None:
        self.queues[state.queue].remove(state.request_id)
        self.queues[queue].append(state.request_id)
        state.queue = queue

    def running_context(self, exclude: Optional[int] = None) -> float:
        return float(
            sum(
                self.states[rid].l_total
                for rid in self.queues[QueueName.RUNNING]
                if rid != exclude
            )
        )

    def queue_lengths(self) -> Dict[str, int]:
        return {name.value: len(ids) for name, ids in self.queues.items()}

    def has_schedulable(self) -> bool:
        return any(
            self.queues[name]
            for name in (
                QueueName.RUNNING,
                QueueName.SWAPPED,
                QueueName.WAITING_RESUME,
                QueueName.WAITING_NEW,
            )
        )

    def _predict_round(self, profile: RequestProfile, round_index: int) -> Tuple[float, float]:
        segment = profile.segments[round_index]
        call = segment.call
        t_true = call.duration_true if call is not None else 0.0
        recorded = (segment.gen_len_pred, call.duration_pred if call is not None else None)
        l_pred, t_pred = self.predictor.predict_round(
            profile.request_id, round_index, segment.gen_len_true, t_true, recorded
        )
        if call is None:
            t_pred = 0.0
        return l_pred, t_pred

    # ----- Stage I -----------------------------------------------------

    def on_arrival(self, profile: RequestProfile, now: float) -> SchedState:
        if profile.request_id in self.states:
            raise ValueError(f"request {profile.request_id} arrived twice")
        if now < profile.arrival_time:
            raise ValueError(
                f"request {profile.request_id} handled at {now} before its arrival "
                f"{profile.arrival_time}"
            )

        l_out_pred, t_api_pred = self._predict_round(profile, 0)
        if profile.segments[0].call is None:
            policy = PolicyChoice.DISCARD
        else:
            policy, _ = select_policy(
                profile.l_pre + l_out_pred, t_api_pred, self.running_context(), self.cfg
            )
        value, costs = stage1_value(profile.l_pre, l_out_pred, t_api_pred, policy, self.cfg)

        state = SchedState(
            request_id=profile.request_id,
            arrival_time=profile.arrival_time,
            sched_value=value,
            last_schedule_time=now,
            policy_current=policy,
            l_out_pred=l_out_pred,
            t_api_pred=t_api_pred,
            costs=costs,
        )
        self.states[profile.request_id] = state
        self.profiles[profile.request_id] = profile
        self.queues[QueueName.WAITING_NEW].append(profile.request_id)
        logger.debug(
            "request %d arrived: policy=%s value=%.4f", profile.request_id, policy.value, value
        )
        return state

    # ----- calls -------------------------------------------------------

    def on_call_issued(self, request_id: int, now: float) -> PolicyChoice:
        """Pause the request for its call and fix the policy actually applied."""
        state = self.states[request_id]
        if self.cfg.reselect_policy_at_call:
            policy, _ = select_policy(
                state.l_total,
                state.t_api_pred,
                self.running_context(exclude=request_id),
                self.cfg,
            )
        else:
            policy = state.policy_current
        state.policy_applied = policy
        state.advance(Stage.PAUSED_ON_CALL)
        self._move(state, QueueName.PAUSED)
        return policy

    def on_demoted(self, request_id: int) -> None:
        """A paused context was reclaimed; the call now resumes by recomputation."""
        self.states[request_id].policy_applied = PolicyChoice.DISCARD

    def on_call_return(self, request_id: int, now: float) -> SchedState:
        state = self.states[request_id]
        if state.stage is not Stage.PAUSED_ON_CALL:
            raise StateMachineError(
                f"request {request_id}: call returned while in stage {state.stage.value}"
            )
        profile = self.profiles[request_id]
        call = profile.segments[state.round_index].call
        ret = call.return_len_true
        policy_used = state.policy_applied or state.policy_current

        next_index = state.round_index + 1
        l_out_next, t_api_next = self._predict_round(profile, next_index)
        v2, costs = stage2_value(state.l_total, ret, l_out_next, policy_used, self.cfg)

        if profile.segments[next_index].call is None:
            next_policy = PolicyChoice.DISCARD
        else:
            next_policy, _ = select_policy(
                state.l_total + ret + l_out_next,
                t_api_next,
                self.running_context(),
                self.cfg,
            )
        value = final_value(v2, state.l_total, ret, l_out_next, next_policy, t_api_next, self.cfg)

        state.round_index = next_index
        state.l_out_pred = l_out_next
        state.t_api_pred = t_api_next
        state.policy_current = next_policy
        state.sched_value = value
        state.costs = costs
        state.last_schedule_time = now
        state.advance(Stage.RETURNED)

        if policy_used is PolicyChoice.PRESERVE:
            self._move(state, QueueName.RUNNING)
        elif policy_used is PolicyChoice.SWAP:
            self._move(state, QueueName.SWAPPED)
        else:
            self._move(state, QueueName.WAITING_RESUME)
        logger.debug(
            "request %d returned: used=%s next=%s value=%.4f",
            request_id,
            policy_used.value,
            next_policy.value,
            value,
        )
        return state

    # ----- execution feedback -----------------------------------------

    def on_admitted(self, request_ids: Iterable[int], now: float) -> None:
        for rid in request_ids:
            state = self.states[rid]
            state.last_schedule_time = now
            if state.first_admit_time is None:
                state.first_admit_time = now
            if state.stage is Stage.NEW:
                state.advance(Stage.PRE_CALL)
            if state.queue is not QueueName.RUNNING:
                self._move(state, QueueName.RUNNING)

    def on_evicted(self, request_id: int) -> None:
        self._move(self.states[request_id], QueueName.WAITING_RESUME)

    def on_resumed(self, request_id: int) -> None:
        """Returned request has rebuilt its context and continues decoding."""
        self.states[request_id].advance(Stage.PRE_CALL)

    def on_finished(self, request_id: int) -> None:
        state = self.states[request_id]
        state.advance(Stage.FINISHED)
        self.queues[state.queue].remove(request_id)

    # ----- per-iteration ----------------------------------------------

    def rank_queues(self, now: float) -> RankedQueues:
        ranked = rank_queues(
            self.queues, self.states, self.strategy, now, self.cfg.alpha, self._rng
        )
        # persist the ranked order; membership is unchanged
        self.queues[QueueName.RUNNING] = list(ranked.running)
        self.queues[QueueName.SWAPPED] = list(ranked.swapped)
        self.queues[QueueName.WAITING_RESUME] = list(ranked.waiting_resume)
        self.queues[QueueName.WAITING_NEW] = list(ranked.waiting_new)
        return ranked

    def build_batch(
        self,
        ranked: RankedQueues,
        token_budget: int,
        ledger: MemoryLedger,
        demand_of: Callable[[int], WorkDemand],
        paused_holders: Sequence[PausedHolder] = (),
    ) -> BatchPlan:
        return build_batch(ranked, token_budget, ledger, self.cfg, demand_of, paused_holders)
