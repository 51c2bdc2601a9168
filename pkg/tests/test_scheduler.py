import numpy as np
import pytest

from agents.guardrails import StateMachineError
from agents.predictor import Predictor
from agents.scheduler import (
    PausedHolder,
    QueueName,
    RankedQueues,
    RankingStrategy,
    RequestScheduler,
    SchedState,
    Stage,
    WorkDemand,
    build_batch,
    rank_queues,
)
from config.settings import SimConfig
from utils.cost_model import CallSpec, PolicyChoice, RequestProfile, Segment
from utils.token_budget import MemoryLedger


@pytest.fixture
def cfg():
    return SimConfig(m_per_token=1.0, t_fwd=0.1, n_fwd_max=50, s_fwd_out=200, s_fwd_in=200)


def _profile(request_id=0, arrival=0.0):
    return RequestProfile(
        request_id=request_id,
        arrival_time=arrival,
        l_pre=100,
        segments=[Segment(10, CallSpec(duration_true=2.0, return_len_true=20)), Segment(5)],
    )


def _scheduler(cfg, kind="augserve"):
    return RequestScheduler(cfg, RankingStrategy(kind, seed=0), Predictor("oracle"))


def _queues(**members):
    queues = {name: [] for name in QueueName}
    for name, ids in members.items():
        queues[QueueName(name)] = list(ids)
    return queues


def _ranked(running=(), swapped=(), waiting=()):
    return RankedQueues(
        running=list(running),
        swapped=list(swapped),
        waiting_resume=[],
        waiting_new=list(waiting),
        waiting=list(waiting),
    )


# ----- Stage I / Stage II -----------------------------------------------


def test_on_arrival_sets_stage1_value_and_policy(cfg):
    scheduler = _scheduler(cfg)
    state = scheduler.on_arrival(_profile(), now=0.0)
    assert state.policy_current is PolicyChoice.SWAP
    assert state.sched_value == pytest.approx(118.025, abs=1e-9)
    assert state.queue is QueueName.WAITING_NEW
    assert scheduler.queues[QueueName.WAITING_NEW] == [0]


def test_on_arrival_without_call_uses_discard_form(cfg):
    scheduler = _scheduler(cfg)
    profile = RequestProfile(0, 0.0, 100, [Segment(10)])
    state = scheduler.on_arrival(profile, now=0.0)
    assert state.policy_current is PolicyChoice.DISCARD
    assert state.sched_value == pytest.approx(115.0, abs=1e-9)


def test_duplicate_arrival_rejected(cfg):
    scheduler = _scheduler(cfg)
    scheduler.on_arrival(_profile(), now=0.0)
    with pytest.raises(ValueError):
        scheduler.on_arrival(_profile(), now=0.0)


@pytest.mark.parametrize(
    "policy, queue, value",
    [
        (PolicyChoice.PRESERVE, QueueName.RUNNING, 71.05),
        (PolicyChoice.SWAP, QueueName.SWAPPED, 74.075),
        (PolicyChoice.DISCARD, QueueName.WAITING_RESUME, 83.15),
    ],
)
def test_on_call_return_moves_and_revalues(cfg, policy, queue, value):
    scheduler = _scheduler(cfg)
    scheduler.on_arrival(_profile(), now=0.0)
    scheduler.on_admitted([0], now=0.0)
    state = scheduler.states[0]
    state.l_total = 110
    scheduler.on_call_issued(0, now=1.0)
    state.policy_applied = policy

    state = scheduler.on_call_return(0, now=3.0)
    assert state.queue is queue
    assert state.stage is Stage.RETURNED
    assert state.policy_current is PolicyChoice.DISCARD
    assert state.sched_value == pytest.approx(value, abs=1e-9)
    assert state.last_schedule_time == 3.0


def test_call_issue_pauses_request(cfg):
    scheduler = _scheduler(cfg)
    scheduler.on_arrival(_profile(), now=0.0)
    scheduler.on_admitted([0], now=0.0)
    scheduler.states[0].l_total = 110
    policy = scheduler.on_call_issued(0, now=1.0)
    assert policy is PolicyChoice.SWAP
    assert scheduler.states[0].queue is QueueName.PAUSED
    assert not scheduler.has_schedulable()


def test_call_return_for_running_request_is_fatal(cfg):
    scheduler = _scheduler(cfg)
    scheduler.on_arrival(_profile(), now=0.0)
    scheduler.on_admitted([0], now=0.0)
    with pytest.raises(StateMachineError):
        scheduler.on_call_return(0, now=1.0)


def test_illegal_stage_transition():
    state = SchedState(request_id=1, arrival_time=0.0)
    with pytest.raises(StateMachineError):
        state.advance(Stage.RETURNED)


# ----- ranking ------------------------------------------------------------


def _states(values, arrivals=None, last=None):
    arrivals = arrivals or {}
    last = last or {}
    return {
        rid: SchedState(
            request_id=rid,
            arrival_time=arrivals.get(rid, 0.0),
            sched_value=value,
            last_schedule_time=last.get(rid, 0.0),
        )
        for rid, value in values.items()
    }


def test_rank_by_value_with_equal_waits():
    states = _states({1: 100.0, 2: 80.0})
    ranked = rank_queues(_queues(waiting_new=[1, 2]), states, RankingStrategy("augserve"), 0.0, 2.0)
    assert ranked.waiting == [2, 1]


def test_waiting_lowers_score():
    states = _states({1: 100.0, 2: 80.0}, last={1: 0.0, 2: 20.0})
    ranked = rank_queues(_queues(waiting_new=[1, 2]), states, RankingStrategy("augserve"), 20.0, 2.0)
    assert ranked.waiting == [1, 2]


def test_fcfs_ignores_values():
    states = _states({1: 100.0, 2: 1.0}, arrivals={1: 0.0, 2: 0.5})
    ranked = rank_queues(_queues(waiting_new=[2, 1]), states, RankingStrategy("fcfs"), 1.0, 0.1)
    assert ranked.waiting == [1, 2]


def test_equal_scores_break_by_request_id():
    states = _states({5: 50.0, 3: 50.0})
    ranked = rank_queues(_queues(waiting_new=[5, 3]), states, RankingStrategy("augserve"), 0.0, 0.1)
    assert ranked.waiting == [3, 5]


def test_merged_waiting_tier():
    states = _states({1: 30.0, 2: 10.0, 3: 20.0})
    queues = _queues(waiting_resume=[1], waiting_new=[2, 3])
    ranked = rank_queues(queues, states, RankingStrategy("augserve"), 0.0, 0.1)
    assert ranked.waiting == [2, 3, 1]


def test_random_is_seeded_and_leaves_running_alone():
    states = _states({i: float(i) for i in range(10)}, arrivals={i: float(i) for i in range(10)})
    queues = _queues(running=[9, 8], waiting_new=list(range(8)))
    first = rank_queues(queues, states, RankingStrategy("random"), 0.0, 0.1, np.random.default_rng(4))
    again = rank_queues(queues, states, RankingStrategy("random"), 0.0, 0.1, np.random.default_rng(4))
    assert first.waiting == again.waiting
    assert sorted(first.waiting) == list(range(8))
    assert first.running == [9, 8]


def test_unknown_strategy():
    with pytest.raises(ValueError):
        RankingStrategy("lottery")


# ----- batch construction -------------------------------------------------


def test_running_decodes_then_prefill_chunk(cfg):
    demands = {
        1: WorkDemand("decode", 1, 50),
        2: WorkDemand("decode", 1, 50),
        3: WorkDemand("decode", 1, 50),
        4: WorkDemand("chunk", 200, 0),
    }
    plan = build_batch(
        _ranked(running=[1, 2, 3], waiting=[4]), 100, MemoryLedger.from_config(cfg), cfg, demands.get
    )
    assert [(e.request_id, e.tokens, e.kind) for e in plan.entries] == [
        (1, 1, "decode"),
        (2, 1, "decode"),
        (3, 1, "decode"),
        (4, 97, "chunk"),
    ]
    assert plan.tokens == 100


def test_zero_budget_gives_empty_batch(cfg):
    plan = build_batch(
        _ranked(running=[1]), 0, MemoryLedger.from_config(cfg), cfg, {1: WorkDemand("decode", 1, 5)}.get
    )
    assert plan.entries == []


def test_swapped_request_swaps_in_within_one_iteration(cfg):
    demands = {7: WorkDemand("swap_in", 110, 0)}
    plan = build_batch(_ranked(swapped=[7]), 300, MemoryLedger.from_config(cfg), cfg, demands.get)
    assert [(e.request_id, e.tokens, e.kind) for e in plan.entries] == [(7, 110, "swap_in")]


def test_unadmittable_head_is_skipped(cfg):
    demands = {5: WorkDemand("chunk", 20_000, 0), 6: WorkDemand("chunk", 40, 0)}
    plan = build_batch(_ranked(waiting=[5, 6]), 512, MemoryLedger.from_config(cfg), cfg, demands.get)
    assert plan.admitted == [6]


def test_running_tier_served_first(cfg):
    demands = {1: WorkDemand("decode", 1, 5), 2: WorkDemand("decode", 1, 5), 3: WorkDemand("chunk", 10, 0)}
    plan = build_batch(_ranked(running=[1, 2], waiting=[3]), 2, MemoryLedger.from_config(cfg), cfg, demands.get)
    assert plan.admitted == [1, 2]


def test_paused_memory_is_demoted_to_make_room(cfg):
    ledger = MemoryLedger(cfg.g_total, cfg.g_fixed, kv_active=cfg.kv_capacity - 1000, kv_paused=1000)
    holders = [PausedHolder(request_id=9, gpu_tokens=1000, swapping_out=False)]
    plan = build_batch(
        _ranked(running=[1]), 100, ledger, cfg, {1: WorkDemand("decode", 1, 500)}.get, holders
    )
    assert plan.demoted == [9]
    assert plan.admitted == [1]


def test_zero_gamma_protects_paused_memory():
    cfg = SimConfig(gamma=0.0)
    ledger = MemoryLedger(cfg.g_total, cfg.g_fixed, kv_active=cfg.kv_capacity - 1000, kv_paused=1000)
    holders = [PausedHolder(request_id=9, gpu_tokens=1000, swapping_out=False)]
    plan = build_batch(
        _ranked(waiting=[1]), 100, ledger, cfg, {1: WorkDemand("chunk", 10, 0)}.get, holders
    )
    assert plan.demoted == []
    assert plan.entries == []


def test_lowest_ranked_running_request_is_evicted(cfg):
    ledger = MemoryLedger(cfg.g_total, cfg.g_fixed, kv_active=cfg.kv_capacity, kv_paused=0)
    demands = {1: WorkDemand("decode", 1, 600), 2: WorkDemand("decode", 1, 400)}
    plan = build_batch(_ranked(running=[1, 2]), 100, ledger, cfg, demands.get)
    assert plan.evicted == [2]
    assert plan.admitted == [1]


def test_swap_out_progress_is_scheduled_first(cfg):
    holders = [PausedHolder(request_id=3, gpu_tokens=300, swapping_out=True)]
    plan = build_batch(
        _ranked(running=[1]), 512, MemoryLedger.from_config(cfg), cfg,
        {1: WorkDemand("decode", 1, 5)}.get, holders,
    )
    assert plan.entries[0] == (3, 200, "swap_out")
    assert plan.admitted == [1]
    assert plan.tokens == 201


def test_admission_marks_schedule_time_and_running_queue(cfg):
    scheduler = _scheduler(cfg)
    scheduler.on_arrival(_profile(0), now=0.0)
    scheduler.on_arrival(_profile(1, arrival=0.1), now=0.1)
    scheduler.on_admitted([1], now=0.5)
    assert scheduler.states[1].queue is QueueName.RUNNING
    assert scheduler.states[1].stage is Stage.PRE_CALL
    assert scheduler.states[1].last_schedule_time == 0.5
    assert scheduler.states[1].first_admit_time == 0.5
    assert scheduler.queues[QueueName.WAITING_NEW] == [0]
