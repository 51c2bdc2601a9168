"""Service-time, memory-waste and scheduling-value arithmetic.

Every value here is a memory-time product (memory units x seconds) except
``service_time`` (seconds) and ``priority_score`` (value units). All functions
are pure; the scheduler composes them.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

from config.settings import SimConfig


class PolicyChoice(str, Enum):
    """How a request's KV context is handled while its external call runs."""

    PRESERVE = "preserve"
    DISCARD = "discard"
    SWAP = "swap"


# select_policy walks this order and only replaces on a strictly smaller waste
POLICY_TIE_ORDER = (PolicyChoice.PRESERVE, PolicyChoice.SWAP, PolicyChoice.DISCARD)


@dataclass(frozen=True)
class CostBreakdown:
    prefill: float = 0.0
    decode: float = 0.0
    api_residency: float = 0.0
    swap_out: float = 0.0
    swap_in: float = 0.0
    recompute: float = 0.0
    pro_api: float = 0.0
    decode_post: float = 0.0


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def _nonnegative(**values: float) -> None:
    for name, value in values.items():
        _require(value >= 0, f"{name} must be >= 0, got {value}")


def service_time(gen_len: float, api_ret_len: float, n_max: float, i_t: float) -> float:
    """Continuous service time of a request: generation plus return assimilation."""
    _nonnegative(gen_len=gen_len, api_ret_len=api_ret_len)
    _require(n_max >= 1, f"n_max must be >= 1, got {n_max}")
    _require(i_t > 0, f"i_t must be > 0, got {i_t}")
    return i_t * (gen_len + api_ret_len / n_max)


def earlier_finish_condition(
    req1: Tuple[float, float], req2: Tuple[float, float], n_max: float
) -> bool:
    """True when req2 (the longer one) finishes before req1.

    Each request is ``(total_len, api_return_len)`` with total = generated + returned.
    """
    for name, (total_len, ret_len) in (("req1", req1), ("req2", req2)):
        _require(
            total_len >= ret_len >= 0,
            f"{name} needs total_len >= api_return_len >= 0, got {(total_len, ret_len)}",
        )
    _require(n_max >= 1, f"n_max must be >= 1, got {n_max}")
    t1, a1 = req1
    t2, a2 = req2
    return (t2 - t1) < (1.0 - 1.0 / n_max) * (a2 - a1)


def recompute_time(ctx_len: float, cfg: SimConfig) -> float:
    """Wall time to rebuild ``ctx_len`` tokens of KV at full iterations."""
    return math.ceil(ctx_len / cfg.n_fwd_max) * cfg.t_fwd


def swap_time(ctx_len: float, cfg: SimConfig) -> float:
    return (ctx_len / cfg.s_fwd_out) * cfg.t_fwd


def waste_for_policy(
    policy: PolicyChoice, ctx_len: float, t_int: float, ctx_other: float, cfg: SimConfig
) -> float:
    _nonnegative(ctx_len=ctx_len, t_int=t_int, ctx_other=ctx_other)
    m = cfg.m_per_token
    if policy is PolicyChoice.PRESERVE:
        return t_int * ctx_len * m
    if policy is PolicyChoice.DISCARD:
        t_rc = recompute_time(ctx_len, cfg)
        return t_rc * ctx_len * m + t_rc * ctx_other * m
    # Swap: the per-iteration token count stays in as a multiplier
    return 2.0 * swap_time(ctx_len, cfg) * cfg.n_fwd_max * m


def select_policy(
    ctx_len: float, t_int_pred: float, ctx_other: float, cfg: SimConfig
) -> Tuple[PolicyChoice, float]:
    """Pick the policy wasting the least memory during the call."""
    best_policy = None
    best_waste = math.inf
    for policy in POLICY_TIE_ORDER:
        waste = waste_for_policy(policy, ctx_len, t_int_pred, ctx_other, cfg)
        if waste < best_waste:
            best_policy, best_waste = policy, waste
    return best_policy, best_waste


def stage1_value(
    l_pre: float, l_out_pred: float, t_api_pred: float, policy: PolicyChoice, cfg: SimConfig
) -> Tuple[float, CostBreakdown]:
    """Prediction-based value of a request before its first call."""
    _require(l_pre >= 1, f"l_pre must be >= 1, got {l_pre}")
    _nonnegative(l_out_pred=l_out_pred, t_api_pred=t_api_pred)
    m, t_fwd = cfg.m_per_token, cfg.t_fwd
    ctx_at_call = l_pre + l_out_pred

    costs = CostBreakdown(
        prefill=0.5 * m * l_pre**2 / cfg.n_fwd_max * t_fwd,
        decode=m * t_fwd * (l_pre * l_out_pred + 0.5 * l_out_pred**2),
        api_residency=m * ctx_at_call * t_api_pred,
        swap_out=0.5 * m * ctx_at_call**2 / cfg.s_fwd_out * t_fwd,
    )
    value = costs.prefill + costs.decode
    if policy is PolicyChoice.PRESERVE:
        value += costs.api_residency
    elif policy is PolicyChoice.SWAP:
        value += costs.swap_out
    return value, costs


def stage2_value(
    l_total: float,
    l_ret_actual: float,
    l_out_next_pred: float,
    policy_used: PolicyChoice,
    cfg: SimConfig,
) -> Tuple[float, CostBreakdown]:
    """Runtime-corrected value once a call has returned."""
    _require(l_total >= 1, f"l_total must be >= 1, got {l_total}")
    _nonnegative(l_ret_actual=l_ret_actual, l_out_next_pred=l_out_next_pred)
    m, t_fwd = cfg.m_per_token, cfg.t_fwd
    ret = l_ret_actual
    nxt = l_out_next_pred

    costs = CostBreakdown(
        swap_in=0.5 * m * l_total**2 / cfg.s_fwd_in * t_fwd,
        recompute=0.5 * m * l_total**2 / cfg.n_fwd_max * t_fwd,
        pro_api=m * (t_fwd / cfg.n_fwd_max) * (l_total * ret + 0.5 * ret**2),
        decode_post=m * t_fwd * ((l_total + ret) * nxt + 0.5 * nxt**2),
    )
    value = costs.pro_api + costs.decode_post
    if policy_used is PolicyChoice.SWAP:
        value += costs.swap_in
    elif policy_used is PolicyChoice.DISCARD:
        value += costs.recompute
    return value, costs


def final_value(
    v2: float,
    l_total: float,
    l_ret_actual: float,
    l_out_next_pred: float,
    next_policy: PolicyChoice,
    t_api_next_pred: float,
    cfg: SimConfig,
) -> float:
    """Stage II value plus the handling cost expected in the next round."""
    _nonnegative(
        v2=v2,
        l_total=l_total,
        l_ret_actual=l_ret_actual,
        l_out_next_pred=l_out_next_pred,
        t_api_next_pred=t_api_next_pred,
    )
    ctx_next = l_total + l_ret_actual + l_out_next_pred
    if next_policy is PolicyChoice.SWAP:
        return v2 + 0.5 * cfg.m_per_token * ctx_next**2 / cfg.s_fwd_out * cfg.t_fwd
    if next_policy is PolicyChoice.PRESERVE:
        return v2 + cfg.m_per_token * ctx_next * t_api_next_pred
    return v2


def priority_score(v_final: float, wait: float, alpha: float) -> float:
    """Ranking key, lowest first; waiting lowers the score."""
    _nonnegative(wait=wait, alpha=alpha)
    return v_final - alpha * wait


@dataclass
class CallSpec:
    """One external call issued at the end of a decode segment."""

    duration_true: float
    return_len_true: int
    duration_pred: Optional[float] = None
    kind_tag: str = "generic"


@dataclass
class Segment:
    gen_len_true: int
    call: Optional[CallSpec] = None
    gen_len_pred: Optional[float] = None


@dataclass
class RequestProfile:
    """Prompt plus alternating decode segments and calls; the last segment has no call."""

    request_id: int
    arrival_time: float
    l_pre: int
    segments: List[Segment] = field(default_factory=list)

    @property
    def n_calls(self) -> int:
        return sum(1 for segment in self.segments if segment.call is not None)

    @property
    def total_generated(self) -> int:
        return sum(segment.gen_len_true for segment in self.segments)

    @property
    def peak_context(self) -> int:
        """Context length once every token has been processed."""
        returned = sum(s.call.return_len_true for s in self.segments if s.call is not None)
        return self.l_pre + self.total_generated + returned
