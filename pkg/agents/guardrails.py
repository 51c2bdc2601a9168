from typing import Optional, Tuple

from config.settings import SimConfig
from utils.cost_model import RequestProfile
from utils.token_budget import MemoryLedger, budget_bounds


class SimulationError(RuntimeError):
    """Fatal inconsistency inside a simulation run."""


class StateMachineError(SimulationError):
    pass


class LedgerViolation(SimulationError):
    pass


class BudgetViolation(SimulationError):
    pass


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class GuardrailsValidator:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        # float slack for sums of memory products
        self.tolerance = 1e-6 * cfg.g_total

    def validate_input(self, profile: RequestProfile) -> Tuple[bool, str]:
        """Request admission checks"""

        if profile.l_pre < 1:
            return False, f"request {profile.request_id}: prompt must hold at least one token"

        if not profile.segments:
            return False, f"request {profile.request_id}: no decode segment"

        for index, segment in enumerate(profile.segments):
            if segment.gen_len_true < 0:
                return False, f"request {profile.request_id}: segment {index} has negative gen_len"
            is_last = index == len(profile.segments) - 1
            if is_last and segment.call is not None:
                return False, f"request {profile.request_id}: last segment cannot issue a call"
            if not is_last and segment.call is None:
                return False, f"request {profile.request_id}: segment {index} is missing its call"
            if segment.call is not None and (
                segment.call.duration_true < 0 or segment.call.return_len_true < 0
            ):
                return False, f"request {profile.request_id}: segment {index} call has negative fields"

        if profile.total_generated < 1:
            return False, f"request {profile.request_id}: generates no tokens"

        peak_memory = profile.peak_context * self.cfg.m_per_token
        if peak_memory > self.cfg.kv_capacity:
            return False, (
                f"request {profile.request_id}: peak context {profile.peak_context} tokens "
                f"exceeds KV capacity {self.cfg.kv_capacity / self.cfg.m_per_token:.0f}"
            )

        return True, "Valid request"

    def validate_output(self, record) -> Tuple[bool, str]:
        """Finalized metrics record checks"""

        if record.generated_len < 1:
            return False, f"request {record.request_id}: finished without generating"

        if not record.arrival <= record.first_token_time <= record.finish_time:
            return False, f"request {record.request_id}: timestamps out of order"

        return True, "Valid record"

    def check_ledger(self, ledger: MemoryLedger) -> None:
        if ledger.kv_active < -self.tolerance or ledger.kv_paused < -self.tolerance:
            raise LedgerViolation(f"negative KV component: {ledger.snapshot()}")
        if ledger.g_free_raw < -self.tolerance:
            raise LedgerViolation(f"memory over-committed: {ledger.snapshot()}")
        if ledger.kv_active > self.cfg.kv_capacity + self.tolerance:
            raise LedgerViolation(f"active KV exceeds capacity: {ledger.snapshot()}")

    def check_budget(self, budget: int, dynamic: bool) -> None:
        if budget < 0:
            raise BudgetViolation(f"negative token budget {budget}")
        if dynamic:
            low, high = budget_bounds(self.cfg)
            if not low <= budget <= high:
                raise BudgetViolation(f"token budget {budget} outside [{low}, {high}]")

    def check_batch(self, batch_tokens: int, budget: int) -> None:
        if batch_tokens > budget:
            raise BudgetViolation(f"batch uses {batch_tokens} tokens over budget {budget}")
