"""GPU memory ledger and the per-iteration token budget derived from it."""

import math
from dataclasses import dataclass
from typing import Dict, Tuple

from config.settings import SimConfig

# absorbs float drift from summing token-count products
_FLOOR_EPS = 1e-9


@dataclass
class MemoryLedger:
    """Partition of accelerator memory into fixed, active KV, paused KV and free.

    ``g_free_raw`` is derived, so the partition always sums to ``g_total``; the
    engine guard checks that no component goes negative.
    """

    g_total: float
    g_fixed: float
    kv_active: float = 0.0
    kv_paused: float = 0.0

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "MemoryLedger":
        return cls(g_total=cfg.g_total, g_fixed=cfg.g_fixed)

    @property
    def g_free_raw(self) -> float:
        return self.g_total - self.g_fixed - self.kv_active - self.kv_paused

    @property
    def g_free(self) -> float:
        # transient over-commitment never yields a negative budget
        return max(0.0, self.g_free_raw)

    def g_avail(self, gamma: float) -> float:
        return self.g_free + gamma * self.kv_paused

    def allocate_active(self, mem: float) -> None:
        self.kv_active += mem

    def release_active(self, mem: float) -> None:
        self.kv_active -= mem

    def pause(self, mem: float) -> None:
        """Move context from the running set to the paused set."""
        self.kv_active -= mem
        self.kv_paused += mem

    def resume(self, mem: float) -> None:
        self.kv_paused -= mem
        self.kv_active += mem

    def release_paused(self, mem: float) -> None:
        self.kv_paused -= mem

    def snapshot(self) -> Dict[str, float]:
        return {
            "kv_active": self.kv_active,
            "kv_paused": self.kv_paused,
            "g_free": self.g_free_raw,
        }


def budget_bounds(cfg: SimConfig) -> Tuple[int, int]:
    return (
        math.floor(cfg.beta_low * cfg.target_max + _FLOOR_EPS),
        math.floor(cfg.beta_high * cfg.target_max + _FLOOR_EPS),
    )


def compute_token_budget(ledger: MemoryLedger, cfg: SimConfig) -> int:
    """Tokens the next iteration may process, clamped around ``target_max``."""
    raw = math.floor(ledger.g_avail(cfg.gamma) / cfg.m_per_token + _FLOOR_EPS)
    low, high = budget_bounds(cfg)
    return min(max(raw, low), high)
