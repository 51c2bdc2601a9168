import numpy as np
import pytest

from agents.guardrails import GuardrailsValidator, LedgerViolation
from config.settings import SimConfig
from tests import oracle
from utils.token_budget import MemoryLedger, budget_bounds, compute_token_budget


def _cfg(**overrides):
    # g_fixed = 400 out of 1000
    values = dict(
        g_total=1000, g_model=300, g_runtime=50, g_safety=50,
        m_per_token=1.0, gamma=1.0, target_max=300, beta_low=0.5, beta_high=1.5,
    )
    values.update(overrides)
    return SimConfig(**values)


@pytest.mark.parametrize(
    "active, paused, expected",
    [(200, 100, 400), (850, 0, 150), (0, 0, 450)],
)
def test_compute_token_budget(active, paused, expected):
    cfg = _cfg()
    ledger = MemoryLedger(g_total=cfg.g_total, g_fixed=cfg.g_fixed, kv_active=active, kv_paused=paused)
    assert compute_token_budget(ledger, cfg) == expected


def test_budget_bounds():
    assert budget_bounds(_cfg()) == (150, 450)


def test_zero_gamma_ignores_paused_memory():
    cfg = _cfg(gamma=0.0)
    with_paused = MemoryLedger(cfg.g_total, cfg.g_fixed, kv_active=200, kv_paused=100)
    # g_free is 300 either way
    without = MemoryLedger(cfg.g_total, cfg.g_fixed, kv_active=300, kv_paused=0)
    assert compute_token_budget(with_paused, cfg) == 300
    assert compute_token_budget(without, cfg) == 300


def test_ledger_moves_conserve_memory():
    cfg = _cfg()
    ledger = MemoryLedger.from_config(cfg)
    ledger.allocate_active(300)
    ledger.pause(120)
    ledger.resume(20)
    ledger.release_paused(50)
    ledger.release_active(10)
    assert ledger.kv_active == 190
    assert ledger.kv_paused == 50
    assert ledger.g_fixed + ledger.kv_active + ledger.kv_paused + ledger.g_free_raw == cfg.g_total


def test_over_commitment_floors_free_memory_and_trips_guard():
    cfg = _cfg()
    ledger = MemoryLedger(cfg.g_total, cfg.g_fixed, kv_active=700, kv_paused=0)
    assert ledger.g_free == 0.0
    with pytest.raises(LedgerViolation):
        GuardrailsValidator(cfg).check_ledger(ledger)


def test_budget_within_bounds_and_matches_oracle():
    cfg = _cfg()
    low, high = budget_bounds(cfg)
    rng = np.random.default_rng(3)
    for _ in range(10_000):
        active, paused = rng.uniform(0, 600, 2)
        ledger = MemoryLedger(cfg.g_total, cfg.g_fixed, kv_active=active, kv_paused=paused)
        budget = compute_token_budget(ledger, cfg)
        assert low <= budget <= high
        assert budget == oracle.budget(
            cfg.g_total, cfg.g_fixed, active, paused, cfg.gamma, cfg.m_per_token,
            cfg.target_max, cfg.beta_low, cfg.beta_high,
        )


def test_budget_monotone_in_free_and_paused_memory():
    cfg = _cfg(target_max=10_000, beta_low=0.01, beta_high=2.0)
    previous = -1
    for active in range(600, -1, -50):
        budget = compute_token_budget(MemoryLedger(cfg.g_total, cfg.g_fixed, active, 0), cfg)
        assert budget >= previous
        previous = budget
    previous = -1
    for paused in range(0, 600, 50):
        budget = compute_token_budget(MemoryLedger(cfg.g_total, cfg.g_fixed, 0, paused), cfg)
        assert budget >= previous
        previous = budget
