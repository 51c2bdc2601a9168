import numpy as np
import pytest

from config.settings import SimConfig
from tests import oracle
from utils.cost_model import (
    PolicyChoice,
    earlier_finish_condition,
    final_value,
    priority_score,
    select_policy,
    service_time,
    stage1_value,
    stage2_value,
    waste_for_policy,
)

P, D, S = PolicyChoice.PRESERVE, PolicyChoice.DISCARD, PolicyChoice.SWAP

N_DRAWS = 10_000


@pytest.fixture
def cfg():
    return SimConfig(m_per_token=1.0, t_fwd=0.1, n_fwd_max=50, s_fwd_out=200, s_fwd_in=200)


def _constants(cfg):
    return {
        "M": cfg.m_per_token,
        "t_fwd": cfg.t_fwd,
        "n_fwd_max": cfg.n_fwd_max,
        "s_out": cfg.s_fwd_out,
        "s_in": cfg.s_fwd_in,
    }


@pytest.mark.parametrize(
    "args, expected",
    [((60, 0, 100, 0.1), 6.0), ((0, 0, 100, 0.1), 0.0), ((10, 100, 100, 0.1), 1.1)],
)
def test_service_time(args, expected):
    assert service_time(*args) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("args", [(-1, 0, 100, 0.1), (1, 0, 0.5, 0.1), (1, 0, 100, 0.0)])
def test_service_time_rejects_bad_input(args):
    with pytest.raises(ValueError):
        service_time(*args)


@pytest.mark.parametrize(
    "req1, req2, n_max, expected",
    [
        ((60, 0), (110, 100), 100, True),
        ((50, 0), (50, 0), 100, False),
        ((10, 5), (200, 10), 50, False),
    ],
)
def test_earlier_finish_condition(req1, req2, n_max, expected):
    assert earlier_finish_condition(req1, req2, n_max) is expected


def test_earlier_finish_rejects_return_longer_than_total():
    with pytest.raises(ValueError):
        earlier_finish_condition((5, 10), (20, 0), 10)


@pytest.mark.parametrize(
    "policy, ctx, t_int, other, expected",
    [
        (P, 100, 2.0, 0, 200.0),
        (P, 100, 0.0, 0, 0.0),
        (D, 100, 2.0, 300, 80.0),
        (S, 100, 2.0, 300, 5.0),
    ],
)
def test_waste_for_policy(cfg, policy, ctx, t_int, other, expected):
    assert waste_for_policy(policy, ctx, t_int, other, cfg) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize(
    "ctx, t_int, other, expected_policy, expected_waste",
    [(100, 2.0, 300, S, 5.0), (100, 0.0, 300, P, 0.0), (0, 5.0, 0, P, 0.0)],
)
def test_select_policy(cfg, ctx, t_int, other, expected_policy, expected_waste):
    policy, waste = select_policy(ctx, t_int, other, cfg)
    assert policy is expected_policy
    assert waste == pytest.approx(expected_waste, abs=1e-9)


@pytest.mark.parametrize("policy, expected", [(P, 335.0), (D, 115.0), (S, 118.025)])
def test_stage1_value(cfg, policy, expected):
    value, costs = stage1_value(100, 10, 2.0, policy, cfg)
    assert value == pytest.approx(expected, abs=1e-9)
    assert costs.prefill == pytest.approx(10.0, abs=1e-9)
    assert costs.decode == pytest.approx(105.0, abs=1e-9)


@pytest.mark.parametrize("policy, expected", [(P, 71.05), (S, 74.075), (D, 83.15)])
def test_stage2_value(cfg, policy, expected):
    value, costs = stage2_value(110, 20, 5, policy, cfg)
    assert value == pytest.approx(expected, abs=1e-9)
    assert costs.pro_api == pytest.approx(4.8, abs=1e-9)
    assert costs.decode_post == pytest.approx(66.25, abs=1e-9)


@pytest.mark.parametrize(
    "policy, t_api_next, expected",
    [(S, 0.0, 75.60625), (P, 1.0, 206.05), (D, 3.0, 71.05)],
)
def test_final_value(cfg, policy, t_api_next, expected):
    assert final_value(71.05, 110, 20, 5, policy, t_api_next, cfg) == pytest.approx(
        expected, abs=1e-9
    )


@pytest.mark.parametrize(
    "args, expected",
    [((100.0, 10.0, 2.0), 80.0), ((100.0, 0.0, 2.0), 100.0), ((100.0, 10.0, 0.0), 100.0)],
)
def test_priority_score(args, expected):
    assert priority_score(*args) == pytest.approx(expected, abs=1e-9)


def test_priority_score_rejects_negative_wait():
    with pytest.raises(ValueError):
        priority_score(10.0, -1.0, 0.1)


# ----- randomized properties ----------------------------------------------


@pytest.fixture
def draws():
    rng = np.random.default_rng(2024)
    return {
        "l_pre": rng.integers(1, 4000, N_DRAWS),
        "l_out": rng.uniform(0, 2000, N_DRAWS),
        "t_api": rng.uniform(0, 30, N_DRAWS),
        "ret": rng.uniform(0, 1000, N_DRAWS),
        "ctx": rng.uniform(0, 8000, N_DRAWS),
        "other": rng.uniform(0, 50_000, N_DRAWS),
        "v2": rng.uniform(0, 1e6, N_DRAWS),
    }


def test_matches_oracle(cfg, draws):
    k = _constants(cfg)
    for i in range(N_DRAWS):
        l_pre, l_out, t_api = float(draws["l_pre"][i]), draws["l_out"][i], draws["t_api"][i]
        ret, ctx, other, v2 = draws["ret"][i], draws["ctx"][i], draws["other"][i], draws["v2"][i]
        policy = (P, D, S)[i % 3]

        assert service_time(l_out, ret, cfg.n_fwd_max, cfg.t_fwd) == pytest.approx(
            oracle.service_time(l_out, ret, cfg.n_fwd_max, cfg.t_fwd), rel=1e-9
        )
        assert waste_for_policy(policy, ctx, t_api, other, cfg) == pytest.approx(
            oracle.waste(policy.value, ctx, t_api, other, k), rel=1e-9
        )
        assert stage1_value(l_pre, l_out, t_api, policy, cfg)[0] == pytest.approx(
            oracle.stage1(l_pre, l_out, t_api, policy.value, k), rel=1e-9
        )
        assert stage2_value(l_pre, ret, l_out, policy, cfg)[0] == pytest.approx(
            oracle.stage2(l_pre, ret, l_out, policy.value, k), rel=1e-9
        )
        assert final_value(v2, l_pre, ret, l_out, policy, t_api, cfg) == pytest.approx(
            oracle.final(v2, l_pre, ret, l_out, policy.value, t_api, k), rel=1e-9
        )
        assert priority_score(v2, t_api, 0.5) == pytest.approx(
            oracle.priority(v2, t_api, 0.5), rel=1e-9, abs=1e-9
        )


def test_outputs_nonnegative_and_policy_is_minimum(cfg, draws):
    for i in range(N_DRAWS):
        ctx, t_api, other = draws["ctx"][i], draws["t_api"][i], draws["other"][i]
        wastes = [waste_for_policy(p, ctx, t_api, other, cfg) for p in (P, D, S)]
        assert min(wastes) >= 0
        _, best = select_policy(ctx, t_api, other, cfg)
        assert best == min(wastes)

        l_pre, l_out, ret = float(draws["l_pre"][i]), draws["l_out"][i], draws["ret"][i]
        for policy in (P, D, S):
            v1, c1 = stage1_value(l_pre, l_out, t_api, policy, cfg)
            v2, c2 = stage2_value(l_pre, ret, l_out, policy, cfg)
            assert v1 >= 0 and v2 >= 0
            assert all(value >= 0 for value in vars(c1).values())
            assert all(value >= 0 for value in vars(c2).values())


def test_stage1_monotone(cfg, draws):
    rng = np.random.default_rng(5)
    for i in range(N_DRAWS):
        l_pre, l_out, t_api = float(draws["l_pre"][i]), draws["l_out"][i], draws["t_api"][i]
        bump = float(rng.uniform(0, 100))
        for policy in (P, D, S):
            base = stage1_value(l_pre, l_out, t_api, policy, cfg)[0]
            assert stage1_value(l_pre + bump, l_out, t_api, policy, cfg)[0] >= base
            assert stage1_value(l_pre, l_out + bump, t_api, policy, cfg)[0] >= base
        preserve = stage1_value(l_pre, l_out, t_api, P, cfg)[0]
        assert stage1_value(l_pre, l_out, t_api + bump, P, cfg)[0] >= preserve


def test_earlier_finish_matches_service_time_order():
    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(N_DRAWS):
        n_max = float(rng.integers(2, 1024))
        g1, g2 = rng.uniform(0, 500, 2)
        a1, a2 = rng.uniform(0, 5000, 2)
        t1, t2 = g1 + a1, g2 + a2
        if t2 <= t1:
            continue
        s1 = service_time(g1, a1, n_max, 0.05)
        s2 = service_time(g2, a2, n_max, 0.05)
        if abs(s1 - s2) < 1e-9:
            continue
        assert earlier_finish_condition((t1, a1), (t2, a2), n_max) == (s1 > s2)
        checked += 1
    assert checked > N_DRAWS // 4


def test_priority_order_flips_after_value_gap_over_alpha():
    rng = np.random.default_rng(23)
    for _ in range(N_DRAWS):
        alpha = float(rng.uniform(0.01, 5))
        v_a = float(rng.uniform(0, 1000))
        v_b = v_a + float(rng.uniform(0.1, 1000))
        wait_a, wait_b = (float(w) for w in rng.uniform(0, 2000, 2))
        threshold = (v_b - v_a) / alpha
        if abs((wait_b - wait_a) - threshold) < 1e-6:
            continue
        b_first = priority_score(v_b, wait_b, alpha) < priority_score(v_a, wait_a, alpha)
        assert b_first == (wait_b - wait_a > threshold)
