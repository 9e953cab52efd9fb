"""Plans, rollouts, performance index, feasibility, default plans."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmp.core import (INTERIORITY_EPS, Plan, RewardError, RolloutError,
                      StageProblem, TAIL_RULES, TerminalReward, Trajectory,
                      feasibility_check, midpoint_plan, rollout, total_reward)


def scalar_lq(beta=0.95, terminal=None):
    return StageProblem(
        n=1, m=1,
        f=lambda t, x, u: x + u,
        f_x=lambda t, x, u: np.eye(1),
        f_y=lambda t, x, u: np.eye(1),
        g=lambda t, x, u: -0.5 * beta**t * (x[0]**2 + u[0]**2),
        g_x=lambda t, x, u: np.array([-beta**t * x[0]]),
        g_y=lambda t, x, u: np.array([-beta**t * u[0]]),
        terminal=terminal,
        name="lq-test",
    )


# ---------------------------------------------------------------------------
# Plan

def test_plan_coerces_1d_controls():
    p = Plan(np.arange(4.0))
    assert p.controls.shape == (4, 1)
    assert p.T == 4 and p.m == 1


def test_plan_rejects_empty_and_unknown_tail():
    with pytest.raises(ValueError):
        Plan(np.empty((0, 1)))
    with pytest.raises(ValueError, match="tail rule"):
        Plan(np.zeros((2, 1)), tail_rule="loop")
    assert TAIL_RULES == ("repeat_last", "zero", "steady_state")


def test_tail_rules_extend():
    p = Plan([[1.0], [2.0]])
    assert p.extended(1)[0] == 2.0
    assert p.extended(7)[0] == 2.0                      # repeat_last
    z = Plan([[1.0], [2.0]], tail_rule="zero")
    assert z.extended(7)[0] == 0.0
    s = Plan([[1.0], [2.0]], tail_rule="steady_state", u_inf=[9.0])
    assert s.extended(7)[0] == 9.0


def test_steady_state_requires_u_inf():
    with pytest.raises(ValueError, match="u_inf"):
        Plan([[1.0]], tail_rule="steady_state")
    with pytest.raises(ValueError, match="shape"):
        Plan([[1.0]], tail_rule="steady_state", u_inf=[1.0, 2.0])


@given(T=st.integers(1, 6), T_new=st.integers(1, 12),
       rule=st.sampled_from(["repeat_last", "zero"]))
def test_extend_to_materializes_tail(T, T_new, rule):
    p = Plan(np.arange(1.0, T + 1.0).reshape(T, 1), tail_rule=rule)
    q = p.extend_to(T_new)
    assert q.T == T_new
    for t in range(T_new):
        assert q.controls[t, 0] == p.extended(t)[0]


def test_with_control_copies():
    p = Plan([[1.0], [2.0]])
    q = p.with_control(0, [5.0])
    assert q.controls[0, 0] == 5.0
    assert p.controls[0, 0] == 1.0


# ---------------------------------------------------------------------------
# rollout and rewards

def test_rollout_linear_dynamics():
    prob = scalar_lq()
    plan = Plan([[1.0], [1.0], [1.0]])
    traj = rollout(prob, plan, [0.0])
    assert traj.T == 3
    assert traj.states[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0]
    assert traj.at(2)[0] == 2.0


def test_rollout_validates_x0():
    prob = scalar_lq()
    with pytest.raises(ValueError, match="x0 shape"):
        rollout(prob, Plan([[0.0]]), [1.0, 2.0])
    with pytest.raises(RolloutError):
        rollout(prob, Plan([[0.0]]), [np.nan])


def test_rollout_flags_divergence_with_stage():
    prob = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: x * 1e200,
        f_x=lambda t, x, u: np.eye(1) * 1e200,
        f_y=lambda t, x, u: np.zeros((1, 1)),
        g=lambda t, x, u: 0.0,
        g_x=lambda t, x, u: np.zeros(1),
        g_y=lambda t, x, u: np.zeros(1),
    )
    with np.errstate(over="ignore"), pytest.raises(RolloutError, match="stage 2"):
        rollout(prob, Plan(np.zeros((5, 1))), [1.0])


def test_total_reward_with_terminal_has_zero_tail():
    term = TerminalReward(value=lambda T, x: float(x[0]),
                          grad=lambda T, x: np.ones(1))
    prob = scalar_lq(terminal=term)
    plan = Plan(np.zeros((3, 1)))
    tr = total_reward(prob, plan, [1.0])
    stage_sum = sum(-0.5 * 0.95**t for t in range(3))
    assert tr.value == pytest.approx(stage_sum + 1.0)
    assert tr.tail_bound == 0.0 and not tr.flagged


def test_total_reward_tail_extrapolation():
    prob = scalar_lq()
    plan = Plan(np.zeros((40, 1)))
    tr = total_reward(prob, plan, [1.0])
    # stage rewards -0.5 beta^t: geometric tail beta^40/(1-beta) * 0.5 * beta
    a = 0.5 * 0.95**39
    want = a * 0.95 / (1 - 0.95)
    assert tr.tail_bound == pytest.approx(want, rel=1e-12)
    assert tr.flagged  # well above the 1e-6 default


def test_total_reward_flags_nondecaying_tail():
    prob = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: x,
        f_x=lambda t, x, u: np.eye(1),
        f_y=lambda t, x, u: np.zeros((1, 1)),
        g=lambda t, x, u: 1.0,
        g_x=lambda t, x, u: np.zeros(1),
        g_y=lambda t, x, u: np.zeros(1),
    )
    tr = total_reward(prob, Plan(np.zeros((5, 1))), [1.0])
    assert tr.tail_bound == np.inf and tr.flagged


def test_reward_domain_error_carries_stage():
    prob = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: x - u,
        f_x=lambda t, x, u: np.eye(1),
        f_y=lambda t, x, u: -np.eye(1),
        g=lambda t, x, u: float(np.log(x[0])),
        g_x=lambda t, x, u: np.array([1.0 / x[0]]),
        g_y=lambda t, x, u: np.zeros(1),
    )
    plan = Plan([[0.6], [0.6], [0.6]])  # state goes nonpositive at t=2
    with np.errstate(invalid="ignore"), pytest.raises(RewardError, match="stage 2"):
        total_reward(prob, plan, [1.0])


# ---------------------------------------------------------------------------
# terminal handling

def test_terminal_grad_defaults_to_zeros():
    prob = scalar_lq()
    assert prob.terminal is None
    assert np.array_equal(prob.terminal_grad(5, np.array([2.0])), np.zeros(1))


# ---------------------------------------------------------------------------
# feasibility and default plans

def test_feasibility_margins_and_worst_stage():
    prob = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: x + u,
        f_x=lambda t, x, u: np.eye(1),
        f_y=lambda t, x, u: np.eye(1),
        g=lambda t, x, u: 0.0,
        g_x=lambda t, x, u: np.zeros(1),
        g_y=lambda t, x, u: np.zeros(1),
        control_lo=0.0, control_hi=1.0,
    )
    rep = feasibility_check(prob, Plan([[0.5], [1.0 - 1e-12], [0.3]]))
    assert not rep.passed
    assert rep.worst_stage == 1
    assert rep.margins[1] == pytest.approx(1e-12, rel=1e-3)
    assert "FAIL" in str(rep)
    ok = feasibility_check(prob, Plan([[0.5], [0.5]]))
    assert ok.passed and ok.interiority_eps == INTERIORITY_EPS


def test_midpoint_plan_box_cases():
    prob = StageProblem(
        n=1, m=3,
        f=lambda t, x, u: x,
        f_x=lambda t, x, u: np.eye(1),
        f_y=lambda t, x, u: np.zeros((1, 3)),
        g=lambda t, x, u: 0.0,
        g_x=lambda t, x, u: np.zeros(1),
        g_y=lambda t, x, u: np.zeros(3),
        control_lo=[0.0, 2.0, -np.inf],
        control_hi=[1.0, np.inf, np.inf],
    )
    p = midpoint_plan(prob, 2)
    assert p.controls[0].tolist() == [0.5, 3.0, 0.0]  # mid, lo+1, 0
