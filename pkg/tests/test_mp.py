"""Adjoints, first-order residuals, tail profiles, and the decay probe."""

import dataclasses

import numpy as np
import pytest

from conftest import oracle_rollout
from dmp.core import Plan, StageProblem, TerminalReward, Trajectory, rollout, total_reward
from dmp.mp import (AdjointSeq, TERMINAL_MODES, Tolerances, adjoint_backward,
                    adjoint_series, check_assumption_amp, gateaux_differential,
                    profile_from_rows, recursion_residuals, residual_report,
                    stationarity_residuals, transversality_profile)


def tiny_problem():
    """2-state, 1-control affine system with stage-varying reward."""
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    return StageProblem(
        n=2, m=1,
        f=lambda t, x, u: A @ x + B @ u,
        f_x=lambda t, x, u: A,
        f_y=lambda t, x, u: B,
        g=lambda t, x, u: -(0.9**t) * (x @ x + float(u[0]) ** 2),
        g_x=lambda t, x, u: -(0.9**t) * 2 * x,
        g_y=lambda t, x, u: -(0.9**t) * 2 * u,
        name="tiny",
    )


# ---------------------------------------------------------------------------
# adjoint sequences

def test_adjoint_seq_is_one_indexed():
    a = AdjointSeq(np.arange(6.0).reshape(3, 2), "series", 3)
    assert a.at(1).tolist() == [0.0, 1.0]
    assert a.at(3).tolist() == [4.0, 5.0]
    with pytest.raises(IndexError):
        a.at(0)
    with pytest.raises(IndexError):
        a.at(4)


def test_adjoint_seq_validation():
    with pytest.raises(ValueError, match="horizon"):
        AdjointSeq(np.zeros((3, 1)), "series", 4)
    with pytest.raises(ValueError, match="finite"):
        AdjointSeq(np.array([[np.inf]]), "series", 1)


def test_backward_matches_hand_recursion():
    prob = tiny_problem()
    T = 6
    plan = Plan(np.linspace(-1, 1, T).reshape(T, 1))
    traj = rollout(prob, plan, [1.0, -0.5])
    adj = adjoint_backward(prob, traj, plan, "zero_seed")
    # hand recursion, later stages on the left
    lam = np.asarray(prob.g_x(T, traj.states[T], plan.extended(T)), dtype=float)
    assert np.array_equal(adj.at(T), lam)
    for t in range(T - 1, 0, -1):
        x, u = traj.states[t], plan.controls[t]
        lam = prob.g_x(t, x, u) + lam @ prob.f_x(t, x, u)
        assert np.array_equal(adj.at(t), lam)
    assert adj.provenance == "backward_recursion"


def test_terminal_seed_modes():
    term = TerminalReward(value=lambda T, x: float(x @ x),
                          grad=lambda T, x: 2.0 * x)
    prob = dataclasses.replace(tiny_problem(), terminal=term)
    plan = Plan(np.ones((4, 1)))
    traj = rollout(prob, plan, [1.0, 0.0])
    a_term = adjoint_backward(prob, traj, plan, "from_terminal_reward")
    assert np.array_equal(a_term.at(4), 2.0 * traj.states[4])
    a_zero = adjoint_backward(prob, traj, plan, "zero_seed")
    gx_T = prob.g_x(4, traj.states[4], plan.extended(4))
    assert np.array_equal(a_zero.at(4), gx_T)
    with pytest.raises(ValueError, match="terminal mode"):
        adjoint_backward(prob, traj, plan, "nope")
    assert TERMINAL_MODES == ("from_terminal_reward", "zero_seed")


def test_zero_seed_uses_tail_rule_control():
    prob = tiny_problem()
    plan_rep = Plan(np.ones((3, 1)))
    plan_zero = Plan(np.ones((3, 1)), tail_rule="zero")
    traj = rollout(prob, plan_rep, [1.0, 1.0])
    a_rep = adjoint_backward(prob, traj, plan_rep, "zero_seed")
    a_zero = adjoint_backward(prob, traj, plan_zero, "zero_seed")
    # g_x here ignores u, so the seeds agree; the call contract is what
    # differs (extended control at stage T)
    assert np.array_equal(a_rep.at(3), a_zero.at(3))


# ---------------------------------------------------------------------------
# series form

def test_series_first_term_is_reward_gradient():
    prob = tiny_problem()
    plan = Plan(np.full((5, 1), 0.3))
    traj = rollout(prob, plan, [1.0, 2.0])
    s = adjoint_series(prob, traj, plan, 2, 1)
    assert np.array_equal(s, prob.g_x(2, traj.states[2], plan.controls[2]))


def test_series_bounds():
    prob = tiny_problem()
    plan = Plan(np.zeros((5, 1)))
    traj = rollout(prob, plan, [1.0, 0.0])
    with pytest.raises(ValueError):
        adjoint_series(prob, traj, plan, 0, 1)
    with pytest.raises(ValueError):
        adjoint_series(prob, traj, plan, 1, 5)  # reaches stage T
    adjoint_series(prob, traj, plan, 1, 4)      # last admissible


def test_series_with_all_terms_matches_recursion_up_to_seed(lq):
    """The full partial sum differs from the zero-seeded recursion only by
    the stage-T seed term, negligible for the contracting optimum."""
    T = 200
    plan, traj = oracle_rollout(lq, T)
    adj = adjoint_backward(lq.problem, traj, plan, "zero_seed")
    for t in (1, 7, 50, 100):
        s = adjoint_series(lq.problem, traj, plan, t, T - t)
        assert np.abs(s - adj.at(t)).max() <= 1e-12


def test_series_truncation_with_150_terms(lq):
    # 150 terms resolve the contracting tail to well below 1e-8
    T = 200
    plan, traj = oracle_rollout(lq, T)
    adj = adjoint_backward(lq.problem, traj, plan, "zero_seed")
    K = 150
    for t in range(1, T - K + 1):
        s = adjoint_series(lq.problem, traj, plan, t, K)
        assert np.abs(s - adj.at(t)).max() <= 1e-8


def test_truncation_seeds_agree_on_contracting_benchmark(ci):
    """Zero and unit terminal seeds are indistinguishable in the first half
    of a long truncation when the state Jacobian products contract."""
    T = 5600
    plan, traj = oracle_rollout(ci, T)
    seeds = []
    for grad in (lambda T, x: np.zeros(1), lambda T, x: np.ones(1)):
        prob = dataclasses.replace(
            ci.problem, terminal=TerminalReward(value=lambda T, x: 0.0, grad=grad))
        seeds.append(adjoint_backward(prob, traj, plan, "from_terminal_reward"))
    diff = np.abs(seeds[0].lam[:T // 2] - seeds[1].lam[:T // 2]).max()
    assert diff <= 1e-6


def test_unit_seed_fails_tc_when_jacobians_do_not_contract(lq):
    # neutral state Jacobians carry a unit seed to every stage undamped
    T = 200
    plan, traj = oracle_rollout(lq, T)
    prob = dataclasses.replace(
        lq.problem,
        terminal=TerminalReward(value=lambda T, x: 0.0, grad=lambda T, x: np.ones(1)))
    adj = adjoint_backward(prob, traj, plan, "from_terminal_reward")
    prof = transversality_profile(lq.problem, traj, plan, adj)
    assert not prof.passed
    assert prof.sup_last_quarter > 0.5


# ---------------------------------------------------------------------------
# residuals

def test_stationarity_row_index_equals_stage(lq):
    T = 12
    plan, _ = oracle_rollout(lq, T)
    tampered = plan.with_control(3, [0.4])
    traj = rollout(lq.problem, tampered, lq.default_x0)
    adj = adjoint_backward(lq.problem, traj, tampered, "zero_seed")
    r = stationarity_residuals(lq.problem, traj, tampered, adj)
    assert r.shape == (T, 1)
    assert int(np.argmax(np.abs(r).max(axis=1))) == 3


def test_recursion_residuals_zero_for_backward_adjoint():
    prob = tiny_problem()
    plan = Plan(np.linspace(0, 1, 9).reshape(9, 1))
    traj = rollout(prob, plan, [0.5, 0.5])
    adj = adjoint_backward(prob, traj, plan, "zero_seed")
    e = recursion_residuals(prob, traj, plan, adj)
    assert e.shape == (8, 2)
    assert np.abs(e).max() == 0.0


def test_recursion_residuals_catch_tampering():
    prob = tiny_problem()
    plan = Plan(np.zeros((6, 1)))
    traj = rollout(prob, plan, [1.0, 1.0])
    adj = adjoint_backward(prob, traj, plan, "zero_seed")
    lam = adj.lam.copy()
    lam[2] += 0.5
    bad = AdjointSeq(lam, "series", 6)
    e = recursion_residuals(prob, traj, plan, bad)
    assert np.abs(e).max() >= 0.4


def test_residual_report_verdicts_and_worst(lq):
    T = 60
    plan, traj = oracle_rollout(lq, T)
    rep = residual_report(lq.problem, traj, plan, terminal="zero_seed")
    assert rep.passed and rep.stationarity_pass and rep.recursion_pass and rep.tc_pass
    assert rep.stationarity_sup <= 1e-12
    d = rep.to_dict()
    assert d["verdicts"]["overall"]
    assert set(d) >= {"kind", "stationarity_sup", "recursion_sup", "worst",
                      "transversality", "tolerances", "verdicts"}
    # a tampered control is localized by row == stage
    bad = plan.with_control(5, plan.controls[5] + 0.2)
    btraj = rollout(lq.problem, bad, lq.default_x0)
    brep = residual_report(lq.problem, btraj, bad, terminal="zero_seed")
    assert not brep.passed
    assert brep.worst_stationarity_stage == 5
    assert brep.sup_stationarity(4) < brep.stationarity_sup


def test_tolerances_frozen_defaults():
    tol = Tolerances()
    assert (tol.stationarity, tol.recursion, tol.tc) == (1e-6, 1e-9, 1e-6)
    with pytest.raises(dataclasses.FrozenInstanceError):
        tol.tc = 1.0


# ---------------------------------------------------------------------------
# transversality profiles

def test_profile_recovers_geometric_rate():
    rows = 3.0 * 0.8 ** np.arange(1, 41)
    prof = profile_from_rows(1, rows, tc_tol=1e-6)
    assert prof.fitted_rate == pytest.approx(0.8, rel=1e-6)
    assert prof.r_squared > 0.999
    assert not prof.passed  # rate < 1 but the tail is still above tol


def test_profile_passes_when_tail_below_tol():
    rows = 0.5 ** np.arange(1, 81)
    prof = profile_from_rows(1, rows, tc_tol=1e-6)
    assert prof.passed and prof.fitted_rate < 1.0
    assert prof.sup_last_quarter <= 1e-6


def test_profile_rejects_flat_tail():
    prof = profile_from_rows(1, np.full(40, 0.3), tc_tol=1e-6)
    assert not prof.passed
    assert prof.fitted_rate >= 1.0 - 1e-9


def test_profile_collapsed_to_floor_passes():
    rows = np.zeros(30)
    rows[0] = 1e-9  # everything after is numerical zero at this scale
    prof = profile_from_rows(1, rows, tc_tol=1e-6)
    assert prof.passed


def test_profile_empty_is_vacuous():
    prof = profile_from_rows(3, np.zeros((0, 2)), tc_tol=1e-6)
    assert prof.passed and prof.norms.size == 0


def test_transversality_h_validation(lq):
    plan, traj = oracle_rollout(lq, 10)
    adj = adjoint_backward(lq.problem, traj, plan, "zero_seed")
    with pytest.raises(ValueError):
        transversality_profile(lq.problem, traj, plan, adj, h=0)
    prof = transversality_profile(lq.problem, traj, plan, adj, h=10)
    assert prof.passed  # empty profile


# ---------------------------------------------------------------------------
# Gateaux differential

def test_gateaux_matches_finite_difference():
    prob = tiny_problem()
    plan = Plan(np.linspace(-0.5, 0.5, 10).reshape(10, 1))
    x0 = [1.0, -1.0]
    h = 1e-6
    for tau in (0, 4, 9):
        y = np.array([0.37])
        dg = gateaux_differential(prob, plan, x0, tau, y)
        up = total_reward(prob, plan.with_control(tau, plan.controls[tau] + h * y), x0)
        dn = total_reward(prob, plan.with_control(tau, plan.controls[tau] - h * y), x0)
        assert dg == pytest.approx((up.value - dn.value) / (2 * h), abs=1e-8)


def test_gateaux_includes_terminal_term():
    term = TerminalReward(value=lambda T, x: 3.0 * float(x[0]),
                          grad=lambda T, x: np.array([3.0, 0.0]))
    bare = tiny_problem()
    rich = dataclasses.replace(bare, terminal=term)
    plan = Plan(np.full((5, 1), 0.2))
    x0 = [1.0, 0.0]
    tau, y = 1, np.array([1.0])
    d_bare = gateaux_differential(bare, plan, x0, tau, y)
    d_rich = gateaux_differential(rich, plan, x0, tau, y)
    # the difference is exactly grad_terminal @ (d x_T / d eps)
    sens = np.array([0.0, 1.0])
    for t in range(tau + 1, 5):
        sens = bare.f_x(t, None, None) @ sens
    assert d_rich - d_bare == pytest.approx(3.0 * sens[0], rel=1e-12)


def test_gateaux_validates_inputs(lq):
    plan, _ = oracle_rollout(lq, 5)
    with pytest.raises(ValueError, match="tau"):
        gateaux_differential(lq.problem, plan, lq.default_x0, 5, [1.0])
    with pytest.raises(ValueError, match="direction"):
        gateaux_differential(lq.problem, plan, lq.default_x0, 0, [1.0, 2.0])


def test_vanishing_differential_at_optimum(lq):
    plan, _ = oracle_rollout(lq, 200)
    for tau in (0, 10, 60):
        d = gateaux_differential(lq.problem, plan, lq.default_x0, tau, [1.0])
        assert abs(d) <= 1e-9


# ---------------------------------------------------------------------------
# tail decay probe

def test_amp_probe_passes_on_discounted_benchmark(lq):
    plan, _ = oracle_rollout(lq, 200)
    probe = check_assumption_amp(lq.problem, plan, lq.default_x0, tau=5, radius=0.1)
    assert probe.passed
    assert abs(probe.fitted_rate - 0.95) <= 0.05
    assert probe.r_squared >= 0.9
    assert probe.horizon_sensitivity <= 0.15


def test_amp_probe_radius_guard(ci):
    plan, _ = oracle_rollout(ci, 200)
    # the oracle fraction sits 0.052 from the lower box edge
    with pytest.raises(ValueError, match="interiority margin"):
        check_assumption_amp(ci.problem, plan, ci.default_x0, tau=5, radius=0.1)


def test_amp_probe_tau_guard(lq):
    plan, _ = oracle_rollout(lq, 10)
    with pytest.raises(ValueError, match="tau"):
        check_assumption_amp(lq.problem, plan, lq.default_x0, tau=9, radius=0.1)


def test_amp_probe_k_list_validation(lq):
    plan, _ = oracle_rollout(lq, 50)
    with pytest.raises(ValueError, match="K_list"):
        check_assumption_amp(lq.problem, plan, lq.default_x0, tau=5,
                             radius=0.1, K_list=[3])
