"""Finite/infinite-horizon solvers and the concavity probe."""

import numpy as np
import pytest

from conftest import oracle_rollout
from dmp.core import Plan, StageProblem, rollout
from dmp.mp import residual_report
from dmp.solve import (SweepOptions, solve_finite_horizon,
                       solve_infinite_horizon, sufficiency_probe)


def convex_counter(beta=0.95):
    """Sign-flipped accumulator: maximizing a convex index."""
    return StageProblem(
        n=1, m=1,
        f=lambda t, x, u: x + u,
        f_x=lambda t, x, u: np.eye(1),
        f_y=lambda t, x, u: np.eye(1),
        g=lambda t, x, u: 0.5 * beta**t * float(x @ x + u @ u),
        g_x=lambda t, x, u: beta**t * x,
        g_y=lambda t, x, u: beta**t * u,
        name="convex-counter",
    )


# ---------------------------------------------------------------------------
# finite-horizon solves against closed forms

def test_solver_recovers_lq_plan(lq):
    oracle, _ = oracle_rollout(lq, 200)
    plan, report = solve_finite_horizon(lq.problem, lq.default_x0, 200)
    assert report.solver["converged"]
    assert report.passed
    assert np.abs(plan.controls[:101] - oracle.controls[:101]).max() <= 1e-8


def test_solver_recovers_ci_fraction(ci):
    oracle, _ = oracle_rollout(ci, 200)
    plan, report = solve_finite_horizon(ci.problem, ci.default_x0, 200)
    assert report.solver["converged"]
    assert np.abs(plan.controls[:101] - oracle.controls[:101]).max() <= 1e-8
    # plan stays strictly inside the unit box
    assert plan.controls.min() > 0.0 and plan.controls.max() < 1.0
    assert plan.controls[0, 0] == pytest.approx(0.052375, abs=1e-8)


def test_solver_recovers_bm_consumption(bm):
    oracle, _ = oracle_rollout(bm, 200)
    plan, report = solve_finite_horizon(bm.problem, bm.default_x0, 200,
                                        init=bm.default_init(200))
    assert report.solver["converged"]
    assert np.abs(plan.controls[:101] - oracle.controls[:101]).max() <= 1e-10


def test_solver_recovers_ak_stage_plan(ak):
    sp = ak.extras["stage_problem"]
    oracle = ak.extras["stage_plan"](200)
    plan, report = solve_finite_horizon(sp, ak.default_x0, 200,
                                        init=ak.extras["stage_default_init"](200))
    assert report.solver["converged"]
    assert np.abs(plan.controls[:101] - oracle.controls[:101]).max() <= 1e-10


def test_default_init_backs_off_one_sided_box(bm):
    # the plain midpoint plan (unit inset) exhausts the stock immediately;
    # the solver must find its own feasible start
    plan, report = solve_finite_horizon(bm.problem, bm.default_x0, 30)
    oracle, _ = oracle_rollout(bm, 30)
    assert report.solver["converged"]
    assert np.abs(plan.controls - oracle.controls).max() <= 1e-10


def test_solver_flags_nonconvergence(bm):
    opts = SweepOptions(max_iters=1)
    plan, report = solve_finite_horizon(bm.problem, bm.default_x0, 10,
                                        init=bm.default_init(10), opts=opts)
    assert not report.solver["converged"]
    assert not report.passed


def test_gradient_method_agrees_with_newton(lq):
    # both sweeps optimize the same truncated index; at T=5 that optimum
    # differs from the infinite-horizon truncation by an O(r^T) edge term,
    # so the reference is the Newton answer, not the oracle
    opts = SweepOptions(method="gradient", max_iters=20000, utol=1e-10)
    plan_g, report = solve_finite_horizon(lq.problem, lq.default_x0, 5, opts=opts)
    plan_n, _ = solve_finite_horizon(lq.problem, lq.default_x0, 5)
    assert report.solver["method"] == "gradient"
    assert report.solver["converged"]
    assert np.abs(plan_g.controls - plan_n.controls).max() <= 1e-8


def test_sweep_options_validation():
    with pytest.raises(ValueError, match="method"):
        SweepOptions(method="annealing")
    with pytest.raises(ValueError):
        SweepOptions(max_iters=0)


# ---------------------------------------------------------------------------
# infinite-horizon ladder

def test_ladder_stabilizes_on_contracting_problem(lq):
    plan, report, tail = solve_infinite_horizon(
        lq.problem, lq.default_x0, T_ladder=(25, 50, 100, 200))
    assert tail["stabilized"]
    assert tail["final_T"] == plan.T
    assert set(tail) == {"ladder", "early_changes", "stabilized", "final_T",
                         "tail_bound", "tail_flagged", "window_tol"}
    assert tail["early_changes"][-1] < 1e-6
    oracle, _ = oracle_rollout(lq, plan.T)
    w = plan.T // 4
    assert np.abs(plan.controls[:w] - oracle.controls[:w]).max() <= 1e-6
    assert report.solver["converged"]


def test_ladder_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        solve_infinite_horizon(convex_counter(), [1.0], T_ladder=())


# ---------------------------------------------------------------------------
# concavity probe

def test_probe_certifies_quadratic_concave(lq):
    rep = sufficiency_probe(lq.problem, lq.default_x0, T=50,
                            n_chords=100, seed=0)
    assert rep.certified and rep.verdict == "CERTIFIED"
    assert rep.min_slack >= -1e-9
    assert rep.n_evaluated >= 50
    assert rep.minorant_source == "heuristic:reference-decay"
    d = rep.to_dict()
    assert d["verdict"] == "CERTIFIED" and d["n_chords"] == 100


def test_probe_certifies_terminal_capped_index(ci):
    rep = sufficiency_probe(ci.problem, ci.default_x0, T=50,
                            n_chords=100, seed=0)
    assert rep.certified
    assert rep.min_slack >= -1e-9
    assert rep.minorant_source == "heuristic:terminal-capped"


def test_probe_rejects_convex_index():
    rep = sufficiency_probe(convex_counter(), [1.0], T=30,
                            n_chords=60, seed=0)
    assert rep.verdict == "NOT_CERTIFIED"
    assert rep.min_slack < -1e-9


def test_probe_user_minorant_controls_verdict(lq):
    good = sufficiency_probe(lq.problem, lq.default_x0, T=40, n_chords=20,
                             seed=1, minorant=lambda t: 0.95**t)
    assert good.minorant_source == "user" and good.minorant_ok
    flat = sufficiency_probe(lq.problem, lq.default_x0, T=40, n_chords=20,
                             seed=1, minorant=np.ones(40))
    assert flat.minorant_source == "user" and not flat.minorant_ok
    assert flat.verdict == "NOT_CERTIFIED"


def test_probe_empty_region_raises(ci):
    with pytest.raises(ValueError, match="empty"):
        sufficiency_probe(ci.problem, ci.default_x0, T=10, lo=2.0, hi=3.0)


def test_probe_threads_match_serial(lq):
    a = sufficiency_probe(lq.problem, lq.default_x0, T=30, n_chords=30, seed=3)
    b = sufficiency_probe(lq.problem, lq.default_x0, T=30, n_chords=30, seed=3,
                          threads=4)
    assert a.min_slack == b.min_slack
    assert a.verdict == b.verdict


# ---------------------------------------------------------------------------
# a diverging stationary point is rejected by the tail test

def test_unstable_root_plan_fails_transversality(lq):
    r_bad = lq.oracle["rejected_root"]
    T = 200
    x0 = float(lq.default_x0[0])
    u = (r_bad - 1.0) * x0 * r_bad ** np.arange(T)
    plan = Plan(u.reshape(T, 1))
    traj = rollout(lq.problem, plan, lq.default_x0)
    rep = residual_report(lq.problem, traj, plan, terminal="zero_seed")
    assert not rep.tc_pass
    assert not rep.passed
    assert rep.transversality.fitted_rate >= 1.0
