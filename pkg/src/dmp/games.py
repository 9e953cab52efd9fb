"""Open-loop Nash equilibria for N-player dynamic games.

Each player controls their own block of the joint control and collects
their own reward stream on the shared state.  A strategy profile is an
open-loop Nash equilibrium when every player's plan is open-loop optimal
against the others held fixed, so the single-player machinery applies
player by player: freeze the opponents, get a StageProblem, and reuse
the adjoint, residual, and solver code unchanged.

The best-response map itself contracts too slowly near equilibria with
long horizons, so the solver interleaves Gauss-Seidel passes with a
coupled stagewise Newton step on the joint stationarity system; the
step is accepted only when it reduces the joint residual, and
convergence is always declared on a plain Gauss-Seidel pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from dmp.core import Plan, StageProblem, TerminalReward, Trajectory, rollout
from dmp.mp import (AdjointSeq, ResidualReport, Tolerances, adjoint_backward,
                    residual_report)
from dmp.solve import (SufficiencyReport, SweepOptions, _clip_interior,
                       _fd_jacobian, solve_finite_horizon, sufficiency_probe)

__all__ = [
    "GameProblem", "MultiStrategy", "NashOptions",
    "frozen_player_problem", "player_adjoint", "nash_residuals",
    "solve_nash_br", "player_sufficiency",
]


@dataclass
class GameProblem:
    """Shared dynamics, per-player rewards.

    us everywhere is the tuple of per-player control vectors.  Reward
    callables take the player index first: g(j, t, x, us); g_y(j, ...)
    differentiates with respect to player j's own control and
    f_y(t, x, us, j) is the dynamics Jacobian in that block.  control_lo
    and control_hi are per-player box sides (None, scalar, array, or a
    callable of t), and terminals an optional per-player list.
    """

    N: int
    n: int
    m: Sequence[int]
    f: Callable
    f_x: Callable
    f_y: Callable
    g: Callable
    g_x: Callable
    g_y: Callable
    control_lo: Optional[Sequence] = None
    control_hi: Optional[Sequence] = None
    terminals: Optional[Sequence[Optional[TerminalReward]]] = None
    name: str = ""

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        self.m = [int(v) for v in np.atleast_1d(self.m)]
        if len(self.m) == 1 and self.N > 1:
            self.m = self.m * self.N
        if len(self.m) != self.N or any(v < 1 for v in self.m):
            raise ValueError("m must list one positive control dimension per player")
        if self.terminals is not None and len(self.terminals) != self.N:
            raise ValueError("terminals must have one entry (possibly None) per player")

    def _box_side(self, spec, j: int, t: int, default: float) -> np.ndarray:
        if isinstance(spec, (list, tuple)):
            spec = spec[j]
        if spec is None:
            return np.full(self.m[j], default)
        if callable(spec):
            spec = spec(t)
        arr = np.asarray(spec, dtype=float).ravel()
        return np.full(self.m[j], arr[0]) if arr.size == 1 else arr

    def control_box(self, j: int, t: int) -> tuple:
        return (self._box_side(self.control_lo, j, t, -np.inf),
                self._box_side(self.control_hi, j, t, np.inf))

    def terminal_for(self, j: int) -> Optional[TerminalReward]:
        return None if self.terminals is None else self.terminals[j]


@dataclass
class MultiStrategy:
    """A profile of open-loop plans with the initial state they answer to."""

    plans: Sequence[Plan]
    x0: np.ndarray

    def __post_init__(self):
        self.plans = list(self.plans)
        if not self.plans:
            raise ValueError("empty strategy profile")
        horizons = {p.T for p in self.plans}
        if len(horizons) != 1:
            raise ValueError(f"players disagree on the horizon: {sorted(horizons)}")
        self.x0 = np.asarray(self.x0, dtype=float).ravel()

    @property
    def T(self) -> int:
        return self.plans[0].T

    @property
    def N(self) -> int:
        return len(self.plans)

    def us_at(self, t: int) -> tuple:
        return tuple(p.extended(t) for p in self.plans)

    def with_plan(self, j: int, plan: Plan) -> "MultiStrategy":
        plans = list(self.plans)
        plans[j] = plan
        return MultiStrategy(plans, self.x0)


def _joint_rollout(game: GameProblem, plans: Sequence[Plan], x0) -> np.ndarray:
    T = plans[0].T
    x0 = np.asarray(x0, dtype=float).ravel()
    states = np.empty((T + 1, game.n))
    states[0] = x0
    for t in range(T):
        us = tuple(p.controls[t] for p in plans)
        states[t + 1] = np.asarray(game.f(t, states[t], us), dtype=float).ravel()
        if not np.all(np.isfinite(states[t + 1])):
            raise ValueError(f"non-finite joint state at stage {t + 1}")
    return states


def frozen_player_problem(game: GameProblem, ms: MultiStrategy, j: int) -> StageProblem:
    """Player j's single-agent problem with everyone else's plan fixed.

    The frozen plans are snapshotted, so later updates to ms do not leak
    into the returned problem.
    """
    if not 0 <= j < game.N:
        raise ValueError(f"player index {j} outside 0..{game.N - 1}")
    others = [p for p in ms.plans]

    def us_with(t, u):
        return tuple(u if i == j else others[i].extended(t) for i in range(game.N))

    return StageProblem(
        n=game.n, m=game.m[j],
        f=lambda t, x, u: game.f(t, x, us_with(t, u)),
        f_x=lambda t, x, u: game.f_x(t, x, us_with(t, u)),
        f_y=lambda t, x, u: game.f_y(t, x, us_with(t, u), j),
        g=lambda t, x, u: game.g(j, t, x, us_with(t, u)),
        g_x=lambda t, x, u: game.g_x(j, t, x, us_with(t, u)),
        g_y=lambda t, x, u: game.g_y(j, t, x, us_with(t, u)),
        control_lo=lambda t: game.control_box(j, t)[0],
        control_hi=lambda t: game.control_box(j, t)[1],
        terminal=game.terminal_for(j),
        name=f"{game.name or 'game'}:player{j}",
    )


def _br_problem(game: GameProblem, ms: MultiStrategy, j: int) -> StageProblem:
    """Frozen player problem with the stage-T reward attached as a terminal.

    The residual convention seeds lam_j(T) = g_x(j, T, x_T, u_ext), so a
    best response that optimizes only sum_{t<T} g_j has a fixed point
    off the joint root at beta^T scale.  Snapshotting the profile's
    extended controls into a terminal makes both target the same system;
    at the fixed point the snapshot and the optimized plan agree.
    """
    frozen = frozen_player_problem(game, ms, j)
    if game.terminal_for(j) is not None:
        return frozen
    others = list(ms.plans)

    def _us_T(Tt):
        return tuple(p.extended(Tt) for p in others)

    term = TerminalReward(
        value=lambda Tt, x: float(game.g(j, Tt, x, _us_T(Tt))),
        grad=lambda Tt, x: np.asarray(game.g_x(j, Tt, x, _us_T(Tt)),
                                      dtype=float).ravel(),
    )
    return replace(frozen, terminal=term)


def player_adjoint(game: GameProblem, ms: MultiStrategy, j: int,
                   T: Optional[int] = None) -> AdjointSeq:
    """Player j's costates along the joint trajectory (0-based player index)."""
    if T is not None and T != ms.T:
        raise ValueError("T must match the profile horizon")
    frozen = frozen_player_problem(game, ms, j)
    traj = rollout(frozen, ms.plans[j], ms.x0)
    mode = "from_terminal_reward" if game.terminal_for(j) is not None else "zero_seed"
    return adjoint_backward(frozen, traj, ms.plans[j], terminal=mode)


def nash_residuals(game: GameProblem, ms: MultiStrategy, h: int = 1,
                   tolerances: Optional[Tolerances] = None) -> list:
    """Per-player maximum-principle residual reports at the profile.

    Report i scores player i's plan against the others frozen; the
    profile is an (approximate) open-loop Nash equilibrium when every
    report passes.
    """
    reports = []
    for j in range(game.N):
        frozen = frozen_player_problem(game, ms, j)
        traj = rollout(frozen, ms.plans[j], ms.x0)
        mode = "from_terminal_reward" if game.terminal_for(j) is not None else "zero_seed"
        rep = residual_report(frozen, traj, ms.plans[j], terminal=mode, h=h,
                              tolerances=tolerances)
        rep.kind = f"nash_player_{j}"
        reports.append(rep)
    return reports


@dataclass
class NashOptions:
    """Knobs for the Gauss-Seidel / Newton equilibrium search."""

    max_outer: int = 50
    pass_tol: float = 1e-8
    resid_tol: float = 1e-9
    accelerate: bool = True
    stall_window: int = 8
    inner: Optional[SweepOptions] = None
    verbose: bool = False

    def __post_init__(self):
        if self.inner is None:
            self.inner = SweepOptions(max_iters=300, utol=1e-10)


def _midpoint_profile(game: GameProblem, x0, T: int) -> MultiStrategy:
    plans = []
    for j in range(game.N):
        controls = np.empty((T, game.m[j]))
        for t in range(T):
            lo, hi = game.control_box(j, t)
            with np.errstate(invalid="ignore"):
                mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                               np.where(np.isfinite(lo), lo + 1.0,
                                        np.where(np.isfinite(hi), hi - 1.0, 0.0)))
            controls[t] = mid
        plans.append(Plan(controls))
    return MultiStrategy(plans, x0)


def _stationarity_sup(game: GameProblem, plans: Sequence[Plan], x0) -> float:
    """Joint sup of per-player stationarity rows; inf on domain failure."""
    T = plans[0].T
    try:
        states = _joint_rollout(game, plans, x0)
        worst = 0.0
        for j in range(game.N):
            lam = np.zeros(game.n)
            term = game.terminal_for(j)
            if term is not None:
                lam = np.asarray(term.grad(T, states[T]), dtype=float).ravel()
            else:
                us_T = tuple(p.extended(T) for p in plans)
                lam = np.asarray(game.g_x(j, T, states[T], us_T), dtype=float).ravel()
            for t in range(T - 1, -1, -1):
                us = tuple(p.controls[t] for p in plans)
                x = states[t]
                r = np.asarray(game.g_y(j, t, x, us), dtype=float).ravel() \
                    + lam @ np.asarray(game.f_y(t, x, us, j), dtype=float).reshape(game.n, game.m[j])
                worst = max(worst, float(np.abs(r).max(initial=0.0)))
                if t > 0:
                    lam = np.asarray(game.g_x(j, t, x, us), dtype=float).ravel() \
                        + lam @ np.asarray(game.f_x(t, x, us), dtype=float).reshape(game.n, game.n)
        return worst
    except (ArithmeticError, ValueError):
        return np.inf


def _coupled_newton_plans(game: GameProblem, plans: Sequence[Plan], x0,
                          fd_step: float = 1e-6) -> Optional[list]:
    """One stagewise Newton step on the joint stationarity system.

    Backward pass keeps an affine model of each player's costate in the
    state, solves every stage's coupled first-order conditions for all
    players at once, and rolls the corrections forward.  Returns the
    candidate plans, or None when the linear algebra gives out; the
    caller decides acceptance by residual descent.
    """
    T = plans[0].T
    n, N = game.n, game.N
    m = game.m
    M = int(sum(m))
    offs = np.concatenate([[0], np.cumsum(m)]).astype(int)
    states = _joint_rollout(game, plans, x0)

    def unpack(z):
        x = z[:n]
        us = tuple(z[n + offs[i]:n + offs[i + 1]] for i in range(N))
        return x, us

    Vx = []
    Vxx = []
    for j in range(N):
        term = game.terminal_for(j)
        if term is not None:
            g0 = np.asarray(term.grad(T, states[T]), dtype=float).ravel()
            Jt = _fd_jacobian(lambda xx: np.asarray(term.grad(T, xx), dtype=float).ravel(),
                              states[T].copy(), g0, fd_step)
            Vx.append(g0)
            Vxx.append(0.5 * (Jt + Jt.T))
        else:
            # zero-seed convention: lam_j(T) = g_x(j, T, x_T, u_ext), so the
            # costate model needs its slope in x_T as well.  The channel
            # through the extended controls is dropped; it vanishes whenever
            # g_x does not depend on the controls, and descent acceptance
            # guards the rest.
            us_T = tuple(p.extended(T) for p in plans)

            def gxT(xx, j=j, us_T=us_T):
                return np.asarray(game.g_x(j, T, xx, us_T), dtype=float).ravel()

            gx = gxT(states[T])
            Jt = _fd_jacobian(gxT, states[T].copy(), gx, fd_step)
            Vx.append(gx)
            Vxx.append(0.5 * (Jt + Jt.T))
    ks = np.zeros((T, M))
    Ks = np.zeros((T, M, n))
    for t in range(T - 1, -1, -1):
        xh = states[t]
        Uh = np.concatenate([p.controls[t] for p in plans])
        zh = np.concatenate([xh, Uh])
        fhat = states[t + 1]

        def lam_at(j, z):
            x, us = unpack(z)
            xp = np.asarray(game.f(t, x, us), dtype=float).ravel()
            return Vx[j] + Vxx[j] @ (xp - fhat)

        R_blocks = []
        J_blocks = []
        for j in range(N):
            def Rj(z, j=j):
                x, us = unpack(z)
                lam = lam_at(j, z)
                fy = np.asarray(game.f_y(t, x, us, j), dtype=float).reshape(n, m[j])
                return np.asarray(game.g_y(j, t, x, us), dtype=float).ravel() + lam @ fy
            R0 = Rj(zh)
            R_blocks.append(R0)
            J_blocks.append(_fd_jacobian(Rj, zh.copy(), R0, fd_step))
        Rhat = np.concatenate(R_blocks)
        Jz = np.vstack(J_blocks)
        Jx, JU = Jz[:, :n], Jz[:, n:]
        try:
            kt = np.linalg.solve(JU, -Rhat)
            Kt = np.linalg.solve(JU, -Jx)
        except np.linalg.LinAlgError:
            return None
        if not (np.all(np.isfinite(kt)) and np.all(np.isfinite(Kt))):
            return None
        ks[t] = kt
        Ks[t] = Kt
        new_Vx = []
        new_Vxx = []
        for j in range(N):
            def Xj(z, j=j):
                x, us = unpack(z)
                lam = lam_at(j, z)
                fx = np.asarray(game.f_x(t, x, us), dtype=float).reshape(n, n)
                return np.asarray(game.g_x(j, t, x, us), dtype=float).ravel() + lam @ fx
            X0 = Xj(zh)
            JX = _fd_jacobian(Xj, zh.copy(), X0, fd_step)
            # costate model after this stage's corrections u = uhat + k + K dx:
            # intercept carries the k step, slope the closed-loop channels
            new_Vx.append(X0 + JX[:, n:] @ kt)
            new_Vxx.append(JX[:, :n] + JX[:, n:] @ Kt)
        Vx, Vxx = new_Vx, new_Vxx
    base_sup = _stationarity_sup(game, plans, x0)
    eps = 1e-9
    for alpha in (1.0, 0.5, 0.25, 0.125):
        cand = [np.empty((T, m[j])) for j in range(N)]
        x = states[0].copy()
        ok = True
        for t in range(T):
            du = alpha * ks[t] + Ks[t] @ (x - states[t])
            for j in range(N):
                lo, hi = game.control_box(j, t)
                cand[j][t] = _clip_interior(plans[j].controls[t] + du[offs[j]:offs[j + 1]],
                                            lo, hi, eps)
            try:
                x = np.asarray(game.f(t, x, tuple(c[t] for c in cand)), dtype=float).ravel()
            except (ArithmeticError, ValueError):
                ok = False
                break
            if not np.all(np.isfinite(x)):
                ok = False
                break
        if not ok:
            continue
        new_plans = [Plan(c, plans[j].tail_rule, plans[j].u_inf) for j, c in enumerate(cand)]
        if _stationarity_sup(game, new_plans, x0) < base_sup:
            return new_plans
    return None


def solve_nash_br(game: GameProblem, x0, T: int,
                  opts: Optional[NashOptions] = None,
                  init: Optional[MultiStrategy] = None):
    """Search for an open-loop Nash equilibrium by certified best response.

    Gauss-Seidel passes in ascending player order, each inner problem
    solved with the single-player machinery warm-started from the
    current profile; between passes a coupled Newton step accelerates
    the fixed point when it helps.  Returns (profile, reports, trace)
    where reports are per-player residual certificates and trace logs
    one dict per outer pass.  Convergence means a full Gauss-Seidel
    pass moved no player by more than pass_tol (or the joint residual
    fell below resid_tol); anything else leaves converged False in the
    trace and the reports speak for themselves.
    """
    opts = opts or NashOptions()
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (game.n,):
        raise ValueError(f"x0 shape {x0.shape} does not match n={game.n}")
    if T < 1:
        raise ValueError("T must be >= 1")
    ms = init if init is not None else _midpoint_profile(game, x0, T)
    if init is not None and init.T != T:
        ms = MultiStrategy([p.extend_to(T) for p in init.plans], x0)
    trace = []
    converged = False
    best_change = np.inf
    stalled = 0
    with np.errstate(all="ignore"):
        for outer in range(1, opts.max_outer + 1):
            prev = [p.controls.copy() for p in ms.plans]
            for j in range(game.N):
                frozen = _br_problem(game, ms, j)
                plan_j, _rep = solve_finite_horizon(frozen, x0, T,
                                                    init=ms.plans[j], opts=opts.inner)
                ms = ms.with_plan(j, plan_j)
            change = max(float(np.abs(ms.plans[j].controls - prev[j]).max())
                         for j in range(game.N))
            resid = _stationarity_sup(game, ms.plans, x0)
            entry = {"outer": outer, "pass_change": change, "stationarity_sup": resid,
                     "accelerated": False}
            if opts.verbose:
                print(f"[nash] outer={outer} change={change:.3e} resid={resid:.3e}")
            if change < opts.pass_tol or resid <= opts.resid_tol:
                converged = True
                trace.append(entry)
                break
            if change < best_change * 0.999:
                best_change = min(best_change, change)
                stalled = 0
            else:
                stalled += 1
            if stalled >= opts.stall_window:
                entry["note"] = "stalled: best-response passes stopped improving"
                trace.append(entry)
                break
            if opts.accelerate:
                accel = _coupled_newton_plans(game, ms.plans, x0)
                if accel is not None:
                    ms = MultiStrategy(accel, x0)
                    entry["accelerated"] = True
            trace.append(entry)
    reports = nash_residuals(game, ms)
    for entry in trace:
        entry["converged"] = converged
    return ms, reports, trace


def player_sufficiency(game: GameProblem, ms: MultiStrategy, j: int,
                       **kwargs) -> SufficiencyReport:
    """Concavity probe of player j's frozen problem at the profile."""
    frozen = frozen_player_problem(game, ms, j)
    return sufficiency_probe(frozen, ms.x0, ms.T, ref_plan=ms.plans[j], **kwargs)
