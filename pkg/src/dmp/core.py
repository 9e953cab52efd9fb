"""Problem triplet, open-loop plans, trajectories, and the performance index.

Conventions used throughout the package:

- States are column-free 1-D arrays of length n; controls of length m.
- Gradients of rewards and adjoint vectors are ROW vectors, stored as
  1-D arrays; a row times the (n, n) state Jacobian is `row @ J`.
- Dynamics Jacobians: f_x is (n, n), f_y is (n, m) where y denotes the
  control slot.
- Control boxes are OPEN; plans must stay strictly inside with margin
  interiority_eps.
- Time is the stage index t = 0, 1, 2, ...; a Plan holds u_0..u_{T-1}
  plus a tail rule describing controls beyond the truncation horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

INTERIORITY_EPS = 1e-9

Evaluator = Callable[[int, np.ndarray, np.ndarray], np.ndarray]
BoxSpec = Union[Sequence[float], np.ndarray, Callable[[int], tuple]]


class RolloutError(Exception):
    """Non-finite state produced by the dynamics; carries the first bad stage."""

    def __init__(self, stage: int, message: str = ""):
        self.stage = stage
        super().__init__(message or f"non-finite state at stage {stage}")


class RewardError(Exception):
    """Reward evaluation failed (domain error); carries the offending stage."""

    def __init__(self, stage: int, message: str = ""):
        self.stage = stage
        super().__init__(message or f"reward domain error at stage {stage}")


@dataclass(frozen=True)
class TerminalReward:
    """Optional terminal payoff g_T(x) with its gradient, both horizon-indexed."""

    value: Callable[[int, np.ndarray], float]
    grad: Callable[[int, np.ndarray], np.ndarray]


@dataclass
class StageProblem:
    """The triplet (control sets, dynamics, rewards) plus dimensions.

    All evaluators are stage-indexed callables: f(t, x, u) -> state (n,),
    f_x(t, x, u) -> (n, n), f_y(t, x, u) -> (n, m), g(t, x, u) -> float,
    g_x -> (n,), g_y -> (m,).  Control boxes are open and may be
    unbounded; pass (lo, hi) arrays of length m, or a callable
    t -> (lo, hi) for stage-dependent boxes.  Immutable once built.
    """

    n: int
    m: int
    f: Evaluator
    f_x: Evaluator
    f_y: Evaluator
    g: Callable[[int, np.ndarray, np.ndarray], float]
    g_x: Evaluator
    g_y: Evaluator
    control_lo: BoxSpec = field(default=None)
    control_hi: BoxSpec = field(default=None)
    terminal: Optional[TerminalReward] = None
    name: str = ""

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("state and control dimensions must be >= 1")
        if self.control_lo is None:
            self.control_lo = np.full(self.m, -np.inf)
        if self.control_hi is None:
            self.control_hi = np.full(self.m, np.inf)
        lo, hi = self.control_box(0)
        if lo.shape != (self.m,) or hi.shape != (self.m,):
            raise ValueError("control box shape must be (m,)")
        if not np.all(lo < hi):
            raise ValueError("control box requires lo < hi componentwise")

    def control_box(self, t: int) -> tuple:
        lo = self.control_lo(t) if callable(self.control_lo) else self.control_lo
        hi = self.control_hi(t) if callable(self.control_hi) else self.control_hi
        return (np.asarray(lo, dtype=float).ravel(),
                np.asarray(hi, dtype=float).ravel())

    def terminal_value(self, T: int, x: np.ndarray) -> float:
        if self.terminal is None:
            return 0.0
        return float(self.terminal.value(T, x))

    def terminal_grad(self, T: int, x: np.ndarray) -> np.ndarray:
        if self.terminal is None:
            return np.zeros(self.n)
        return np.asarray(self.terminal.grad(T, x), dtype=float).ravel()


TAIL_RULES = ("repeat_last", "zero", "steady_state")


@dataclass
class Plan:
    """Finite truncation u_0..u_{T-1} of an open-loop strategy.

    ``tail_rule`` defines controls at stages t >= T: repeat the last one,
    use zeros, or hold a supplied steady-state control.
    """

    controls: np.ndarray
    tail_rule: str = "repeat_last"
    u_inf: Optional[np.ndarray] = None

    def __post_init__(self):
        arr = np.array(self.controls, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("controls must be a (T, m) array with T >= 1")
        self.controls = arr
        if self.tail_rule not in TAIL_RULES:
            raise ValueError(f"unknown tail rule {self.tail_rule!r}")
        if self.tail_rule == "steady_state":
            if self.u_inf is None:
                raise ValueError("steady_state tail rule requires u_inf")
            self.u_inf = np.asarray(self.u_inf, dtype=float).ravel()
            if self.u_inf.shape != (arr.shape[1],):
                raise ValueError("u_inf shape must be (m,)")

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    @property
    def m(self) -> int:
        return self.controls.shape[1]

    def extended(self, t: int) -> np.ndarray:
        """Control at any stage t >= 0, applying the tail rule past T-1."""
        if t < self.T:
            return self.controls[t]
        if self.tail_rule == "repeat_last":
            return self.controls[-1]
        if self.tail_rule == "zero":
            return np.zeros(self.m)
        return self.u_inf

    def extend_to(self, T_new: int) -> "Plan":
        """Materialize the tail rule out to a longer horizon."""
        if T_new <= self.T:
            return Plan(self.controls[:T_new].copy(), self.tail_rule,
                        None if self.u_inf is None else self.u_inf.copy())
        tail = np.vstack([self.extended(t) for t in range(self.T, T_new)])
        return Plan(np.vstack([self.controls, tail]), self.tail_rule,
                    None if self.u_inf is None else self.u_inf.copy())

    def with_control(self, t: int, u) -> "Plan":
        """Copy of the plan with stage t's control replaced."""
        new = self.controls.copy()
        new[t] = np.asarray(u, dtype=float).ravel()
        return Plan(new, self.tail_rule,
                    None if self.u_inf is None else self.u_inf.copy())


@dataclass
class Trajectory:
    """State sequence x_0..x_T generated by a plan."""

    states: np.ndarray  # (T+1, n)

    def __post_init__(self):
        arr = np.array(self.states, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        self.states = arr

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    def at(self, t: int) -> np.ndarray:
        return self.states[t]


def _as_state(value, n: int, stage: int) -> np.ndarray:
    x = np.asarray(value, dtype=float).ravel()
    if x.shape != (n,):
        raise ValueError(f"dynamics returned shape {x.shape}, expected ({n},) at stage {stage}")
    return x


def rollout(problem: StageProblem, plan: Plan, x0) -> Trajectory:
    """Simulate x_{t+1} = f_t(x_t, u_t) from x_0 over the plan horizon.

    Raises RolloutError at the first stage producing a non-finite state,
    and RewardError-style domain failures propagate with their stage.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (problem.n,):
        raise ValueError(f"x0 shape {x0.shape} does not match n={problem.n}")
    if not np.all(np.isfinite(x0)):
        raise RolloutError(0, "non-finite initial state")
    T = plan.T
    states = np.empty((T + 1, problem.n))
    states[0] = x0
    for t in range(T):
        try:
            nxt = _as_state(problem.f(t, states[t], plan.controls[t]), problem.n, t)
        except (ArithmeticError, ValueError) as exc:
            raise RolloutError(t, f"dynamics domain error at stage {t}: {exc}") from exc
        if not np.all(np.isfinite(nxt)):
            raise RolloutError(t, f"non-finite state at stage {t + 1}")
        states[t + 1] = nxt
    return Trajectory(states)


class TotalReward(NamedTuple):
    value: float
    tail_bound: float
    flagged: bool


def total_reward(problem: StageProblem, plan: Plan, x0, tail_tol: float = 1e-6,
                 traj: Optional[Trajectory] = None) -> TotalReward:
    """Truncated performance index plus a geometric tail estimate.

    value = sum of stage rewards over t < T, plus the terminal reward at
    x_T when the problem has one.  Without a terminal reward the
    neglected tail |sum_{t>=T} g_t| is estimated by geometric
    extrapolation of the last stage rewards and flagged when it exceeds
    ``tail_tol``.  With a terminal reward the tail is already accounted
    for and the bound is 0.
    """
    if traj is None:
        traj = rollout(problem, plan, x0)
    T = plan.T
    stage_vals = np.empty(T)
    for t in range(T):
        try:
            stage_vals[t] = float(problem.g(t, traj.states[t], plan.controls[t]))
        except (ArithmeticError, ValueError) as exc:
            raise RewardError(t, f"reward domain error at stage {t}: {exc}") from exc
        if not np.isfinite(stage_vals[t]):
            raise RewardError(t, f"non-finite reward at stage {t}")
    value = float(np.sum(stage_vals))
    if problem.terminal is not None:
        try:
            value += problem.terminal_value(T, traj.states[T])
        except (ArithmeticError, ValueError) as exc:
            raise RewardError(T, f"terminal reward domain error: {exc}") from exc
        if not np.isfinite(value):
            raise RewardError(T, "non-finite terminal reward")
        return TotalReward(value, 0.0, False)
    tail = 0.0
    if T >= 2:
        a = abs(stage_vals[-1])
        b = abs(stage_vals[-2])
        if a == 0.0:
            tail = 0.0
        elif b > 0.0 and a < b:
            ratio = a / b
            tail = a * ratio / (1.0 - ratio)
        else:
            tail = np.inf
    elif T == 1:
        tail = np.inf if stage_vals[0] != 0.0 else 0.0
    return TotalReward(value, float(tail), bool(tail > tail_tol))


@dataclass(frozen=True)
class FeasibilityReport:
    """Per-stage interiority margins against the open control box."""

    margins: np.ndarray  # (T,) min over coordinates of min(u - lo, hi - u)
    interiority_eps: float
    passed: bool
    worst_stage: int

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"feasibility {verdict}: min margin {self.margins.min():.3g} "
                f"at stage {self.worst_stage} (eps {self.interiority_eps:g})")


def feasibility_check(problem: StageProblem, plan: Plan,
                      interiority_eps: float = INTERIORITY_EPS) -> FeasibilityReport:
    """Margins of each control to the open box; PASS iff all >= eps."""
    T = plan.T
    margins = np.empty(T)
    for t in range(T):
        lo, hi = problem.control_box(t)
        u = plan.controls[t]
        lo_side = np.where(np.isfinite(lo), u - lo, np.inf)
        hi_side = np.where(np.isfinite(hi), hi - u, np.inf)
        margins[t] = float(np.minimum(lo_side, hi_side).min())
    worst = int(np.argmin(margins))
    return FeasibilityReport(margins, interiority_eps,
                             bool(np.all(margins >= interiority_eps)), worst)


def midpoint_plan(problem: StageProblem, T: int, tail_rule: str = "repeat_last") -> Plan:
    """Default initial plan: box midpoint; 0 (or a unit inset) on unbounded sides."""
    controls = np.empty((T, problem.m))
    for t in range(T):
        lo, hi = problem.control_box(t)
        mid = np.empty(problem.m)
        for i in range(problem.m):
            if np.isfinite(lo[i]) and np.isfinite(hi[i]):
                mid[i] = 0.5 * (lo[i] + hi[i])
            elif np.isfinite(lo[i]):
                mid[i] = lo[i] + 1.0
            elif np.isfinite(hi[i]):
                mid[i] = hi[i] - 1.0
            else:
                mid[i] = 0.0
        controls[t] = mid
    return Plan(controls, tail_rule)
