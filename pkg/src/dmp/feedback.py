"""Markov (feedback) strategies and the Euler-equation reformulation.

The open-loop machinery treats the control path as the unknown.  This
module covers the two standard reformulations: stage-indexed feedback
policies u_t = phi_t(x_t), and the reduced form in which the next state
itself is the choice variable.  Residual conventions match mp (same
stationarity form, same recursion form, same transversality grading), so
reports from either path are directly comparable with open-loop ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from dmp import exprlang
from dmp.core import Plan, RolloutError, StageProblem, Trajectory
from dmp.mp import (AdjointSeq, AmpProbeReport, ResidualReport, Tolerances,
                    TransversalityProfile, _fit_geometric, profile_from_rows,
                    recursion_residuals, stationarity_residuals)

__all__ = [
    "FeedbackPolicy", "POLICY_FAMILIES",
    "markov_rollout", "induced_plan", "markov_adjoint", "markov_residuals",
    "check_assumption_amp_markov",
    "EulerProblem", "euler_as_stage_problem", "euler_residuals",
    "EulerRoot", "solve_linear_euler",
]

POLICY_FAMILIES = ("affine", "linear_fraction", "power", "constant", "expr")


def _vec(v, k: int, what: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).ravel()
    if arr.size == 1 and k > 1:
        arr = np.full(k, arr[0])
    if arr.shape != (k,):
        raise ValueError(f"{what} must have length {k}, got shape {arr.shape}")
    return arr


@dataclass
class FeedbackPolicy:
    """A stage-indexed feedback map phi_t(x) with an exact Jacobian.

    Families:
      affine           u = C x + c           params: C (m,n), c (m,)
      linear_fraction  u = frac * x          params: frac scalar or (m,), m == n
      power            u_i = coeff_i * x^alpha_i   (scalar state only);
                       coeff may be a callable of t for stage-varying scale
      constant         u = c                 params: c (m,)
      expr             one expression string per control, variables x1..xn,
                       stage index bound as parameter t, named constants in
                       params["consts"]

    state_box, when given, maps (t, x) to per-stage admissible (lo, hi)
    for the control; markov_rollout enforces it pathwise.  Jacobians are
    closed-form for the structured families and dual-number exact for
    expr; nothing here is differentiated numerically.
    """

    family: str
    params: dict
    n: int
    m: int
    state_box: Optional[Callable] = None
    name: str = ""
    _asts: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.family not in POLICY_FAMILIES:
            raise ValueError(f"unknown policy family {self.family!r}; "
                             f"expected one of {POLICY_FAMILIES}")
        if self.n < 1 or self.m < 1:
            raise ValueError("policy dimensions must be positive")
        p = self.params
        if self.family == "affine":
            C = np.asarray(p["C"], dtype=float).reshape(self.m, self.n)
            c = _vec(p.get("c", np.zeros(self.m)), self.m, "c")
            self.params = {"C": C, "c": c}
        elif self.family == "linear_fraction":
            if self.m != self.n:
                raise ValueError("linear_fraction requires m == n")
            self.params = {"frac": _vec(p["frac"], self.m, "frac")}
        elif self.family == "power":
            if self.n != 1:
                raise ValueError("power family requires a scalar state")
            coeff = p["coeff"]
            if not callable(coeff):
                coeff = _vec(coeff, self.m, "coeff")
            self.params = {"coeff": coeff, "alpha": _vec(p["alpha"], self.m, "alpha")}
        elif self.family == "constant":
            self.params = {"c": _vec(p["c"], self.m, "c")}
        else:  # expr
            exprs = list(p["exprs"])
            if len(exprs) != self.m:
                raise ValueError(f"expected {self.m} expressions, got {len(exprs)}")
            consts = dict(p.get("consts", {}))
            # t is the built-in stage variable, bound at call time
            self._asts = [exprlang.parse(s, set(consts), n=self.n, m=0) for s in exprs]
            self.params = {"exprs": exprs, "consts": consts}

    def _coeff(self, t: int) -> np.ndarray:
        c = self.params["coeff"]
        return _vec(c(t), self.m, "coeff(t)") if callable(c) else c

    def __call__(self, t: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape != (self.n,):
            raise ValueError(f"state shape {x.shape} does not match n={self.n}")
        if self.family == "affine":
            return self.params["C"] @ x + self.params["c"]
        if self.family == "linear_fraction":
            return self.params["frac"] * x
        if self.family == "power":
            alpha = self.params["alpha"]
            if x[0] <= 0.0 and np.any(alpha != np.round(alpha)):
                raise ValueError(f"power policy needs x > 0, got x={x[0]:g}")
            return self._coeff(t) * x[0] ** alpha
        if self.family == "constant":
            return self.params["c"].copy()
        bindings = self._bindings(t, x)
        return np.array([exprlang.eval(a, bindings) for a in self._asts])

    def jacobian(self, t: int, x) -> np.ndarray:
        """d phi_t / dx, shape (m, n)."""
        x = np.asarray(x, dtype=float).ravel()
        if self.family == "affine":
            return self.params["C"].copy()
        if self.family == "linear_fraction":
            return np.diag(self.params["frac"])
        if self.family == "power":
            alpha = self.params["alpha"]
            if x[0] <= 0.0 and np.any(alpha != np.round(alpha)):
                raise ValueError(f"power policy needs x > 0, got x={x[0]:g}")
            col = self._coeff(t) * alpha * x[0] ** (alpha - 1.0)
            return col.reshape(self.m, 1)
        if self.family == "constant":
            return np.zeros((self.m, self.n))
        bindings = self._bindings(t, x)
        wrt = [f"x{i + 1}" for i in range(self.n)]
        return np.array([exprlang.grad(a, bindings, wrt) for a in self._asts])

    def _bindings(self, t: int, x: np.ndarray) -> dict:
        b = {f"x{i + 1}": float(x[i]) for i in range(self.n)}
        b.update(self.params["consts"])
        b["t"] = float(t)
        return b


def _policy_box(problem: StageProblem, policy: FeedbackPolicy, t: int, x):
    if policy.state_box is not None:
        lo, hi = policy.state_box(t, x)
        return (np.asarray(lo, dtype=float).ravel(), np.asarray(hi, dtype=float).ravel())
    return problem.control_box(t)


def _roll(problem: StageProblem, policy: FeedbackPolicy, x0, T: int):
    """Closed-loop simulation; returns (states, controls) with pathwise checks."""
    if policy.n != problem.n or policy.m != problem.m:
        raise ValueError("policy dimensions do not match the problem")
    if T < 1:
        raise ValueError("T must be >= 1")
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (problem.n,):
        raise ValueError(f"x0 shape {x0.shape} does not match n={problem.n}")
    states = np.empty((T + 1, problem.n))
    controls = np.empty((T, problem.m))
    states[0] = x0
    for t in range(T):
        try:
            u = policy(t, states[t])
        except (ArithmeticError, ValueError) as exc:
            raise RolloutError(t, f"policy domain error at stage {t}: {exc}") from exc
        if not np.all(np.isfinite(u)):
            raise RolloutError(t, f"non-finite control at stage {t}")
        lo, hi = _policy_box(problem, policy, t, states[t])
        if np.any(u <= lo) or np.any(u >= hi):
            raise RolloutError(t, f"policy output leaves the admissible set at stage {t}: "
                                  f"u={u}, box=({lo}, {hi})")
        controls[t] = u
        try:
            nxt = np.asarray(problem.f(t, states[t], u), dtype=float).ravel()
        except (ArithmeticError, ValueError) as exc:
            raise RolloutError(t, f"dynamics domain error at stage {t}: {exc}") from exc
        if nxt.shape != (problem.n,) or not np.all(np.isfinite(nxt)):
            raise RolloutError(t, f"non-finite state at stage {t + 1}")
        states[t + 1] = nxt
    return states, controls


def markov_rollout(problem: StageProblem, policy: FeedbackPolicy, x0, T: int) -> Trajectory:
    """Closed-loop trajectory of u_t = phi_t(x_t) over T stages."""
    states, _ = _roll(problem, policy, x0, T)
    return Trajectory(states)


def induced_plan(problem: StageProblem, policy: FeedbackPolicy, x0, T: int) -> Plan:
    """The open-loop plan the policy generates along its own trajectory."""
    _, controls = _roll(problem, policy, x0, T)
    return Plan(controls, tail_rule="repeat_last")


def _resolve_terminal(problem: StageProblem, terminal: str) -> str:
    if terminal == "auto":
        return "from_terminal_reward" if problem.terminal is not None else "zero_seed"
    if terminal not in ("from_terminal_reward", "zero_seed"):
        raise ValueError(f"unknown terminal mode {terminal!r}")
    return terminal


def _closed_loop_adjoint(problem: StageProblem, policy: FeedbackPolicy,
                         states: np.ndarray, controls: np.ndarray, T: int,
                         terminal: str = "auto") -> AdjointSeq:
    n, m = problem.n, problem.m
    lam = np.zeros((T, n))
    mode = _resolve_terminal(problem, terminal)
    if mode == "from_terminal_reward":
        lam[T - 1] = np.asarray(problem.terminal_grad(T, states[T]), dtype=float).ravel()
    else:
        # zero costate beyond T, so lam_T carries stage T's closed-loop row
        x_T = states[T]
        u_T = policy(T, x_T)
        J_T = np.asarray(policy.jacobian(T, x_T), dtype=float).reshape(m, n)
        gx = np.asarray(problem.g_x(T, x_T, u_T), dtype=float).ravel()
        gy = np.asarray(problem.g_y(T, x_T, u_T), dtype=float).ravel()
        lam[T - 1] = gx + gy @ J_T
    for t in range(T - 1, 0, -1):
        x, u = states[t], controls[t]
        J = np.asarray(policy.jacobian(t, x), dtype=float).reshape(m, n)
        gx = np.asarray(problem.g_x(t, x, u), dtype=float).ravel()
        gy = np.asarray(problem.g_y(t, x, u), dtype=float).ravel()
        fx = np.asarray(problem.f_x(t, x, u), dtype=float).reshape(n, n)
        fy = np.asarray(problem.f_y(t, x, u), dtype=float).reshape(n, m)
        lam[t - 1] = (gx + gy @ J) + lam[t] @ (fx + fy @ J)
    return AdjointSeq(lam, "closed_loop_recursion", T)


def markov_adjoint(problem: StageProblem, policy: FeedbackPolicy, x0, T: int,
                   terminal: str = "auto") -> AdjointSeq:
    """Costates along the closed loop.

    lam_t = (g_x + g_y J) + lam_{t+1} (f_x + f_y J), all rows on the
    policy's own trajectory.  The seed follows the terminal mode: the
    terminal-reward gradient when the problem carries one ("auto"
    resolves that way), else the zero-seeded stage-T closed-loop row.
    For a constant policy (zero Jacobian) the zero-seeded variant is
    bit-for-bit the open-loop adjoint_backward zero seed on the induced
    plan.
    """
    states, controls = _roll(problem, policy, x0, T)
    return _closed_loop_adjoint(problem, policy, states, controls, T, terminal)


def markov_residuals(problem: StageProblem, policy: FeedbackPolicy, x0, T: int,
                     h: int = 1, tolerances: Optional[Tolerances] = None,
                     solver: Optional[dict] = None,
                     terminal: str = "auto") -> ResidualReport:
    """Maximum-principle residuals for a feedback policy.

    Stationarity and recursion rows use the open-loop forms on the
    induced plan with the closed-loop costates, so a policy whose
    induced plan is open-loop optimal scores zero on both.  The
    transversality profile propagates through the closed-loop state
    Jacobians f_x + f_y J.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    tolerances = tolerances or Tolerances()
    states, controls = _roll(problem, policy, x0, T)
    traj = Trajectory(states)
    plan = Plan(controls, tail_rule="repeat_last")
    adj = _closed_loop_adjoint(problem, policy, states, controls, T, terminal)
    r = stationarity_residuals(problem, traj, plan, adj)
    e = recursion_residuals(problem, traj, plan, adj)
    n, m = problem.n, problem.m
    if h > T - 1:
        tc = profile_from_rows(h, np.zeros((0, n)), tolerances.tc)
    else:
        M = np.eye(n)
        rows = np.empty((T - h, n))
        for t in range(h, T):
            rows[t - h] = adj.at(t) @ M
            x, u = states[t], controls[t]
            J = np.asarray(policy.jacobian(t, x), dtype=float).reshape(m, n)
            fx = np.asarray(problem.f_x(t, x, u), dtype=float).reshape(n, n)
            fy = np.asarray(problem.f_y(t, x, u), dtype=float).reshape(n, m)
            M = (fx + fy @ J) @ M
        tc = profile_from_rows(h, rows, tolerances.tc)
    return ResidualReport(r, e, tc, tolerances, solver=solver, kind="markov")


def check_assumption_amp_markov(problem: StageProblem, policy: FeedbackPolicy, x0,
                                T: int, tau: int, radius: float, n_samples: int = 8,
                                K_list: Optional[Sequence[int]] = None, seed: int = 0,
                                sensitivity_tol: float = 0.15) -> AmpProbeReport:
    """Closed-loop variant of the tail-convergence probe.

    A one-shot deviation at stage tau, after which play returns to the
    policy; the tail terms carry the closed-loop rows g_x + g_y J and
    closed-loop state-Jacobian products.
    """
    if not 0 <= tau < T - 2:
        raise ValueError("tau leaves no tail to probe")
    states, controls = _roll(problem, policy, x0, T)
    u_hat = controls[tau]
    lo, hi = _policy_box(problem, policy, tau, states[tau])
    margin = float(np.minimum(np.where(np.isfinite(lo), u_hat - lo, np.inf),
                              np.where(np.isfinite(hi), hi - u_hat, np.inf)).min())
    if radius > margin:
        raise ValueError(f"radius {radius:g} exceeds interiority margin {margin:g} at tau={tau}")
    if K_list is None:
        k_lo = tau + 2
        k_hi = max(k_lo + 1, (T - 1) // 2)
        K_list = np.unique(np.linspace(k_lo, k_hi, 8).astype(int))
    K_arr = np.asarray(sorted(set(int(k) for k in K_list)))
    if K_arr.min() <= tau or K_arr.max() > T - 1:
        raise ValueError("K_list entries must lie in (tau, T-1]")
    rng = np.random.default_rng(seed)
    n, m = problem.n, problem.m
    samples = [u_hat + rng.uniform(-radius, radius, m) for _ in range(n_samples)]
    for i in range(m):
        e = np.zeros(m)
        e[i] = 0.999 * radius
        samples.append(u_hat + e)
        samples.append(u_hat - e)
    K_end_half = (K_arr.max() + T - 1) // 2
    sups_full = np.zeros(len(K_arr))
    sups_half = np.zeros(len(K_arr))
    for u in samples:
        xs = states.copy()
        xs[tau + 1] = np.asarray(problem.f(tau, xs[tau], u), dtype=float).ravel()
        rho = np.zeros((T, n))
        M = np.eye(n)
        x = xs[tau + 1]
        for t in range(tau + 1, T):
            uc = policy(t, x)
            J = np.asarray(policy.jacobian(t, x), dtype=float).reshape(m, n)
            gx = np.asarray(problem.g_x(t, x, uc), dtype=float).ravel()
            gy = np.asarray(problem.g_y(t, x, uc), dtype=float).ravel()
            rho[t] = (gx + gy @ J) @ M
            fx = np.asarray(problem.f_x(t, x, uc), dtype=float).reshape(n, n)
            fy = np.asarray(problem.f_y(t, x, uc), dtype=float).reshape(n, m)
            M = (fx + fy @ J) @ M
            x = np.asarray(problem.f(t, x, uc), dtype=float).ravel()
        suffix = np.zeros((T + 1, n))
        for t in range(T - 1, tau, -1):
            suffix[t] = suffix[t + 1] + rho[t]
        for i, K in enumerate(K_arr):
            tail_full = suffix[K]
            tail_half = suffix[K] - suffix[min(K_end_half, T - 1) + 1]
            sups_full[i] = max(sups_full[i], float(np.abs(tail_full).max()))
            sups_half[i] = max(sups_half[i], float(np.abs(tail_half).max()))
    rate, r2 = _fit_geometric(K_arr, sups_full)
    denom = np.maximum(sups_full, 1e-300)
    sensitivity = float(np.max(np.abs(sups_full - sups_half) / denom))
    passed = bool(rate < 1.0 and r2 >= 0.9 and sensitivity <= sensitivity_tol)
    return AmpProbeReport(tau, radius, len(samples), K_arr, sups_full,
                          rate, r2, sensitivity, passed)


# ---------------------------------------------------------------------------
# Euler-equation reduced form: the next state is the choice variable.


@dataclass
class EulerProblem:
    """Reward g_t(x_t, x_{t+1}) with the next state chosen directly.

    choice_lo / choice_hi bound the admissible next state; either may be
    a callable of (t, x) for state-dependent sets, or None for an
    unbounded side.
    """

    n: int
    g: Callable
    g_x: Callable
    g_y: Callable
    choice_lo: object = None
    choice_hi: object = None
    name: str = ""

    def choice_box(self, t: int, x) -> tuple:
        def side(b, default):
            if b is None:
                return np.full(self.n, default)
            if callable(b):
                return np.asarray(b(t, x), dtype=float).ravel()
            return np.asarray(b, dtype=float).ravel() * np.ones(self.n)
        return side(self.choice_lo, -np.inf), side(self.choice_hi, np.inf)


def euler_as_stage_problem(ep: EulerProblem) -> StageProblem:
    """Embed the reduced form as a stage problem with f(t, x, u) = u.

    State-dependent choice sets cannot ride along on the static control
    box; the embedding leaves the box unbounded in that case and
    feasibility stays with the Euler-side checks.
    """
    n = ep.n
    lo = ep.choice_lo if not callable(ep.choice_lo) else None
    hi = ep.choice_hi if not callable(ep.choice_hi) else None
    return StageProblem(
        n=n, m=n,
        f=lambda t, x, u: np.asarray(u, dtype=float),
        f_x=lambda t, x, u: np.zeros((n, n)),
        f_y=lambda t, x, u: np.eye(n),
        g=ep.g, g_x=ep.g_x, g_y=ep.g_y,
        control_lo=lo, control_hi=hi,
        name=ep.name or "euler-embedded",
    )


def _euler_jacobian_fn(policy_jacobians, n: int):
    if policy_jacobians is None:
        return None
    if isinstance(policy_jacobians, FeedbackPolicy):
        return lambda t, x: np.asarray(policy_jacobians.jacobian(t, x), dtype=float).reshape(n, n)
    if callable(policy_jacobians):
        return lambda t, x: np.asarray(policy_jacobians(t, x), dtype=float).reshape(n, n)
    arr = np.asarray(policy_jacobians, dtype=float)
    if arr.ndim == 2:
        const = arr.reshape(n, n)
        return lambda t, x: const
    return lambda t, x: arr[t]


def euler_residuals(problem: EulerProblem, traj, policy_jacobians=None,
                    h: int = 1, tc_tol: float = 1e-6):
    """Euler-equation residuals and the reduced-form transversality profile.

    For a path x_0..x_T the residual at interior stage t is
    g_y(t-1, x_{t-1}, x_t) + g_x(t, x_t, x_{t+1}); rows cover t = 1..T-1.
    The profile propagates the reward next-state gradient through the
    products of the policy Jacobians from stage h; it needs
    policy_jacobians (a FeedbackPolicy with m == n, a callable (t, x),
    or an array) and is None without them.  Returns (residuals, profile).
    """
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if states.shape[0] < 3:
        raise ValueError("need at least three states (two transitions) for Euler residuals")
    if states.shape[1] != problem.n:
        raise ValueError(f"state dimension {states.shape[1]} does not match n={problem.n}")
    if h < 1:
        raise ValueError("h must be >= 1")
    T = states.shape[0] - 1
    ee = np.empty((T - 1, problem.n))
    for t in range(1, T):
        gy_prev = np.asarray(problem.g_y(t - 1, states[t - 1], states[t]), dtype=float).ravel()
        gx_here = np.asarray(problem.g_x(t, states[t], states[t + 1]), dtype=float).ravel()
        ee[t - 1] = gy_prev + gx_here
    jac = _euler_jacobian_fn(policy_jacobians, problem.n)
    if jac is None:
        return ee, None
    if h > T - 1:
        return ee, profile_from_rows(h, np.zeros((0, problem.n)), tc_tol)
    M = np.eye(problem.n)
    rows = np.empty((T - h, problem.n))
    for t in range(h, T):
        gy_prev = np.asarray(problem.g_y(t - 1, states[t - 1], states[t]), dtype=float).ravel()
        rows[t - h] = gy_prev @ M
        M = jac(t, states[t]) @ M
    return ee, profile_from_rows(h, rows, tc_tol)


class EulerRoot(NamedTuple):
    root: float
    ratio: float


def solve_linear_euler(b_coef: float, mid_coef: float, a_coef: float, x0,
                       stable_root_rule: Callable[[float], bool]) -> EulerRoot:
    """Solve b z^2 + mid z + a = 0 and select the admissible root.

    Covers Euler equations whose interior solutions follow x_{t+1} =
    z x_t from x0.  stable_root_rule is a predicate on a candidate root;
    exactly one real root may satisfy it.  Complex roots, no admissible
    root, and two admissible roots each raise ValueError rather than
    guessing.  Returns (root, ratio) where the stationary policy is
    x_{t+1} = ratio * x_t.
    """
    b, mid, a = float(b_coef), float(mid_coef), float(a_coef)
    if b == 0.0:
        raise ValueError("leading coefficient is zero; not a second-order recursion")
    x0 = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite x0")
    disc = mid * mid - 4.0 * b * a
    if disc < 0.0:
        raise ValueError(f"characteristic roots are complex (discriminant {disc:g})")
    sq = np.sqrt(disc)
    roots = sorted({(-mid - sq) / (2.0 * b), (-mid + sq) / (2.0 * b)})
    admissible = [z for z in roots if stable_root_rule(z)]
    if not admissible:
        raise ValueError(f"no root passes the stability rule; candidates were {roots}")
    if len(admissible) > 1:
        raise ValueError(f"stability rule does not separate the roots {roots}; "
                         "refine the rule instead of tie-breaking silently")
    z = float(admissible[0])
    return EulerRoot(root=z, ratio=z)
