"""Closed-form benchmark cases with exact oracles.

Every case bundles a problem, its known optimal solution (plan, policy,
trajectory, costates, value), parameter validity gates, and the defaults
the CLI uses.  The oracles are what the test suite holds the numerical
machinery against, so they are written straight from the closed forms
with no calls back into the code under test.

Sign convention: costate oracles are gradients of the maximized value,
matching the adjoint recursion here.  Texts that carry the costate of
the equivalent minimization problem flip the sign; metadata on each
case records both readings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from dmp.core import Plan, StageProblem, TerminalReward
from dmp.feedback import EulerProblem, FeedbackPolicy
from dmp.games import GameProblem

__all__ = [
    "BenchmarkCase", "BENCHMARKS", "get_benchmark", "list_benchmarks",
    "make_lq", "make_consumption_investment", "make_brock_mirman",
    "make_ak", "make_lq_game",
]


@dataclass
class BenchmarkCase:
    """A problem with its exact solution and everything tests need.

    kind is "ocp", "euler", or "game"; problem is the matching type.
    oracle holds callables keyed by what they produce ("plan", "policy",
    "states", "adjoint", "value", and kind-specific entries); extras
    carries alternative formulations (the euler case also ships a stage
    form so the generic solver can be run on it).
    """

    name: str
    kind: str
    problem: object
    params: dict
    oracle: dict
    metadata: dict
    default_x0: np.ndarray
    default_init: Optional[Callable] = None
    extras: dict = field(default_factory=dict)


def _pos(x) -> float:
    """First state coordinate, guarded: terminals below are singular at 0."""
    v = float(x[0])
    if v <= 0.0:
        raise ValueError("state left the positive domain")
    return v


def _stable_quadratic_root(lead: float, mid: float, last: float, pick: str) -> tuple:
    """Real roots of lead z^2 + mid z + last = 0, (chosen, other) by size."""
    disc = mid * mid - 4.0 * lead * last
    if disc < 0:
        raise ValueError("complex characteristic roots")
    sq = float(np.sqrt(disc))
    lo = (-mid - sq) / (2.0 * lead)
    hi = (-mid + sq) / (2.0 * lead)
    lo, hi = min(lo, hi), max(lo, hi)
    return (lo, hi) if pick == "min" else (hi, lo)


def make_lq(beta: float = 0.95, x0: float = 1.0) -> BenchmarkCase:
    """Scalar linear-quadratic regulator, reward form.

    f = x + u, g = -beta^t (x^2 + u^2) / 2.  The optimal path contracts
    by the stable root r of beta z^2 - (1 + 2 beta) z + 1 = 0:
    u_t = (r - 1) x_t, lam_t = (r - 1) x0 (beta r)^(t-1).
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta:g}")
    x0 = float(x0)
    r, r_rej = _stable_quadratic_root(beta, -(1.0 + 2.0 * beta), 1.0, "min")
    if not abs(beta * r) < 1.0:
        raise ValueError(f"no summable root: |beta*r| = {abs(beta * r):g}")
    problem = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: x + u,
        f_x=lambda t, x, u: np.array([[1.0]]),
        f_y=lambda t, x, u: np.array([[1.0]]),
        g=lambda t, x, u: -0.5 * beta**t * (x[0]**2 + u[0]**2),
        g_x=lambda t, x, u: np.array([-beta**t * x[0]]),
        g_y=lambda t, x, u: np.array([-beta**t * u[0]]),
        name="lq",
    )

    def plan(T):
        return Plan(((r - 1.0) * x0 * r ** np.arange(T)).reshape(T, 1))

    def states(T):
        return (x0 * r ** np.arange(T + 1)).reshape(T + 1, 1)

    def adjoint(T):
        t = np.arange(1, T + 1)
        return ((r - 1.0) * x0 * (beta * r) ** (t - 1)).reshape(T, 1)

    def value(T):
        q = beta * r * r
        return -0.5 * x0**2 * (1.0 + (r - 1.0)**2) * (1.0 - q**T) / (1.0 - q)

    policy = FeedbackPolicy("linear_fraction", {"frac": r - 1.0}, n=1, m=1)
    return BenchmarkCase(
        name="lq", kind="ocp", problem=problem,
        params={"beta": beta, "x0": x0},
        oracle={"plan": plan, "policy": policy, "states": states,
                "adjoint": adjoint, "value": value,
                "contraction": r, "rejected_root": r_rej},
        metadata={
            "adjoint_sign": "gradient of the maximized value; negate for the "
                            "cost-minimization costate",
            "terminal": "none; the truncated problem zero-seeds the costate",
            "closed_form": "u_t = (r-1) x_t with r the stable characteristic root",
        },
        default_x0=np.array([x0]),
    )


def make_consumption_investment(beta: float = 0.95, gamma: float = 0.5,
                                r: float = 1.05, x0: float = 1.0) -> BenchmarkCase:
    """Isoelastic consumption out of invested wealth.

    x_{t+1} = r (1 - u) x, g = beta^t (x u)^(1 - gamma), u in (0, 1).
    The optimal fraction is constant: u = 1 - (r beta)^(1/gamma) / r.
    An exact tail-value terminal reward makes the truncated costates
    agree with the stationary ones at every stage.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta:g}")
    if gamma <= 0.0 or gamma == 1.0:
        raise ValueError(f"gamma must be positive and not 1, got {gamma:g}")
    if r <= 0.0:
        raise ValueError(f"r must be positive, got {r:g}")
    x0 = float(x0)
    if x0 <= 0.0:
        raise ValueError(f"x0 must be positive, got {x0:g}")
    kappa = (r * beta) ** (1.0 / gamma)
    q = kappa / r
    if not q < 1.0:
        raise ValueError(f"no interior plan: (r beta)^(1/gamma) = {kappa:g} >= r = {r:g}")
    u_star = 1.0 - q
    Kv = u_star ** (-gamma)  # value multiplier (1 - q)^(-gamma)
    terminal = TerminalReward(
        value=lambda T, x: beta**T * Kv * _pos(x) ** (1.0 - gamma),
        grad=lambda T, x: np.array([beta**T * Kv * (1.0 - gamma) * _pos(x) ** (-gamma)]),
    )
    problem = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: np.array([r * (1.0 - u[0]) * x[0]]),
        f_x=lambda t, x, u: np.array([[r * (1.0 - u[0])]]),
        f_y=lambda t, x, u: np.array([[-r * x[0]]]),
        g=lambda t, x, u: beta**t * (x[0] * u[0]) ** (1.0 - gamma),
        g_x=lambda t, x, u: np.array([beta**t * (1.0 - gamma) * (x[0] * u[0]) ** (-gamma) * u[0]]),
        g_y=lambda t, x, u: np.array([beta**t * (1.0 - gamma) * (x[0] * u[0]) ** (-gamma) * x[0]]),
        control_lo=0.0, control_hi=1.0,
        terminal=terminal,
        name="consumption-investment",
    )

    def plan(T):
        return Plan(np.full((T, 1), u_star))

    def states(T):
        return (x0 * kappa ** np.arange(T + 1)).reshape(T + 1, 1)

    def adjoint(T):
        xs = states(T)[:, 0]
        t = np.arange(1, T + 1)
        return (beta**t * Kv * (1.0 - gamma) * xs[1:] ** (-gamma)).reshape(T, 1)

    policy = FeedbackPolicy("constant", {"c": [u_star]}, n=1, m=1)
    return BenchmarkCase(
        name="ci", kind="ocp", problem=problem,
        params={"beta": beta, "gamma": gamma, "r": r, "x0": x0},
        oracle={"plan": plan, "policy": policy, "states": states,
                "adjoint": adjoint,
                "value": lambda T=None: Kv * x0 ** (1.0 - gamma),
                "u_star": u_star, "growth": kappa},
        metadata={
            "adjoint_sign": "gradient of the maximized value; negate for the "
                            "cost-minimization costate",
            "terminal": "exact tail value beta^T (1-q)^(-gamma) x^(1-gamma); "
                        "with it the finite-horizon costates are stationary-exact",
            "closed_form": "constant fraction u = 1 - (r beta)^(1/gamma)/r",
        },
        default_x0=np.array([x0]),
    )


def make_brock_mirman(alpha: float = 0.3, beta: float = 0.95,
                      A_seq=None, x0: float = 1.0) -> BenchmarkCase:
    """Log-utility growth with Cobb-Douglas accumulation.

    x_{t+1} = A_t x^alpha - c, g = beta^t ln(c), c in (0, A_t x^alpha).
    The optimal policy consumes the fixed share 1 - alpha beta of
    output regardless of the productivity path A_t.  The costate is
    beta^t B / x_t with B = alpha / (1 - alpha beta); the terminal
    reward uses exactly that gradient (its constant term is exact for
    the stationary A = 1 path).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha:g}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta:g}")
    x0 = float(x0)
    if x0 <= 0.0:
        raise ValueError(f"x0 must be positive, got {x0:g}")
    if A_seq is None:
        A = lambda t: 1.0
    elif callable(A_seq):
        A = A_seq
    else:
        arr = np.asarray(A_seq, dtype=float).ravel()
        if arr.size == 0 or np.any(arr <= 0):
            raise ValueError("A_seq entries must be positive")
        A = lambda t: float(arr[min(t, arr.size - 1)])
    if A(0) <= 0:
        raise ValueError("productivity must be positive")
    d = 1.0 - alpha * beta          # consumed share of output
    B = alpha / (1.0 - alpha * beta)
    A_c = (np.log(d) + (alpha * beta / (1.0 - alpha * beta)) * np.log(alpha * beta)) \
        / (1.0 - beta)
    terminal = TerminalReward(
        value=lambda T, x: beta**T * (A_c + B * np.log(_pos(x))),
        grad=lambda T, x: np.array([beta**T * B / _pos(x)]),
    )
    problem = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: np.array([A(t) * x[0]**alpha - u[0]]),
        f_x=lambda t, x, u: np.array([[alpha * A(t) * x[0]**(alpha - 1.0)]]),
        f_y=lambda t, x, u: np.array([[-1.0]]),
        g=lambda t, x, u: beta**t * np.log(u[0]),
        g_x=lambda t, x, u: np.array([0.0]),
        g_y=lambda t, x, u: np.array([beta**t / u[0]]),
        control_lo=0.0,
        terminal=terminal,
        name="brock-mirman",
    )
    state_box = lambda t, x: (np.array([0.0]), np.array([A(t) * x[0]**alpha]))
    policy = FeedbackPolicy("power", {"coeff": lambda t: d * A(t), "alpha": alpha},
                            n=1, m=1, state_box=state_box)

    def states(T):
        xs = np.empty((T + 1, 1))
        xs[0, 0] = x0
        for t in range(T):
            xs[t + 1, 0] = alpha * beta * A(t) * xs[t, 0]**alpha
        return xs

    def plan(T):
        xs = states(T)[:, 0]
        return Plan(np.array([[d * A(t) * xs[t]**alpha] for t in range(T)]))

    def adjoint(T):
        xs = states(T)[:, 0]
        t = np.arange(1, T + 1)
        return (beta**t * B / xs[1:]).reshape(T, 1)

    def default_init(T):
        # half-consumption rollout; the box midpoint is infeasible here
        xs = np.empty(T + 1)
        xs[0] = x0
        controls = np.empty((T, 1))
        for t in range(T):
            out = A(t) * xs[t]**alpha
            controls[t, 0] = 0.5 * out
            xs[t + 1] = out - controls[t, 0]
        return Plan(controls)

    return BenchmarkCase(
        name="bm", kind="ocp", problem=problem,
        params={"alpha": alpha, "beta": beta, "x0": x0,
                "A_seq": None if A_seq is None else "given"},
        oracle={"plan": plan, "policy": policy, "states": states,
                "adjoint": adjoint,
                "value": lambda T=None: A_c + B * np.log(x0),
                "consumed_share": d, "steady_state": (alpha * beta) ** (1.0 / (1.0 - alpha))},
        metadata={
            "adjoint_sign": "gradient of the maximized value; negate for the "
                            "cost-minimization costate",
            "terminal": "exact value gradient beta^T B / x for any productivity "
                        "path; the constant is exact only for stationary A = 1 "
                        "and cancels from every residual",
            "closed_form": "c_t = (1 - alpha beta) A_t x_t^alpha",
            "value_note": "oracle value assumes stationary A = 1",
        },
        default_x0=np.array([x0]),
        default_init=default_init,
    )


def make_ak(a: float = 1.02, beta: float = 0.9, theta: float = -1.0,
            x0: float = 1.0) -> BenchmarkCase:
    """Constant-returns accumulation in Euler form.

    Next state chosen directly: g_t(x, y) = beta^t (a x - y)^theta / theta
    on 0 < y < a x.  The interior optimum follows x_{t+1} = z x_t with
    z = (a beta)^(1/(1-theta)); the characteristic polynomial
    b z^2 - (1 + a b) z + a (b = (a beta)^(1/(theta-1))) has roots
    {a, 1/b} and consumption positivity (z < a) picks 1/b.
    """
    if a <= 0.0:
        raise ValueError(f"a must be positive, got {a:g}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta:g}")
    if theta >= 1.0 or theta == 0.0:
        raise ValueError(f"theta must be nonzero and below 1, got {theta:g}")
    if not a * beta < 1.0:
        raise ValueError(f"need a*beta < 1 for a summable objective, got {a * beta:g}")
    x0 = float(x0)
    if x0 <= 0.0:
        raise ValueError(f"x0 must be positive, got {x0:g}")
    b = (a * beta) ** (1.0 / (theta - 1.0))
    z = 1.0 / b
    if not z < a:
        raise ValueError(f"growth root {z:g} leaves no room for consumption below a = {a:g}")
    tail = beta * z**theta
    if not tail < 1.0:
        raise ValueError(f"objective diverges along the optimal path: beta z^theta = {tail:g}")

    problem = EulerProblem(
        n=1,
        g=lambda t, x, y: beta**t * (a * x[0] - y[0]) ** theta / theta,
        g_x=lambda t, x, y: np.array([beta**t * a * (a * x[0] - y[0]) ** (theta - 1.0)]),
        g_y=lambda t, x, y: np.array([-beta**t * (a * x[0] - y[0]) ** (theta - 1.0)]),
        choice_lo=0.0,
        choice_hi=lambda t, x: np.array([a * x[0]]),
        name="ak",
    )
    policy = FeedbackPolicy("linear_fraction", {"frac": z}, n=1, m=1)

    def states(T):
        return (x0 * z ** np.arange(T + 1)).reshape(T + 1, 1)

    def path_plan(T):
        # in the euler embedding the "control" is the next state
        return Plan(states(T)[1:, :])

    # consumption-control stage form, for the generic solver and probes
    c_share = a - z
    V_mult = c_share**theta / (theta * (1.0 - tail))
    stage_terminal = TerminalReward(
        value=lambda T, x: beta**T * V_mult * _pos(x) ** theta,
        grad=lambda T, x: np.array([beta**T * V_mult * theta * _pos(x) ** (theta - 1.0)]),
    )
    stage_problem = StageProblem(
        n=1, m=1,
        f=lambda t, x, u: np.array([a * x[0] - u[0]]),
        f_x=lambda t, x, u: np.array([[a]]),
        f_y=lambda t, x, u: np.array([[-1.0]]),
        g=lambda t, x, u: beta**t * u[0] ** theta / theta,
        g_x=lambda t, x, u: np.array([0.0]),
        g_y=lambda t, x, u: np.array([beta**t * u[0] ** (theta - 1.0)]),
        control_lo=0.0,
        terminal=stage_terminal,
        name="ak-stage",
    )

    def stage_plan(T):
        return Plan((c_share * x0 * z ** np.arange(T)).reshape(T, 1))

    def stage_adjoint(T):
        xs = states(T)[:, 0]
        t = np.arange(1, T + 1)
        return (beta**t * V_mult * theta * xs[1:] ** (theta - 1.0)).reshape(T, 1)

    def stage_default_init(T):
        # halving output each stage collapses consumption and overflows
        # the marginal utility; keep the state on a gentle geometric path
        s = a * (1.0 + beta) / 2.0
        xs = x0 * s ** np.arange(T)
        return Plan((a - s) * xs.reshape(T, 1))

    def value(T=None):
        return V_mult * x0 ** theta

    return BenchmarkCase(
        name="ak", kind="euler", problem=problem,
        params={"a": a, "beta": beta, "theta": theta, "x0": x0},
        oracle={"states": states, "plan": path_plan, "policy": policy,
                "root": z, "ratio": z, "rejected_root": a,
                "value": value, "consumption_share": c_share},
        metadata={
            "adjoint_sign": "stage-form costate is the value gradient; negate "
                            "for the cost-minimization convention",
            "terminal": "stage form carries the exact tail value "
                        "beta^T c_share^theta x^theta / (theta (1 - beta z^theta))",
            "closed_form": "x_{t+1} = z x_t, z = (a beta)^(1/(1-theta)); both "
                           "characteristic roots are beta-summable here, so "
                           "root selection must use consumption positivity z < a",
        },
        default_x0=np.array([x0]),
        extras={
            "char_coefficients": (b, -(1.0 + a * b), a),
            "stable_root_rule": lambda zz: zz < a,
            "stage_problem": stage_problem,
            "stage_plan": stage_plan,
            "stage_adjoint": stage_adjoint,
            "stage_default_init": stage_default_init,
        },
    )


def make_lq_game(beta: float = 0.95, N: int = 2, x0: float = 1.0) -> BenchmarkCase:
    """Symmetric N-player linear-quadratic game on a shared scalar state.

    f = x + sum_j u^j, g^j = -beta^t (x^2 + (u^j)^2) / 2.  The open-loop
    equilibrium contracts by the stable root r of
    beta z^2 - (1 + (1 + N) beta) z + 1 = 0, each player supplying an
    equal share: u^j_t = (r - 1) x_t / N.
    """
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta:g}")
    x0 = float(x0)
    N = int(N)
    r, r_rej = _stable_quadratic_root(beta, -(1.0 + (1.0 + N) * beta), 1.0, "min")
    game = GameProblem(
        N=N, n=1, m=[1] * N,
        f=lambda t, x, us: x + sum(us),
        f_x=lambda t, x, us: np.array([[1.0]]),
        f_y=lambda t, x, us, j: np.array([[1.0]]),
        g=lambda j, t, x, us: -0.5 * beta**t * (x[0]**2 + us[j][0]**2),
        g_x=lambda j, t, x, us: np.array([-beta**t * x[0]]),
        g_y=lambda j, t, x, us: np.array([-beta**t * us[j][0]]),
        name="lq-game",
    )

    def plans(T):
        u = ((r - 1.0) * x0 / N) * r ** np.arange(T)
        return [Plan(u.reshape(T, 1)) for _ in range(N)]

    def states(T):
        return (x0 * r ** np.arange(T + 1)).reshape(T + 1, 1)

    def adjoint(T):
        t = np.arange(1, T + 1)
        return (((r - 1.0) * x0 / N) * (beta * r) ** (t - 1)).reshape(T, 1)

    def value(T):
        qq = beta * r * r
        return -0.5 * x0**2 * (1.0 + (r - 1.0)**2 / N**2) * (1.0 - qq**T) / (1.0 - qq)

    policy = FeedbackPolicy("linear_fraction", {"frac": (r - 1.0) / N}, n=1, m=1)
    return BenchmarkCase(
        name="lq_game", kind="game", problem=game,
        params={"beta": beta, "N": N, "x0": x0},
        oracle={"plans": plans, "policy": policy, "states": states,
                "adjoint": adjoint, "value": value, "contraction": r,
                "rejected_root": r_rej},
        metadata={
            "adjoint_sign": "per-player value gradient; negate for the "
                            "cost-minimization costate",
            "terminal": "none; identical costates across players by symmetry",
            "closed_form": "u^j_t = (r - 1) x_t / N",
        },
        default_x0=np.array([x0]),
    )


BENCHMARKS = {
    "lq": make_lq,
    "ci": make_consumption_investment,
    "bm": make_brock_mirman,
    "ak": make_ak,
    "lq_game": make_lq_game,
}


def list_benchmarks() -> list:
    return sorted(BENCHMARKS)


ALIASES = {
    "linear_quadratic": "lq",
    "consumption_investment": "ci",
    "brock_mirman": "bm",
    "ak_growth": "ak",
    "linear_quadratic_game": "lq_game",
}


def get_benchmark(name: str, **params) -> BenchmarkCase:
    """Build a named benchmark, applying parameter overrides."""
    key = name.strip().lower().replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; available: {', '.join(list_benchmarks())}")
    return BENCHMARKS[key](**params)
