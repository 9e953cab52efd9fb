"""Problem files: declarative text input for the command-line tools.

A problem file is INI-style, line oriented ``key = value``, with the
model written in the expression grammar (variables x1..xn and u1..um,
the stage index t, and any names declared in [params]).  Sections:

  [meta]        name, kind (ocp | euler | game)
  [params]      numeric constants usable in every expression
  [dims]        n and m; games add N (or give m as a per-player list)
  [dynamics]    f1..fn, one expression per state coordinate (ocp, game)
  [reward]      g (ocp, euler) or g1..gN (game)
  [terminal]    optional value expression in the state variables
  [controls]    open box sides lo / hi: numeric lists, or expressions
                (in t for ocp and games, in t and x for euler); keys
                lo1/hi1.. override single coordinates
  [policy]      optional feedback policy, family plus parameters
  [horizon]     T, tail_rule, u_inf, x0
  [tolerances]  stationarity / recursion / tc overrides

For euler problems the choice variable is the next state, so the
reward is written over x1..xn (current state) and u1..un (next state).
Unknown sections and unused keys are rejected rather than ignored, and
a missing required section is reported by name so callers can surface
it verbatim.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import exprlang
from .core import StageProblem, TerminalReward
from .feedback import EulerProblem, FeedbackPolicy
from .games import GameProblem
from .mp import Tolerances

__all__ = [
    "ProblemFileError",
    "LoadedProblem",
    "parse_problem_text",
    "load_problem_file",
    "KINDS",
    "TAIL_RULES",
]

KINDS = ("ocp", "euler", "game")
TAIL_RULES = ("repeat_last", "zero", "u_inf")

_REQUIRED = {
    "ocp": ("meta", "dims", "dynamics", "reward"),
    "euler": ("meta", "dims", "reward"),
    "game": ("meta", "dims", "dynamics", "reward"),
}
_KNOWN = ("meta", "params", "dims", "dynamics", "reward", "terminal",
          "controls", "policy", "horizon", "tolerances")
# sections that a given kind must not contain
_FORBIDDEN = {
    "euler": ("dynamics",),
    "game": ("policy",),
}

# quick shape test: a value made only of digits, signs, dots, commas,
# whitespace and exponent letters is a numeric list, not an expression
_NUMERIC_RE = re.compile(r"^[\s,+\-0-9.eE]+$")


class ProblemFileError(ValueError):
    """A problem file failed validation; the message names the section."""


@dataclass
class LoadedProblem:
    """Everything a problem file declares, built and ready to run."""

    kind: str
    name: str
    problem: Union[StageProblem, EulerProblem, GameProblem]
    params: dict
    policy: Optional[FeedbackPolicy] = None
    T: Optional[int] = None
    tail_rule: Optional[str] = None
    u_inf: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    tolerances: Optional[Tolerances] = None


class _Section:
    """One [section] with required/optional lookups and leftover detection."""

    def __init__(self, name: str, items):
        self.name = name
        self.items = dict(items)
        self.seen = set()

    def need(self, key: str) -> str:
        if key not in self.items:
            raise ProblemFileError(
                f"section [{self.name}] is missing key {key!r}")
        self.seen.add(key)
        return self.items[key]

    def get(self, key: str, default=None):
        self.seen.add(key)
        return self.items.get(key, default)

    def finish(self):
        extra = sorted(set(self.items) - self.seen)
        if extra:
            raise ProblemFileError(
                f"unknown key(s) in [{self.name}]: {', '.join(extra)}")


def _is_numeric(text: str) -> bool:
    return bool(_NUMERIC_RE.match(text.strip()))


def _floats(text: str, where: str) -> np.ndarray:
    toks = text.replace(",", " ").split()
    if not toks:
        raise ProblemFileError(f"{where}: empty value")
    try:
        return np.array([float(tok) for tok in toks])
    except ValueError:
        raise ProblemFileError(f"{where}: expected numbers, got {text!r}") from None


def _one_float(text: str, where: str) -> float:
    vals = _floats(text, where)
    if vals.size != 1:
        raise ProblemFileError(f"{where}: expected a single number, got {text!r}")
    return float(vals[0])


def _pos_int(text: str, where: str) -> int:
    val = _one_float(text, where)
    if val != int(val) or val < 1:
        raise ProblemFileError(f"{where}: expected a positive integer, got {text!r}")
    return int(val)


def _compile(source: str, pnames, n: int, m: int, where: str):
    try:
        return exprlang.parse(source, pnames, n=n, m=m)
    except exprlang.ParseError as exc:
        raise ProblemFileError(f"{where}: {exc}") from None


def _vec_key(sec: _Section, key: str, count: int, where: str,
             default=None) -> Optional[np.ndarray]:
    raw = sec.get(key)
    if raw is None:
        return default
    vals = _floats(raw, f"{where} {key}")
    if vals.size == 1 and count > 1:
        vals = np.full(count, vals[0])
    if vals.size != count:
        raise ProblemFileError(
            f"{where} {key}: expected {count} values, got {vals.size}")
    return vals


def _param_table(sec: Optional[_Section]) -> dict:
    if sec is None:
        return {}
    params = {}
    for key, raw in sec.items.items():
        # the parser owns the naming rules (no t, no function names, no
        # x/u lookalikes); parsing the bare name exercises all of them
        try:
            exprlang.parse(key, {key}, n=0, m=0)
        except exprlang.ParseError as exc:
            raise ProblemFileError(f"section [params]: {exc}") from None
        params[key] = _one_float(raw, f"params {key}")
        sec.seen.add(key)
    return params


def _bind(params: dict, t, x=None, u=None, xn=(), un=()) -> dict:
    b = dict(params)
    b["t"] = float(t)
    if x is not None:
        for k, v in zip(xn, np.asarray(x, dtype=float).ravel()):
            b[k] = float(v)
    if u is not None:
        for k, v in zip(un, np.asarray(u, dtype=float).ravel()):
            b[k] = float(v)
    return b


def _terminal_from(source: str, pnames, params: dict, xn, n: int,
                   where: str) -> TerminalReward:
    ast = _compile(source, pnames, n, 0, where)

    def value(T, x):
        return exprlang.eval(ast, _bind(params, T, x, xn=xn))

    def grad(T, x):
        return np.array(exprlang.grad(ast, _bind(params, T, x, xn=xn), xn))

    return TerminalReward(value=value, grad=grad)


def _box_side(sec: Optional[_Section], key: str, count: int, pnames,
              params: dict, state_vars: int, xn, where: str):
    """One side of a control/choice box.

    Returns None (unbounded), an (count,) array, or a callable: of t
    alone when state_vars == 0, of (t, x) otherwise.  Per-coordinate
    keys key1..key<count> override the broadcast value.
    """
    if sec is None:
        return None
    specs = [None] * count
    raw = sec.get(key)
    if raw is not None:
        if _is_numeric(raw):
            vals = _floats(raw, f"{where} {key}")
            if vals.size == 1 and count > 1:
                vals = np.full(count, vals[0])
            if vals.size != count:
                raise ProblemFileError(
                    f"{where} {key}: expected {count} values, got {vals.size}")
            specs = [float(v) for v in vals]
        else:
            ast = _compile(raw, pnames, state_vars, 0, f"{where} {key}")
            specs = [ast] * count
    for i in range(count):
        rk = f"{key}{i + 1}"
        rv = sec.get(rk)
        if rv is not None:
            specs[i] = (float(rv) if _is_numeric(rv)
                        else _compile(rv, pnames, state_vars, 0, f"{where} {rk}"))
    if all(s is None for s in specs):
        return None
    fill = -np.inf if key == "lo" else np.inf
    specs = [fill if s is None else s for s in specs]
    if all(isinstance(s, float) for s in specs):
        return np.array(specs)

    if state_vars == 0:
        def side(t):
            b = _bind(params, t)
            return np.array([s if isinstance(s, float) else exprlang.eval(s, b)
                             for s in specs])
    else:
        def side(t, x):
            b = _bind(params, t, x, xn=xn)
            return np.array([s if isinstance(s, float) else exprlang.eval(s, b)
                             for s in specs])
    return side


def _build_policy(sec: _Section, n: int, m: int, params: dict, pnames,
                  xn, name: str) -> FeedbackPolicy:
    family = sec.need("family").strip()
    if family == "affine":
        C = _vec_key(sec, "C", m * n, "policy")
        if C is None:
            raise ProblemFileError("section [policy] is missing key 'C'")
        fp = {"C": C.reshape(m, n),
              "c": _vec_key(sec, "c", m, "policy", default=np.zeros(m))}
    elif family == "linear_fraction":
        frac = _vec_key(sec, "frac", m, "policy")
        if frac is None:
            raise ProblemFileError("section [policy] is missing key 'frac'")
        fp = {"frac": frac}
    elif family == "power":
        coeff = _vec_key(sec, "coeff", m, "policy")
        alpha = _vec_key(sec, "alpha", m, "policy")
        if coeff is None or alpha is None:
            raise ProblemFileError(
                "section [policy]: power family needs keys 'coeff' and 'alpha'")
        fp = {"coeff": coeff, "alpha": alpha}
    elif family == "constant":
        c = _vec_key(sec, "c", m, "policy")
        if c is None:
            raise ProblemFileError("section [policy] is missing key 'c'")
        fp = {"c": c}
    elif family == "expr":
        fp = {"exprs": [sec.need(f"u{i + 1}") for i in range(m)],
              "consts": dict(params)}
    else:
        raise ProblemFileError(
            f"section [policy]: unknown family {family!r}")

    lo = _box_side(sec, "lo", m, pnames, params, n, xn, "policy")
    hi = _box_side(sec, "hi", m, pnames, params, n, xn, "policy")
    state_box = None
    if lo is not None or hi is not None:
        def state_box(t, x, _lo=lo, _hi=hi):
            l = np.full(m, -np.inf) if _lo is None else (
                _lo(t, x) if callable(_lo) else _lo)
            h = np.full(m, np.inf) if _hi is None else (
                _hi(t, x) if callable(_hi) else _hi)
            return l, h
    sec.finish()
    try:
        return FeedbackPolicy(family, fp, n=n, m=m, state_box=state_box,
                              name=f"{name}:policy")
    except ValueError as exc:
        raise ProblemFileError(f"section [policy]: {exc}") from None


def _build_ocp(secs: dict, params: dict, name: str) -> StageProblem:
    pnames = set(params)
    dims = secs["dims"]
    n = _pos_int(dims.need("n"), "dims n")
    m = _pos_int(dims.need("m"), "dims m")
    dims.finish()
    xn = [f"x{i + 1}" for i in range(n)]
    un = [f"u{i + 1}" for i in range(m)]

    dyn = secs["dynamics"]
    f_asts = [_compile(dyn.need(f"f{i + 1}"), pnames, n, m, f"dynamics f{i + 1}")
              for i in range(n)]
    dyn.finish()
    rew = secs["reward"]
    g_ast = _compile(rew.need("g"), pnames, n, m, "reward g")
    rew.finish()

    def f(t, x, u):
        b = _bind(params, t, x, u, xn, un)
        return np.array([exprlang.eval(a, b) for a in f_asts])

    def f_x(t, x, u):
        b = _bind(params, t, x, u, xn, un)
        return np.array([exprlang.grad(a, b, xn) for a in f_asts])

    def f_y(t, x, u):
        b = _bind(params, t, x, u, xn, un)
        return np.array([exprlang.grad(a, b, un) for a in f_asts])

    def g(t, x, u):
        return exprlang.eval(g_ast, _bind(params, t, x, u, xn, un))

    def g_x(t, x, u):
        return np.array(exprlang.grad(g_ast, _bind(params, t, x, u, xn, un), xn))

    def g_y(t, x, u):
        return np.array(exprlang.grad(g_ast, _bind(params, t, x, u, xn, un), un))

    terminal = None
    if "terminal" in secs:
        tsec = secs["terminal"]
        src = tsec.get("value", tsec.get("g_T"))
        if src is None:
            raise ProblemFileError("section [terminal] is missing key 'value'")
        terminal = _terminal_from(src, pnames, params, xn, n, "terminal value")
        tsec.finish()

    csec = secs.get("controls")
    lo = _box_side(csec, "lo", m, pnames, params, 0, xn, "controls")
    hi = _box_side(csec, "hi", m, pnames, params, 0, xn, "controls")
    if csec is not None:
        csec.finish()

    return StageProblem(n=n, m=m, f=f, f_x=f_x, f_y=f_y,
                        g=g, g_x=g_x, g_y=g_y,
                        control_lo=lo, control_hi=hi,
                        terminal=terminal, name=name)


def _build_euler(secs: dict, params: dict, name: str) -> EulerProblem:
    pnames = set(params)
    dims = secs["dims"]
    n = _pos_int(dims.need("n"), "dims n")
    m_raw = dims.get("m")
    if m_raw is not None and _pos_int(m_raw, "dims m") != n:
        raise ProblemFileError(
            "dims m: euler problems choose the next state, so m must equal n")
    dims.finish()
    xn = [f"x{i + 1}" for i in range(n)]
    un = [f"u{i + 1}" for i in range(n)]

    rew = secs["reward"]
    g_ast = _compile(rew.need("g"), pnames, n, n, "reward g")
    rew.finish()

    def g(t, x, y):
        return exprlang.eval(g_ast, _bind(params, t, x, y, xn, un))

    def g_x(t, x, y):
        return np.array(exprlang.grad(g_ast, _bind(params, t, x, y, xn, un), xn))

    def g_y(t, x, y):
        return np.array(exprlang.grad(g_ast, _bind(params, t, x, y, xn, un), un))

    csec = secs.get("controls")
    lo = _box_side(csec, "lo", n, pnames, params, n, xn, "controls")
    hi = _box_side(csec, "hi", n, pnames, params, n, xn, "controls")
    if csec is not None:
        csec.finish()
    if "terminal" in secs:
        raise ProblemFileError(
            "section [terminal] is not supported for kind euler")

    return EulerProblem(n=n, g=g, g_x=g_x, g_y=g_y,
                        choice_lo=lo, choice_hi=hi, name=name)


def _build_game(secs: dict, params: dict, name: str) -> GameProblem:
    pnames = set(params)
    dims = secs["dims"]
    n = _pos_int(dims.need("n"), "dims n")
    m_vals = _floats(dims.need("m"), "dims m")
    m_list = []
    for v in m_vals:
        if v != int(v) or v < 1:
            raise ProblemFileError(
                f"dims m: control dimensions must be positive integers, got {v:g}")
        m_list.append(int(v))
    N_raw = dims.get("N")
    if N_raw is not None:
        N_val = _one_float(N_raw, "dims N")
        if N_val != int(N_val) or N_val < 1:
            raise ProblemFileError("dims N: N must be a positive integer")
        N = int(N_val)
        if len(m_list) == 1:
            m_list = m_list * N
        elif len(m_list) != N:
            raise ProblemFileError(
                f"dims m: got {len(m_list)} entries for N={N} players")
    else:
        if len(m_list) < 2:
            raise ProblemFileError(
                "dims: games need key 'N' (or m as a per-player list)")
        N = len(m_list)
    dims.finish()

    M = int(sum(m_list))
    offs = np.concatenate([[0], np.cumsum(m_list)]).astype(int)
    xn = [f"x{i + 1}" for i in range(n)]
    un = [f"u{i + 1}" for i in range(M)]
    blocks = [un[offs[j]:offs[j + 1]] for j in range(N)]

    dyn = secs["dynamics"]
    f_asts = [_compile(dyn.need(f"f{i + 1}"), pnames, n, M, f"dynamics f{i + 1}")
              for i in range(n)]
    dyn.finish()
    rew = secs["reward"]
    g_asts = [_compile(rew.need(f"g{j + 1}"), pnames, n, M, f"reward g{j + 1}")
              for j in range(N)]
    rew.finish()

    def cat(us):
        return np.concatenate([np.asarray(u, dtype=float).ravel() for u in us])

    def f(t, x, us):
        b = _bind(params, t, x, cat(us), xn, un)
        return np.array([exprlang.eval(a, b) for a in f_asts])

    def f_x(t, x, us):
        b = _bind(params, t, x, cat(us), xn, un)
        return np.array([exprlang.grad(a, b, xn) for a in f_asts])

    def f_y(t, x, us, j):
        b = _bind(params, t, x, cat(us), xn, un)
        return np.array([exprlang.grad(a, b, blocks[j]) for a in f_asts])

    def g(j, t, x, us):
        return exprlang.eval(g_asts[j], _bind(params, t, x, cat(us), xn, un))

    def g_x(j, t, x, us):
        return np.array(exprlang.grad(
            g_asts[j], _bind(params, t, x, cat(us), xn, un), xn))

    def g_y(j, t, x, us):
        return np.array(exprlang.grad(
            g_asts[j], _bind(params, t, x, cat(us), xn, un), blocks[j]))

    terminals = None
    if "terminal" in secs:
        tsec = secs["terminal"]
        shared = tsec.get("value")
        terminals = []
        for j in range(N):
            src = tsec.get(f"value{j + 1}", shared)
            terminals.append(None if src is None else _terminal_from(
                src, pnames, params, xn, n, f"terminal value{j + 1}"))
        tsec.finish()
        if all(term is None for term in terminals):
            raise ProblemFileError("section [terminal] is missing key 'value'")

    csec = secs.get("controls")
    lo = _box_side(csec, "lo", M, pnames, params, 0, xn, "controls")
    hi = _box_side(csec, "hi", M, pnames, params, 0, xn, "controls")
    if csec is not None:
        csec.finish()

    def split(side):
        if side is None:
            return None
        if callable(side):
            return [lambda t, j=j, s=side: np.asarray(s(t), dtype=float).ravel()[
                offs[j]:offs[j + 1]] for j in range(N)]
        arr = np.asarray(side, dtype=float).ravel()
        return [arr[offs[j]:offs[j + 1]].copy() for j in range(N)]

    return GameProblem(N=N, n=n, m=m_list, f=f, f_x=f_x, f_y=f_y,
                       g=g, g_x=g_x, g_y=g_y,
                       control_lo=split(lo), control_hi=split(hi),
                       terminals=terminals, name=name)


def parse_problem_text(text: str, name: str = "<problem>") -> LoadedProblem:
    cp = configparser.ConfigParser(
        interpolation=None, delimiters=("=",),
        comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (C vs c in [policy])
    try:
        cp.read_string(text, source=name)
    except configparser.Error as exc:
        raise ProblemFileError(f"cannot parse problem file: {exc}") from None

    secs = {s: _Section(s, cp.items(s)) for s in cp.sections()}
    for s in secs:
        if s not in _KNOWN:
            raise ProblemFileError(f"unknown section [{s}]")
    if "meta" not in secs:
        raise ProblemFileError("missing required section [meta]")
    meta = secs["meta"]
    kind = meta.need("kind").strip()
    if kind not in KINDS:
        raise ProblemFileError(
            f"meta kind: expected one of {', '.join(KINDS)}, got {kind!r}")
    pname = (meta.get("name") or name).strip()
    meta.finish()

    for req in _REQUIRED[kind]:
        if req not in secs:
            raise ProblemFileError(f"missing required section [{req}]")
    for bad in _FORBIDDEN.get(kind, ()):
        if bad in secs:
            raise ProblemFileError(
                f"section [{bad}] is not supported for kind {kind}")

    params = _param_table(secs.get("params"))
    if "params" in secs:
        secs["params"].finish()

    if kind == "ocp":
        problem = _build_ocp(secs, params, pname)
        n, m = problem.n, problem.m
    elif kind == "euler":
        problem = _build_euler(secs, params, pname)
        n, m = problem.n, problem.n
    else:
        problem = _build_game(secs, params, pname)
        n, m = problem.n, int(sum(problem.m))

    policy = None
    if "policy" in secs:
        xn = [f"x{i + 1}" for i in range(n)]
        policy = _build_policy(secs["policy"], n, m, params, set(params),
                               xn, pname)

    T = None
    tail_rule = None
    u_inf = None
    x0 = None
    if "horizon" in secs:
        hsec = secs["horizon"]
        t_raw = hsec.get("T")
        if t_raw is not None:
            T = _pos_int(t_raw, "horizon T")
        tr = hsec.get("tail_rule")
        if tr is not None:
            tail_rule = tr.strip()
            if tail_rule not in TAIL_RULES:
                raise ProblemFileError(
                    f"horizon tail_rule: expected one of {', '.join(TAIL_RULES)}, "
                    f"got {tail_rule!r}")
        u_inf = _vec_key(hsec, "u_inf", m, "horizon")
        x0 = _vec_key(hsec, "x0", n, "horizon")
        hsec.finish()
    if tail_rule == "u_inf" and u_inf is None:
        raise ProblemFileError(
            "horizon: tail_rule u_inf needs a matching u_inf value")

    tolerances = None
    if "tolerances" in secs:
        tsec = secs["tolerances"]
        kwargs = {}
        for fieldname in ("stationarity", "recursion", "tc"):
            raw = tsec.get(fieldname)
            if raw is not None:
                kwargs[fieldname] = _one_float(raw, f"tolerances {fieldname}")
        tsec.finish()
        if not kwargs:
            raise ProblemFileError(
                "section [tolerances] is empty; give stationarity, recursion or tc")
        tolerances = Tolerances(**kwargs)

    return LoadedProblem(kind=kind, name=pname, problem=problem, params=params,
                         policy=policy, T=T, tail_rule=tail_rule, u_inf=u_inf,
                         x0=x0, tolerances=tolerances)


def load_problem_file(path) -> LoadedProblem:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ProblemFileError(f"cannot read problem file {p}: {exc}") from None
    return parse_problem_text(text, name=p.stem)


def parse_policy_text(text: str, n: int, m: int, params: Optional[dict] = None,
                      name: str = "<policy>") -> FeedbackPolicy:
    """Build a policy from a standalone file holding just [policy].

    The file may carry its own [params]; entries there extend (and
    shadow) the ones passed in, which normally come from the problem
    file the policy is checked against.
    """
    cp = configparser.ConfigParser(
        interpolation=None, delimiters=("=",),
        comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=name)
    except configparser.Error as exc:
        raise ProblemFileError(f"cannot parse policy file: {exc}") from None
    secs = {s: _Section(s, cp.items(s)) for s in cp.sections()}
    for s in secs:
        if s not in ("policy", "params"):
            raise ProblemFileError(
                f"policy file: unknown section [{s}] (only [policy] and [params])")
    if "policy" not in secs:
        raise ProblemFileError("policy file is missing required section [policy]")
    merged = dict(params or {})
    merged.update(_param_table(secs.get("params")))
    if "params" in secs:
        secs["params"].finish()
    xn = [f"x{i + 1}" for i in range(n)]
    return _build_policy(secs["policy"], n, m, merged, set(merged), xn, name)


def load_policy_file(path, n: int, m: int,
                     params: Optional[dict] = None) -> FeedbackPolicy:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ProblemFileError(f"cannot read policy file {p}: {exc}") from None
    return parse_policy_text(text, n, m, params=params, name=p.stem)
