"""Arithmetic expression language for stage dynamics and rewards.

Grammar (infix, standard precedence):

    expr   := term  (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := atom ('^' factor)?          # right-associative
    atom   := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'

Precedence: '^' > unary minus > '*' '/' > '+' '-'.  Functions are limited
to {ln, exp, sqrt, pow}.  Variables are `x1..xn` (state), `u1..um`
(control) and `t` (stage index); anything else must be a declared
parameter.  Evaluation works on floats or on Dual numbers, which gives
exact forward-mode derivatives.  All errors carry a byte offset into the
UTF-8 source.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

FUNCTIONS = {"ln": 1, "exp": 1, "sqrt": 1, "pow": 2}

_VAR_RE = re.compile(r"^([xu])([0-9]+)$")
_NUM_RE = re.compile(r"[0-9]+(?:\.[0-9]*)?(?:[eE][+-]?[0-9]+)?|\.[0-9]+(?:[eE][+-]?[0-9]+)?")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class ExprError(Exception):
    """Base error for the expression language; carries a byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ParseError(ExprError):
    pass


class EvalError(ExprError):
    pass


class DomainError(EvalError, ValueError):
    """Argument outside a function's real domain (ln of non-positive, etc.).

    Also a ValueError so numeric callers can catch domain problems without
    importing this module.
    """


# ---------------------------------------------------------------------------
# Dual numbers


@dataclass(frozen=True)
class Dual:
    """Number a + eps*b carrying a directional derivative in ``deriv``."""

    value: float
    deriv: float = 0.0

    def __add__(self, other):
        other = _as_dual(other)
        return Dual(self.value + other.value, self.deriv + other.deriv)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_dual(other)
        return Dual(self.value - other.value, self.deriv - other.deriv)

    def __rsub__(self, other):
        return _as_dual(other).__sub__(self)

    def __mul__(self, other):
        other = _as_dual(other)
        return Dual(self.value * other.value,
                    self.value * other.deriv + self.deriv * other.value)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_dual(other)
        if other.value == 0.0:
            raise DomainError("division by zero")
        return Dual(self.value / other.value,
                    (self.deriv * other.value - self.value * other.deriv)
                    / (other.value * other.value))

    def __rtruediv__(self, other):
        return _as_dual(other).__truediv__(self)

    def __neg__(self):
        return Dual(-self.value, -self.deriv)

    def __pow__(self, other):
        return _pow(self, _as_dual(other))


def _as_dual(v) -> Dual:
    if isinstance(v, Dual):
        return v
    return Dual(float(v), 0.0)


def _float_pow(base: float, exponent: float) -> float:
    if base > 0.0:
        try:
            return math.pow(base, exponent)
        except OverflowError:
            raise DomainError("overflow in power") from None
    if base == 0.0:
        if exponent > 0.0:
            return 0.0
        if exponent == 0.0:
            return 1.0
        raise DomainError("zero base with negative exponent")
    if exponent == int(exponent):
        try:
            return math.pow(base, exponent)
        except OverflowError:
            raise DomainError("overflow in power") from None
    raise DomainError("negative base with non-integer exponent")


def _pow(a: Dual, b: Dual) -> Dual:
    v = _float_pow(a.value, b.value)
    if b.deriv == 0.0:
        # Exponent locally constant: d(a^c) = c*a^(c-1)*a'.
        if b.value == 0.0 or a.deriv == 0.0:
            return Dual(v, 0.0)
        if a.value == 0.0:
            if b.value > 1.0:
                return Dual(v, 0.0)
            if b.value == 1.0:
                return Dual(v, a.deriv)
            raise DomainError("derivative of power at zero base")
        return Dual(v, b.value * _float_pow(a.value, b.value - 1.0) * a.deriv)
    if a.value <= 0.0:
        raise DomainError("derivative of power needs positive base")
    return Dual(v, v * (b.deriv * math.log(a.value) + b.value * a.deriv / a.value))


def _ln(a: Dual) -> Dual:
    if a.value <= 0.0:
        raise DomainError("ln of non-positive argument")
    return Dual(math.log(a.value), a.deriv / a.value)


def _exp(a: Dual) -> Dual:
    try:
        v = math.exp(a.value)
    except OverflowError:
        raise DomainError("overflow in exp") from None
    return Dual(v, v * a.deriv)


def _sqrt(a: Dual) -> Dual:
    if a.value < 0.0:
        raise DomainError("sqrt of negative argument")
    v = math.sqrt(a.value)
    if a.value == 0.0:
        if a.deriv == 0.0:
            return Dual(0.0, 0.0)
        raise DomainError("derivative of sqrt at zero")
    return Dual(v, a.deriv / (2.0 * v))


_FUNC_IMPL = {"ln": _ln, "exp": _exp, "sqrt": _sqrt}


# ---------------------------------------------------------------------------
# AST

Span = tuple  # (start_byte, end_byte); excluded from equality


@dataclass(frozen=True)
class Const:
    value: float
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    name: str  # canonical: "x<i>", "u<i>", or "t"
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Param:
    name: str
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Unary:
    op: str  # "-"
    operand: "ExprAst"
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * / ^
    left: "ExprAst"
    right: "ExprAst"
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    span: Span = field(default=(0, 0), compare=False, repr=False)


ExprAst = Union[Const, Var, Param, Unary, Binary, Call]


# ---------------------------------------------------------------------------
# Tokenizer

_Token = tuple  # (kind, text, byte_offset)


def _tokenize(source: str) -> list:
    tokens = []
    i = 0
    bpos = 0
    while i < len(source):
        ch = source[i]
        if ch.isspace():
            bpos += len(ch.encode("utf-8"))
            i += 1
            continue
        m = _NUM_RE.match(source, i)
        if m:
            tokens.append(("NUM", m.group(0), bpos))
            bpos += len(m.group(0).encode("utf-8"))
            i = m.end()
            continue
        m = _IDENT_RE.match(source, i)
        if m:
            tokens.append(("IDENT", m.group(0), bpos))
            bpos += len(m.group(0).encode("utf-8"))
            i = m.end()
            continue
        if ch in "+-*/^(),":
            tokens.append(("OP", ch, bpos))
            bpos += len(ch.encode("utf-8"))
            i += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", bpos)
    tokens.append(("EOF", "", bpos))
    return tokens


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, source: str, declared_params: Iterable[str], n: int, m: int):
        self.tokens = _tokenize(source)
        self.pos = 0
        self.params = frozenset(declared_params)
        self.n = n
        self.m = m
        for p in self.params:
            if p in FUNCTIONS or p == "t" or _VAR_RE.match(p):
                raise ParseError(f"parameter name {p!r} shadows a reserved name")

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op: str):
        kind, text, off = self.peek()
        if kind == "OP" and text == op:
            return self.advance()
        raise ParseError(f"syntax error: expected {op!r}", off)

    def parse(self) -> ExprAst:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "EOF":
            raise ParseError(f"syntax error: unexpected {text!r}", off)
        return node

    def expr(self) -> ExprAst:
        node = self.term()
        while True:
            kind, text, off = self.peek()
            if kind == "OP" and text in "+-":
                self.advance()
                rhs = self.term()
                node = Binary(text, node, rhs, (node.span[0], rhs.span[1]))
            else:
                return node

    def term(self) -> ExprAst:
        node = self.factor()
        while True:
            kind, text, off = self.peek()
            if kind == "OP" and text in "*/":
                self.advance()
                rhs = self.factor()
                node = Binary(text, node, rhs, (node.span[0], rhs.span[1]))
            else:
                return node

    def factor(self) -> ExprAst:
        kind, text, off = self.peek()
        if kind == "OP" and text == "-":
            self.advance()
            operand = self.factor()
            return Unary("-", operand, (off, operand.span[1]))
        return self.power()

    def power(self) -> ExprAst:
        base = self.atom()
        kind, text, off = self.peek()
        if kind == "OP" and text == "^":
            self.advance()
            exponent = self.factor()
            return Binary("^", base, exponent, (base.span[0], exponent.span[1]))
        return base

    def atom(self) -> ExprAst:
        kind, text, off = self.advance()
        if kind == "NUM":
            return Const(float(text), (off, off + len(text)))
        if kind == "OP" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "IDENT":
            end = off + len(text.encode("utf-8"))
            nxt_kind, nxt_text, _ = self.peek()
            if text in FUNCTIONS:
                if not (nxt_kind == "OP" and nxt_text == "("):
                    raise ParseError(f"function {text!r} requires an argument list", off)
                self.advance()
                args = [self.expr()]
                while True:
                    k, tx, o = self.peek()
                    if k == "OP" and tx == ",":
                        self.advance()
                        args.append(self.expr())
                    else:
                        break
                close = self.expect_op(")")
                if len(args) != FUNCTIONS[text]:
                    raise ParseError(
                        f"function {text!r} expects {FUNCTIONS[text]} argument(s), got {len(args)}",
                        off)
                return Call(text, tuple(args), (off, close[2] + 1))
            if text == "t":
                return Var("t", (off, end))
            m = _VAR_RE.match(text)
            if m:
                prefix, idx_text = m.groups()
                idx = int(idx_text)
                dim = self.n if prefix == "x" else self.m
                label = "state" if prefix == "x" else "control"
                if idx < 1 or idx > dim:
                    raise ParseError(
                        f"{label} variable index out of range: {text!r} with "
                        f"{'n' if prefix == 'x' else 'm'}={dim}", off)
                return Var(f"{prefix}{idx}", (off, end))
            if text in self.params:
                return Param(text, (off, end))
            raise ParseError(f"undeclared identifier {text!r}", off)
        raise ParseError("syntax error: expected an operand", off)


def parse(source: str, declared_params: Iterable[str] = (), n: int = 0, m: int = 0) -> ExprAst:
    """Parse ``source`` into an AST.

    ``declared_params`` are the allowed parameter names; ``n`` and ``m``
    bound the state/control variable indices (`x1..xn`, `u1..um`).
    Raises ParseError with a byte offset on any syntax or name problem.
    """
    if not isinstance(source, str) or not source.strip():
        raise ParseError("empty expression source", 0)
    return _Parser(source, declared_params, n, m).parse()


# ---------------------------------------------------------------------------
# Evaluation


def _eval_node(node: ExprAst, env: Mapping[str, object]):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, (Var, Param)):
        try:
            return env[node.name]
        except KeyError:
            raise EvalError(f"unbound symbol {node.name!r}", node.span[0]) from None
    if isinstance(node, Unary):
        return -_eval_node(node.operand, env)
    if isinstance(node, Binary):
        left = _eval_node(node.left, env)
        right = _eval_node(node.right, env)
        try:
            if node.op == "+":
                return left + right
            if node.op == "-":
                return left - right
            if node.op == "*":
                return left * right
            if node.op == "/":
                if isinstance(left, Dual) or isinstance(right, Dual):
                    return _as_dual(left) / _as_dual(right)
                if right == 0.0:
                    raise DomainError("division by zero")
                return left / right
            if node.op == "^":
                if isinstance(left, Dual) or isinstance(right, Dual):
                    return _pow(_as_dual(left), _as_dual(right))
                return _float_pow(left, right)
        except DomainError as exc:
            raise DomainError(str(exc).split(" (byte offset")[0], node.span[0]) from None
        raise EvalError(f"unknown operator {node.op!r}", node.span[0])
    if isinstance(node, Call):
        args = [_eval_node(a, env) for a in node.args]
        try:
            if node.func == "pow":
                if isinstance(args[0], Dual) or isinstance(args[1], Dual):
                    return _pow(_as_dual(args[0]), _as_dual(args[1]))
                return _float_pow(args[0], args[1])
            impl = _FUNC_IMPL[node.func]
            out = impl(_as_dual(args[0]))
        except DomainError as exc:
            raise DomainError(str(exc).split(" (byte offset")[0], node.span[0]) from None
        if isinstance(args[0], Dual):
            return out
        return out.value
    raise EvalError(f"unknown AST node {type(node).__name__}")


def eval(ast: ExprAst, bindings: Mapping[str, float]) -> float:  # noqa: A001 - spec name
    """Evaluate the AST at a point given as {name: value}."""
    out = _eval_node(ast, {k: float(v) for k, v in bindings.items()})
    if isinstance(out, Dual):
        return out.value
    return float(out)


evaluate = eval


def grad(ast: ExprAst, bindings: Mapping[str, float], wrt: Sequence[str]):
    """Exact forward-mode gradient with respect to the listed variables.

    One dual pass per requested variable; returns a list of floats in the
    order of ``wrt``.
    """
    point = {k: float(v) for k, v in bindings.items()}
    out = []
    for w in wrt:
        env = {k: Dual(v, 1.0 if k == w else 0.0) for k, v in point.items()}
        res = _eval_node(ast, env)
        out.append(res.deriv if isinstance(res, Dual) else 0.0)
    return out


def variables(ast: ExprAst) -> set:
    """All variable and parameter names appearing in the tree."""
    if isinstance(ast, (Var, Param)):
        return {ast.name}
    if isinstance(ast, Unary):
        return variables(ast.operand)
    if isinstance(ast, Binary):
        return variables(ast.left) | variables(ast.right)
    if isinstance(ast, Call):
        out = set()
        for a in ast.args:
            out |= variables(a)
        return out
    return set()


# ---------------------------------------------------------------------------
# Pretty-printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "unary": 3, "^": 4, "atom": 5}


def _prec(node: ExprAst) -> int:
    if isinstance(node, Binary):
        return _PREC[node.op]
    if isinstance(node, Unary):
        return _PREC["unary"]
    if isinstance(node, Const) and node.value < 0:
        return _PREC["unary"]
    return _PREC["atom"]


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def pretty(ast: ExprAst) -> str:
    """Render the AST back to source; parse(pretty(ast)) == ast (spans aside)."""
    if isinstance(ast, Const):
        s = _fmt_const(ast.value)
        return f"({s})" if ast.value < 0 else s
    if isinstance(ast, (Var, Param)):
        return ast.name
    if isinstance(ast, Unary):
        inner = pretty(ast.operand)
        if _prec(ast.operand) < _PREC["unary"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(ast, Binary):
        p = _PREC[ast.op]
        left = pretty(ast.left)
        right = pretty(ast.right)
        if ast.op == "^":
            # Right-associative: parenthesize left at same level.
            if _prec(ast.left) <= p:
                left = f"({left})"
            if _prec(ast.right) < p:
                right = f"({right})"
            return f"{left}^{right}"
        if _prec(ast.left) < p:
            left = f"({left})"
        if _prec(ast.right) <= p:
            right = f"({right})"
        return f"{left} {ast.op} {right}"
    if isinstance(ast, Call):
        return f"{ast.func}({', '.join(pretty(a) for a in ast.args)})"
    raise EvalError(f"unknown AST node {type(ast).__name__}")
