"""Expression language: grammar, evaluation, forward-mode gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmp import exprlang
from dmp.exprlang import (DomainError, EvalError, FUNCTIONS, ParseError,
                          eval as ev, grad, parse, pretty, variables)
from helpers import grad_disagreements, random_expression_pairs


# ---------------------------------------------------------------------------
# grammar

def test_number_literals():
    for src, want in (("2", 2.0), ("2.5", 2.5), (".5", 0.5),
                      ("1e3", 1000.0), ("2.5e-2", 0.025)):
        assert ev(parse(src), {}) == want


def test_precedence_and_associativity():
    assert ev(parse("2 + 3 * 4"), {}) == 14.0
    assert ev(parse("(2 + 3) * 4"), {}) == 20.0
    assert ev(parse("8 / 4 / 2"), {}) == 1.0          # left assoc
    assert ev(parse("2 ^ 3 ^ 2"), {}) == 512.0        # right assoc
    assert ev(parse("-2^2"), {}) == -4.0              # ^ binds tighter than unary
    assert ev(parse("2 - -3"), {}) == 5.0


def test_variables_and_params():
    ast = parse("x1 * u2 + c", declared_params=("c",), n=1, m=2)
    assert ev(ast, {"x1": 3.0, "u2": 4.0, "c": 0.5}) == 12.5
    assert variables(ast) == {"x1", "u2", "c"}


def test_function_registry_and_calls():
    assert FUNCTIONS == {"ln": 1, "exp": 1, "sqrt": 1, "pow": 2}
    assert ev(parse("ln(exp(2))"), {}) == pytest.approx(2.0, abs=1e-15)
    assert ev(parse("sqrt(9)"), {}) == 3.0
    assert ev(parse("pow(2, 10)"), {}) == 1024.0


def test_parse_error_reports_byte_offset():
    with pytest.raises(ParseError) as exc:
        parse("1 + $")
    assert exc.value.offset == 4
    assert "byte offset 4" in str(exc.value)


def test_byte_offset_counts_utf8_bytes():
    # a two-byte character before the bad token shifts the offset by 2
    with pytest.raises(ParseError) as exc:
        parse("1 + é")
    assert exc.value.offset == 4


def test_undeclared_identifier_rejected():
    with pytest.raises(ParseError, match="undeclared"):
        parse("gamma * 2")


def test_variable_index_out_of_range():
    with pytest.raises(ParseError, match="out of range"):
        parse("x3 + 1", n=2, m=1)
    with pytest.raises(ParseError, match="out of range"):
        parse("u1", n=2, m=0)


def test_arity_mismatch_rejected():
    with pytest.raises(ParseError):
        parse("ln(1, 2)")
    with pytest.raises(ParseError):
        parse("pow(2)")


def test_unknown_function_rejected():
    with pytest.raises(ParseError):
        parse("log(2)")


def test_unbalanced_and_trailing_tokens():
    with pytest.raises(ParseError):
        parse("(1 + 2")
    with pytest.raises(ParseError):
        parse("1 + 2 )")
    with pytest.raises(ParseError):
        parse("")


# ---------------------------------------------------------------------------
# evaluation

def test_unbound_symbol_is_eval_error():
    ast = parse("x1 + 1", n=1)
    with pytest.raises(EvalError, match="unbound"):
        ev(ast, {})


def test_domain_errors_are_value_errors():
    # numeric callers catch ValueError without importing exprlang
    for src in ("ln(-1)", "sqrt(-4)", "1/0", "(-2)^0.5", "0^-1"):
        with pytest.raises(ValueError):
            ev(parse(src), {})
        with pytest.raises(DomainError):
            ev(parse(src), {})


def test_integer_exponent_of_negative_base():
    assert ev(parse("(-2)^2"), {}) == 4.0
    assert ev(parse("(-2)^3"), {}) == -8.0


def test_pretty_round_trip():
    for src in ("1 + 2*x1", "-(x1 - u1)^2", "pow(x1, 1.5) / ln(u1 + 2)",
                "exp(0.5*x1) * sqrt(u1)"):
        ast = parse(src, n=1, m=1)
        again = parse(pretty(ast), n=1, m=1)
        pt = {"x1": 1.3, "u1": 0.7}
        assert ev(again, pt) == pytest.approx(ev(ast, pt), rel=1e-15)


# ---------------------------------------------------------------------------
# gradients

def test_polynomial_gradient_exact():
    ast = parse("x1^3 + 2*x1*u1", n=1, m=1)
    g = grad(ast, {"x1": 2.0, "u1": 5.0}, ["x1", "u1"])
    assert g == [3 * 4.0 + 10.0, 4.0]


def test_chain_rule_through_functions():
    ast = parse("ln(x1^2 + 1)", n=1)
    (g,) = grad(ast, {"x1": 1.5}, ["x1"])
    assert g == pytest.approx(2 * 1.5 / (1.5**2 + 1), rel=1e-15)


def test_pow_gradient_in_both_arguments():
    ast = parse("pow(x1, u1)", n=1, m=1)
    x, u = 1.7, 2.3
    gx, gu = grad(ast, {"x1": x, "u1": u}, ["x1", "u1"])
    assert gx == pytest.approx(u * x ** (u - 1), rel=1e-14)
    assert gu == pytest.approx(x**u * math.log(x), rel=1e-14)


def test_gradient_of_absent_variable_is_zero():
    ast = parse("u1 * 2", m=1)
    assert grad(ast, {"u1": 1.0, "x1": 5.0}, ["x1"]) == [0.0]


def test_division_quotient_rule():
    ast = parse("x1 / u1", n=1, m=1)
    gx, gu = grad(ast, {"x1": 3.0, "u1": 2.0}, ["x1", "u1"])
    assert gx == 0.5
    assert gu == pytest.approx(-3.0 / 4.0, rel=1e-15)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), x=st.floats(0.1, 2.0))
def test_linear_expression_matches_closed_form(a, b, x):
    ast = parse("a + b * x1", declared_params=("a", "b"), n=1)
    binds = {"a": a, "b": b, "x1": x}
    assert ev(ast, binds) == pytest.approx(a + b * x, rel=1e-12, abs=1e-12)
    assert grad(ast, binds, ["x1"])[0] == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_hundred_random_gradients_match_numdiff():
    """Analytic gradients agree with finite differences: zero failures."""
    pairs = random_expression_pairs(count=100, seed=12345)
    failures = grad_disagreements(pairs, rtol=1e-6)
    assert failures == [], f"{len(failures)} disagreement(s), first: {failures[0]}"
