"""Finite-difference gradients and the Jacobian comparison gate."""

import numpy as np
import pytest

from dmp.numdiff import FdConfig, FdError, JacobianCheck, check_jacobian, fd_grad


def test_quadratic_gradient():
    g = fd_grad(lambda p: float(p @ p), [1.0, -2.0, 3.0])
    assert np.allclose(g, [2.0, -4.0, 6.0], rtol=1e-9, atol=1e-9)


def test_composite_gradient():
    def f(p):
        return float(np.exp(p[0]) * np.log(p[1]))

    p = np.array([0.3, 2.0])
    want = [np.exp(0.3) * np.log(2.0), np.exp(0.3) / 2.0]
    assert np.allclose(fd_grad(f, p), want, rtol=1e-8)


def test_step_scales_with_magnitude():
    # relative step keeps accuracy at large arguments
    g = fd_grad(lambda p: float(p[0] ** 2), [1e6])
    assert g[0] == pytest.approx(2e6, rel=1e-9)


def test_one_sided_fallback_near_lower_bound():
    # centered stencil would cross the open box; the one-sided 3-point
    # formula is exact on quadratics
    calls = []

    def f(p):
        calls.append(float(p[0]))
        return (p[0] - 2.0) ** 2

    lo = 1.0 - 1e-9
    g = fd_grad(f, [1.0], lo=[lo])
    assert g[0] == pytest.approx(-2.0, abs=1e-8)
    assert min(calls) >= lo


def test_one_sided_fallback_near_upper_bound():
    calls = []

    def f(p):
        calls.append(float(p[0]))
        return p[0] ** 3

    hi = 1.0 + 1e-9
    g = fd_grad(f, [1.0], hi=[hi])
    assert g[0] == pytest.approx(3.0, rel=1e-6)
    assert max(calls) <= hi


def test_domain_error_shrinks_step_once():
    calls = []

    def f(p):
        calls.append(float(p[0]))
        if abs(p[0] - 1.0) > 5e-7:
            raise ValueError("narrow domain")
        return (p[0] - 1.0) ** 2

    g = fd_grad(f, [1.0])  # default step 2e-6 fails, the 10x shrink fits
    assert abs(g[0]) < 1e-6
    assert any(abs(c - 1.0) > 5e-7 for c in calls)


def test_unevaluable_raises_fd_error():
    def f(p):
        raise ValueError("nope")

    with pytest.raises(FdError, match="coordinate 0"):
        fd_grad(f, [1.0])


def test_non_finite_counts_as_failure():
    with pytest.raises(FdError):
        fd_grad(lambda p: float("nan"), [0.0])


def test_config_validation():
    with pytest.raises(ValueError):
        FdConfig(step_rel=0.0)
    with pytest.raises(ValueError):
        FdConfig(scheme="forward")


def test_check_jacobian_pass_and_fail():
    ok = check_jacobian([1.0, 2.0], [1.0 + 1e-8, 2.0])
    assert isinstance(ok, JacobianCheck)
    assert ok.passed
    bad = check_jacobian([[1.0, 2.0], [3.0, 4.0]],
                         [[1.0, 2.0], [3.0, 4.1]])
    assert not bad.passed
    assert bad.worst_index == (1, 1)
    assert bad.max_abs_err == pytest.approx(0.1)
    assert bad.max_rel_err == pytest.approx(0.1 / 4.1)


def test_check_jacobian_scale_free_on_zeros():
    assert check_jacobian([0.0], [0.0]).passed
    assert not check_jacobian([0.0], [1e-6]).passed  # above atol


def test_check_jacobian_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        check_jacobian([1.0], [[1.0]])
