"""Finite-difference oracle for analytic derivatives.

Central differences with a relative step, a single 10x step shrink on
domain errors, and a one-sided fallback near open-box boundaries (the
stencil must stay strictly inside the box, so the step is capped at half
the interiority margin).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class FdConfig:
    step_rel: float = 1e-6
    scheme: str = "central"

    def __post_init__(self):
        if self.step_rel <= 0:
            raise ValueError("step_rel must be positive")
        if self.scheme != "central":
            raise ValueError("only the central scheme is supported")


class FdError(Exception):
    """Function not evaluable on any admissible stencil."""


def _try_eval(func, p):
    try:
        v = float(func(p))
    except (ArithmeticError, ValueError) as exc:
        return None, exc
    if not np.isfinite(v):
        return None, ValueError("non-finite value")
    return v, None


def _central(func, p, i, h):
    hi_p = np.array(p, dtype=float)
    lo_p = np.array(p, dtype=float)
    hi_p[i] += h
    lo_p[i] -= h
    fp, e1 = _try_eval(func, hi_p)
    fm, e2 = _try_eval(func, lo_p)
    if e1 is not None or e2 is not None:
        return None
    return (fp - fm) / (2.0 * h)


def _one_sided(func, p, i, h, sign):
    p0 = np.array(p, dtype=float)
    p1 = np.array(p, dtype=float)
    p2 = np.array(p, dtype=float)
    p1[i] += sign * h
    p2[i] += sign * 2.0 * h
    f0, e0 = _try_eval(func, p0)
    f1, e1 = _try_eval(func, p1)
    f2, e2 = _try_eval(func, p2)
    if e0 is not None or e1 is not None or e2 is not None:
        return None
    # Second-order one-sided difference.
    return sign * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)


def fd_grad(func: Callable[[np.ndarray], float],
            point: Sequence[float],
            cfg: Optional[FdConfig] = None,
            lo: Optional[Sequence[float]] = None,
            hi: Optional[Sequence[float]] = None) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Per coordinate the step is h = step_rel * (1 + |p_i|).  If open-box
    bounds are supplied and the centered stencil would leave them, a
    one-sided stencil is used with h capped at half the margin to the
    boundary.  A domain error on the stencil shrinks h once by 10x; a
    second failure raises FdError.
    """
    cfg = cfg or FdConfig()
    p = np.asarray(point, dtype=float).ravel()
    lo_b = None if lo is None else np.asarray(lo, dtype=float).ravel()
    hi_b = None if hi is None else np.asarray(hi, dtype=float).ravel()
    out = np.empty(p.size)
    for i in range(p.size):
        h = cfg.step_rel * (1.0 + abs(p[i]))
        room_dn = np.inf if lo_b is None else p[i] - lo_b[i]
        room_up = np.inf if hi_b is None else hi_b[i] - p[i]
        val = None
        for attempt_h in (h, h / 10.0):
            if room_dn >= attempt_h and room_up >= attempt_h:
                val = _central(func, p, i, attempt_h)
            elif room_up > room_dn:
                step = min(attempt_h, room_up / 2.0)
                val = _one_sided(func, p, i, step, +1.0) if step > 0 else None
            else:
                step = min(attempt_h, room_dn / 2.0)
                val = _one_sided(func, p, i, step, -1.0) if step > 0 else None
            if val is not None:
                break
        if val is None:
            raise FdError(f"function not evaluable on the stencil at coordinate {i}")
        out[i] = val
    return out


class JacobianCheck(NamedTuple):
    max_abs_err: float
    max_rel_err: float
    worst_index: tuple
    passed: bool


def check_jacobian(analytic, numeric, rtol: float = 1e-6, atol: float = 1e-9) -> JacobianCheck:
    """Entrywise comparison: PASS iff |a-n| <= atol + rtol*max(|a|,|n|)."""
    a = np.atleast_1d(np.asarray(analytic, dtype=float))
    n = np.atleast_1d(np.asarray(numeric, dtype=float))
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {n.shape}")
    abs_err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    slack = abs_err - (atol + rtol * scale)
    worst_flat = int(np.argmax(slack))
    worst = np.unravel_index(worst_flat, a.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, abs_err / scale, 0.0)
    passed = bool(np.all(slack <= 0.0))
    return JacobianCheck(float(abs_err.max(initial=0.0)),
                         float(rel.max(initial=0.0)),
                         worst, passed)
