"""Shared test utilities: a domain-safe random expression generator.

The generator builds expressions whose every subterm stays strictly
inside its function's domain on the sampled region, so a central
finite-difference stencil is always admissible and comparisons against
the analytic gradients are meaningful at tight tolerances.
"""

import numpy as np

from dmp import exprlang

PARAM_NAMES = ("a", "b")


def _positive_expr(rng, names, depth):
    """An expression guaranteed positive and bounded away from 0 on [0.3, 2.5]."""
    if depth <= 0 or rng.random() < 0.3:
        if rng.random() < 0.7:
            return rng.choice(names)
        return f"{rng.uniform(0.3, 2.5):.3f}"
    op = rng.choice(["+", "*", "/", "sqrt", "powc"])
    lhs = _positive_expr(rng, names, depth - 1)
    rhs = _positive_expr(rng, names, depth - 1)
    if op == "sqrt":
        return f"sqrt({lhs})"
    if op == "powc":
        c = rng.choice(["0.5", "1.5", "2", "-1"])
        return f"pow({lhs}, {c})"
    return f"({lhs} {op} {rhs})"


def _general_expr(rng, names, depth):
    if depth <= 0:
        return _positive_expr(rng, names, 0)
    op = rng.choice(["+", "-", "*", "neg", "ln", "exp", "pos", "pow"])
    if op == "pos":
        return _positive_expr(rng, names, depth)
    if op == "ln":
        return f"ln({_positive_expr(rng, names, depth - 1)})"
    if op == "exp":
        # keep the argument small so conditioning stays benign
        return f"exp(0.5 * {rng.choice(names)})"
    if op == "neg":
        return f"-({_general_expr(rng, names, depth - 1)})"
    if op == "pow":
        return f"{rng.choice(names)}^{rng.choice(['2', '3'])}"
    lhs = _general_expr(rng, names, depth - 1)
    rhs = _general_expr(rng, names, depth - 1)
    return f"({lhs} {op} {rhs})"


def random_expression_pairs(count=100, seed=12345, n=2, m=2):
    """Deterministic (source, ast, bindings, wrt) tuples for gradient checks.

    Rejection only screens for evaluability and scale (never for
    analytic/numeric agreement): the value must be finite and the
    gradient bounded, so a finite-difference comparison is well posed.
    """
    rng = np.random.default_rng(seed)
    names = [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
    wrt = list(names)
    out = []
    while len(out) < count:
        source = _general_expr(rng, names, depth=int(rng.integers(1, 4)))
        bindings = {name: float(rng.uniform(0.4, 1.8)) for name in names}
        for p in PARAM_NAMES:
            bindings[p] = float(rng.uniform(0.5, 1.6))
        try:
            ast = exprlang.parse(source, declared_params=PARAM_NAMES, n=n, m=m)
            value = exprlang.eval(ast, bindings)
            grads = exprlang.grad(ast, bindings, wrt)
        except exprlang.ExprError:
            continue
        if not np.isfinite(value) or abs(value) > 1e6:
            continue
        if not all(np.isfinite(g) and abs(g) <= 1e4 for g in grads):
            continue
        out.append((source, ast, bindings, wrt))
    return out


def grad_disagreements(pairs, rtol=1e-6):
    """Count expression/point pairs where exprlang and numdiff disagree."""
    from dmp.numdiff import check_jacobian, fd_grad

    failures = []
    for source, ast, bindings, wrt in pairs:
        analytic = exprlang.grad(ast, bindings, wrt)
        point = np.array([bindings[w] for w in wrt])

        def func(p, ast=ast, bindings=bindings, wrt=wrt):
            env = dict(bindings)
            env.update({w: float(v) for w, v in zip(wrt, p)})
            return exprlang.eval(ast, env)

        numeric = fd_grad(func, point)
        chk = check_jacobian(analytic, numeric, rtol=rtol)
        if not chk.passed:
            failures.append((source, chk))
    return failures
