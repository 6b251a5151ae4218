"""Registry of exact solutions used by the experiments.

Smooth and singular entries are written symbolically; ``f``, the gradient and
the time derivative are obtained with sympy and compiled to numpy callables.
The incompatible-data entry is a Fourier series evaluated with compensated
summation.
"""
from __future__ import annotations

import re

import numpy as np
import sympy as sy

from .analysis import ExactSolution
from .element import PhysicalCoefficients

SERIES_TERMS = 250  # the series is truncated after the term with index 250


def _lambdify(expr, symbols):
    fn = sy.lambdify(symbols, expr, "numpy")

    def call(*args):
        out = np.asarray(fn(*args), dtype=float)
        return np.broadcast_to(out, np.broadcast(*args).shape).astype(float)

    return call


def symbolic_solution(name: str, u_expr, dim: int, coeffs: PhysicalCoefficients, tag: str = "smooth") -> ExactSolution:
    """Build an :class:`ExactSolution` from a sympy expression in ``x0..x{d-1}, t``."""
    xs = sy.symbols(f"x0:{dim}", real=True)
    t = sy.Symbol("t", real=True)
    u_expr = u_expr(*xs, t) if callable(u_expr) else u_expr
    dt_expr = sy.diff(u_expr, t)
    grads = [sy.diff(u_expr, x) for x in xs]
    f_expr = sy.simplify(coeffs.c_H * dt_expr - coeffs.nu * sum(sy.diff(g, x) for g, x in zip(grads, xs)))
    args = (*xs, t)
    u_fn, dt_fn, f_fn = (_lambdify(e, args) for e in (u_expr, dt_expr, f_expr))
    g_fns = [_lambdify(e, args) for e in grads]
    u0_fn = _lambdify(u_expr.subs(t, 0), xs)

    def cols(P):
        P = np.asarray(P, dtype=float)
        return [P[:, i] for i in range(P.shape[1])]

    return ExactSolution(
        name=name, dim=dim,
        u=lambda P: u_fn(*cols(P)),
        grad=lambda P: np.stack([g(*cols(P)) for g in g_fns], axis=-1),
        f=lambda P: f_fn(*cols(P)),
        u0=lambda X: u0_fn(*cols(X)),
        g=lambda P: u_fn(*cols(P)),
        dt=lambda P: dt_fn(*cols(P)),
        tag=tag,
    )


def patch_expr(p: int):
    """Degree-p polynomial with a nontrivial time dependence."""
    def expr(x, t):
        if p % 2 == 0:
            return t ** (p // 2) * x ** (p // 2)
        return t ** ((p - 1) // 2) * x ** ((p + 1) // 2) + t ** ((p + 1) // 2) * x ** ((p - 1) // 2)
    return expr


def kahan_sum(terms):
    """Compensated sum of an iterable of equally shaped arrays."""
    total = comp = None
    for term in terms:
        term = np.asarray(term, dtype=float)
        if total is None:
            total, comp = term.copy(), np.zeros_like(term)
            continue
        y = term - comp
        s = total + y
        comp = (s - total) - y
        total = s
    return total


def incompatible_solution(coeffs: PhysicalCoefficients, terms: int = SERIES_TERMS) -> ExactSolution:
    """Heat flow from ``u0 = 1`` with ``g = 0`` and ``f = 0`` on the unit interval."""
    k = 2 * np.arange(terms + 1) + 1
    rate = coeffs.nu / coeffs.c_H * (k * np.pi) ** 2

    def parts(P):
        P = np.asarray(P, dtype=float)
        return P[:, 0], P[:, 1]

    def u(P):
        x, t = parts(P)
        return kahan_sum(4.0 / (kk * np.pi) * np.sin(kk * np.pi * x) * np.exp(-r * t) for kk, r in zip(k, rate))

    def grad(P):
        x, t = parts(P)
        return kahan_sum(4.0 * np.cos(kk * np.pi * x) * np.exp(-r * t) for kk, r in zip(k, rate))[:, None]

    def dt(P):
        x, t = parts(P)
        return kahan_sum(-r * 4.0 / (kk * np.pi) * np.sin(kk * np.pi * x) * np.exp(-r * t) for kk, r in zip(k, rate))

    return ExactSolution(
        name="incompatible", dim=1, u=u, grad=grad, dt=dt,
        f=lambda P: np.zeros(len(P)), u0=lambda X: np.ones(len(X)), g=lambda P: np.zeros(len(P)),
        tag="series",
    )


PROBLEM_NAMES = ("patch-<p>", "smooth-1d", "singular-<alpha>", "incompatible", "smooth-2d")


def get_problem(name: str, coeffs: PhysicalCoefficients | None = None, p: int | None = None,
                alpha: float | None = None) -> ExactSolution:
    """Look up a registry entry.

    ``patch`` takes the degree from ``patch-3`` style names or ``p``;
    ``singular`` takes the exponent from ``singular-0.75`` style names or ``alpha``.
    """
    coeffs = coeffs or PhysicalCoefficients()
    m = re.fullmatch(r"(patch|singular)(?:-([0-9.]+))?", name)
    if m:
        kind, arg = m.groups()
        if kind == "patch":
            deg = int(arg) if arg else p
            if deg is None or deg < 1:
                raise KeyError(f"patch problem needs a degree >= 1 (got {deg})")
            return symbolic_solution(f"patch-{deg}", patch_expr(deg), 1, coeffs)
        a = float(arg) if arg else alpha
        if a is None or not a > -0.5:
            raise KeyError(f"singular problem needs alpha > -1/2 (got {a})")
        a_sym = sy.nsimplify(a)
        return symbolic_solution(
            f"singular-{a:g}", lambda x, t: t**a_sym * sy.sin(sy.pi * x), 1, coeffs, tag="singular"
        )
    if name == "smooth-1d":
        return symbolic_solution(name, lambda x, t: sy.sin(t) * sy.sin(3 * sy.pi * x), 1, coeffs)
    if name == "smooth-2d":
        return symbolic_solution(
            name, lambda x, y, t: sy.exp(-t) * sy.sin(sy.pi * x) * sy.sin(sy.pi * y), 2, coeffs
        )
    if name == "incompatible":
        return incompatible_solution(coeffs)
    raise KeyError(f"unknown problem {name!r}; known: {', '.join(PROBLEM_NAMES)}")


def finite_difference_residual(sol: ExactSolution, points, coeffs: PhysicalCoefficients, step: float = 1e-4):
    """``c_H u_t - nu Lap u - f`` at ``points`` with central differences (an independent check of f)."""
    P = np.asarray(points, dtype=float)
    d = sol.dim
    e = np.eye(d + 1) * step
    ut = (sol.u(P + e[d]) - sol.u(P - e[d])) / (2 * step)
    lap = sum((sol.u(P + e[i]) - 2 * sol.u(P) + sol.u(P - e[i])) / step**2 for i in range(d))
    return coeffs.c_H * ut - coeffs.nu * lap - sol.f(P)

