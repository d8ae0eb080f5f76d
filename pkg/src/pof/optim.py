"""Limited-memory BFGS minimizer with a strong-Wolfe line search.

The objective callback returns (value, gradient) and may return +inf (with
an arbitrary gradient, which is ignored) at infeasible points; the line
search treats +inf as "too far" and backtracks, so barrier-style
constraints need no special handling. Accepted iterates are monotone:
every accepted step satisfies the Armijo condition, so the sequence of
accepted objective values never increases.

Curvature pairs with s'y <= 1e-10 ||s|| ||y|| are discarded, which keeps
the implicit inverse-Hessian estimate positive definite. On a line-search
failure the optimizer retries once from a steepest-descent direction with
cleared history before giving up and returning the best iterate found.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError, ValidationError

__all__ = ["LbfgsConfig", "OptimResult", "minimize"]

_CURVATURE_SKIP = 1e-10


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 500
    grad_tol: float = 1e-5          # infinity norm of the gradient
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search: int = 40       # objective evaluations per line search

    def __post_init__(self):
        if self.memory < 1:
            raise ValidationError("memory must be >= 1")
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise ValidationError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.max_iters < 1 or self.max_line_search < 1:
            raise ValidationError("max_iters and max_line_search must be >= 1")


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iters: int
    status: str                      # "converged" | "max_iters" | "line_search_failed"
    f_trace: list[float] = field(default_factory=list)


def _two_loop_direction(grad: np.ndarray, pairs) -> np.ndarray:
    """L-BFGS two-loop recursion; returns -H_k * grad.

    H_k implicitly applies the stored (s, y) updates to the scaled identity
    (s'y / y'y) I built from the most recent pair.
    """
    if not pairs:
        return -grad
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _cubic_trial(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi):
    """Minimizer of the cubic through (a_lo, f_lo, g_lo), (a_hi, f_hi, g_hi).

    Falls back to a quadratic fit when the high-side derivative is unusable
    and to bisection when values are not finite. Returns a point strictly
    inside the bracket.
    """
    lo, hi = (a_lo, a_hi) if a_lo < a_hi else (a_hi, a_lo)
    width = hi - lo
    mid = 0.5 * (lo + hi)
    if not (math.isfinite(f_hi) and width > 0.0):
        return mid
    trial = None
    if math.isfinite(g_hi):
        d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
        disc = d1 * d1 - g_lo * g_hi
        if disc >= 0.0:
            d2 = math.copysign(math.sqrt(disc), a_hi - a_lo)
            denom = g_hi - g_lo + 2.0 * d2
            if denom != 0.0:
                trial = a_hi - (a_hi - a_lo) * (g_hi + d2 - d1) / denom
    if trial is None:
        denom = 2.0 * (f_hi - f_lo - g_lo * (a_hi - a_lo))
        if denom != 0.0:
            trial = a_lo - g_lo * (a_hi - a_lo) ** 2 / denom
    if trial is None or not math.isfinite(trial):
        return mid
    return min(max(trial, lo + 0.1 * width), hi - 0.1 * width)


class _LineSearch:
    """Strong-Wolfe search along x + a d (Armijo + curvature |phi'| bound)."""

    def __init__(self, fg: Callable, x, f0, g0, d, cfg: LbfgsConfig):
        self.fg = fg
        self.x = x
        self.d = d
        self.f0 = f0
        with np.errstate(over="ignore"):
            self.dphi0 = float(g0 @ d)
        self.c1 = cfg.wolfe_c1
        self.c2 = cfg.wolfe_c2
        self.budget = cfg.max_line_search
        self.evals = 0
        self.best = None  # best Armijo point: (a, f, g_vec)

    def _phi(self, a: float):
        f, g = self.fg(self.x + a * self.d)
        self.evals += 1
        f = float(f)
        if math.isfinite(f):
            with np.errstate(over="ignore"):
                dphi = float(g @ self.d)
        else:
            f, dphi, g = math.inf, math.nan, None
        if self._armijo(a, f) and (self.best is None or f < self.best[1]):
            self.best = (a, f, g)
        return f, dphi, g

    def _armijo(self, a: float, f: float) -> bool:
        return f <= self.f0 + self.c1 * a * self.dphi0

    def _curvature(self, dphi: float) -> bool:
        return abs(dphi) <= self.c2 * abs(self.dphi0)

    def run(self, a_init: float):
        """Return (a, f, g) for an accepted step, or None."""
        if self.dphi0 >= 0.0:
            return None
        a_prev, f_prev, dphi_prev = 0.0, self.f0, self.dphi0
        a = a_init
        first = True
        while self.evals < self.budget:
            f, dphi, g = self._phi(a)
            if not self._armijo(a, f) or (not first and f >= f_prev):
                return self._zoom(a_prev, f_prev, dphi_prev, a, f, dphi)
            if self._curvature(dphi):
                return a, f, g
            if dphi >= 0.0:
                return self._zoom(a, f, dphi, a_prev, f_prev, dphi_prev)
            a_prev, f_prev, dphi_prev = a, f, dphi
            a *= 2.0
            first = False
        return self.best

    def _zoom(self, a_lo, f_lo, dphi_lo, a_hi, f_hi, dphi_hi):
        # Invariant: a_lo satisfies Armijo with known derivative; the
        # minimizer is bracketed between a_lo and a_hi (in either order).
        while self.evals < self.budget:
            if abs(a_hi - a_lo) <= 1e-14 * max(1.0, abs(a_lo)):
                break
            a = _cubic_trial(a_lo, f_lo, dphi_lo, a_hi, f_hi, dphi_hi)
            f, dphi, g = self._phi(a)
            if not self._armijo(a, f) or f >= f_lo:
                a_hi, f_hi, dphi_hi = a, f, dphi
                continue
            if self._curvature(dphi):
                return a, f, g
            if dphi * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi, dphi_hi = a_lo, f_lo, dphi_lo
            a_lo, f_lo, dphi_lo = a, f, dphi
        return self.best


def minimize(f_and_grad: Callable, x0, cfg: LbfgsConfig = LbfgsConfig()) -> OptimResult:
    """Minimize f via L-BFGS from a feasible x0.

    f_and_grad(x) -> (value, gradient); +inf marks infeasible points and is
    only ever rejected by line-search backtracking. Raises NumericalError
    when f(x0) is not finite.
    """
    x = np.array(x0, dtype=float)
    f, g = f_and_grad(x)
    f = float(f)
    if not math.isfinite(f):
        raise NumericalError("starting point is infeasible (objective not finite)")
    g = np.asarray(g, dtype=float)

    pairs: deque = deque(maxlen=cfg.memory)
    trace = [f]
    iters = 0
    status = "max_iters"

    while True:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= cfg.grad_tol:
            status = "converged"
            break
        if iters >= cfg.max_iters:
            status = "max_iters"
            break

        d = _two_loop_direction(g, pairs)
        with np.errstate(over="ignore"):
            descent = float(d @ g) if np.all(np.isfinite(d)) else math.inf
        if descent >= 0.0:
            pairs.clear()
            d = -g
        a0 = 1.0 if pairs else min(1.0, 1.0 / max(float(np.sum(np.abs(g))), 1e-12))

        step = _LineSearch(f_and_grad, x, f, g, d, cfg).run(a0)
        if step is None and pairs:
            # one retry along steepest descent with cleared history
            pairs.clear()
            d = -g
            a0 = min(1.0, 1.0 / max(float(np.sum(np.abs(g))), 1e-12))
            step = _LineSearch(f_and_grad, x, f, g, d, cfg).run(a0)
        if step is None:
            status = "line_search_failed"
            break

        a, f_new, g_new = step
        x_new = x + a * d
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > _CURVATURE_SKIP * float(np.linalg.norm(s) * np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, float(f_new), np.asarray(g_new, dtype=float)
        trace.append(f)
        iters += 1

    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return OptimResult(x=x, f=f, grad_norm=gnorm, iters=iters, status=status, f_trace=trace)
