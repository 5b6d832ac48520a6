"""Armijo backtracking on a gradient (or surrogate-gradient) step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ARMIJO_C1 = 1e-4
ARMIJO_MAX_HALVINGS = 30


@dataclass
class LineSearchResult:
    x: np.ndarray
    accepted: bool
    step_size: float      # step actually taken (0.0 when rejected)
    f_new: float
    f_old: float
    decrement: float      # c1 * eta * ||g||^2 threshold of the accepted step
    n_evals: int


def armijo_backtrack(f, x, g, eta0, f0=None, c1=ARMIJO_C1, max_halvings=ARMIJO_MAX_HALVINGS):
    """Backtracking search along -g enforcing f(x - eta g) <= f(x) - c1 eta ||g||^2.

    The direction may be a surrogate gradient; the sufficient-decrease test is
    always on the true objective ``f``. On exhaustion the point is left
    unchanged (``accepted=False``); the caller decides how to record that.
    """
    if f0 is None:
        f0 = f(x)
        n_evals = 1
    else:
        n_evals = 0
    gsq = float(g @ g)
    if gsq == 0.0:
        return LineSearchResult(x, True, 0.0, f0, f0, 0.0, n_evals)
    eta = eta0
    for _ in range(max_halvings + 1):
        u = x - eta * g
        fu = f(u)
        n_evals += 1
        if fu <= f0 - c1 * eta * gsq:
            return LineSearchResult(u, True, eta, fu, f0, c1 * eta * gsq, n_evals)
        eta *= 0.5
    return LineSearchResult(x, False, 0.0, f0, f0, 0.0, n_evals)
