"""Two-phase dense simplex over MilpModel LP relaxations.

Bland's rule throughout (anti-cycling).  Variable upper bounds and branching
bounds become explicit rows, which keeps the tableau logic simple; the built-in
solver only sees desk-scale models, so dense is acceptable.
"""

from __future__ import annotations

import math

import numpy as np

from ..kernels import simplex_core
from .model import EQ, GE, LE, MilpModel

LP_OPTIMAL = "optimal"
LP_INFEASIBLE = "infeasible"
LP_UNBOUNDED = "unbounded"

_TOL = 1e-7


def solve_lp(model: MilpModel, extra_lo: dict[str, float] | None = None,
             extra_hi: dict[str, float] | None = None):
    """Solve the LP relaxation with optional per-variable bound overrides.

    Returns (status, assignment, objective) with the model's own sense.
    """
    extra_lo = extra_lo or {}
    extra_hi = extra_hi or {}
    order = model.var_order
    idx = {v: i for i, v in enumerate(order)}
    n = len(order)

    rows: list[tuple[np.ndarray, str, float]] = []

    def add_row(coeffs: dict[str, float], sense: str, rhs: float) -> None:
        a = np.zeros(n)
        for v, c in coeffs.items():
            a[idx[v]] = c
        rows.append((a, sense, rhs))

    for cons in model.constraints:
        add_row(cons.coeffs, cons.sense, cons.rhs)

    lo = np.zeros(n)
    hi = np.full(n, math.inf)
    for i, v in enumerate(order):
        var = model.variables[v]
        hi[i] = var.upper
    for v, b in extra_lo.items():
        lo[idx[v]] = max(lo[idx[v]], b)
    for v, b in extra_hi.items():
        hi[idx[v]] = min(hi[idx[v]], b)
    for i in range(n):
        if lo[i] > hi[i] + 1e-12:
            return LP_INFEASIBLE, {}, math.nan
        if hi[i] < math.inf:
            e = np.zeros(n)
            e[i] = 1.0
            rows.append((e, LE, hi[i]))
        if lo[i] > 0:
            e = np.zeros(n)
            e[i] = 1.0
            rows.append((e, GE, lo[i]))

    c = np.zeros(n)
    for v, coef in model.objective.items():
        c[idx[v]] = coef
    if model.sense == "max":
        c = -c

    status, x, _ = _simplex_standard(rows, c, n)
    if status != LP_OPTIMAL:
        return status, {}, math.nan
    assignment = {v: float(x[i]) for i, v in enumerate(order)}
    return LP_OPTIMAL, assignment, model.objective_value(assignment)


def _simplex_standard(rows, c, n):
    """Two-phase simplex: rows are (coeffs, sense, rhs) over n structural vars."""
    m = len(rows)
    if m == 0:
        # minimize c*x with x >= 0 only: finite iff c >= 0
        if np.any(c < -1e-12):
            return LP_UNBOUNDED, None, math.nan
        return LP_OPTIMAL, np.zeros(n), 0.0

    n_slack = sum(1 for _, s, _ in rows if s != EQ)
    ncols = n + n_slack
    A = np.zeros((m, ncols))
    b = np.zeros(m)
    art_rows: list[int] = []
    slack_col = n
    slack_of_row = np.full(m, -1, dtype=np.int64)
    for i, (a, sense, rhs) in enumerate(rows):
        a = a.copy()
        if rhs < 0:  # normalize to b >= 0
            a = -a
            rhs = -rhs
            sense = LE if sense == GE else (GE if sense == LE else EQ)
        A[i, :n] = a
        b[i] = rhs
        if sense == LE:
            A[i, slack_col] = 1.0
            slack_of_row[i] = slack_col
            slack_col += 1
        elif sense == GE:
            A[i, slack_col] = -1.0
            slack_col += 1
            art_rows.append(i)
        else:
            art_rows.append(i)

    n_art = len(art_rows)
    total = ncols + n_art
    T = np.zeros((m + 1, total + 1))
    T[:m, :ncols] = A
    T[:m, total] = b
    basis = np.zeros(m, dtype=np.int64)
    for i in range(m):
        basis[i] = slack_of_row[i]
    for k, i in enumerate(art_rows):
        col = ncols + k
        T[i, col] = 1.0
        basis[i] = col

    # phase 1: minimize artificial sum
    if n_art:
        T[m, ncols:total] = 1.0
        for i in art_rows:
            T[m, :] -= T[i, :]
        rc = simplex_core(T, basis)
        if rc != 0:  # phase-1 objective is bounded below by 0
            raise RuntimeError(f"phase-1 simplex failure (rc={rc})")
        if -T[m, total] > _TOL * (1.0 + abs(b).max()):
            return LP_INFEASIBLE, None, math.nan
        # pivot artificials out of the basis where possible
        for i in range(m):
            if basis[i] >= ncols:
                piv = -1
                for jcol in range(ncols):
                    if abs(T[i, jcol]) > 1e-8:
                        piv = jcol
                        break
                if piv >= 0:
                    T[i, :] /= T[i, piv]
                    fac = T[:, piv].copy()
                    fac[i] = 0.0
                    T -= np.outer(fac, T[i, :])
                    basis[i] = piv
        # freeze any artificial still basic (degenerate zero row)
        T[:, ncols:total] = 0.0
        for i in range(m):
            if basis[i] >= ncols:
                T[i, basis[i]] = 1.0

    # phase 2
    T[m, :] = 0.0
    T[m, :n] = c
    for i in range(m):
        if basis[i] < total and abs(T[m, basis[i]]) > 0:
            T[m, :] -= T[m, basis[i]] * T[i, :]
    rc = simplex_core(T, basis)
    if rc == 1:
        return LP_UNBOUNDED, None, math.nan
    if rc == 2:
        raise RuntimeError("simplex iteration cap exceeded")

    x = np.zeros(total)
    for i in range(m):
        x[basis[i]] = T[i, total]
    return LP_OPTIMAL, x[:n], float(c @ x[:n])
