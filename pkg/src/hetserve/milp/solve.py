"""Exact MILP solving: built-in branch-and-bound plus a brute-force oracle.

The branch-and-bound uses the dense-simplex LP relaxation for desk-scale
models; models beyond the built-in size envelope are handed to HiGHS via
scipy (same contract, deterministic, still in-process).
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np

from .model import (BINARY, CONTINUOUS, EQ, GE, INT_TOL, INTEGER, LE, MilpError,
                    MilpModel, MilpSolution, UnboundedError, check_solution)
from .simplex import LP_INFEASIBLE, LP_OPTIMAL, LP_UNBOUNDED, solve_lp

# envelope for the built-in branch-and-bound; larger models go to HiGHS
BUILTIN_MAX_INT_VARS = 40
BUILTIN_MAX_VARS = 400
BUILTIN_MAX_ROWS = 800

MIP_GAP_ABS = 1e-6
IMPROVE_EPS = 1e-9


def solve_exact(model: MilpModel, time_budget_s: float = 60.0,
                engine: str = "auto") -> MilpSolution:
    """Prove optimality (or return the best incumbent on budget exhaustion).

    Deterministic given the model's variable ordering.  Raises
    UnboundedError on an unbounded objective.
    """
    model.validate()
    if not model.drop_empty_constraints():
        return MilpSolution("infeasible")
    if not model.variables:
        return MilpSolution("optimal", {}, 0.0)
    if engine == "auto":
        small = (len(model.int_var_ids()) <= BUILTIN_MAX_INT_VARS
                 and len(model.variables) <= BUILTIN_MAX_VARS
                 and len(model.constraints) <= BUILTIN_MAX_ROWS)
        engine = "builtin" if small else "highs"
    if engine == "highs":
        sol = _solve_highs(model, time_budget_s)
    elif engine == "builtin":
        sol = _solve_branch_bound(model, time_budget_s)
    else:
        raise MilpError(f"unknown engine {engine!r}")
    if sol.status == "optimal":
        bad = check_solution(model, sol.assignment)
        if bad:
            raise MilpError(f"solver returned an infeasible 'optimal' point: {bad[:3]}")
    return sol


def _snap_ints(model: MilpModel, assignment: dict[str, float]) -> dict[str, float]:
    out = {}
    for vid, var in model.variables.items():
        x = assignment.get(vid, 0.0)
        if var.kind in (BINARY, INTEGER):
            x = float(round(x))
        out[vid] = x
    return out


def _solve_branch_bound(model: MilpModel, time_budget_s: float) -> MilpSolution:
    deadline = time.monotonic() + time_budget_s
    sgn = 1.0 if model.sense == "min" else -1.0
    int_ids = model.int_var_ids()

    status, root_x, root_obj = solve_lp(model)
    if status == LP_UNBOUNDED:
        raise UnboundedError("objective is unbounded over the LP relaxation")
    if status == LP_INFEASIBLE:
        return MilpSolution("infeasible")

    best_obj = math.inf  # in min space
    best_assignment: dict[str, float] | None = None
    stack: list[tuple[dict[str, float], dict[str, float]]] = [({}, {})]
    exhausted = False

    while stack:
        if time.monotonic() > deadline:
            exhausted = True
            break
        lo, hi = stack.pop()
        status, x, obj = solve_lp(model, lo, hi)
        if status == LP_INFEASIBLE:
            continue
        if status == LP_UNBOUNDED:
            raise UnboundedError("objective is unbounded over the LP relaxation")
        bound = sgn * obj
        if best_assignment is not None and bound >= best_obj - MIP_GAP_ABS:
            continue
        frac_vid = None
        frac_dist = -1.0
        for vid in int_ids:
            v = x[vid]
            frac = abs(v - round(v))
            if frac > INT_TOL:
                dist = 0.5 - abs(v - math.floor(v) - 0.5)  # closeness to 0.5
                if dist > frac_dist + 1e-12:
                    frac_dist = dist
                    frac_vid = vid
        if frac_vid is None:
            cand = _snap_ints(model, x)
            if check_solution(model, cand):
                cand = dict(x)
            cand_obj = sgn * model.objective_value(cand)
            if cand_obj < best_obj - IMPROVE_EPS:
                best_obj = cand_obj
                best_assignment = cand
            continue
        v = x[frac_vid]
        ceil_lo = dict(lo)
        ceil_lo[frac_vid] = max(lo.get(frac_vid, 0.0), math.ceil(v))
        floor_hi = dict(hi)
        floor_hi[frac_vid] = min(hi.get(frac_vid, math.inf), math.floor(v))
        stack.append((ceil_lo, hi))    # explored second
        stack.append((lo, floor_hi))   # explored first

    if best_assignment is None:
        return MilpSolution("budget_exhausted" if exhausted else "infeasible")
    status = "budget_exhausted" if exhausted else "optimal"
    return MilpSolution(status, best_assignment,
                        model.objective_value(best_assignment))


def _solve_highs(model: MilpModel, time_budget_s: float) -> MilpSolution:
    from scipy import optimize, sparse

    order = model.var_order
    idx = {v: i for i, v in enumerate(order)}
    n = len(order)
    c = np.zeros(n)
    for v, coef in model.objective.items():
        c[idx[v]] = coef
    if model.sense == "max":
        c = -c
    integrality = np.zeros(n)
    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    for i, v in enumerate(order):
        var = model.variables[v]
        if var.kind in (BINARY, INTEGER):
            integrality[i] = 1
        ub[i] = var.upper

    constraints = []
    if model.constraints:
        data, rows_i, cols_i = [], [], []
        clo = np.zeros(len(model.constraints))
        chi = np.zeros(len(model.constraints))
        for r, cons in enumerate(model.constraints):
            for v, coef in cons.coeffs.items():
                rows_i.append(r)
                cols_i.append(idx[v])
                data.append(coef)
            if cons.sense == LE:
                clo[r], chi[r] = -np.inf, cons.rhs
            elif cons.sense == GE:
                clo[r], chi[r] = cons.rhs, np.inf
            else:
                clo[r] = chi[r] = cons.rhs
        A = sparse.csr_matrix((data, (rows_i, cols_i)),
                              shape=(len(model.constraints), n))
        constraints = optimize.LinearConstraint(A, clo, chi)

    res = optimize.milp(c, constraints=constraints,
                        integrality=integrality,
                        bounds=optimize.Bounds(lb, ub),
                        options={"time_limit": time_budget_s, "mip_rel_gap": 0.0})
    if res.status == 3:
        raise UnboundedError("objective is unbounded")
    if res.status == 2:
        return MilpSolution("infeasible")
    if res.status == 4:
        raise MilpError(f"external MILP engine failed: {res.message}")
    if res.x is None:
        return MilpSolution("budget_exhausted" if res.status == 1 else "infeasible")
    assignment = _snap_ints(model, {v: float(res.x[idx[v]]) for v in order})
    if check_solution(model, assignment):
        assignment = {v: float(res.x[idx[v]]) for v in order}
    status = "optimal" if res.status == 0 else "budget_exhausted"
    return MilpSolution(status, assignment, model.objective_value(assignment))


def solve_bruteforce(model: MilpModel, domain_cap: int = 10_000_000) -> MilpSolution:
    """Exhaustive enumeration over integer assignments (test oracle).

    Continuous variables must not share a constraint with another continuous
    variable; each is resolved to the bound its objective coefficient prefers.
    """
    model.validate()
    if not model.drop_empty_constraints():
        return MilpSolution("infeasible")
    int_ids = model.int_var_ids()
    cont_ids = [v for v, var in model.variables.items() if var.kind == CONTINUOUS]

    domains = []
    space = 1
    for vid in int_ids:
        up = model.variables[vid].upper
        if not math.isfinite(up):
            raise MilpError(f"brute force requires a finite bound on {vid}")
        domains.append(range(int(math.floor(up)) + 1))
        space *= len(domains[-1])
        if space > domain_cap:
            raise MilpError(f"search space exceeds {domain_cap} points, refusing")

    cont_rows: dict[str, list] = {v: [] for v in cont_ids}
    pure_rows = []
    for cons in model.constraints:
        involved = [v for v in cons.coeffs if model.variables[v].kind == CONTINUOUS
                    and cons.coeffs[v] != 0.0]
        if len(involved) > 1:
            raise MilpError("cannot resolve coupled continuous variables by enumeration")
        if involved:
            cont_rows[involved[0]].append(cons)
        else:
            pure_rows.append(cons)

    sgn = 1.0 if model.sense == "min" else -1.0
    best_obj = math.inf
    best: dict[str, float] | None = None

    for combo in itertools.product(*domains) if int_ids else [()]:
        point = {vid: float(val) for vid, val in zip(int_ids, combo)}
        ok = True
        for cons in pure_rows:
            lhs = sum(c * point.get(v, 0.0) for v, c in cons.coeffs.items())
            if ((cons.sense == LE and lhs > cons.rhs + 1e-9)
                    or (cons.sense == GE and lhs < cons.rhs - 1e-9)
                    or (cons.sense == EQ and abs(lhs - cons.rhs) > 1e-9)):
                ok = False
                break
        if not ok:
            continue
        for cv in cont_ids:
            lo, hi = 0.0, model.variables[cv].upper
            for cons in cont_rows[cv]:
                a = cons.coeffs[cv]
                r = cons.rhs - sum(c * point.get(v, 0.0)
                                   for v, c in cons.coeffs.items() if v != cv)
                sense = cons.sense
                if a < 0:
                    sense = LE if sense == GE else (GE if sense == LE else EQ)
                if sense == LE:
                    hi = min(hi, r / a)
                elif sense == GE:
                    lo = max(lo, r / a)
                else:
                    lo = max(lo, r / a)
                    hi = min(hi, r / a)
            if lo > hi + 1e-9:
                ok = False
                break
            coef = model.objective.get(cv, 0.0)
            prefer_low = (sgn * coef) >= 0
            val = lo if prefer_low else hi
            if not math.isfinite(val):
                raise UnboundedError(f"continuous variable {cv} is unbounded")
            point[cv] = val
        if not ok:
            continue
        obj = sgn * model.objective_value(point)
        if obj < best_obj - IMPROVE_EPS:
            best_obj = obj
            best = point

    if best is None:
        return MilpSolution("infeasible")
    return MilpSolution("optimal", best, model.objective_value(best))
