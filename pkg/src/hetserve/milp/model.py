"""Solver-agnostic MILP representation and an independent solution checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

BINARY = "binary"
INTEGER = "integer"      # integer >= 0
CONTINUOUS = "continuous"  # continuous >= 0

VAR_KINDS = (BINARY, INTEGER, CONTINUOUS)

LE, EQ, GE = "<=", "=", ">="

FEAS_TOL = 1e-6
INT_TOL = 1e-6


class MilpError(ValueError):
    pass


class UnboundedError(MilpError):
    """The objective is unbounded over the feasible region."""


@dataclass(frozen=True)
class MilpVar:
    vid: str
    kind: str
    ub: float | None = None  # optional upper bound; lower bound is always 0

    def __post_init__(self):
        if self.kind not in VAR_KINDS:
            raise MilpError(f"unknown variable kind {self.kind!r}")
        if self.ub is not None and (not math.isfinite(self.ub) or self.ub < 0):
            raise MilpError(f"invalid upper bound for {self.vid}")

    @property
    def upper(self) -> float:
        if self.kind == BINARY:
            return 1.0 if self.ub is None else min(1.0, self.ub)
        return math.inf if self.ub is None else self.ub


@dataclass
class Constraint:
    name: str
    coeffs: dict[str, float]
    sense: str
    rhs: float


@dataclass
class MilpModel:
    name: str = "model"
    variables: dict[str, MilpVar] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    objective: dict[str, float] = field(default_factory=dict)
    sense: str = "min"

    def add_var(self, vid: str, kind: str = CONTINUOUS, ub: float | None = None) -> str:
        if vid in self.variables:
            raise MilpError(f"duplicate variable {vid!r}")
        self.variables[vid] = MilpVar(vid, kind, ub)
        return vid

    def add_constraint(self, name: str, coeffs: dict[str, float], sense: str,
                       rhs: float) -> None:
        if sense not in (LE, EQ, GE):
            raise MilpError(f"bad sense {sense!r}")
        self.constraints.append(Constraint(name, dict(coeffs), sense, rhs))

    def set_objective(self, coeffs: dict[str, float], sense: str = "min") -> None:
        if sense not in ("min", "max"):
            raise MilpError(f"bad objective sense {sense!r}")
        self.objective = dict(coeffs)
        self.sense = sense

    @property
    def var_order(self) -> list[str]:
        return list(self.variables)

    def int_var_ids(self) -> list[str]:
        return [v.vid for v in self.variables.values() if v.kind in (BINARY, INTEGER)]

    def validate(self) -> None:
        for cons in self.constraints:
            for vid, coef in cons.coeffs.items():
                if vid not in self.variables:
                    raise MilpError(f"constraint {cons.name!r} references unknown var {vid!r}")
                if not math.isfinite(coef):
                    raise MilpError(f"non-finite coefficient in {cons.name!r}")
            if not math.isfinite(cons.rhs):
                raise MilpError(f"non-finite rhs in {cons.name!r}")
        for vid, coef in self.objective.items():
            if vid not in self.variables:
                raise MilpError(f"objective references unknown var {vid!r}")
            if not math.isfinite(coef):
                raise MilpError("non-finite objective coefficient")

    def drop_empty_constraints(self) -> bool:
        """Remove zero-coefficient rows; False if one of them is unsatisfiable."""
        kept = []
        satisfiable = True
        for cons in self.constraints:
            nz = {v: c for v, c in cons.coeffs.items() if c != 0.0}
            if not nz:
                ok = ((cons.sense == LE and cons.rhs >= -FEAS_TOL)
                      or (cons.sense == GE and cons.rhs <= FEAS_TOL)
                      or (cons.sense == EQ and abs(cons.rhs) <= FEAS_TOL))
                satisfiable = satisfiable and ok
                continue
            kept.append(Constraint(cons.name, nz, cons.sense, cons.rhs))
        self.constraints = kept
        return satisfiable

    def objective_value(self, assignment: dict[str, float]) -> float:
        return sum(c * assignment.get(v, 0.0) for v, c in self.objective.items())


@dataclass
class MilpSolution:
    status: str  # optimal | infeasible | budget_exhausted
    assignment: dict[str, float] = field(default_factory=dict)
    objective: float = math.nan

    def value(self, vid: str) -> float:
        return self.assignment.get(vid, 0.0)

    def int_value(self, vid: str) -> int:
        return int(round(self.assignment.get(vid, 0.0)))


def check_solution(model: MilpModel, assignment: dict[str, float],
                   tol: float = FEAS_TOL) -> list[str]:
    """Independent feasibility audit; returns human-readable violations."""
    bad: list[str] = []
    for var in model.variables.values():
        x = assignment.get(var.vid, 0.0)
        if x < -tol:
            bad.append(f"{var.vid} < 0 ({x})")
        if x > var.upper + tol:
            bad.append(f"{var.vid} > ub {var.upper} ({x})")
        if var.kind in (BINARY, INTEGER) and abs(x - round(x)) > INT_TOL:
            bad.append(f"{var.vid} not integral ({x})")
    for cons in model.constraints:
        lhs = sum(c * assignment.get(v, 0.0) for v, c in cons.coeffs.items())
        scale = max(1.0, abs(cons.rhs))
        if cons.sense == LE and lhs > cons.rhs + tol * scale:
            bad.append(f"{cons.name}: {lhs} > {cons.rhs}")
        elif cons.sense == GE and lhs < cons.rhs - tol * scale:
            bad.append(f"{cons.name}: {lhs} < {cons.rhs}")
        elif cons.sense == EQ and abs(lhs - cons.rhs) > tol * scale:
            bad.append(f"{cons.name}: {lhs} != {cons.rhs}")
    return bad
