"""MPS fixed-format interchange: export, re-import, and solution-file reading.

Variables and rows are renamed X{i}/R{i} in declaration order (classic MPS
name-length limits); the original identifiers are kept in comment lines and
accepted back when reading solution files.  OBJSENSE records the optimization
direction.  Integer variables always carry explicit bound lines so readers do
not fall back to the historical default-to-binary rule.
"""

from __future__ import annotations

import math

from .model import (BINARY, CONTINUOUS, EQ, GE, INTEGER, LE, MilpError, MilpModel,
                    MilpSolution, check_solution)

_SENSE_ROW = {LE: "L", GE: "G", EQ: "E"}
_ROW_SENSE = {"L": LE, "G": GE, "E": EQ}


def _fmt(value: float) -> str:
    return repr(float(value))


def export_text(model: MilpModel) -> str:
    """Render the model as MPS text; round-trips through parse_text."""
    model.validate()
    order = model.var_order
    vname = {v: f"X{i}" for i, v in enumerate(order)}
    rname = {i: f"R{i}" for i in range(len(model.constraints))}

    out: list[str] = []
    out.append(f"* exported MILP: {len(order)} vars, {len(model.constraints)} rows")
    for v in order:
        out.append(f"* VAR {vname[v]} {v}")
    for i, cons in enumerate(model.constraints):
        out.append(f"* ROW {rname[i]} {cons.name}")
    out.append(f"NAME          {model.name}")
    out.append("OBJSENSE")
    out.append(f"    {'MAX' if model.sense == 'max' else 'MIN'}")
    out.append("ROWS")
    out.append(" N  OBJ")
    for i, cons in enumerate(model.constraints):
        out.append(f" {_SENSE_ROW[cons.sense]}  {rname[i]}")

    out.append("COLUMNS")
    in_int = False
    marker_n = 0
    for v in order:
        var = model.variables[v]
        want_int = var.kind in (BINARY, INTEGER)
        if want_int != in_int:
            tag = "'INTORG'" if want_int else "'INTEND'"
            out.append(f"    M{marker_n:<9} 'MARKER'                 {tag}")
            marker_n += 1
            in_int = want_int
        entries: list[tuple[str, float]] = []
        if v in model.objective:
            entries.append(("OBJ", model.objective[v]))
        for i, cons in enumerate(model.constraints):
            if v in cons.coeffs and cons.coeffs[v] != 0.0:
                entries.append((rname[i], cons.coeffs[v]))
        if not entries:
            entries.append(("OBJ", 0.0))
        for k in range(0, len(entries), 2):
            pair = entries[k:k + 2]
            line = f"    {vname[v]:<9}"
            for row, coef in pair:
                line += f" {row:<9} {_fmt(coef):<14}"
            out.append(line.rstrip())
    if in_int:
        out.append(f"    M{marker_n:<9} 'MARKER'                 'INTEND'")

    out.append("RHS")
    for i, cons in enumerate(model.constraints):
        if cons.rhs != 0.0:
            out.append(f"    RHS       {rname[i]:<9} {_fmt(cons.rhs)}")

    out.append("BOUNDS")
    for v in order:
        var = model.variables[v]
        nm = vname[v]
        if var.kind == BINARY:
            out.append(f" BV BND       {nm}")
        elif var.kind == INTEGER:
            if math.isfinite(var.upper):
                out.append(f" UI BND       {nm:<9} {_fmt(var.upper)}")
            else:
                out.append(f" PL BND       {nm}")
        elif math.isfinite(var.upper):
            out.append(f" UP BND       {nm:<9} {_fmt(var.upper)}")
    out.append("ENDATA")
    return "\n".join(out) + "\n"


def parse_text(text: str) -> MilpModel:
    """Parse free/fixed MPS produced by export_text (or compatible tools)."""
    model = MilpModel()
    section = None
    obj_row: str | None = None
    row_sense: dict[str, str] = {}
    cols: dict[str, dict[str, float]] = {}
    col_kind: dict[str, str] = {}
    col_order: list[str] = []
    rhs: dict[str, float] = {}
    bounds: list[tuple[str, str, float | None]] = []
    in_int = False
    expect_objsense = False

    for raw in text.splitlines():
        if not raw.strip() or raw.lstrip().startswith("*"):
            continue
        head = raw[:1] != " "
        tok = raw.split()
        if head:
            kw = tok[0].upper()
            if kw == "NAME":
                model.name = tok[1] if len(tok) > 1 else "model"
                section = None
            elif kw in ("ROWS", "COLUMNS", "RHS", "BOUNDS", "RANGES", "OBJSENSE"):
                section = kw
                expect_objsense = kw == "OBJSENSE"
                if len(tok) > 1 and expect_objsense:
                    model.sense = tok[1].lower()[:3]
                if kw == "RANGES":
                    raise MilpError("RANGES section is not supported")
            elif kw == "ENDATA":
                break
            else:
                raise MilpError(f"unknown MPS section {kw!r}")
            continue
        if expect_objsense and section == "OBJSENSE":
            model.sense = "max" if tok[0].upper().startswith("MAX") else "min"
            continue
        if section == "ROWS":
            kind, name = tok[0].upper(), tok[1]
            if kind == "N":
                if obj_row is None:
                    obj_row = name
            else:
                row_sense[name] = _ROW_SENSE[kind]
            continue
        if section == "COLUMNS":
            if len(tok) >= 3 and tok[1].strip("'").upper() == "MARKER":
                tag = tok[-1].strip("'").upper()
                in_int = tag == "INTORG"
                continue
            col = tok[0]
            if col not in cols:
                cols[col] = {}
                col_order.append(col)
                col_kind[col] = INTEGER if in_int else CONTINUOUS
            for k in range(1, len(tok) - 1, 2):
                cols[col][tok[k]] = cols[col].get(tok[k], 0.0) + float(tok[k + 1])
            continue
        if section == "RHS":
            for k in range(1, len(tok) - 1, 2):
                rhs[tok[k]] = float(tok[k + 1])
            continue
        if section == "BOUNDS":
            btype = tok[0].upper()
            col = tok[2]
            val = float(tok[3]) if len(tok) > 3 else None
            bounds.append((btype, col, val))
            continue

    ubs: dict[str, float | None] = {}
    for btype, col, val in bounds:
        if col not in col_kind:
            raise MilpError(f"bound on undeclared column {col!r}")
        if btype == "BV":
            col_kind[col] = BINARY
        elif btype in ("UP", "UI"):
            ubs[col] = val
            if btype == "UI":
                col_kind[col] = INTEGER
        elif btype == "PL":
            ubs[col] = None
        elif btype in ("LO", "LI"):
            if val not in (0, 0.0):
                raise MilpError("only zero lower bounds are supported")
        elif btype == "FX":
            ubs[col] = val  # with lb 0 this only pins ub; good enough for ub=0
        else:
            raise MilpError(f"unsupported bound type {btype!r}")

    for col in col_order:
        kind = col_kind[col]
        ub = ubs.get(col)
        model.add_var(col, kind, None if kind == BINARY else ub)

    row_names = [n for n in row_sense]
    for rname_ in row_names:
        coeffs = {}
        for col in col_order:
            if rname_ in cols[col]:
                coeffs[col] = cols[col][rname_]
        model.add_constraint(rname_, coeffs, row_sense[rname_], rhs.get(rname_, 0.0))

    objective = {}
    if obj_row is not None:
        for col in col_order:
            if obj_row in cols[col] and cols[col][obj_row] != 0.0:
                objective[col] = cols[col][obj_row]
    model.set_objective(objective, model.sense if model.sense in ("min", "max") else "min")
    model.validate()
    return model


def export_name_map(model: MilpModel) -> dict[str, str]:
    """Exported MPS name -> original variable id."""
    return {f"X{i}": v for i, v in enumerate(model.var_order)}


def read_solution_text(model: MilpModel, text: str) -> MilpSolution:
    """Read an external solver's solution file: one "var value" pair per line.

    Accepts either original variable ids or the exported X{i} names; missing
    variables default to 0.
    """
    names = export_name_map(model)
    assignment = {v: 0.0 for v in model.var_order}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", "*")):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MilpError(f"solution line {ln}: expected 'var value'")
        name, sval = parts
        vid = name if name in assignment else names.get(name)
        if vid is None:
            raise MilpError(f"solution line {ln}: unknown variable {name!r}")
        assignment[vid] = float(sval)
    bad = check_solution(model, assignment)
    if bad:
        raise MilpError(f"external solution violates the model: {bad[:3]}")
    return MilpSolution("optimal", assignment, model.objective_value(assignment))
