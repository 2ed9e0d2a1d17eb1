from .model import (BINARY, CONTINUOUS, EQ, GE, INTEGER, LE, Constraint, MilpError,
                    MilpModel, MilpSolution, MilpVar, UnboundedError, check_solution)
from .mps import export_text, parse_text, read_solution_text
from .solve import solve_bruteforce, solve_exact

__all__ = [
    "BINARY", "CONTINUOUS", "INTEGER", "LE", "EQ", "GE",
    "Constraint", "MilpError", "MilpModel", "MilpSolution", "MilpVar",
    "UnboundedError", "check_solution",
    "export_text", "parse_text", "read_solution_text",
    "solve_bruteforce", "solve_exact",
]
