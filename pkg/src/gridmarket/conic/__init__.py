"""Conic modeling and solving: shared program container, continuous SOCP
solves with tagged duals, branch and bound for the mixed-binary case, an
explicit dual constructor, and a text dump format for desk instances."""

from .program import (INF, INFEASIBLE, ITERATION_LIMIT, OPTIMAL, UNBOUNDED,
                      Affine, Cone, ConicProgram, LinearRow, ProgramError,
                      Solution, Variable, extract_duals)
from .solve import solve_relaxation, solve_socp
from .bnb import solve_misocp_bnb
from .dual import DualInfo, build_dual_program
from .textio import dump_program, load_program, parse_program, save_program

__all__ = [
    "INF", "OPTIMAL", "INFEASIBLE", "UNBOUNDED", "ITERATION_LIMIT",
    "Affine", "Cone", "ConicProgram", "LinearRow", "ProgramError",
    "Solution", "Variable", "extract_duals",
    "solve_socp", "solve_relaxation", "solve_misocp_bnb",
    "DualInfo", "build_dual_program",
    "dump_program", "parse_program", "save_program", "load_program",
]
