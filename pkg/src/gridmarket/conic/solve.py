"""Continuous conic solves via an interior-point backend.

Canonicalizes a ConicProgram to the standard form

    min  q'x   s.t.  Ax + s = b,  s in K

(equalities, nonnegative slacks for inequality rows and variable bounds,
second-order cone blocks; rotated cones are mapped to plain cones by an
orthogonal transform, and diagonal quadratic objective terms are lifted to
one epigraph rotated cone), then delegates to Clarabel.

Duals are reported per constraint tag with the sensitivity convention:
the dual of a row equals d(objective)/d(rhs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

import clarabel

from .program import (INF, ITERATION_LIMIT, INFEASIBLE, OPTIMAL, UNBOUNDED,
                      Affine, ConicProgram, ProgramError, Solution)

_SQ2 = math.sqrt(2.0)

_EPI_VAR = "_epi:quad"  # reserved epigraph variable name


def rsoc_to_soc(entries: Sequence[Affine]) -> List[Affine]:
    """Map a rotated cone (2 e0 e1 >= ||e2..||^2) to a plain second-order
    cone via the orthogonal change ((e0+e1)/sqrt2, (e0-e1)/sqrt2, e2..)."""
    u, v, rest = entries[0], entries[1], entries[2:]
    plus = Affine({}, (u.const + v.const) / _SQ2)
    minus = Affine({}, (u.const - v.const) / _SQ2)
    for name, c in u.coeffs.items():
        plus.coeffs[name] = plus.coeffs.get(name, 0.0) + c / _SQ2
        minus.coeffs[name] = minus.coeffs.get(name, 0.0) + c / _SQ2
    for name, c in v.coeffs.items():
        plus.coeffs[name] = plus.coeffs.get(name, 0.0) + c / _SQ2
        minus.coeffs[name] = minus.coeffs.get(name, 0.0) - c / _SQ2
    return [plus, minus] + list(rest)


@dataclass
class Canonical:
    """Standard-form data plus the bookkeeping to map duals back."""

    var_names: List[str]
    var_index: Dict[str, int]
    q: np.ndarray
    A: sparse.csc_matrix
    b: np.ndarray
    cones: list                       # clarabel cone objects
    row_kind: List[Tuple]             # per canonical row: ('eq'|'le'|'ge', tag)
                                      # | ('ub'|'lb', var) | ('cone', tag, j)
    n_eq: int
    n_in: int
    obj_const: float


def _bounds_after(program: ConicProgram,
                  overrides: Optional[Mapping[str, Tuple[float, float]]]):
    """Effective (lb, ub) per variable after intersecting overrides."""
    out = {}
    for name, v in program.variables.items():
        lb, ub = v.lb, v.ub
        if overrides and name in overrides:
            olb, oub = overrides[name]
            lb, ub = max(lb, olb), min(ub, oub)
        out[name] = (lb, ub)
    return out


def canonicalize(program: ConicProgram,
                 overrides: Optional[Mapping[str, Tuple[float, float]]] = None
                 ) -> Canonical:
    if _EPI_VAR in program.variables:
        raise ProgramError(f"variable name {_EPI_VAR!r} is reserved")

    bounds = _bounds_after(program, overrides)
    var_names = list(program.variables)
    has_quad = any(c > 0 for c in program.obj_quad.values())
    if has_quad:
        var_names = var_names + [_EPI_VAR]
    var_index = {n: i for i, n in enumerate(var_names)}
    n = len(var_names)

    q = np.zeros(n)
    for v, c in program.obj_linear.items():
        q[var_index[v]] += c
    if has_quad:
        q[var_index[_EPI_VAR]] = 1.0

    rows_i: List[int] = []
    cols_i: List[int] = []
    vals: List[float] = []
    b: List[float] = []
    row_kind: List[Tuple] = []

    def emit(coeffs: Mapping[str, float], rhs: float, kind: Tuple):
        r = len(b)
        for v, c in coeffs.items():
            if c != 0.0:
                rows_i.append(r)
                cols_i.append(var_index[v])
                vals.append(c)
        b.append(rhs)
        row_kind.append(kind)

    # equality block
    for row in program.rows:
        if row.sense == "eq":
            emit(row.coeffs, row.rhs, ("eq", row.tag))
    n_eq = len(b)

    # inequality block: a.x <= b canonical; 'ge' rows are flipped
    for row in program.rows:
        if row.sense == "le":
            emit(row.coeffs, row.rhs, ("le", row.tag))
        elif row.sense == "ge":
            emit({v: -c for v, c in row.coeffs.items()}, -row.rhs,
                 ("ge", row.tag))
    for name in var_names:
        if name == _EPI_VAR:
            continue
        lb, ub = bounds[name]
        if ub < INF:
            emit({name: 1.0}, ub, ("ub", name))
        if lb > -INF:
            emit({name: -1.0}, -lb, ("lb", name))
    n_in = len(b) - n_eq

    # cone blocks: rows are -F, rhs g so that s = Fx + g in K
    cone_objs = []
    cone_sizes: List[int] = []

    def emit_soc(entries: Sequence[Affine], tag: str):
        for j, a in enumerate(entries):
            emit({v: -c for v, c in a.coeffs.items()}, a.const,
                 ("cone", tag, j))
        cone_objs.append(clarabel.SecondOrderConeT(len(entries)))
        cone_sizes.append(len(entries))

    for cone in program.cones:
        if cone.kind == "soc":
            emit_soc(cone.entries, cone.tag)
        else:
            emit_soc(rsoc_to_soc(cone.entries), cone.tag)

    # epigraph rotated cone:  2 * epi * 0.5 >= sum_i q_i x_i^2
    if has_quad:
        entries = [Affine({_EPI_VAR: 1.0}, 0.0), Affine({}, 0.5)]
        for v, c in program.obj_quad.items():
            if c > 0:
                entries.append(Affine({v: math.sqrt(c)}, 0.0))
        emit_soc(rsoc_to_soc(entries), "_epi:quad:cone")

    if not b:
        # a fully unconstrained program confuses the backend; give it one
        # vacuous slack row (0'x <= 1) so it reports a meaningful status
        b.append(1.0)
        row_kind.append(("pad",))
        n_in = 1
    m = len(b)
    A = sparse.csc_matrix((vals, (rows_i, cols_i)), shape=(m, n))
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_in:
        cones.append(clarabel.NonnegativeConeT(n_in))
    cones.extend(cone_objs)

    return Canonical(var_names, var_index, q, A, np.array(b), cones,
                     row_kind, n_eq, n_in, program.obj_const)


_STATUS_MAP = {
    "Solved": OPTIMAL,
    "AlmostSolved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED,
    "AlmostDualInfeasible": UNBOUNDED,
}


def _settings(feas_tol: float, gap_tol: float, max_iter: int,
              verbose: bool) -> "clarabel.DefaultSettings":
    st = clarabel.DefaultSettings()
    st.verbose = verbose
    st.tol_feas = feas_tol
    st.tol_gap_rel = gap_tol
    st.tol_gap_abs = gap_tol * 1e-2
    st.max_iter = max_iter
    st.max_threads = 1  # determinism
    return st


def solve_canonical(program: ConicProgram, canon: Canonical,
                    feas_tol: float = 1e-7, gap_tol: float = 1e-6,
                    max_iter: int = 200, verbose: bool = False) -> Solution:
    P = sparse.csc_matrix((len(canon.var_names), len(canon.var_names)))
    solver = clarabel.DefaultSolver(P, canon.q, canon.A, canon.b, canon.cones,
                                    _settings(feas_tol, gap_tol, max_iter,
                                              verbose))
    raw = solver.solve()
    status = _STATUS_MAP.get(str(raw.status), ITERATION_LIMIT)

    meta: Dict[str, object] = {
        "backend_status": str(raw.status),
        "iterations": int(raw.iterations),
        "solve_time": float(raw.solve_time),
    }
    if status != OPTIMAL:
        return Solution(status=status, meta=meta)

    x = np.asarray(raw.x)
    z = np.asarray(raw.z)
    primal = {name: float(x[i]) for name, i in canon.var_index.items()
              if name != _EPI_VAR}

    duals: Dict[str, float] = {}
    for r, kind in enumerate(canon.row_kind):
        k = kind[0]
        if k in ("eq", "le"):
            duals[kind[1]] = -float(z[r])
        elif k == "ge":
            duals[kind[1]] = float(z[r])

    objective = program.objective_value(primal)
    # stationarity residual q + A'z at the returned point (epigraph included)
    stat = canon.q + canon.A.T.dot(z)
    meta["stat_residual"] = float(np.max(np.abs(stat))) if stat.size else 0.0
    meta["dual_objective"] = -float(canon.b @ z) + canon.obj_const
    meta["z_raw"] = z
    meta["primal_residual"] = float(raw.r_prim)
    meta["dual_residual"] = float(raw.r_dual)
    return Solution(status=status, primal=primal, duals=duals,
                    objective=objective, meta=meta)


def solve_relaxation(program: ConicProgram,
                     overrides: Optional[Mapping[str, Tuple[float, float]]] = None,
                     **opts) -> Solution:
    """Solve with binary flags ignored (their [0,1] box stays in force)."""
    bounds = _bounds_after(program, overrides)
    for name, (lb, ub) in bounds.items():
        if lb > ub + 1e-12:
            return Solution(status=INFEASIBLE,
                            meta={"reason": f"empty bounds on {name}"})
    canon = canonicalize(program, overrides)
    return solve_canonical(program, canon, **opts)


def solve_socp(program: ConicProgram,
               fixed_binaries: Optional[Mapping[str, int]] = None,
               **opts) -> Solution:
    """Continuous conic solve; every binary must be pinned.

    Binaries may be pinned either by equal bounds in the program or through
    `fixed_binaries`.  Returns an optimal primal/dual pair (relative duality
    gap <= 1e-6) or a non-optimal status.
    """
    overrides: Dict[str, Tuple[float, float]] = {}
    if fixed_binaries:
        for name, val in fixed_binaries.items():
            if name not in program.variables:
                raise ProgramError(f"fixed binary {name!r} not in program")
            val = float(round(val))
            overrides[name] = (val, val)
    for name in program.binaries():
        v = program.variables[name]
        if name not in overrides and v.lb != v.ub:
            raise ProgramError(
                f"free binary {name!r}: fix it or use the integer engines")
    return solve_relaxation(program, overrides, **opts)
