"""Consensus splitting for mixed-binary conic programs.

The binary set {0,1}^n is rewritten as the intersection of the unit box
with the sphere of squared radius n/4 around the all-half point.  Two
consensus copies of the binary block are projected onto those sets, the
conic subproblem keeps the physics exact, and dual ascent with slowly
growing penalties drives every copy together.  A final polishing solve
pins the rounded binaries and re-solves the remaining SOCP exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .conic import (ITERATION_LIMIT, OPTIMAL, ConicProgram, Solution,
                    solve_misocp_bnb, solve_relaxation, solve_socp)

ALPHA = 1.2
I_PE = 5
OMEGA = 1e-3
EPS_RUN = 1e-4
EPS_ENGINE = 1e-8
MAX_ITER = 200
RHO_CAP = 1e6       # keeps the subproblem Hessian away from the feas tol


class LpBoxError(RuntimeError):
    """Iteration failure; carries the last state for inspection."""

    def __init__(self, message: str, state: Optional["LpBoxState"] = None):
        super().__init__(message)
        self.state = state


@dataclass
class LpBoxState:
    """One iterate of the splitting: primal pieces, duals, penalties."""

    names: List[str]              # free binary variables, fixed order
    i: int
    x: Dict[str, float]           # full subproblem primal (incl. z entries)
    z: np.ndarray
    z1: np.ndarray                # box copy
    z2: np.ndarray                # sphere copy
    sig1: np.ndarray
    sig2: np.ndarray
    rho1: float
    rho2: float
    residuals: List[float] = field(default_factory=list)
    trace: List[Dict[str, float]] = field(default_factory=list)


def project_box(v) -> np.ndarray:
    return np.clip(np.asarray(v, dtype=float), 0.0, 1.0)


def project_sphere(v) -> np.ndarray:
    """Nearest point on the sphere of squared radius n/4 about (1/2)1."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    n = v.size
    d = v - 0.5
    nrm = float(np.linalg.norm(d))
    if nrm < 1e-12:
        # the center projects nowhere in particular; pick a fixed direction
        d = np.zeros(n)
        d[0] = 1.0
        nrm = 1.0
    return 0.5 * np.sqrt(n) * d / nrm + 0.5


def _free_binaries(program: ConicProgram) -> List[str]:
    return [n for n in program.binaries()
            if program.variables[n].lb < program.variables[n].ub]


def _penalize(template: ConicProgram, base: ConicProgram,
              state: LpBoxState) -> None:
    """Rewrite the template objective as the penalized subproblem's."""
    lin_c = state.sig1 + state.sig2 - state.rho1 * state.z1 \
        - state.rho2 * state.z2
    quad_c = 0.5 * (state.rho1 + state.rho2)
    const = float(-state.sig1 @ state.z1 - state.sig2 @ state.z2
                  + 0.5 * state.rho1 * state.z1 @ state.z1
                  + 0.5 * state.rho2 * state.z2 @ state.z2)
    for j, name in enumerate(state.names):
        template.obj_linear[name] = base.obj_linear.get(name, 0.0) \
            + float(lin_c[j])
        template.obj_quad[name] = base.obj_quad.get(name, 0.0) + quad_c
    template.obj_const = base.obj_const + const


def solve_penalized_subproblem(base: ConicProgram, state: LpBoxState,
                               template: Optional[ConicProgram] = None,
                               **opts) -> Tuple[Dict[str, float], np.ndarray]:
    """Exact conic solve of the consensus subproblem at the given state.

    Minimizes the base objective plus the dual-weighted and quadratic
    penalty pull toward both consensus copies, over the base feasible set
    with the binary flags relaxed to their boxes.
    """
    if template is None:
        template = copy.deepcopy(base)
    _penalize(template, base, state)
    sub = solve_relaxation(template, **opts)
    if not sub.ok:
        raise LpBoxError(f"penalized subproblem came back {sub.status}",
                         state)
    z = np.array([sub.primal[n] for n in state.names])
    return dict(sub.primal), z


def _lagrangian(base: ConicProgram, state: LpBoxState, x: Mapping[str, float],
                z: np.ndarray) -> float:
    d1, d2 = z - state.z1, z - state.z2
    return (base.objective_value(x) + float(state.sig1 @ d1)
            + float(state.sig2 @ d2)
            + 0.5 * state.rho1 * float(d1 @ d1)
            + 0.5 * state.rho2 * float(d2 @ d2))


def step(state: LpBoxState, base: ConicProgram,
         template: Optional[ConicProgram] = None, alpha: float = ALPHA,
         i_pe: int = I_PE, omega: float = OMEGA, **opts) -> LpBoxState:
    """One full cycle: both projections, subproblem, dual ascent, penalty."""
    z1 = project_box(state.z + state.sig1 / state.rho1)
    z2 = project_sphere(state.z + state.sig2 / state.rho2)
    at = LpBoxState(state.names, state.i, state.x, state.z, z1, z2,
                    state.sig1, state.sig2, state.rho1, state.rho2)
    x, z = solve_penalized_subproblem(base, at, template=template, **opts)
    sig1 = state.sig1 + state.rho1 * (z - z1)
    sig2 = state.sig2 + state.rho2 * (z - z2)
    gap1 = float(np.sum((z - z1) ** 2))
    gap2 = float(np.sum((z - z2) ** 2))
    resid = max(gap1, gap2) / max(float(z @ z), omega)
    lag = _lagrangian(base, at, x, z)
    rho1, rho2 = state.rho1, state.rho2
    if state.i >= i_pe:
        rho1 = min(alpha * rho1, RHO_CAP)
        rho2 = min(alpha * rho2, RHO_CAP)
    row = {"iteration": state.i + 1, "residual": resid, "lagrangian": lag,
           "rho1": state.rho1, "rho2": state.rho2}
    return LpBoxState(state.names, state.i + 1, x, z, z1, z2, sig1, sig2,
                      rho1, rho2, state.residuals + [resid],
                      state.trace + [row])


def run(base: ConicProgram, params: Optional[Mapping[str, float]] = None,
        **opts) -> Solution:
    """Iterate the splitting until the normalized consensus residual is
    below eps or max_iter is hit; returns the relaxed-binary solution with
    convergence metadata (the binaries are near-integral, not pinned)."""
    p = {"alpha": ALPHA, "i_pe": I_PE, "omega": OMEGA, "eps": EPS_RUN,
         "max_iter": MAX_ITER, "rho0": 1.0}
    if params:
        p.update(params)
    names = _free_binaries(base)
    rel = solve_relaxation(base, **opts)
    if not rel.ok or not names:
        rel.meta.update(engine="lpbox", lpbox_iterations=0,
                        lpbox_residual=0.0, binary_error=0.0, trace=[])
        return rel
    z0 = np.array([rel.primal[n] for n in names])
    state = LpBoxState(names, 0, dict(rel.primal), z0, project_box(z0),
                       project_sphere(z0), np.zeros(len(names)),
                       np.zeros(len(names)), p["rho0"], p["rho0"])
    template = copy.deepcopy(base)
    best: Optional[LpBoxState] = None
    abort = ""
    while state.i < p["max_iter"]:
        try:
            state = step(state, base, template=template, alpha=p["alpha"],
                         i_pe=p["i_pe"], omega=p["omega"], **opts)
        except LpBoxError as err:
            # a blown-up subproblem (diverging duals on a consensus
            # direction feasibility forbids) ends the run, not the solve:
            # the caller polishes the best iterate seen so far
            abort = str(err)
            break
        if best is None or state.residuals[-1] < best.residuals[-1]:
            best = state
        if state.residuals[-1] <= p["eps"]:
            break
    if best is None:
        rel.status = ITERATION_LIMIT
        rel.meta.update(engine="lpbox", lpbox_iterations=0,
                        lpbox_residual=float("inf"), binary_error=float(
                            np.max(np.abs(z0 - np.round(z0)))),
                        trace=[], abort=abort)
        return rel
    state = best
    converged = state.residuals[-1] <= p["eps"]
    binerr = float(np.max(np.abs(state.z - np.round(state.z))))
    meta = {"engine": "lpbox", "lpbox_iterations": state.i,
            "lpbox_residual": state.residuals[-1], "binary_error": binerr,
            "rho1": state.rho1, "rho2": state.rho2,
            "trace": list(state.trace), "state": state}
    if abort:
        meta["abort"] = abort
    return Solution(
        status=OPTIMAL if converged else ITERATION_LIMIT,
        primal=dict(state.x), duals={},
        objective=base.objective_value(state.x), meta=meta)


def _pairings(program: ConicProgram) -> List[Tuple[str, str]]:
    """Equality rows coupling exactly two free binaries as a sum to one."""
    free = set(_free_binaries(program))
    out = []
    for row in program.rows:
        if row.sense != "eq" or abs(row.rhs - 1.0) > 1e-12:
            continue
        if len(row.coeffs) != 2:
            continue
        (a, ca), (b, cb) = row.coeffs.items()
        if abs(ca - 1.0) < 1e-12 and abs(cb - 1.0) < 1e-12 \
                and a in free and b in free:
            out.append((a, b))
    return out


def round_and_polish(base: ConicProgram, relaxed: Solution,
                     **opts) -> Solution:
    """Fix the binaries at their rounded values and re-solve exactly.

    Paired binaries (sum-to-one rows) are rounded jointly, the larger one
    up.  If the rounded assignment turns out infeasible, fall back to the
    exact search seeded with it.
    """
    assign: Dict[str, int] = {}
    for name in base.binaries():
        v = base.variables[name]
        if v.lb >= v.ub:
            assign[name] = int(round(v.lb))
    for a, b in _pairings(base):
        if a in assign or b in assign:
            continue
        if relaxed.primal.get(a, 0.0) >= relaxed.primal.get(b, 0.0):
            assign[a], assign[b] = 1, 0
        else:
            assign[a], assign[b] = 0, 1
    for name in base.binaries():
        if name not in assign:
            assign[name] = int(relaxed.primal.get(name, 0.0) >= 0.5)
    sol = solve_socp(base, fixed_binaries=assign, **opts)
    if sol.ok:
        sol.meta["engine"] = "lpbox+polish"
    else:
        sol = solve_misocp_bnb(base, seed_assignment=assign, **opts)
        sol.meta["engine"] = "lpbox+polish+bnb"
    for key in ("lpbox_iterations", "lpbox_residual", "binary_error",
                "trace"):
        if key in relaxed.meta:
            sol.meta[key] = relaxed.meta[key]
    return sol


def solve_misocp_lpbox(program: ConicProgram, alpha: float = ALPHA,
                       i_pe: int = I_PE, omega: float = OMEGA,
                       eps: float = EPS_ENGINE, max_iter: int = MAX_ITER,
                       rho0: float = 1.0, **opts) -> Solution:
    """Full engine entry: splitting run, then round and polish.

    The run itself uses a much tighter eps than the standalone default so
    the polish starts from a near-integral point; subproblem solves get
    tightened tolerances to keep solver noise below that eps.
    """
    opts.setdefault("feas_tol", 1e-9)
    opts.setdefault("gap_tol", 1e-9)
    rel = run(program, params={"alpha": alpha, "i_pe": i_pe, "omega": omega,
                               "eps": eps, "max_iter": max_iter,
                               "rho0": rho0}, **opts)
    if not rel.ok and rel.status != ITERATION_LIMIT:
        return rel
    if not _free_binaries(program):
        return rel
    return round_and_polish(program, rel, **opts)


def trace_csv(trace: List[Mapping[str, float]]) -> str:
    """Render a convergence trace as CSV text."""
    lines = ["iteration,residual,lagrangian,rho1,rho2"]
    for row in trace:
        lines.append("{iteration},{residual:.10g},{lagrangian:.10g},"
                     "{rho1:.10g},{rho2:.10g}".format(**row))
    return "\n".join(lines) + "\n"
