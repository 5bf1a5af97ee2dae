"""Depth-first branch and bound over the binary variables of a ConicProgram.

Each node solves the continuous relaxation with a subset of binaries pinned.
Branching picks the most fractional binary (ties: earliest declared), and the
child matching the relaxed value is explored first.  Nodes whose relaxation
bound cannot beat the incumbent by more than the requested relative gap are
pruned.  Integer solves carry no constraint duals.
"""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Tuple

from .program import (INFEASIBLE, ITERATION_LIMIT, OPTIMAL, UNBOUNDED,
                      ConicProgram, ProgramError, Solution)
from .solve import solve_relaxation

_INT_TOL = 1e-6


def _fractional(primal: Mapping[str, float], names) -> Optional[str]:
    """Most fractional binary, or None if all are integral."""
    best, best_frac = None, _INT_TOL
    for name in names:
        frac = min(primal[name], 1.0 - primal[name])
        if frac > best_frac:
            best, best_frac = name, frac
    return best


def solve_misocp_bnb(program: ConicProgram, rel_gap: float = 1e-6,
                     node_budget: int = 10000,
                     seed_assignment: Optional[Mapping[str, int]] = None,
                     **opts) -> Solution:
    """Globally solve a mixed-binary conic program.

    Returns the proven optimum (within `rel_gap`), or the best incumbent with
    status "iteration-limit" when `node_budget` runs out first.  An optional
    `seed_assignment` of every binary provides a warm incumbent.
    """
    bins = program.binaries()
    if not bins:
        return solve_relaxation(program, **opts)

    incumbent: Optional[Tuple[float, Dict[str, float]]] = None

    def gap_cut() -> float:
        assert incumbent is not None
        return incumbent[0] - rel_gap * max(1.0, abs(incumbent[0]))

    def accept(primal: Dict[str, float], obj: float):
        nonlocal incumbent
        rounded = dict(primal)
        for name in bins:
            rounded[name] = float(round(rounded[name]))
        if incumbent is None or obj < incumbent[0]:
            incumbent = (obj, rounded)

    if seed_assignment is not None:
        pins = {b: (float(round(seed_assignment[b])),) * 2 for b in bins
                if b in seed_assignment}
        if len(pins) == len(bins):
            sol = solve_relaxation(program, pins, **opts)
            if sol.ok:
                accept(sol.primal, sol.objective)

    stack = [dict()]  # type: ignore[var-annotated]
    nodes = 0
    exhausted = False
    while stack:
        if nodes >= node_budget:
            exhausted = True
            break
        fix = stack.pop()
        nodes += 1
        overrides = {b: (v, v) for b, v in fix.items()}
        sol = solve_relaxation(program, overrides, **opts)
        if sol.status == UNBOUNDED:
            raise ProgramError("relaxation is unbounded; add bounds")
        if not sol.ok:
            continue
        if incumbent is not None and sol.objective >= gap_cut():
            continue
        branch_var = _fractional(sol.primal, [b for b in bins if b not in fix])
        if branch_var is None:
            accept(sol.primal, sol.objective)
            continue
        near = round(sol.primal[branch_var])
        stack.append({**fix, branch_var: 1.0 - near})
        stack.append({**fix, branch_var: float(near)})

    meta = {"nodes": nodes, "engine": "bnb"}
    if incumbent is None:
        return Solution(status=ITERATION_LIMIT if exhausted else INFEASIBLE,
                        meta=meta)
    status = ITERATION_LIMIT if exhausted else OPTIMAL
    return Solution(status=status, primal=incumbent[1], duals={},
                    objective=incumbent[0], meta=meta)
