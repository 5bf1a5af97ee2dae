"""Explicit Lagrangian dual of a continuous conic program.

For

    min  c'x + d
    s.t. a_e'x  = b_e            (equalities, multiplier nu free)
         a_i'x <= b_i            (inequalities and bounds, lam >= 0)
         F_k x + g_k in SOC      (cone multiplier u_k in SOC)

the dual built here is the minimization

    min  sum b_e nu_e + sum b_i lam_i + sum g_k'u_k - d
    s.t. c_v + sum a_e[v] nu_e + sum a_i[v] lam_i - sum F_k[:,v]'u_k = 0
         lam >= 0,  u_k in SOC

whose optimal value equals minus the primal optimum.  Solving it gives a
second, independent route to every shadow price: the sensitivity-convention
dual of an equality row is -nu, of a 'le' row -lam, of a 'ge' row +lam.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Tuple

from .program import INF, Affine, ConicProgram, ProgramError
from .solve import rsoc_to_soc


@dataclass
class DualInfo:
    """Name map from primal rows/cones to dual variables."""

    eq: Dict[str, str] = field(default_factory=dict)
    ineq: Dict[str, Tuple[str, str]] = field(default_factory=dict)
    bound: Dict[Tuple[str, str], str] = field(default_factory=dict)
    cone: Dict[str, List[str]] = field(default_factory=dict)
    stationarity: Dict[str, str] = field(default_factory=dict)

    def price(self, tag: str, values: Mapping[str, float]) -> float:
        """Sensitivity-convention dual of row `tag` from a dual solution."""
        if tag in self.eq:
            return -values[self.eq[tag]]
        if tag in self.ineq:
            lam, sense = self.ineq[tag]
            return -values[lam] if sense == "le" else values[lam]
        raise KeyError(f"no such priced row: {tag!r}")


def build_dual_program(program: ConicProgram) -> Tuple[ConicProgram, DualInfo]:
    """Mechanically dualize `program` (linear objective, no free binaries)."""
    if program.obj_quad:
        raise ProgramError("dual construction needs a linear objective; "
                           "lift quadratics before dualizing")
    for name in program.binaries():
        v = program.variables[name]
        if v.lb != v.ub:
            raise ProgramError(f"free binary {name!r}: pin it before dualizing")

    dual = ConicProgram()
    info = DualInfo()
    # stationarity accumulator: primal var -> {dual var: coef}
    stat: Dict[str, Dict[str, float]] = {v: {} for v in program.variables}

    def touch(pvar: str, dvar: str, coef: float):
        if coef != 0.0:
            d = stat[pvar]
            d[dvar] = d.get(dvar, 0.0) + coef

    for row in program.rows:
        if row.sense == "eq":
            nu = f"nu:{row.tag}"
            dual.add_var(nu)
            info.eq[row.tag] = nu
            dual.add_obj(nu, row.rhs)
            for v, a in row.coeffs.items():
                touch(v, nu, a)
        else:
            lam = f"lam:{row.tag}"
            dual.add_var(lam, lb=0.0)
            info.ineq[row.tag] = (lam, row.sense)
            flip = 1.0 if row.sense == "le" else -1.0
            dual.add_obj(lam, flip * row.rhs)
            for v, a in row.coeffs.items():
                touch(v, lam, flip * a)

    for name, var in program.variables.items():
        if var.ub < INF:
            lam = f"lam:ub:{name}"
            dual.add_var(lam, lb=0.0)
            info.bound[(name, "ub")] = lam
            dual.add_obj(lam, var.ub)
            touch(name, lam, 1.0)
        if var.lb > -INF:
            lam = f"lam:lb:{name}"
            dual.add_var(lam, lb=0.0)
            info.bound[(name, "lb")] = lam
            dual.add_obj(lam, -var.lb)
            touch(name, lam, -1.0)

    for cone in program.cones:
        entries = cone.entries if cone.kind == "soc" else rsoc_to_soc(cone.entries)
        unames = []
        for j, entry in enumerate(entries):
            u = f"u:{cone.tag}:{j}"
            dual.add_var(u)
            unames.append(u)
            dual.add_obj(u, entry.const)
            for v, f in entry.coeffs.items():
                touch(v, u, -f)
        info.cone[cone.tag] = unames
        dual.add_soc(f"soc:{cone.tag}",
                     [Affine({u: 1.0}) for u in unames])

    for name in program.variables:
        tag = f"st:{name}"
        info.stationarity[name] = tag
        dual.add_eq(tag, stat[name], -program.obj_linear.get(name, 0.0))

    dual.obj_const = -program.obj_const
    return dual, info
