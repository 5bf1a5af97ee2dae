"""Neutral conic-program container shared by every solve path.

A program holds variables (with bounds and optional binary flags), tagged
linear equality/inequality rows, plain and rotated second-order cone
memberships over affine expressions, and a linear-plus-diagonal-quadratic
objective.  Tags are unique and key all dual lookups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

INF = math.inf

# Solution status values.
OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"


class ProgramError(ValueError):
    """Raised for malformed programs or contract violations."""


@dataclass
class Variable:
    name: str
    lb: float = -INF
    ub: float = INF
    binary: bool = False
    index: int = -1


# An affine expression: coefficient map plus constant offset.
@dataclass
class Affine:
    coeffs: Dict[str, float]
    const: float = 0.0

    def evaluate(self, values: Mapping[str, float]) -> float:
        return self.const + sum(c * values[v] for v, c in self.coeffs.items())


@dataclass
class LinearRow:
    tag: str
    sense: str  # 'eq' | 'le' | 'ge'
    coeffs: Dict[str, float]
    rhs: float


@dataclass
class Cone:
    tag: str
    kind: str  # 'soc': ||(e1..ek)|| <= e0; 'rsoc': 2*e0*e1 >= ||(e2..ek)||^2
    entries: List[Affine]


_SENSES = ("eq", "le", "ge")


class ConicProgram:
    """Builder and container for one conic program.

    Mutable while being assembled; treated as read-only by every solve
    path, so a fully built program is safe to share across threads.
    """

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: Dict[str, Variable] = {}
        self.rows: List[LinearRow] = []
        self.cones: List[Cone] = []
        self.obj_linear: Dict[str, float] = {}
        self.obj_quad: Dict[str, float] = {}
        self.obj_const: float = 0.0
        self._row_by_tag: Dict[str, LinearRow] = {}
        self._cone_tags: Dict[str, Cone] = {}

    # ---- variables ------------------------------------------------------

    def add_var(self, name: str, lb: float = -INF, ub: float = INF,
                binary: bool = False) -> str:
        if name in self.variables:
            raise ProgramError(f"duplicate variable {name!r}")
        if binary:
            lb = 0.0 if lb == -INF else lb
            ub = 1.0 if ub == INF else ub
            if lb < 0.0 or ub > 1.0:
                raise ProgramError(
                    f"binary variable {name!r} must have bounds within [0,1]")
        if lb > ub:
            raise ProgramError(f"variable {name!r} has lb {lb} > ub {ub}")
        self.variables[name] = Variable(name, float(lb), float(ub), binary,
                                        index=len(self.variables))
        return name

    def binaries(self) -> List[str]:
        return [v.name for v in self.variables.values() if v.binary]

    def fix_var(self, name: str, value: float) -> None:
        """Pin a variable by collapsing its bounds (binaries included)."""
        var = self.variables.get(name)
        if var is None:
            raise ProgramError(f"unknown variable {name!r}")
        if var.binary and value not in (0.0, 1.0):
            raise ProgramError(f"binary {name!r} can only be fixed to 0 or 1")
        var.lb = var.ub = float(value)

    def _check_vars(self, coeffs: Mapping[str, float], where: str) -> None:
        for v in coeffs:
            if v not in self.variables:
                raise ProgramError(f"{where} references unknown variable {v!r}")

    # ---- linear rows -----------------------------------------------------

    def _add_row(self, tag: str, sense: str, coeffs: Mapping[str, float],
                 rhs: float) -> None:
        if sense not in _SENSES:
            raise ProgramError(f"bad sense {sense!r}")
        if tag in self._row_by_tag or tag in self._cone_tags:
            raise ProgramError(f"duplicate constraint tag {tag!r}")
        self._check_vars(coeffs, f"row {tag!r}")
        row = LinearRow(tag, sense, {v: float(c) for v, c in coeffs.items() if c != 0.0},
                        float(rhs))
        self.rows.append(row)
        self._row_by_tag[tag] = row

    def add_eq(self, tag: str, coeffs: Mapping[str, float], rhs: float) -> None:
        self._add_row(tag, "eq", coeffs, rhs)

    def add_le(self, tag: str, coeffs: Mapping[str, float], rhs: float) -> None:
        self._add_row(tag, "le", coeffs, rhs)

    def add_ge(self, tag: str, coeffs: Mapping[str, float], rhs: float) -> None:
        self._add_row(tag, "ge", coeffs, rhs)

    def add_term(self, tag: str, var: str, coeff: float) -> None:
        """Accumulate a coefficient into an existing row (builder hook)."""
        row = self._row_by_tag.get(tag)
        if row is None:
            raise ProgramError(f"unknown row tag {tag!r}")
        if var not in self.variables:
            raise ProgramError(f"unknown variable {var!r}")
        row.coeffs[var] = row.coeffs.get(var, 0.0) + float(coeff)

    def row(self, tag: str) -> LinearRow:
        row = self._row_by_tag.get(tag)
        if row is None:
            raise ProgramError(f"unknown row tag {tag!r}")
        return row

    def has_row(self, tag: str) -> bool:
        return tag in self._row_by_tag

    def cone(self, tag: str) -> Cone:
        cone = self._cone_tags.get(tag)
        if cone is None:
            raise ProgramError(f"unknown cone tag {tag!r}")
        return cone

    # ---- cones -----------------------------------------------------------

    def _coerce_affine(self, entry) -> Affine:
        if isinstance(entry, Affine):
            return entry
        if isinstance(entry, str):
            return Affine({entry: 1.0}, 0.0)
        if isinstance(entry, (int, float)):
            return Affine({}, float(entry))
        if isinstance(entry, tuple) and len(entry) == 2:
            coeffs, const = entry
            return Affine({v: float(c) for v, c in coeffs.items()}, float(const))
        if isinstance(entry, dict):
            return Affine({v: float(c) for v, c in entry.items()}, 0.0)
        raise ProgramError(f"cannot interpret cone entry {entry!r}")

    def _add_cone(self, tag: str, kind: str, entries: Sequence) -> None:
        if tag in self._row_by_tag or tag in self._cone_tags:
            raise ProgramError(f"duplicate constraint tag {tag!r}")
        aff = [self._coerce_affine(e) for e in entries]
        min_len = 2 if kind == "soc" else 3
        if len(aff) < min_len:
            raise ProgramError(f"cone {tag!r} needs at least {min_len} entries")
        for a in aff:
            self._check_vars(a.coeffs, f"cone {tag!r}")
        cone = Cone(tag, kind, aff)
        self.cones.append(cone)
        self._cone_tags[tag] = cone

    def add_soc(self, tag: str, entries: Sequence) -> None:
        """||(e_1..e_k)||_2 <= e_0."""
        self._add_cone(tag, "soc", entries)

    def add_rsoc(self, tag: str, entries: Sequence) -> None:
        """2*e_0*e_1 >= ||(e_2..e_k)||^2 with e_0, e_1 >= 0."""
        self._add_cone(tag, "rsoc", entries)

    # ---- objective ---------------------------------------------------------

    def add_obj(self, var: str, coeff: float) -> None:
        if var not in self.variables:
            raise ProgramError(f"unknown variable {var!r}")
        self.obj_linear[var] = self.obj_linear.get(var, 0.0) + float(coeff)

    def add_obj_quad(self, var: str, coeff: float) -> None:
        """Add coeff * var^2; coeff must be >= 0 (convexity)."""
        if var not in self.variables:
            raise ProgramError(f"unknown variable {var!r}")
        if coeff < 0:
            raise ProgramError(f"negative quadratic coefficient on {var!r}")
        self.obj_quad[var] = self.obj_quad.get(var, 0.0) + float(coeff)

    # ---- summaries ---------------------------------------------------------

    def objective_value(self, values: Mapping[str, float]) -> float:
        total = self.obj_const
        total += sum(c * values[v] for v, c in self.obj_linear.items())
        total += sum(q * values[v] ** 2 for v, q in self.obj_quad.items())
        return total

    def stats(self) -> Dict[str, int]:
        return {
            "variables": len(self.variables),
            "binaries": len(self.binaries()),
            "rows": len(self.rows),
            "cones": len(self.cones),
        }

    def __repr__(self) -> str:  # pragma: no cover
        s = self.stats()
        return (f"ConicProgram({self.name!r}, vars={s['variables']}, "
                f"bin={s['binaries']}, rows={s['rows']}, cones={s['cones']})")


@dataclass
class Solution:
    """Result of one solve: status, primals by variable, duals by tag."""

    status: str
    primal: Dict[str, float] = field(default_factory=dict)
    duals: Dict[str, float] = field(default_factory=dict)
    objective: Optional[float] = None
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def value(self, var: str) -> float:
        return self.primal[var]

    def values(self, names: Iterable[str]):
        return [self.primal[n] for n in names]


def extract_duals(solution: Solution, tags: Sequence[str]) -> List[float]:
    """Dual value per tag; sign convention: dual of a row is d(obj)/d(rhs).

    Raises KeyError naming the first unknown tag.
    """
    if solution.status != OPTIMAL:
        raise ProgramError(f"duals only available for optimal solves, "
                           f"got status {solution.status!r}")
    out = []
    for t in tags:
        if t not in solution.duals:
            raise KeyError(f"no dual recorded for tag {t!r}")
        out.append(solution.duals[t])
    return out
