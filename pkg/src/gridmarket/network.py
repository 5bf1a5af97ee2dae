"""Radial distribution-grid data model and branch-flow constraint builders.

Two second-order-cone formulations are emitted into a shared ConicProgram:

* an undirected day-ahead form, where every feeder-hour carries a forward
  and a reverse variable group gated by a complementary binary pair, so the
  clearing itself decides which way power flows;
* a directed intra-day form, where the day-ahead direction decision is fixed
  and each feeder-hour keeps a single oriented variable group.

Both use squared voltage magnitudes v and squared currents l; the cone
l * v_send >= p^2 + q^2 relaxes the current definition and is tight at the
optimum whenever losses carry a positive cost.

Power convention: flows are measured where power enters the feeder, losses
are charged at the receiving bus, and PCC exchange is positive when the
microgrid imports from the grid (it adds to bus demand).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .conic import Affine, ConicProgram, Solution


class CaseError(ValueError):
    """A case violates its declared invariants."""


@dataclass(frozen=True)
class Feeder:
    from_bus: int
    to_bus: int
    r: float                  # p.u. resistance
    x: float                  # p.u. reactance
    l_cap: float              # squared-current cap
    p_cap: float              # active-flow cap, either orientation
    q_cap: float              # reactive-flow cap, either orientation


@dataclass(frozen=True)
class Generator:
    name: str
    bus: int
    kind: str                 # upstream | wind | pv | compensator
    p_cap: np.ndarray         # per-hour active cap (availability profile)
    q_cap: float
    cost: np.ndarray          # per-hour marginal cost, $/MWh

    KINDS = ("upstream", "wind", "pv", "compensator")

    def __post_init__(self):
        object.__setattr__(self, "p_cap", np.atleast_1d(
            np.asarray(self.p_cap, dtype=float)))
        cost = np.asarray(self.cost, dtype=float)
        if cost.ndim == 0:
            cost = np.full(len(self.p_cap), float(cost))
        object.__setattr__(self, "cost", cost)


@dataclass(frozen=True)
class Storage:
    name: str
    bus: int
    energy: float             # MWh
    eta_ch: float
    eta_dic: float
    p_ch_cap: float
    p_dic_cap: float
    soc_lo: float
    soc_hi: float
    soc_ini: float
    soc_end: float
    cost_ch: float = 0.0      # throughput cost, $/MWh
    cost_dic: float = 0.0


@dataclass(frozen=True)
class PccPoint:
    name: str
    bus: int
    p_cap: float
    q_cap: float


@dataclass
class NetworkCase:
    """Immutable-by-convention static world for one distribution grid."""

    name: str
    base_mva: float
    base_kv: float
    horizon: int
    buses: List[int]
    feeders: List[Feeder]
    v_lo: Dict[int, float]
    v_hi: Dict[int, float]
    generators: List[Generator]
    storage: List[Storage]
    pcc_points: List[PccPoint]
    loads: Dict[int, np.ndarray]      # per-bus active profile, p.u.
    costs: Dict[str, float]           # tariff/penalty table

    @property
    def slack(self) -> int:
        return self.buses[0]

    @property
    def tan_theta(self) -> float:
        return self.costs["tan_theta"]

    def load_p(self, bus: int, t: int) -> float:
        prof = self.loads.get(bus)
        return float(prof[t]) if prof is not None else 0.0

    def validate(self) -> None:
        n = len(self.buses)
        if len(set(self.buses)) != n or n < 2:
            raise CaseError("bus ids must be unique and at least two")
        busset = set(self.buses)
        if len(self.feeders) != n - 1:
            raise CaseError(
                f"radiality violation: {len(self.feeders)} feeders for "
                f"{n} buses (need exactly {n - 1})")
        adj: Dict[int, List[int]] = {b: [] for b in self.buses}
        for k, f in enumerate(self.feeders):
            if f.from_bus not in busset or f.to_bus not in busset:
                raise CaseError(f"feeder {k} touches an undeclared bus")
            if f.r <= 0.0 or f.x <= 0.0:
                raise CaseError(f"feeder {k} needs r, x > 0 "
                                f"(got r={f.r}, x={f.x})")
            adj[f.from_bus].append(f.to_bus)
            adj[f.to_bus].append(f.from_bus)
        seen = {self.slack}
        stack = [self.slack]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if seen != busset:
            missing = sorted(busset - seen)
            raise CaseError(f"radiality violation: buses {missing} are not "
                            "connected to the substation")
        for b in self.buses:
            if not 0.0 < self.v_lo[b] <= self.v_hi[b]:
                raise CaseError(f"bad voltage box at bus {b}")
        for g in self.generators:
            if g.kind not in Generator.KINDS:
                raise CaseError(f"generator {g.name}: unknown kind {g.kind!r}")
            if g.bus not in busset:
                raise CaseError(f"generator {g.name} at undeclared bus")
            if len(g.p_cap) != self.horizon:
                raise CaseError(f"generator {g.name}: cap profile length "
                                f"{len(g.p_cap)} != horizon {self.horizon}")
        for s in self.storage:
            if not 0.0 < s.eta_ch <= 1.0 or not 0.0 < s.eta_dic <= 1.0:
                raise CaseError(
                    f"storage {s.name}: efficiency range violation "
                    f"(eta_ch={s.eta_ch}, eta_dic={s.eta_dic})")
            if not (s.soc_lo <= s.soc_ini <= s.soc_hi
                    and s.soc_lo <= s.soc_end <= s.soc_hi):
                raise CaseError(f"storage {s.name}: SOC endpoints outside "
                                "[soc_lo, soc_hi]")
            if s.bus not in busset:
                raise CaseError(f"storage {s.name} at undeclared bus")
        for p in self.pcc_points:
            if p.bus not in busset:
                raise CaseError(f"PCC {p.name} at undeclared bus")
        for b, prof in self.loads.items():
            if b not in busset:
                raise CaseError(f"load profile at undeclared bus {b}")
            if len(prof) != self.horizon:
                raise CaseError(f"load profile at bus {b} has length "
                                f"{len(prof)} != horizon {self.horizon}")


# --------------------------------------------------------------------------


@dataclass
class FlowBlock:
    """Handle to one emitted flow formulation: variable ids and row tags."""

    kind: str                         # "undirected" | "directed"
    prefix: str
    hours: List[int]
    case: NetworkCase
    program: ConicProgram
    v: Dict[Tuple[int, int], str] = field(default_factory=dict)
    # undirected groups, keyed (feeder_idx, hour)
    pp: Dict[Tuple[int, int], str] = field(default_factory=dict)
    pm: Dict[Tuple[int, int], str] = field(default_factory=dict)
    qp: Dict[Tuple[int, int], str] = field(default_factory=dict)
    qm: Dict[Tuple[int, int], str] = field(default_factory=dict)
    lp: Dict[Tuple[int, int], str] = field(default_factory=dict)
    lm: Dict[Tuple[int, int], str] = field(default_factory=dict)
    zp: Dict[Tuple[int, int], str] = field(default_factory=dict)
    zm: Dict[Tuple[int, int], str] = field(default_factory=dict)
    # directed group
    p: Dict[Tuple[int, int], str] = field(default_factory=dict)
    q: Dict[Tuple[int, int], str] = field(default_factory=dict)
    l: Dict[Tuple[int, int], str] = field(default_factory=dict)
    directions: Dict[Tuple[int, int], int] = field(default_factory=dict)
    # row tags
    p_bal: Dict[Tuple[int, int], str] = field(default_factory=dict)
    q_bal: Dict[Tuple[int, int], str] = field(default_factory=dict)
    vdrop: Dict[Tuple[int, int], str] = field(default_factory=dict)
    cones: Dict[Tuple[int, int, str], str] = field(default_factory=dict)

    def loss_terms(self) -> Dict[str, float]:
        """Objective coefficients for resistive loss: sum r*(l+ - l-)."""
        out: Dict[str, float] = {}
        for (k, t), name in self.lp.items():
            out[name] = self.case.feeders[k].r
        for (k, t), name in self.lm.items():
            out[name] = -self.case.feeders[k].r
        for (k, t), name in self.l.items():
            out[name] = self.case.feeders[k].r
        return out

    def direction_assignment(self, sol: Solution) -> Dict[Tuple[int, int], int]:
        """Read the binary direction pair out of an undirected solution:
        +1 keeps the declared feeder orientation, -1 reverses it."""
        if self.kind != "undirected":
            raise CaseError("directions live on the undirected block")
        out = {}
        for key, zname in self.zp.items():
            out[key] = 1 if sol.primal[zname] >= 0.5 else -1
        return out

    def net_flow(self, sol: Solution, k: int, t: int) -> Tuple[float, float, float]:
        """(p, q, l) net of both orientations at the solved point."""
        if self.kind == "directed":
            d = self.directions[(k, t)]
            return (d * sol.primal[self.p[(k, t)]],
                    d * sol.primal[self.q[(k, t)]],
                    d * sol.primal[self.l[(k, t)]])
        return (sol.primal[self.pp[(k, t)]] + sol.primal[self.pm[(k, t)]],
                sol.primal[self.qp[(k, t)]] + sol.primal[self.qm[(k, t)]],
                sol.primal[self.lp[(k, t)]] + sol.primal[self.lm[(k, t)]])


def _demand_rhs(case: NetworkCase, demand, pcc_injections, bus: int, t: int
                ) -> Tuple[float, float]:
    """Nodal withdrawal (P, Q) at one bus-hour.  A PCC entry is either a
    single active series (reactive follows the power factor) or an explicit
    (active, reactive) pair of series."""
    try:
        p = float(demand[bus][t])
    except (KeyError, IndexError):
        raise CaseError(f"missing demand for bus {bus} hour {t}") from None
    q = case.tan_theta * p
    if pcc_injections:
        for pcc in case.pcc_points:
            if pcc.bus == bus and pcc.name in pcc_injections:
                entry = pcc_injections[pcc.name]
                if isinstance(entry, tuple):
                    p += float(entry[0][t])
                    q += float(entry[1][t])
                else:
                    w = float(entry[t])
                    p += w
                    q += case.tan_theta * w
    return p, q


def _cap(caps, kind: str, idx: int, t: int, default: float) -> float:
    if caps:
        return float(caps.get((kind, idx, t), default))
    return default


def build_undirected_flow(program: ConicProgram, case: NetworkCase,
                          hours: Sequence[int],
                          demand: Mapping[int, Sequence[float]],
                          pcc_injections: Optional[Mapping[str, Sequence[float]]] = None,
                          prefix: str = "da",
                          caps: Optional[Mapping[Tuple[str, int, int], float]] = None
                          ) -> FlowBlock:
    """Emit the undirected branch-flow block for the given hours.

    Per feeder-hour: a forward group (p+, q+, l+) gated by binary z+ and a
    reverse group (p-, q-, l-) gated by z-, with z+ + z- = 1; one rotated
    cone per orientation (forward against the sending-end voltage, reverse
    against the receiving end).  Per bus-hour: nodal P/Q balance rows (the
    dispatch modules later add their injection terms via add_term) and a
    voltage box; the substation voltage is anchored at 1.

    `caps` optionally overrides security limits, keyed by
    ("p+"|"p-"|"q+"|"q-"|"l+"|"l-", feeder, hour) and
    ("v_lo"|"v_hi", bus, hour); the chance-constraint tightening enters
    through exactly this hook.
    """
    case.validate()
    N = prefix
    blk = FlowBlock("undirected", prefix, list(hours), case, program)

    for t in hours:
        for b in case.buses:
            vn = program.add_var(f"{N}:v:{b}:{t}", lb=0.25, ub=2.25)
            blk.v[(b, t)] = vn
            if b == case.slack:
                program.add_eq(f"{N}:vref:{t}", {vn: 1.0}, 1.0)
            else:
                hi = _cap(caps, "v_hi", b, t, case.v_hi[b])
                lo = _cap(caps, "v_lo", b, t, case.v_lo[b])
                program.add_le(f"{N}:vcap:hi:{b}:{t}", {vn: 1.0}, hi)
                program.add_ge(f"{N}:vcap:lo:{b}:{t}", {vn: 1.0}, lo)

        for k, f in enumerate(case.feeders):
            pp = program.add_var(f"{N}:pp:{k}:{t}", lb=0.0)
            pm = program.add_var(f"{N}:pm:{k}:{t}", ub=0.0)
            qp = program.add_var(f"{N}:qp:{k}:{t}")
            qm = program.add_var(f"{N}:qm:{k}:{t}")
            lp = program.add_var(f"{N}:lp:{k}:{t}", lb=0.0)
            lm = program.add_var(f"{N}:lm:{k}:{t}", ub=0.0)
            zp = program.add_var(f"{N}:zp:{k}:{t}", binary=True)
            zm = program.add_var(f"{N}:zm:{k}:{t}", binary=True)
            key = (k, t)
            blk.pp[key], blk.pm[key] = pp, pm
            blk.qp[key], blk.qm[key] = qp, qm
            blk.lp[key], blk.lm[key] = lp, lm
            blk.zp[key], blk.zm[key] = zp, zm

            program.add_eq(f"{N}:dir:{k}:{t}", {zp: 1.0, zm: 1.0}, 1.0)
            # direction-gated security boxes
            program.add_le(f"{N}:cap:p+:{k}:{t}",
                           {pp: 1.0, zp: -_cap(caps, "p+", k, t, f.p_cap)}, 0.0)
            program.add_ge(f"{N}:cap:p-:{k}:{t}",
                           {pm: 1.0, zm: _cap(caps, "p-", k, t, f.p_cap)}, 0.0)
            program.add_le(f"{N}:cap:q+hi:{k}:{t}",
                           {qp: 1.0, zp: -_cap(caps, "q+", k, t, f.q_cap)}, 0.0)
            program.add_ge(f"{N}:cap:q+lo:{k}:{t}",
                           {qp: 1.0, zp: _cap(caps, "q+", k, t, f.q_cap)}, 0.0)
            program.add_le(f"{N}:cap:q-hi:{k}:{t}",
                           {qm: 1.0, zm: -_cap(caps, "q-", k, t, f.q_cap)}, 0.0)
            program.add_ge(f"{N}:cap:q-lo:{k}:{t}",
                           {qm: 1.0, zm: _cap(caps, "q-", k, t, f.q_cap)}, 0.0)
            program.add_le(f"{N}:cap:l+:{k}:{t}",
                           {lp: 1.0, zp: -_cap(caps, "l+", k, t, f.l_cap)}, 0.0)
            program.add_ge(f"{N}:cap:l-:{k}:{t}",
                           {lm: 1.0, zm: _cap(caps, "l-", k, t, f.l_cap)}, 0.0)

            # voltage drop along the feeder, valid in both regimes
            z2 = f.r * f.r + f.x * f.x
            vi, vj = blk.v[(f.from_bus, t)], blk.v[(f.to_bus, t)]
            program.add_eq(f"{N}:vdrop:{k}:{t}",
                           {vi: 1.0, vj: -1.0, pp: -2.0 * f.r, pm: -2.0 * f.r,
                            qp: -2.0 * f.x, qm: -2.0 * f.x, lp: z2, lm: z2},
                           0.0)
            blk.vdrop[key] = f"{N}:vdrop:{k}:{t}"

            # current-definition cones, one per orientation
            fw = f"{N}:cone:fw:{k}:{t}"
            rv = f"{N}:cone:rv:{k}:{t}"
            program.add_rsoc(fw, [Affine({lp: 1.0}), Affine({vi: 0.5}),
                                  Affine({pp: 1.0}), Affine({qp: 1.0})])
            program.add_rsoc(rv, [Affine({lm: -1.0}), Affine({vj: 0.5}),
                                  Affine({pm: -1.0}), Affine({qm: -1.0})])
            blk.cones[(k, t, "fw")] = fw
            blk.cones[(k, t, "rv")] = rv

        # nodal balances; dispatch variables join these rows later
        for b in case.buses:
            pcoef: Dict[str, float] = {}
            qcoef: Dict[str, float] = {}
            for k, f in enumerate(case.feeders):
                key = (k, t)
                if f.to_bus == b:      # power arriving minus forward loss
                    pcoef[blk.pp[key]] = pcoef.get(blk.pp[key], 0.0) + 1.0
                    pcoef[blk.pm[key]] = pcoef.get(blk.pm[key], 0.0) + 1.0
                    pcoef[blk.lp[key]] = pcoef.get(blk.lp[key], 0.0) - f.r
                    qcoef[blk.qp[key]] = qcoef.get(blk.qp[key], 0.0) + 1.0
                    qcoef[blk.qm[key]] = qcoef.get(blk.qm[key], 0.0) + 1.0
                    qcoef[blk.lp[key]] = qcoef.get(blk.lp[key], 0.0) - f.x
                if f.from_bus == b:    # power leaving, reverse loss lands here
                    pcoef[blk.pp[key]] = pcoef.get(blk.pp[key], 0.0) - 1.0
                    pcoef[blk.pm[key]] = pcoef.get(blk.pm[key], 0.0) - 1.0
                    pcoef[blk.lm[key]] = pcoef.get(blk.lm[key], 0.0) + f.r
                    qcoef[blk.qp[key]] = qcoef.get(blk.qp[key], 0.0) - 1.0
                    qcoef[blk.qm[key]] = qcoef.get(blk.qm[key], 0.0) - 1.0
                    qcoef[blk.lm[key]] = qcoef.get(blk.lm[key], 0.0) + f.x
            dp, dq = _demand_rhs(case, demand, pcc_injections, b, t)
            ptag, qtag = f"{N}:Pbal:{b}:{t}", f"{N}:Qbal:{b}:{t}"
            program.add_eq(ptag, pcoef, dp)
            program.add_eq(qtag, qcoef, dq)
            blk.p_bal[(b, t)] = ptag
            blk.q_bal[(b, t)] = qtag

    return blk


def build_directed_flow(program: ConicProgram, case: NetworkCase,
                        hours: Sequence[int],
                        demand: Mapping[int, Sequence[float]],
                        directions: Mapping[Tuple[int, int], int],
                        pcc_injections: Optional[Mapping[str, Sequence[float]]] = None,
                        prefix: str = "id",
                        caps: Optional[Mapping[Tuple[str, int, int], float]] = None
                        ) -> FlowBlock:
    """Emit the single-orientation branch-flow block with fixed directions.

    `directions[(feeder, hour)]` is +1 to keep the declared orientation and
    -1 to reverse it; every feeder-hour must be assigned.  Active flow is
    measured at the chosen sending end and is nonnegative, so a direction
    that fights the only feasible flow makes the block infeasible rather
    than silently re-routing.
    """
    case.validate()
    N = prefix
    blk = FlowBlock("directed", prefix, list(hours), case, program)

    for t in hours:
        for b in case.buses:
            vn = program.add_var(f"{N}:v:{b}:{t}", lb=0.25, ub=2.25)
            blk.v[(b, t)] = vn
            if b == case.slack:
                program.add_eq(f"{N}:vref:{t}", {vn: 1.0}, 1.0)
            else:
                program.add_le(f"{N}:vcap:hi:{b}:{t}", {vn: 1.0},
                               _cap(caps, "v_hi", b, t, case.v_hi[b]))
                program.add_ge(f"{N}:vcap:lo:{b}:{t}", {vn: 1.0},
                               _cap(caps, "v_lo", b, t, case.v_lo[b]))

        for k, f in enumerate(case.feeders):
            key = (k, t)
            if key not in directions:
                raise CaseError(f"no direction assigned for feeder {k} "
                                f"hour {t}")
            d = int(directions[key])
            if d not in (1, -1):
                raise CaseError(f"direction for feeder {k} hour {t} must be "
                                f"+1 or -1, got {d}")
            blk.directions[key] = d
            send, recv = ((f.from_bus, f.to_bus) if d == 1
                          else (f.to_bus, f.from_bus))
            p = program.add_var(f"{N}:p:{k}:{t}", lb=0.0)
            q = program.add_var(f"{N}:q:{k}:{t}")
            l = program.add_var(f"{N}:l:{k}:{t}", lb=0.0)
            blk.p[key], blk.q[key], blk.l[key] = p, q, l

            side = "p+" if d == 1 else "p-"
            program.add_le(f"{N}:cap:p:{k}:{t}", {p: 1.0},
                           _cap(caps, side, k, t, f.p_cap))
            qside = "q+" if d == 1 else "q-"
            program.add_le(f"{N}:cap:qhi:{k}:{t}", {q: 1.0},
                           _cap(caps, qside, k, t, f.q_cap))
            program.add_ge(f"{N}:cap:qlo:{k}:{t}", {q: 1.0},
                           -_cap(caps, qside, k, t, f.q_cap))
            lside = "l+" if d == 1 else "l-"
            program.add_le(f"{N}:cap:l:{k}:{t}", {l: 1.0},
                           _cap(caps, lside, k, t, f.l_cap))

            z2 = f.r * f.r + f.x * f.x
            vs, vr = blk.v[(send, t)], blk.v[(recv, t)]
            program.add_eq(f"{N}:vdrop:{k}:{t}",
                           {vs: 1.0, vr: -1.0, p: -2.0 * f.r, q: -2.0 * f.x,
                            l: z2}, 0.0)
            blk.vdrop[key] = f"{N}:vdrop:{k}:{t}"

            tag = f"{N}:cone:{k}:{t}"
            program.add_rsoc(tag, [Affine({l: 1.0}), Affine({vs: 0.5}),
                                   Affine({p: 1.0}), Affine({q: 1.0})])
            blk.cones[(k, t, "fw" if d == 1 else "rv")] = tag

        for b in case.buses:
            pcoef: Dict[str, float] = {}
            qcoef: Dict[str, float] = {}
            for k, f in enumerate(case.feeders):
                key = (k, t)
                d = blk.directions[key]
                send = f.from_bus if d == 1 else f.to_bus
                recv = f.to_bus if d == 1 else f.from_bus
                if recv == b:
                    pcoef[blk.p[key]] = pcoef.get(blk.p[key], 0.0) + 1.0
                    pcoef[blk.l[key]] = pcoef.get(blk.l[key], 0.0) - f.r
                    qcoef[blk.q[key]] = qcoef.get(blk.q[key], 0.0) + 1.0
                    qcoef[blk.l[key]] = qcoef.get(blk.l[key], 0.0) - f.x
                if send == b:
                    pcoef[blk.p[key]] = pcoef.get(blk.p[key], 0.0) - 1.0
                    qcoef[blk.q[key]] = qcoef.get(blk.q[key], 0.0) - 1.0
            dp, dq = _demand_rhs(case, demand, pcc_injections, b, t)
            ptag, qtag = f"{N}:Pbal:{b}:{t}", f"{N}:Qbal:{b}:{t}"
            program.add_eq(ptag, pcoef, dp)
            program.add_eq(qtag, qcoef, dq)
            blk.p_bal[(b, t)] = ptag
            blk.q_bal[(b, t)] = qtag

    return blk


# --------------------------------------------------------------------------


@dataclass
class FlowReport:
    """Diagnostics for a solved flow block; informative, never failing."""

    max_cone_gap: float
    max_kcl_residual: float
    slack_cones: List[Tuple[str, float]]
    direction_violations: List[str]

    @property
    def tight(self) -> bool:
        return self.max_cone_gap <= 1e-5 and not self.direction_violations


def validate_flow(sol: Solution, block: FlowBlock,
                  slack_tol: float = 1e-5) -> FlowReport:
    """Check cone tightness, nodal balance residuals, and that the
    inactive-direction variable group is numerically zero."""
    case, prog = block.case, block.program
    gaps: List[Tuple[str, float]] = []
    max_gap = 0.0
    for (k, t, side), tag in block.cones.items():
        cone = prog.cone(tag)
        vals = [e.evaluate(sol.primal) for e in cone.entries]
        gap = abs(2.0 * vals[0] * vals[1]
                  - sum(v * v for v in vals[2:]))
        # only the active orientation's cone is expected tight
        active = True
        if block.kind == "undirected":
            zname = block.zp[(k, t)] if side == "fw" else block.zm[(k, t)]
            active = sol.primal[zname] >= 0.5
        if active:
            max_gap = max(max_gap, gap)
            if gap > slack_tol:
                gaps.append((tag, gap))

    max_kcl = 0.0
    for tags in (block.p_bal, block.q_bal):
        for tag in tags.values():
            row = prog.row(tag)
            resid = sum(c * sol.primal[v] for v, c in row.coeffs.items()) \
                - row.rhs
            max_kcl = max(max_kcl, abs(resid))

    bad_dir: List[str] = []
    if block.kind == "undirected":
        groups = (block.pp, block.qp, block.lp), (block.pm, block.qm, block.lm)
        for key, zname in block.zp.items():
            fw_active = sol.primal[zname] >= 0.5
            idle = groups[0] if not fw_active else groups[1]
            for g in idle:
                if abs(sol.primal[g[key]]) > 1e-6:
                    bad_dir.append(g[key])
    else:
        for key, pname in block.p.items():
            if sol.primal[pname] < -1e-6:
                bad_dir.append(pname)

    return FlowReport(max_cone_gap=max_gap, max_kcl_residual=max_kcl,
                      slack_cones=sorted(gaps), direction_violations=bad_dir)
