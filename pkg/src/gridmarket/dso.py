"""Distribution system operator: day-ahead chance-constrained clearing and
rolling intra-day flexibility re-dispatch.

Day-ahead: a MISOCP over the full horizon with the undirected flow block,
security limits tightened by the analytic chance-constraint rules at the
sensitivity operating point, bidirectional reserve capacities retained on
the upstream injection and the storage fleet, and PCC exchange pinned to
the microgrids' latest bids.

Intra-day: per 4-hour rolling window, a continuous SOCP on the directed
flow block (directions frozen from day-ahead) that deploys the retained
reserves against realized demand/availability and, when needed, counters
the microgrids' flexibility at the PCC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .conic import ConicProgram, Solution, solve_misocp_bnb, solve_socp
from .network import (CaseError, FlowBlock, FlowReport, NetworkCase,
                      build_directed_flow, build_undirected_flow,
                      validate_flow)
from .uncertainty import (GaussianUncertainty, RollingEstimate,
                          SensitivityMatrix, UncertaintyError,
                          build_sensitivity, tighten_bounds)

# tiny objective nudges; reported costs are recomputed without them
EPS_BINARY = 1e-5     # prefers the forward orientation / idle ESS states
EPS_RESERVE = 1e-4    # pins unpriced reserve capacity at zero
EPS_LOSS = 1e-6       # keeps intra-day cones tight (no loss term in A.17)
_SNAP = 1e-3          # reserve readouts below gap/EPS_RESERVE are noise


class DispatchError(RuntimeError):
    """Clearing failed: infeasible stage, bad inputs, or over-tightening."""


PccBids = Mapping[str, Tuple[Sequence[float], Sequence[float]]]


def _bid_series(pcc_bids: Optional[PccBids], name: str, horizon: int
                ) -> Tuple[np.ndarray, np.ndarray]:
    if pcc_bids and name in pcc_bids:
        p, q = pcc_bids[name]
        return (np.asarray(p, dtype=float), np.asarray(q, dtype=float))
    return np.zeros(horizon), np.zeros(horizon)


# ---------------------------------------------------------------- results --


@dataclass
class DayAheadDispatch:
    """Cleared first-stage quantities, all in MW / MWh / p.u. SOC."""

    hours: List[int]
    objective: float                     # energy + loss cost, epsilon-free
    pg: Dict[Tuple[str, int], float]
    qg: Dict[Tuple[str, int], float]
    reserve_up: Dict[Tuple[str, int], float]
    reserve_dn: Dict[Tuple[str, int], float]
    ch: Dict[Tuple[str, int], float]
    dic: Dict[Tuple[str, int], float]
    soc: Dict[Tuple[str, int], float]    # on the hours+[T] grid
    ch_res_up: Dict[Tuple[str, int], float]
    ch_res_dn: Dict[Tuple[str, int], float]
    dic_res_up: Dict[Tuple[str, int], float]
    dic_res_dn: Dict[Tuple[str, int], float]
    z_ch: Dict[Tuple[str, int], int]
    z_dic: Dict[Tuple[str, int], int]
    directions: Dict[Tuple[int, int], int]
    pcc_bids: Dict[str, Tuple[np.ndarray, np.ndarray]]
    gamma: float
    solution: Solution
    block: FlowBlock
    report: FlowReport

    def upstream_injection(self, t: int) -> float:
        return sum(v for (g, h), v in self.pg.items() if h == t)


@dataclass
class IntradayAdjustment:
    """One window's flexibility deployments; only hours[0] is committed."""

    window: RollingEstimate
    hours: List[int]
    objective: float                     # deployment cost per (A.17) terms
    pg_up: Dict[Tuple[str, int], float]
    pg_dn: Dict[Tuple[str, int], float]
    pr_up: Dict[Tuple[str, int], float]
    pr_dn: Dict[Tuple[str, int], float]
    qg_adj: Dict[Tuple[str, int], float]
    qr_adj: Dict[Tuple[str, int], float]
    ch_up: Dict[Tuple[str, int], float]
    ch_dn: Dict[Tuple[str, int], float]
    dic_up: Dict[Tuple[str, int], float]
    dic_dn: Dict[Tuple[str, int], float]
    ppc_up: Dict[Tuple[str, int], float]
    ppc_dn: Dict[Tuple[str, int], float]
    qpc_adj: Dict[Tuple[str, int], float]
    soc: Dict[Tuple[str, int], float]
    pcc_net_p: Dict[Tuple[str, int], float]
    pcc_net_q: Dict[Tuple[str, int], float]
    solution: Solution
    block: FlowBlock
    report: FlowReport


# ------------------------------------------------------------- tightening --


def _tighten_caps(case: NetworkCase, gu: GaussianUncertainty,
                  sens: SensitivityMatrix, gamma: float
                  ) -> Dict[Tuple[str, int, int], float]:
    """Security-cap overrides for the flow builders, per the state chance
    constraints.  Flow caps use the row oriented along the bootstrap
    direction for the active side and the mirrored row for the opposite
    side; the symmetric reactive cap takes the tighter of its two revised
    sides.  Voltage boxes tighten both ends."""
    caps: Dict[Tuple[str, int, int], float] = {}
    errors: List[str] = []
    mu = {t: np.array([gu.load_stats(b, t)[0] for b in sens.buses])
          for t in sens.hours}
    var = {t: np.array([gu.load_stats(b, t)[1] for b in sens.buses])
           for t in sens.hours}

    def upper(bounds, row, t, state):
        try:
            return tighten_bounds("csc", bounds, row, mu[t], var[t],
                                  gamma, state=state)
        except UncertaintyError as e:
            errors.append(str(e))
            return bounds

    for t in sens.hours:
        if not np.any(var[t]) and not np.any(mu[t]):
            continue
        for k, f in enumerate(case.feeders):
            d = sens.directions[(k, t)]
            fwd, rev = ("+", "-") if d == 1 else ("-", "+")
            for kind, cap, base in (("p", f.p_cap, "p"), ("l", f.l_cap, "l")):
                row = sens.row(base, k, t)
                caps[(f"{kind}{fwd}", k, t)] = upper(
                    (0.0, cap), row, t, f"{kind}{fwd}:{k}:{t}")[1]
                caps[(f"{kind}{rev}", k, t)] = upper(
                    (0.0, cap), -row, t, f"{kind}{rev}:{k}:{t}")[1]
            row_q = sens.row("q", k, t)
            lo_q, hi_q = upper((-f.q_cap, f.q_cap), row_q, t, f"q:{k}:{t}")
            qcap = min(hi_q, -lo_q)
            caps[(f"q{fwd}", k, t)] = qcap
            caps[(f"q{rev}", k, t)] = qcap
        for b in sens.buses:
            row_v = sens.row("v", b, t)
            lo_v, hi_v = upper((case.v_lo[b], case.v_hi[b]), row_v, t,
                               f"v:{b}:{t}")
            caps[("v_lo", b, t)] = lo_v
            caps[("v_hi", b, t)] = hi_v

    if errors:
        raise DispatchError("over-tightened states: " + "; ".join(errors))
    return caps


def _cdc_cap(gu: GaussianUncertainty, g, t: int, gamma: float) -> float:
    """Dispatchable share of an uncertain availability profile."""
    src = gu.source(f"{g.kind}:{g.name}")
    if src is None:
        return float(g.p_cap[t])
    try:
        return tighten_bounds("cdc", (0.0, float(g.p_cap[t])), None,
                              src.mu[t], src.std[t] ** 2, gamma,
                              state=f"cap:{g.name}:{t}")[1]
    except UncertaintyError as e:
        raise DispatchError(f"over-tightened states: {e}") from None


# ----------------------------------------------------------- first stage ---


@dataclass
class DayAheadProgram:
    """Built day-ahead program plus the handles its consumers need."""

    program: ConicProgram
    block: FlowBlock
    case: NetworkCase
    gu: GaussianUncertainty
    pcc_bids: Dict[str, Tuple[np.ndarray, np.ndarray]]
    gamma: float
    pricing_variant: bool
    caps: Dict[Tuple[str, int, int], float]
    pg: Dict[Tuple[str, int], str] = field(default_factory=dict)
    qg: Dict[Tuple[str, int], str] = field(default_factory=dict)
    res_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    res_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)
    ch: Dict[Tuple[str, int], str] = field(default_factory=dict)
    dic: Dict[Tuple[str, int], str] = field(default_factory=dict)
    soc: Dict[Tuple[str, int], str] = field(default_factory=dict)
    zch: Dict[Tuple[str, int], str] = field(default_factory=dict)
    zdic: Dict[Tuple[str, int], str] = field(default_factory=dict)
    ch_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    ch_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)
    dic_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    dic_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)


def day_ahead_sensitivity(case: NetworkCase, gu: GaussianUncertainty,
                          pcc_bids: Optional[PccBids] = None,
                          **solve_opts) -> SensitivityMatrix:
    """Bootstrap: clear the typical scenario untightened, then linearize
    the flow physics at that operating point."""
    dap = build_day_ahead(case, gu, pcc_bids, sensitivity=None)
    dispatch = solve_day_ahead(dap, **solve_opts)
    return build_sensitivity(case, dispatch.solution, dispatch.block)


def build_day_ahead(case: NetworkCase, gu: GaussianUncertainty,
                    pcc_bids: Optional[PccBids] = None,
                    gamma: float = 0.05,
                    sensitivity: Optional[SensitivityMatrix] = None,
                    pricing_variant: bool = False,
                    fix_from: Optional[DayAheadDispatch] = None
                    ) -> DayAheadProgram:
    """Assemble the first-stage clearing MISOCP.

    With `sensitivity` given, flow/voltage limits are tightened by the
    state chance-constraint rule at that operating point; availability
    caps of uncertain units are always tightened by the capacity rule
    (a no-op at zero deviation statistics).  `pricing_variant` drops the
    reserve-capacity variables; `fix_from` pins every binary to an earlier
    dispatch, which the pricing dual model requires.
    """
    case.validate()
    hours = list(range(case.horizon))
    bids = {p.name: _bid_series(pcc_bids, p.name, case.horizon)
            for p in case.pcc_points}
    caps = (_tighten_caps(case, gu, sensitivity, gamma)
            if sensitivity is not None else {})

    prog = ConicProgram("day-ahead")
    demand = {b: [case.load_p(b, t) for t in hours] for b in case.buses}
    blk = build_undirected_flow(prog, case, hours, demand,
                                pcc_injections=bids, prefix="da", caps=caps)
    dap = DayAheadProgram(prog, blk, case, gu, bids, gamma, pricing_variant,
                          caps)

    c_nl = float(case.costs.get("c_nl", 0.0))
    c_res = float(case.costs.get("c_reserve", 0.0))
    for var, coef in blk.loss_terms().items():
        prog.add_obj(var, c_nl * coef)
    for (k, t), name in blk.zm.items():
        prog.add_obj(name, EPS_BINARY)

    for g in case.generators:
        for t in hours:
            key = (g.name, t)
            if g.kind != "compensator":
                cap = (float(g.p_cap[t]) if g.kind == "upstream"
                       else _cdc_cap(gu, g, t, gamma))
                p = prog.add_var(f"pg:{g.name}:{t}", lb=0.0, ub=max(cap, 0.0))
                prog.add_obj(p, float(g.cost[t]))
                prog.add_term(blk.p_bal[(g.bus, t)], p, 1.0)
                dap.pg[key] = p
            if g.q_cap > 0.0:
                q = prog.add_var(f"qg:{g.name}:{t}", lb=0.0, ub=g.q_cap)
                prog.add_term(blk.q_bal[(g.bus, t)], q, 1.0)
                dap.qg[key] = q
            if g.kind == "upstream" and not pricing_variant:
                up = prog.add_var(f"resup:{g.name}:{t}", lb=0.0)
                dn = prog.add_var(f"resdn:{g.name}:{t}", lb=0.0)
                prog.add_obj(up, c_res + EPS_RESERVE)
                prog.add_obj(dn, c_res + EPS_RESERVE)
                # headroom coupling: pg + up <= cap, pg - dn >= 0
                prog.add_le(f"da:rescap:up:{g.name}:{t}",
                            {dap.pg[key]: 1.0, up: 1.0}, float(g.p_cap[t]))
                prog.add_ge(f"da:rescap:dn:{g.name}:{t}",
                            {dap.pg[key]: 1.0, dn: -1.0}, 0.0)
                dap.res_up[key], dap.res_dn[key] = up, dn

    # hourly reserve adequacy: requested capacity scales with the total
    # load deviation spread (skipped when the multiplier is zero)
    kappa = float(case.costs.get("reserve_adequacy", 0.0))
    upstream = [g for g in case.generators if g.kind == "upstream"]
    if kappa > 0.0 and not pricing_variant and upstream:
        for t in hours:
            spread = math.sqrt(sum(gu.load_stats(b, t)[1]
                                   for b in case.buses))
            if spread <= 0.0:
                continue
            req = kappa * spread
            prog.add_ge(f"da:resreq:up:{t}",
                        {dap.res_up[(g.name, t)]: 1.0 for g in upstream}, req)
            prog.add_ge(f"da:resreq:dn:{t}",
                        {dap.res_dn[(g.name, t)]: 1.0 for g in upstream}, req)

    for s in case.storage:
        for t in hours:
            key = (s.name, t)
            ch = prog.add_var(f"ch:{s.name}:{t}", lb=0.0, ub=s.p_ch_cap)
            dic = prog.add_var(f"dic:{s.name}:{t}", lb=0.0, ub=s.p_dic_cap)
            zch = prog.add_var(f"zch:{s.name}:{t}", binary=True)
            zdic = prog.add_var(f"zdic:{s.name}:{t}", binary=True)
            prog.add_obj(ch, s.cost_ch)
            prog.add_obj(dic, s.cost_dic)
            prog.add_obj(zch, EPS_BINARY)
            prog.add_obj(zdic, EPS_BINARY)
            prog.add_term(blk.p_bal[(s.bus, t)], dic, 1.0)
            prog.add_term(blk.p_bal[(s.bus, t)], ch, -1.0)
            prog.add_le(f"da:zess:{s.name}:{t}", {zch: 1.0, zdic: 1.0}, 1.0)
            dap.ch[key], dap.dic[key] = ch, dic
            dap.zch[key], dap.zdic[key] = zch, zdic
            if pricing_variant:
                prog.add_le(f"da:chcap:{s.name}:{t}",
                            {ch: 1.0, zch: -s.p_ch_cap}, 0.0)
                prog.add_le(f"da:diccap:{s.name}:{t}",
                            {dic: 1.0, zdic: -s.p_dic_cap}, 0.0)
            else:
                chu = prog.add_var(f"chup:{s.name}:{t}", lb=0.0)
                chd = prog.add_var(f"chdn:{s.name}:{t}", lb=0.0)
                diu = prog.add_var(f"dicup:{s.name}:{t}", lb=0.0)
                did = prog.add_var(f"dicdn:{s.name}:{t}", lb=0.0)
                for v in (chu, chd, diu, did):
                    prog.add_obj(v, c_res + EPS_RESERVE)
                prog.add_le(f"da:chcap:{s.name}:{t}",
                            {ch: 1.0, chu: 1.0, zch: -s.p_ch_cap}, 0.0)
                prog.add_ge(f"da:chfloor:{s.name}:{t}",
                            {ch: 1.0, chd: -1.0}, 0.0)
                prog.add_le(f"da:diccap:{s.name}:{t}",
                            {dic: 1.0, diu: 1.0, zdic: -s.p_dic_cap}, 0.0)
                prog.add_ge(f"da:dicfloor:{s.name}:{t}",
                            {dic: 1.0, did: -1.0}, 0.0)
                dap.ch_up[key], dap.ch_dn[key] = chu, chd
                dap.dic_up[key], dap.dic_dn[key] = diu, did

        # SOC recursion on the hours+[T] grid with endpoint pins
        grid = hours + [case.horizon]
        for t in grid:
            dap.soc[(s.name, t)] = prog.add_var(f"soc:{s.name}:{t}",
                                                lb=s.soc_lo, ub=s.soc_hi)
        prog.add_eq(f"da:socini:{s.name}",
                    {dap.soc[(s.name, hours[0])]: 1.0}, s.soc_ini)
        prog.add_eq(f"da:socend:{s.name}",
                    {dap.soc[(s.name, case.horizon)]: 1.0}, s.soc_end)
        for t in hours:
            prog.add_eq(f"da:socrec:{s.name}:{t}",
                        {dap.soc[(s.name, t + 1)]: 1.0,
                         dap.soc[(s.name, t)]: -1.0,
                         dap.ch[(s.name, t)]: -s.eta_ch / s.energy,
                         dap.dic[(s.name, t)]: 1.0 / (s.eta_dic * s.energy)},
                        0.0)

    if fix_from is not None:
        for (k, t), d in fix_from.directions.items():
            prog.fix_var(blk.zp[(k, t)], 1.0 if d == 1 else 0.0)
            prog.fix_var(blk.zm[(k, t)], 0.0 if d == 1 else 1.0)
        for key, v in fix_from.z_ch.items():
            prog.fix_var(dap.zch[key], float(v))
        for key, v in fix_from.z_dic.items():
            prog.fix_var(dap.zdic[key], float(v))
    return dap


def _printed_objective(dap: DayAheadProgram, primal: Mapping[str, float]
                       ) -> float:
    """First-stage cost exactly as the model prints it (energy, DER, ESS
    throughput, network loss), leaving out the epsilon nudges."""
    case = dap.case
    total = 0.0
    for g in case.generators:
        for t in range(case.horizon):
            name = dap.pg.get((g.name, t))
            if name is not None:
                total += float(g.cost[t]) * primal[name]
    for s in case.storage:
        for t in range(case.horizon):
            total += s.cost_ch * primal[dap.ch[(s.name, t)]]
            total += s.cost_dic * primal[dap.dic[(s.name, t)]]
    c_nl = float(case.costs.get("c_nl", 0.0))
    for var, coef in dap.block.loss_terms().items():
        total += c_nl * coef * primal[var]
    c_res = float(case.costs.get("c_reserve", 0.0))
    if c_res:
        for name in list(dap.res_up.values()) + list(dap.res_dn.values()):
            total += c_res * primal[name]
        for m in (dap.ch_up, dap.ch_dn, dap.dic_up, dap.dic_dn):
            for name in m.values():
                total += c_res * primal[name]
    return total


def solve_day_ahead(dap: DayAheadProgram, engine: str = "bnb",
                    **opts) -> DayAheadDispatch:
    """Clear the first stage with integral binaries."""
    opts.setdefault("gap_tol", 1e-8)
    if engine == "bnb":
        sol = solve_misocp_bnb(dap.program, **opts)
    elif engine == "lpbox":
        from .lpbox import solve_misocp_lpbox
        sol = solve_misocp_lpbox(dap.program, **opts)
    else:
        raise DispatchError(f"unknown engine {engine!r}")
    if not sol.ok:
        raise DispatchError(
            f"day-ahead clearing failed: status {sol.status} "
            f"({sol.meta.get('backend_status')})")

    case, blk = dap.case, dap.block
    hours = list(range(case.horizon))
    getv = lambda m: {k: sol.primal[v] for k, v in m.items()}
    # degenerate reserve directions carry solver noise up to gap/epsilon
    resv = lambda m: {k: (0.0 if sol.primal[v] < _SNAP else sol.primal[v])
                      for k, v in m.items()}
    dispatch = DayAheadDispatch(
        hours=hours,
        objective=_printed_objective(dap, sol.primal),
        pg=getv(dap.pg), qg=getv(dap.qg),
        reserve_up=resv(dap.res_up), reserve_dn=resv(dap.res_dn),
        ch=getv(dap.ch), dic=getv(dap.dic), soc=getv(dap.soc),
        ch_res_up=resv(dap.ch_up), ch_res_dn=resv(dap.ch_dn),
        dic_res_up=resv(dap.dic_up), dic_res_dn=resv(dap.dic_dn),
        z_ch={k: int(round(sol.primal[v])) for k, v in dap.zch.items()},
        z_dic={k: int(round(sol.primal[v])) for k, v in dap.zdic.items()},
        directions=blk.direction_assignment(sol),
        pcc_bids=dap.pcc_bids, gamma=dap.gamma,
        solution=sol, block=blk, report=validate_flow(sol, blk))
    sol.meta["flow_block"] = blk
    return dispatch


# ---------------------------------------------------------- second stage ---


@dataclass
class IntradayProgram:
    program: ConicProgram
    block: FlowBlock
    case: NetworkCase
    fixed: DayAheadDispatch
    window: RollingEstimate
    hours: List[int]
    mg_flex: Dict[str, Tuple[np.ndarray, np.ndarray]]
    pg_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    pg_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)
    pr_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    pr_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)
    qg_adj: Dict[Tuple[str, int], str] = field(default_factory=dict)
    qr_adj: Dict[Tuple[str, int], str] = field(default_factory=dict)
    ch_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    ch_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)
    dic_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    dic_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)
    ppc_up: Dict[Tuple[str, int], str] = field(default_factory=dict)
    ppc_dn: Dict[Tuple[str, int], str] = field(default_factory=dict)
    qpc_adj: Dict[Tuple[str, int], str] = field(default_factory=dict)
    soc: Dict[Tuple[str, int], str] = field(default_factory=dict)


def _window_demand(case: NetworkCase, window: RollingEstimate
                   ) -> Dict[int, Dict[int, float]]:
    """Realized nodal load, defaulting to the typical profile."""
    out: Dict[int, Dict[int, float]] = {}
    for b in case.buses:
        series = {}
        for t in window.hours:
            name = f"load:{b}"
            series[t] = (window.value(name, t) if name in window.values
                         else case.load_p(b, t))
        out[b] = series
    return out


def _realized_cap(g, window: RollingEstimate, t: int) -> float:
    name = f"{g.kind}:{g.name}"
    if name in window.values:
        return max(0.0, window.value(name, t))
    return float(g.p_cap[t])


def build_intraday(case: NetworkCase, fixed: DayAheadDispatch,
                   window: RollingEstimate,
                   mg_flex: Optional[PccBids] = None,
                   soc_start: Optional[Mapping[str, float]] = None
                   ) -> IntradayProgram:
    """Assemble one rolling-window re-dispatch SOCP.

    All first-stage quantities enter as pinned constants; the window's
    entry SOC defaults to the day-ahead plan and is overridden by
    `soc_start` once earlier hours have been committed.  The final window
    (one that reaches the end of the horizon) re-pins the terminal SOC.
    """
    hours = list(window.hours)
    if len(hours) > 4:
        raise DispatchError("window longer than 4 hours")
    for p in case.pcc_points:
        if p.name not in fixed.pcc_bids:
            raise DispatchError(f"missing first-stage bid for PCC {p.name}")
    flex = {p.name: _bid_series(mg_flex, p.name, case.horizon)
            for p in case.pcc_points}

    # fixed PCC part on the balance rhs: first-stage bid + MG flexibility
    pcc_fixed = {name: (fixed.pcc_bids[name][0] + flex[name][0],
                        fixed.pcc_bids[name][1] + flex[name][1])
                 for name in flex}
    demand = _window_demand(case, window)
    try:
        directions = {(k, t): fixed.directions[(k, t)]
                      for k in range(len(case.feeders)) for t in hours}
    except KeyError as e:
        raise DispatchError(
            f"first-stage direction missing for feeder/hour {e}") from None

    prog = ConicProgram("intraday")
    blk = build_directed_flow(prog, case, hours, demand, directions,
                              pcc_injections=pcc_fixed, prefix="id")
    idp = IntradayProgram(prog, blk, case, fixed, window, hours,
                          {k: v for k, v in flex.items()})

    c_r = float(case.costs.get("c_2d", 0.0))
    c_ppc = float(case.costs.get("c_ppc", 0.0))
    for var, coef in blk.loss_terms().items():
        prog.add_obj(var, EPS_LOSS * coef)

    def pin(name: str, value: float) -> str:
        return prog.add_var(name, lb=float(value), ub=float(value))

    for g in case.generators:
        for t in hours:
            key = (g.name, t)
            if g.kind != "compensator":
                base = pin(f"fx:pg:{g.name}:{t}", fixed.pg[key])
                prog.add_term(blk.p_bal[(g.bus, t)], base, 1.0)
            if key in fixed.qg:
                qbase = pin(f"fx:qg:{g.name}:{t}", fixed.qg[key])
                prog.add_term(blk.q_bal[(g.bus, t)], qbase, 1.0)
                qadj = prog.add_var(f"adj:q:{g.name}:{t}")
                prog.add_term(blk.q_bal[(g.bus, t)], qadj, 1.0)
                prog.add_le(f"id:qcap:{g.name}:{t}",
                            {qbase: 1.0, qadj: 1.0}, g.q_cap)
                prog.add_ge(f"id:qfloor:{g.name}:{t}",
                            {qbase: 1.0, qadj: 1.0}, 0.0)
                tgt = idp.qg_adj if g.kind == "upstream" else idp.qr_adj
                tgt[key] = qadj
            if g.kind == "upstream":
                up = prog.add_var(f"adj:pg+:{g.name}:{t}", lb=0.0,
                                  ub=max(0.0, fixed.reserve_up[key]))
                dn = prog.add_var(f"adj:pg-:{g.name}:{t}", lb=0.0,
                                  ub=max(0.0, fixed.reserve_dn[key]))
                prog.add_obj(up, c_r)
                prog.add_obj(dn, c_r)
                prog.add_term(blk.p_bal[(g.bus, t)], up, 1.0)
                prog.add_term(blk.p_bal[(g.bus, t)], dn, -1.0)
                prog.add_le(f"id:pgcap:{g.name}:{t}",
                            {base: 1.0, up: 1.0, dn: -1.0},
                            float(g.p_cap[t]))
                prog.add_ge(f"id:pgfloor:{g.name}:{t}",
                            {base: 1.0, up: 1.0, dn: -1.0}, 0.0)
                idp.pg_up[key], idp.pg_dn[key] = up, dn
            elif g.kind != "compensator":
                up = prog.add_var(f"adj:pr+:{g.name}:{t}", lb=0.0)
                dn = prog.add_var(f"adj:pr-:{g.name}:{t}", lb=0.0)
                prog.add_obj(up, c_r)
                prog.add_obj(dn, c_r)
                prog.add_term(blk.p_bal[(g.bus, t)], up, 1.0)
                prog.add_term(blk.p_bal[(g.bus, t)], dn, -1.0)
                prog.add_le(f"id:prcap:{g.name}:{t}",
                            {base: 1.0, up: 1.0, dn: -1.0},
                            _realized_cap(g, window, t))
                prog.add_ge(f"id:prfloor:{g.name}:{t}",
                            {base: 1.0, up: 1.0, dn: -1.0}, 0.0)
                idp.pr_up[key], idp.pr_dn[key] = up, dn

    for s in case.storage:
        net_terms: Dict[int, Dict[str, float]] = {}
        for t in hours:
            key = (s.name, t)
            chb = pin(f"fx:ch:{s.name}:{t}", fixed.ch[key])
            dib = pin(f"fx:dic:{s.name}:{t}", fixed.dic[key])
            prog.add_term(blk.p_bal[(s.bus, t)], dib, 1.0)
            prog.add_term(blk.p_bal[(s.bus, t)], chb, -1.0)
            chu = prog.add_var(f"adj:ch+:{s.name}:{t}", lb=0.0,
                               ub=max(0.0, fixed.ch_res_up[key]))
            chd = prog.add_var(f"adj:ch-:{s.name}:{t}", lb=0.0,
                               ub=max(0.0, fixed.ch_res_dn[key]))
            diu = prog.add_var(f"adj:dic+:{s.name}:{t}", lb=0.0,
                               ub=max(0.0, fixed.dic_res_up[key]))
            did = prog.add_var(f"adj:dic-:{s.name}:{t}", lb=0.0,
                               ub=max(0.0, fixed.dic_res_dn[key]))
            for v in (chu, chd, diu, did):
                prog.add_obj(v, c_r)
            prog.add_term(blk.p_bal[(s.bus, t)], chu, -1.0)
            prog.add_term(blk.p_bal[(s.bus, t)], chd, 1.0)
            prog.add_term(blk.p_bal[(s.bus, t)], diu, 1.0)
            prog.add_term(blk.p_bal[(s.bus, t)], did, -1.0)
            prog.add_le(f"id:chcap:{s.name}:{t}",
                        {chb: 1.0, chu: 1.0, chd: -1.0},
                        fixed.z_ch[key] * s.p_ch_cap)
            prog.add_ge(f"id:chfloor:{s.name}:{t}",
                        {chb: 1.0, chu: 1.0, chd: -1.0}, 0.0)
            prog.add_le(f"id:diccap:{s.name}:{t}",
                        {dib: 1.0, diu: 1.0, did: -1.0},
                        fixed.z_dic[key] * s.p_dic_cap)
            prog.add_ge(f"id:dicfloor:{s.name}:{t}",
                        {dib: 1.0, diu: 1.0, did: -1.0}, 0.0)
            idp.ch_up[key], idp.ch_dn[key] = chu, chd
            idp.dic_up[key], idp.dic_dn[key] = diu, did
            net_terms[t] = {chb: s.eta_ch, chu: s.eta_ch, chd: -s.eta_ch,
                            dib: -1.0 / s.eta_dic, diu: -1.0 / s.eta_dic,
                            did: 1.0 / s.eta_dic}

        grid = hours + [hours[-1] + 1]
        for t in grid:
            idp.soc[(s.name, t)] = prog.add_var(f"soc:{s.name}:{t}",
                                                lb=s.soc_lo, ub=s.soc_hi)
        start = (soc_start[s.name] if soc_start and s.name in soc_start
                 else fixed.soc[(s.name, hours[0])])
        prog.add_eq(f"id:socini:{s.name}",
                    {idp.soc[(s.name, hours[0])]: 1.0}, float(start))
        if hours[-1] + 1 == case.horizon:
            prog.add_eq(f"id:socend:{s.name}",
                        {idp.soc[(s.name, case.horizon)]: 1.0}, s.soc_end)
        for t in hours:
            coeffs = {idp.soc[(s.name, t + 1)]: 1.0,
                      idp.soc[(s.name, t)]: -1.0}
            for v, c in net_terms[t].items():
                coeffs[v] = -c / s.energy
            prog.add_eq(f"id:socrec:{s.name}:{t}", coeffs, 0.0)

    for p in case.pcc_points:
        for t in hours:
            key = (p.name, t)
            up = prog.add_var(f"adj:ppc+:{p.name}:{t}", lb=0.0)
            dn = prog.add_var(f"adj:ppc-:{p.name}:{t}", lb=0.0)
            qa = prog.add_var(f"adj:qpc:{p.name}:{t}")
            prog.add_obj(up, c_ppc)
            prog.add_obj(dn, c_ppc)
            # a larger net import is a larger withdrawal at the bus
            prog.add_term(blk.p_bal[(p.bus, t)], up, -1.0)
            prog.add_term(blk.p_bal[(p.bus, t)], dn, 1.0)
            prog.add_term(blk.q_bal[(p.bus, t)], qa, -1.0)
            base_p = float(pcc_fixed[p.name][0][t])
            base_q = float(pcc_fixed[p.name][1][t])
            prog.add_le(f"id:pcccap:hi:{p.name}:{t}",
                        {up: 1.0, dn: -1.0}, p.p_cap - base_p)
            prog.add_ge(f"id:pcccap:lo:{p.name}:{t}",
                        {up: 1.0, dn: -1.0}, -p.p_cap - base_p)
            prog.add_le(f"id:qpccap:hi:{p.name}:{t}",
                        {qa: 1.0}, p.q_cap - base_q)
            prog.add_ge(f"id:qpccap:lo:{p.name}:{t}",
                        {qa: 1.0}, -p.q_cap - base_q)
            idp.ppc_up[key], idp.ppc_dn[key] = up, dn
            idp.qpc_adj[key] = qa

    return idp


def solve_intraday(idp: IntradayProgram, **opts) -> IntradayAdjustment:
    """Solve one window; continuous only (directions are data here)."""
    sol = solve_socp(idp.program, **opts)
    if not sol.ok:
        raise DispatchError(
            f"window starting hour {idp.hours[0]} infeasible: "
            f"status {sol.status}")
    case = idp.case
    c_r = float(case.costs.get("c_2d", 0.0))
    c_ppc = float(case.costs.get("c_ppc", 0.0))
    getv = lambda m: {k: sol.primal[v] for k, v in m.items()}
    deployments = 0.0
    for m in (idp.pg_up, idp.pg_dn, idp.pr_up, idp.pr_dn,
              idp.ch_up, idp.ch_dn, idp.dic_up, idp.dic_dn):
        deployments += sum(sol.primal[v] for v in m.values())
    counter = sum(sol.primal[v] for m in (idp.ppc_up, idp.ppc_dn)
                  for v in m.values())
    net_p, net_q = {}, {}
    for p in case.pcc_points:
        for t in idp.hours:
            key = (p.name, t)
            fixed_p = float(idp.fixed.pcc_bids[p.name][0][t]
                            + idp.mg_flex[p.name][0][t])
            fixed_q = float(idp.fixed.pcc_bids[p.name][1][t]
                            + idp.mg_flex[p.name][1][t])
            net_p[key] = fixed_p + sol.primal[idp.ppc_up[key]] \
                - sol.primal[idp.ppc_dn[key]]
            net_q[key] = fixed_q + sol.primal[idp.qpc_adj[key]]
    sol.meta["flow_block"] = idp.block
    return IntradayAdjustment(
        window=idp.window, hours=idp.hours,
        objective=c_r * deployments + c_ppc * counter,
        pg_up=getv(idp.pg_up), pg_dn=getv(idp.pg_dn),
        pr_up=getv(idp.pr_up), pr_dn=getv(idp.pr_dn),
        qg_adj=getv(idp.qg_adj), qr_adj=getv(idp.qr_adj),
        ch_up=getv(idp.ch_up), ch_dn=getv(idp.ch_dn),
        dic_up=getv(idp.dic_up), dic_dn=getv(idp.dic_dn),
        ppc_up=getv(idp.ppc_up), ppc_dn=getv(idp.ppc_dn),
        qpc_adj=getv(idp.qpc_adj), soc=getv(idp.soc),
        pcc_net_p=net_p, pcc_net_q=net_q,
        solution=sol, block=idp.block,
        report=validate_flow(sol, idp.block))
