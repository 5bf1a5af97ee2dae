"""Two-stage market coordination.

Stage 1 iterates day-ahead clearing, nodal pricing, and microgrid best
responses to a price fixed point.  Stage 2 rolls 4-hour flexibility windows
across the horizon, alternating coalition and DSO adjustment solves inside
each window until the exchanged PCC vectors agree, committing only the first
hour.  ``settle`` turns a finished run into a double-entry cash ledger plus
the two summary tables.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dso import (
    DayAheadDispatch,
    DispatchError,
    IntradayAdjustment,
    build_day_ahead,
    build_intraday,
    day_ahead_sensitivity,
    solve_day_ahead,
    solve_intraday,
)
from .microgrid import (
    CoalitionResult,
    EnergyBid,
    FlexContract,
    MicrogridCase,
    MicrogridError,
    aggregate_pcc_flex,
    solve_coalition_flex,
    solve_energy_bid,
)
from .network import NetworkCase
from .pricing import PriceSurface, compute_ccudlmp
from .uncertainty import (
    GaussianUncertainty,
    Realization,
    RollingEstimate,
    SensitivityMatrix,
    rolling_estimate,
    sample_realization,
)

__all__ = [
    "CoordinationError",
    "GameParams",
    "FirstStageResult",
    "WindowResult",
    "SecondStageResult",
    "Settlement",
    "MarketOutcome",
    "MODES",
    "typical_realization",
    "deterministic_clone",
    "run_first_stage",
    "run_second_stage",
    "settle",
    "ablation_run",
]

MODES = ("benchmark", "dlmp", "no_p2p")

ENERGY_COLUMNS = (
    "Entity",
    "Operating cost/$",
    "Power injection/MW",
    "Wind energy/MW",
    "PV energy/MW",
    "Charging energy/MW",
    "Discharging energy/MW",
    "Load shedding/MW",
    "Energy exchange/MW",
)

FLEX_COLUMNS = (
    "Entity",
    "Operating cost/$",
    "Power injection +/MW",
    "Power injection -/MW",
    "Wind energy +/MW",
    "Wind energy -/MW",
    "PV energy +/MW",
    "PV energy -/MW",
    "Load shedding +/MW",
    "Load shedding -/MW",
    "Import from DSO +/MW",
    "Import from DSO -/MW",
    "Import from P2P trading/MW",
    "Export from P2P trading/MW",
)


class CoordinationError(RuntimeError):
    """A stage aborted: bad wiring, an infeasible window, or broken books."""


@dataclass(frozen=True)
class GameParams:
    """Stopping rules for both stages."""

    eps_price: float = 1e-3  # $/MWh, day-ahead price fixed point
    eps_flex: float = 1e-4  # MW, agreement of exchanged PCC adjustments
    max_outer: int = 50  # iteration cap, per stage / per window
    windows: int = 24  # rolling windows (capped by the case horizon)

    def __post_init__(self) -> None:
        if self.eps_price <= 0.0 or self.eps_flex <= 0.0:
            raise ValueError("convergence tolerances must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if self.windows < 1:
            raise ValueError("windows must be at least 1")


def _thread_count(n_tasks: int) -> int:
    raw = os.environ.get("GRIDMARKET_THREADS", "").strip()
    if raw:
        try:
            limit = int(raw)
        except ValueError as exc:
            raise CoordinationError(f"GRIDMARKET_THREADS={raw!r} is not an integer") from exc
    else:
        limit = os.cpu_count() or 1
    return max(1, min(n_tasks, limit))


def typical_realization(gu: GaussianUncertainty) -> Realization:
    """The deviation-free trajectory: every source pinned to its typical profile."""
    series = {s.name: np.asarray(s.typical, dtype=float).copy() for s in gu.sources}
    return Realization(series=series, seed=-1, tan_theta=gu.tan_theta)


def deterministic_clone(gu: GaussianUncertainty) -> GaussianUncertainty:
    """The same sources with the deviation law switched off."""
    zero = np.zeros(gu.horizon)
    sources = [dataclasses.replace(s, mu=zero.copy(), std=zero.copy()) for s in gu.sources]
    return GaussianUncertainty(
        sources=sources,
        corr_lambda=gu.corr_lambda,
        tan_theta=gu.tan_theta,
        horizon=gu.horizon,
    )


# ---------------------------------------------------------------------------
# stage 1: day-ahead price / bid fixed point


@dataclass
class FirstStageResult:
    dispatch: DayAheadDispatch
    bids: Dict[str, EnergyBid]
    surface: PriceSurface
    iterations: int
    converged: bool
    trace: List[Dict[str, object]]
    deltas: List[float]  # ||tau_k - tau_{k-1}||_inf, one entry per pass >= 2
    pcc_bus: Dict[str, int]
    sensitivity: Optional[SensitivityMatrix]
    gamma: float

    @property
    def contraction_ratios(self) -> List[float]:
        out: List[float] = []
        for prev, cur in zip(self.deltas, self.deltas[1:]):
            if prev > 0.0:
                out.append(cur / prev)
        return out


def _pcc_buses(case: NetworkCase, mgs: Sequence[MicrogridCase]) -> Dict[str, int]:
    points = {p.name: p for p in case.pcc_points}
    missing = [mg.name for mg in mgs if mg.name not in points]
    if missing:
        raise CoordinationError(f"no PCC point for microgrid(s) {', '.join(missing)}")
    for mg in mgs:
        point = points[mg.name]
        if mg.p_pc > point.p_cap + 1e-9 or mg.q_pc > point.q_cap + 1e-9:
            raise CoordinationError(
                f"microgrid {mg.name} exchange rating ({mg.p_pc}, {mg.q_pc}) "
                f"exceeds its PCC envelope ({point.p_cap}, {point.q_cap})"
            )
    return {mg.name: points[mg.name].bus for mg in mgs}


def _pcc_prices(surface: PriceSurface, buses: Mapping[str, int], horizon: int) -> Dict[str, np.ndarray]:
    return {
        name: np.array([surface.price(bus, t) for t in range(horizon)])
        for name, bus in buses.items()
    }


def _best_responses(
    mgs: Sequence[MicrogridCase],
    tau: Mapping[str, np.ndarray],
    gu: GaussianUncertainty,
    gamma: float,
    engine: str,
    opts: Mapping[str, object],
) -> Dict[str, EnergyBid]:
    # immutable price snapshots; joined in MG order
    snaps = {mg.name: tuple(float(v) for v in tau[mg.name]) for mg in mgs}

    def solve_one(mg: MicrogridCase) -> EnergyBid:
        return solve_energy_bid(mg, snaps[mg.name], gu=gu, gamma=gamma, engine=engine, **opts)

    workers = _thread_count(len(mgs))
    if workers == 1:
        return {mg.name: solve_one(mg) for mg in mgs}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(solve_one, mg) for mg in mgs]
        return {mg.name: fut.result() for mg, fut in zip(mgs, futures)}


def run_first_stage(
    case: NetworkCase,
    mgs: Sequence[MicrogridCase],
    gu: GaussianUncertainty,
    params: Optional[GameParams] = None,
    gamma: float = 0.05,
    engine: str = "bnb",
    sensitivity: Optional[SensitivityMatrix] = None,
    **opts: object,
) -> FirstStageResult:
    """Iterate clearing, pricing, and best responses to a price fixed point.

    Each pass clears the network against the standing bids and prices the
    result; from the third pass on, the pass starts by comparing the two
    newest prices and stops if they agree within ``eps_price``.  The returned
    dispatch, bids, and surface form one consistent clearing.
    """
    p = params or GameParams()
    names = [mg.name for mg in mgs]
    if len(set(names)) != len(names):
        raise CoordinationError("duplicate microgrid names")
    for mg in mgs:
        if mg.horizon != case.horizon:
            raise CoordinationError(
                f"microgrid {mg.name} horizon {mg.horizon} != case horizon {case.horizon}"
            )
    buses = _pcc_buses(case, mgs)
    if sensitivity is None:
        sensitivity = day_ahead_sensitivity(case, gu, engine=engine, **opts)

    bids_next: Dict[str, EnergyBid] = {}  # responses awaiting the next clearing
    bids_used: Dict[str, EnergyBid] = {}
    dispatch: Optional[DayAheadDispatch] = None
    surface: Optional[PriceSurface] = None
    tau_prev: Optional[Dict[str, np.ndarray]] = None
    trace: List[Dict[str, object]] = []
    deltas: List[float] = []
    k = 0
    converged = False

    while True:
        if k >= 2 and deltas and deltas[-1] <= p.eps_price:
            converged = True
            break
        if k >= p.max_outer:
            break  # iteration limit: report the last iterate
        bids_used = dict(bids_next)
        y = {name: (bid.ppc, bid.qpc) for name, bid in bids_used.items()}
        dap = build_day_ahead(case, gu, pcc_bids=y, gamma=gamma, sensitivity=sensitivity)
        dispatch = solve_day_ahead(dap, engine=engine, **opts)
        surface = compute_ccudlmp(case, gu, pcc_bids=y, fixed=dispatch, sensitivity=sensitivity)
        tau = _pcc_prices(surface, buses, case.horizon)
        k += 1
        row: Dict[str, object] = {
            "k": k,
            "objective": float(dispatch.objective),
            "tau": {name: [float(v) for v in vec] for name, vec in tau.items()},
        }
        if tau_prev is not None:
            delta = max(
                (float(np.max(np.abs(tau[n] - tau_prev[n]))) for n in names),
                default=0.0,
            )
            deltas.append(delta)
            row["delta"] = delta
        trace.append(row)
        if not mgs:
            converged = True
            break
        tau_prev = tau
        bids_next = _best_responses(mgs, tau, gu, gamma, engine, opts)

    assert dispatch is not None and surface is not None
    return FirstStageResult(
        dispatch=dispatch,
        bids=bids_used,
        surface=surface,
        iterations=k,
        converged=converged,
        trace=trace,
        deltas=deltas,
        pcc_bus=buses,
        sensitivity=sensitivity,
        gamma=gamma,
    )


# ---------------------------------------------------------------------------
# stage 2: rolling intra-day flexibility windows


@dataclass
class WindowResult:
    s: int
    hours: List[int]
    iterations: int
    converged: bool
    residual: float
    coalition: Optional[CoalitionResult]
    dso: IntradayAdjustment
    mg_flex: Dict[str, Tuple[np.ndarray, np.ndarray]]
    counter: Dict[str, Tuple[np.ndarray, np.ndarray]]
    committed_contracts: List[FlexContract]
    committed_cost_dso: float
    committed_cost_mg: Dict[str, float]  # full, including request charges
    committed_request: Dict[str, float]  # $ paid by each MG for PCC requests
    committed_counter: Dict[str, float]  # $ charged per PCC for DSO counters

    @property
    def committed_hour(self) -> int:
        return self.hours[0]


@dataclass
class SecondStageResult:
    windows: List[WindowResult]
    converged: bool
    realization: Realization

    @property
    def contracts(self) -> List[FlexContract]:
        return [c for w in self.windows for c in w.committed_contracts]

    @property
    def cost(self) -> float:
        return sum(
            w.committed_cost_dso + sum(w.committed_cost_mg.values()) for w in self.windows
        )


def _window(realization: Realization, s: int, horizon: int) -> RollingEstimate:
    if realization.series:
        return rolling_estimate(realization, s)
    if not 1 <= s <= horizon:
        raise CoordinationError(f"window step {s} outside 1..{horizon}")
    return RollingEstimate(s=s, hours=list(range(s - 1, min(s + 3, horizon))), values={})


def _dso_counter(
    case: NetworkCase, adj: IntradayAdjustment, horizon: int
) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    out: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for point in case.pcc_points:
        ap = np.zeros(horizon)
        aq = np.zeros(horizon)
        for t in adj.hours:
            ap[t] = adj.ppc_up[(point.name, t)] - adj.ppc_dn[(point.name, t)]
            aq[t] = adj.qpc_adj[(point.name, t)]
        out[point.name] = (ap, aq)
    return out


def _counter_residual(
    new: Mapping[str, Tuple[np.ndarray, np.ndarray]],
    old: Mapping[str, Tuple[np.ndarray, np.ndarray]],
    names: Sequence[str],
) -> float:
    worst = 0.0
    for name in names:
        np_new, nq_new = new[name]
        np_old, nq_old = old[name]
        worst = max(
            worst,
            float(np.max(np.abs(np_new - np_old), initial=0.0)),
            float(np.max(np.abs(nq_new - nq_old), initial=0.0)),
        )
    return worst


def _sum_at(values: Mapping[Tuple[str, int], float], hour: int) -> float:
    return sum(v for (_, t), v in values.items() if t == hour)


def _committed_dso_cost(case: NetworkCase, adj: IntradayAdjustment, hour: int) -> Tuple[float, Dict[str, float]]:
    c_2d = float(case.costs.get("c_2d", 0.0))
    c_ppc = float(case.costs.get("c_ppc", 0.0))
    deployed = sum(
        _sum_at(part, hour)
        for part in (
            adj.pg_up,
            adj.pg_dn,
            adj.pr_up,
            adj.pr_dn,
            adj.ch_up,
            adj.ch_dn,
            adj.dic_up,
            adj.dic_dn,
        )
    )
    counters = {
        point.name: c_ppc
        * (adj.ppc_up.get((point.name, hour), 0.0) + adj.ppc_dn.get((point.name, hour), 0.0))
        for point in case.pcc_points
    }
    return c_2d * deployed + sum(counters.values()), counters


def _committed_mg_costs(
    mgs: Sequence[MicrogridCase], coalition: CoalitionResult, hour: int
) -> Tuple[Dict[str, float], Dict[str, float]]:
    costs: Dict[str, float] = {}
    requests: Dict[str, float] = {}
    for mg in mgs:
        adj = coalition.adjustments[mg.name]
        deployed = sum(
            _sum_at(part, hour)
            for part in (adj.pr_up, adj.pr_dn, adj.ch_up, adj.ch_dn, adj.dic_up, adj.dic_dn)
        )
        shed = adj.shed_up.get(hour, 0.0) + adj.shed_dn.get(hour, 0.0)
        request = mg.cost("c_fs") * (adj.ppc_up.get(hour, 0.0) + adj.ppc_dn.get(hour, 0.0))
        costs[mg.name] = mg.cost("c_2m") * deployed + mg.cost("c_2pc") * shed + request
        requests[mg.name] = request
    return costs, requests


def _solve_window(
    case: NetworkCase,
    mgs: Sequence[MicrogridCase],
    first: FirstStageResult,
    window: RollingEstimate,
    params: GameParams,
    allow_trades: bool,
    soc_mg: Dict[Tuple[str, str], float],
    soc_dso: Dict[str, float],
    opts: Mapping[str, object],
) -> WindowResult:
    horizon = case.horizon
    names = [mg.name for mg in mgs]
    counter: Dict[str, Tuple[np.ndarray, np.ndarray]] = {
        point.name: (np.zeros(horizon), np.zeros(horizon)) for point in case.pcc_points
    }
    coalition: Optional[CoalitionResult] = None
    mg_flex: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    adj: Optional[IntradayAdjustment] = None
    residual = 0.0
    l = 0
    converged = False
    while l < params.max_outer:
        if mgs:
            coalition = solve_coalition_flex(
                mgs,
                first.bids,
                window,
                dso_adj=counter,
                soc_start=soc_mg or None,
                allow_trades=allow_trades,
                **opts,
            )
            mg_flex = aggregate_pcc_flex(coalition.contracts, coalition.adjustments, horizon)
        idp = build_intraday(case, first.dispatch, window, mg_flex=mg_flex, soc_start=soc_dso or None)
        adj = solve_intraday(idp, **opts)
        fresh = _dso_counter(case, adj, horizon)
        residual = _counter_residual(fresh, counter, names)
        l += 1
        if residual <= params.eps_flex:
            counter = fresh
            converged = True
            break
        counter = fresh

    assert adj is not None
    h0 = window.hours[0]
    cost_dso, counters = _committed_dso_cost(case, adj, h0)
    if coalition is not None:
        cost_mg, requests = _committed_mg_costs(mgs, coalition, h0)
        contracts = [c for c in coalition.contracts if c.hour == h0]
    else:
        cost_mg, requests, contracts = {}, {}, []
    return WindowResult(
        s=window.s,
        hours=list(window.hours),
        iterations=l,
        converged=converged,
        residual=residual,
        coalition=coalition,
        dso=adj,
        mg_flex=mg_flex,
        counter=counter,
        committed_contracts=contracts,
        committed_cost_dso=cost_dso,
        committed_cost_mg=cost_mg,
        committed_request=requests,
        committed_counter=counters,
    )


def run_second_stage(
    case: NetworkCase,
    mgs: Sequence[MicrogridCase],
    first: FirstStageResult,
    realization: Realization,
    params: Optional[GameParams] = None,
    allow_trades: bool = True,
    **opts: object,
) -> SecondStageResult:
    """Roll flexibility windows across the horizon, committing hour by hour.

    Inside each window the coalition and the DSO alternate until the DSO's
    counter-adjustment stops moving (both sides then agree on the exchanged
    PCC quantities).  Only the first hour of a window is committed; committed
    storage trajectories carry into the next window.  An infeasible window
    aborts the stage; a window that merely hits the iteration cap is reported
    and committed as-is.
    """
    p = params or GameParams()
    names = [mg.name for mg in mgs]
    if mgs and set(first.bids) != set(names):
        raise CoordinationError("first-stage bids do not cover the microgrids")
    if realization.series and realization.horizon != case.horizon:
        raise CoordinationError(
            f"realization horizon {realization.horizon} != case horizon {case.horizon}"
        )
    soc_mg: Dict[Tuple[str, str], float] = {}
    soc_dso: Dict[str, float] = {}
    windows: List[WindowResult] = []
    all_converged = True
    steps = min(p.windows, case.horizon)
    for s in range(1, steps + 1):
        window = _window(realization, s, case.horizon)
        try:
            result = _solve_window(case, mgs, first, window, p, allow_trades, soc_mg, soc_dso, opts)
        except (DispatchError, MicrogridError) as exc:
            raise CoordinationError(f"window {s} aborted: {exc}") from exc
        windows.append(result)
        all_converged = all_converged and result.converged
        h0 = result.committed_hour
        if result.coalition is not None:
            for mg in mgs:
                adj = result.coalition.adjustments[mg.name]
                for store in mg.storage:
                    soc_mg[(mg.name, store.name)] = adj.soc[(store.name, h0 + 1)]
        for store in case.storage:
            soc_dso[store.name] = result.dso.soc[(store.name, h0 + 1)]
    return SecondStageResult(windows=windows, converged=all_converged, realization=realization)


# ---------------------------------------------------------------------------
# settlement


@dataclass
class Settlement:
    cashflows: List[Dict[str, object]]  # entity, item, amount (+receipt / -payment)
    energy_table: List[Dict[str, object]]
    flex_table: List[Dict[str, object]]
    totals: Dict[str, float]  # net transfer position per entity
    real_costs: Dict[str, float]  # recorded operating (sink) costs per entity
    conservation: float


@dataclass
class MarketOutcome:
    mode: str
    params: GameParams
    case: NetworkCase
    mgs: List[MicrogridCase]
    first: FirstStageResult
    second: SecondStageResult
    seed: int
    settlement: Optional[Settlement] = None

    @property
    def first_stage_cost(self) -> float:
        return float(self.first.dispatch.objective)

    @property
    def second_stage_cost(self) -> float:
        return self.second.cost


def _energy_table(outcome: MarketOutcome) -> List[Dict[str, object]]:
    first = outcome.first
    case = outcome.case
    dispatch = first.dispatch
    hours = range(case.horizon)
    by_kind: Dict[str, float] = {"upstream": 0.0, "wind": 0.0, "pv": 0.0}
    for gen in case.generators:
        total = sum(dispatch.pg.get((gen.name, t), 0.0) for t in hours)
        by_kind[gen.kind] = by_kind.get(gen.kind, 0.0) + total
    ch = sum(dispatch.ch.values())
    dic = sum(dispatch.dic.values())
    exchange = sum(sum(p_arr) for p_arr, _ in dispatch.pcc_bids.values())
    rows: List[Dict[str, object]] = [
        {
            "Entity": "DSO",
            "Operating cost/$": float(dispatch.objective),
            "Power injection/MW": by_kind["upstream"],
            "Wind energy/MW": by_kind["wind"],
            "PV energy/MW": by_kind["pv"],
            "Charging energy/MW": float(ch),
            "Discharging energy/MW": float(dic),
            "Load shedding/MW": None,
            "Energy exchange/MW": None,
        }
    ]
    for mg in outcome.mgs:
        bid = first.bids.get(mg.name)
        if bid is None:
            continue
        der_kind: Dict[str, float] = {"wind": 0.0, "pv": 0.0}
        for der in mg.ders:
            total = sum(bid.pr[(der.name, t)] for t in hours)
            der_kind[der.kind] = der_kind.get(der.kind, 0.0) + total
        rows.append(
            {
                "Entity": mg.name,
                "Operating cost/$": -float(bid.objective),
                "Power injection/MW": None,
                "Wind energy/MW": der_kind["wind"],
                "PV energy/MW": der_kind["pv"],
                "Charging energy/MW": float(sum(bid.ch.values())),
                "Discharging energy/MW": float(sum(bid.dic.values())),
                "Load shedding/MW": float(sum(bid.shed_p)),
                "Energy exchange/MW": float(sum(bid.ppc)),
            }
        )
    return rows


def _flex_table(outcome: MarketOutcome) -> List[Dict[str, object]]:
    case = outcome.case
    dso = {key: 0.0 for key in FLEX_COLUMNS[1:]}
    gen_kind = {gen.name: gen.kind for gen in case.generators}
    slot = {"upstream": "Power injection", "wind": "Wind energy", "pv": "PV energy"}
    per_mg: Dict[str, Dict[str, float]] = {
        mg.name: {key: 0.0 for key in FLEX_COLUMNS[1:]} for mg in outcome.mgs
    }
    der_kind = {
        mg.name: {der.name: der.kind for der in mg.ders} for mg in outcome.mgs
    }
    for window in outcome.second.windows:
        h0 = window.committed_hour
        dso["Operating cost/$"] += window.committed_cost_dso
        for (name, t), v in window.dso.pg_up.items():
            if t == h0:
                dso[f"{slot[gen_kind[name]]} +/MW"] += v
        for (name, t), v in window.dso.pg_dn.items():
            if t == h0:
                dso[f"{slot[gen_kind[name]]} -/MW"] += v
        for (name, t), v in window.dso.pr_up.items():
            if t == h0:
                dso[f"{slot[gen_kind[name]]} +/MW"] += v
        for (name, t), v in window.dso.pr_dn.items():
            if t == h0:
                dso[f"{slot[gen_kind[name]]} -/MW"] += v
        if window.coalition is None:
            continue
        for mg_name, cost in window.committed_cost_mg.items():
            per_mg[mg_name]["Operating cost/$"] += cost
        for mg_name, adj in window.coalition.adjustments.items():
            acc = per_mg[mg_name]
            kinds = der_kind[mg_name]
            for (name, t), v in adj.pr_up.items():
                if t == h0:
                    acc[f"{slot[kinds[name]]} +/MW"] += v
            for (name, t), v in adj.pr_dn.items():
                if t == h0:
                    acc[f"{slot[kinds[name]]} -/MW"] += v
            acc["Load shedding +/MW"] += adj.shed_up.get(h0, 0.0)
            acc["Load shedding -/MW"] += adj.shed_dn.get(h0, 0.0)
            acc["Import from DSO +/MW"] += adj.ppc_up.get(h0, 0.0)
            acc["Import from DSO -/MW"] += adj.ppc_dn.get(h0, 0.0)
        for contract in window.committed_contracts:
            per_mg[contract.buyer]["Import from P2P trading/MW"] += contract.p
            per_mg[contract.seller]["Export from P2P trading/MW"] += contract.p

    def finish(entity: str, acc: Dict[str, float], skip: Sequence[str]) -> Dict[str, object]:
        row: Dict[str, object] = {"Entity": entity}
        for key in FLEX_COLUMNS[1:]:
            row[key] = None if key in skip else float(acc[key])
        return row

    mg_skip = ("Power injection +/MW", "Power injection -/MW")
    dso_skip = (
        "Load shedding +/MW",
        "Load shedding -/MW",
        "Import from DSO +/MW",
        "Import from DSO -/MW",
        "Import from P2P trading/MW",
        "Export from P2P trading/MW",
    )
    rows = [finish("DSO", dso, dso_skip)]
    rows.extend(finish(mg.name, per_mg[mg.name], mg_skip) for mg in outcome.mgs)
    return rows


def settle(outcome: MarketOutcome) -> Settlement:
    """Build the cash ledger, the summary tables, and check the books.

    Every transfer appears with both legs; the two energy legs are computed
    from independent records (microgrid bids vs the dispatch's PCC series),
    so the conservation check is a genuine cross-check, not an identity.
    """
    first = outcome.first
    case = outcome.case
    hours = range(case.horizon)
    cashflows: List[Dict[str, object]] = []

    def post(entity: str, item: str, amount: float) -> None:
        cashflows.append({"entity": entity, "item": item, "amount": float(amount)})

    # energy settlement at the posted PCC prices
    dso_energy = 0.0
    for name, (p_arr, _) in sorted(first.dispatch.pcc_bids.items()):
        bus = first.pcc_bus.get(name)
        if bus is None:
            point = next(pt for pt in case.pcc_points if pt.name == name)
            bus = point.bus
        dso_energy += sum(first.surface.price(bus, t) * float(p_arr[t]) for t in hours)
    post("DSO", "energy", dso_energy)
    for name in sorted(first.bids):
        bid = first.bids[name]
        bus = first.pcc_bus[name]
        revenue = -sum(first.surface.price(bus, t) * float(bid.ppc[t]) for t in hours)
        post(name, "energy", revenue)

    # committed P2P contracts at their recorded bases
    for window in outcome.second.windows:
        for c in window.committed_contracts:
            post(c.seller, "p2p-sale", c.basis_sell * c.p)
            post(c.buyer, "p2p-purchase", -c.basis_buy * c.p)
            post("DSO", "p2p-margin", (c.basis_buy - c.basis_sell) * c.p)

    # PCC request charges and DSO counter-adjustment charges
    for window in outcome.second.windows:
        for name, charge in sorted(window.committed_request.items()):
            if charge != 0.0:
                post(name, "flex-request", -charge)
                post("DSO", "flex-request", charge)
        for name, charge in sorted(window.committed_counter.items()):
            if charge != 0.0:
                post(name, "counter-flex", -charge)
                post("DSO", "counter-flex", charge)

    conservation = abs(sum(row["amount"] for row in cashflows))
    if conservation > 1e-6:
        raise CoordinationError(f"settlement conservation violated: residual {conservation:.3e}")

    totals: Dict[str, float] = {}
    for row in cashflows:
        totals[row["entity"]] = totals.get(row["entity"], 0.0) + row["amount"]

    real_costs: Dict[str, float] = {"DSO": float(first.dispatch.objective)}
    for name in sorted(first.bids):
        bid = first.bids[name]
        revenue = next(r["amount"] for r in cashflows if r["entity"] == name and r["item"] == "energy")
        real_costs[name] = revenue - float(bid.objective)  # own cost = revenue - profit
    for window in outcome.second.windows:
        real_costs["DSO"] += window.committed_cost_dso
        for name, cost in window.committed_cost_mg.items():
            request = window.committed_request.get(name, 0.0)
            real_costs[name] = real_costs.get(name, 0.0) + cost - request

    return Settlement(
        cashflows=cashflows,
        energy_table=_energy_table(outcome),
        flex_table=_flex_table(outcome),
        totals=totals,
        real_costs=real_costs,
        conservation=conservation,
    )


# ---------------------------------------------------------------------------
# full runs


def ablation_run(
    case: NetworkCase,
    mgs: Sequence[MicrogridCase],
    gu: GaussianUncertainty,
    mode: str = "benchmark",
    seed: int = 7,
    params: Optional[GameParams] = None,
    gamma: float = 0.05,
    engine: str = "bnb",
    realization: Optional[Realization] = None,
    **opts: object,
) -> MarketOutcome:
    """One full market run in one of the study modes.

    ``benchmark`` is the complete mechanism.  ``dlmp`` clears stage 1 on the
    typical scenario (deviation statistics zeroed) but still faces the
    stochastic realization in stage 2.  ``no_p2p`` disables peer-to-peer
    contracts, leaving each microgrid only its own flexibility and the DSO.
    """
    if mode not in MODES:
        raise CoordinationError(f"unknown mode {mode!r}; expected one of {MODES}")
    stage1_gu = deterministic_clone(gu) if mode == "dlmp" else gu
    first = run_first_stage(
        case, mgs, stage1_gu, params=params, gamma=gamma, engine=engine, **opts
    )
    if realization is None:
        realization = sample_realization(gu, seed)
    second = run_second_stage(
        case,
        mgs,
        first,
        realization,
        params=params,
        allow_trades=(mode != "no_p2p"),
        **opts,
    )
    outcome = MarketOutcome(
        mode=mode,
        params=params or GameParams(),
        case=case,
        mgs=list(mgs),
        first=first,
        second=second,
        seed=seed,
    )
    outcome.settlement = settle(outcome)
    return outcome
