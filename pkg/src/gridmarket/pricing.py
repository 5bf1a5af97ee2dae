"""Uncertainty-adjusted distribution LMPs for a cleared day ahead.

Prices come from a pricing variant of the clearing program: reserve
capacities and their costs removed, every binary pinned to the cleared
assignment (the power-flow path is fixed), chance-tightened boxes kept.
The balance-row duals of that SOCP are the prices.

Every call cross-checks the result against a second, independent route: an
explicit dual program built mechanically from the same fixed-binary SOCP,
with one stationarity row per primal variable.  Strong duality, per-row
price agreement, and the stationarity residual of the primal solver's own
dual vector are all asserted; disagreement raises instead of returning a
price surface, since it flags a transcription bug rather than bad data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .conic import Solution, build_dual_program, solve_socp
from .dso import DayAheadDispatch, build_day_ahead
from .network import NetworkCase
from .uncertainty import GaussianUncertainty, SensitivityMatrix


class PricingError(RuntimeError):
    """Pricing run failed or the two dual routes disagree."""


@dataclass
class PriceSurface:
    """Per-bus-hour prices and the checks they passed."""

    buses: List[int]
    hours: List[int]
    tau_p: Dict[Tuple[int, int], float]   # $/MWh by (bus, hour)
    tau_q: Dict[Tuple[int, int], float]
    objective: float                      # pricing-run primal value
    dual_objective: float                 # explicit dual route value
    binaries: Dict[str, int]              # assignment priced under
    gamma: float
    check: Dict[str, float]               # residuals of the cross-checks
    solution: Solution
    dual_solution: Solution

    def price(self, bus: int, t: int, reactive: bool = False) -> float:
        return (self.tau_q if reactive else self.tau_p)[(bus, t)]

    def matrix(self, reactive: bool = False) -> np.ndarray:
        """Bus-by-hour price matrix, row order following `buses`."""
        src = self.tau_q if reactive else self.tau_p
        return np.array([[src[(b, t)] for t in self.hours]
                         for b in self.buses])


def compute_ccudlmp(case: NetworkCase, gu: GaussianUncertainty,
                    pcc_bids=None, fixed: Optional[DayAheadDispatch] = None,
                    sensitivity: Optional[SensitivityMatrix] = None,
                    price_tol: float = 1e-4, duality_tol: float = 1e-6,
                    **opts) -> PriceSurface:
    """Price a cleared dispatch; `fixed` supplies the binary assignment.

    Pass the same `sensitivity` the clearing run used so the pricing
    program sees identical tightened boxes.
    """
    if fixed is None:
        raise PricingError("pricing needs the cleared day-ahead dispatch")
    dap = build_day_ahead(case, gu, pcc_bids, gamma=fixed.gamma,
                          sensitivity=sensitivity, pricing_variant=True,
                          fix_from=fixed)
    # both routes need tight convergence: the price agreement check is only
    # as sharp as the two interior points
    opts.setdefault("feas_tol", 1e-11)
    opts.setdefault("gap_tol", 1e-12)
    sol = solve_socp(dap.program, **opts)
    if not sol.ok:
        raise PricingError(f"pricing run failed: status {sol.status}")

    blk = dap.block
    hours = list(range(case.horizon))
    tau_p = {(b, t): sol.duals[blk.p_bal[(b, t)]]
             for b in case.buses for t in hours}
    tau_q = {(b, t): sol.duals[blk.q_bal[(b, t)]]
             for b in case.buses for t in hours}

    dual_prog, info = build_dual_program(dap.program)
    dsol = solve_socp(dual_prog, **opts)
    if not dsol.ok:
        raise PricingError(f"explicit dual run failed: status {dsol.status}")
    dual_obj = -float(dsol.objective)
    gap = abs(dual_obj - float(sol.objective)) \
        / max(1.0, abs(float(sol.objective)))
    if gap > duality_tol:
        raise PricingError(f"strong duality violated: relative gap {gap:.3g}")

    worst = 0.0
    for grid, taus in ((blk.p_bal, tau_p), (blk.q_bal, tau_q)):
        for key, tag in grid.items():
            worst = max(worst, abs(info.price(tag, dsol.primal) - taus[key]))
    if worst > price_tol:
        raise PricingError(
            f"price mismatch between the primal and dual routes: "
            f"{worst:.3g} $/MWh")

    stat = float(sol.meta.get("stat_residual", 0.0))
    if stat > 1e-6:
        raise PricingError(
            f"stationarity residual of the primal dual vector: {stat:.3g}")

    binaries = {name: int(round(dap.program.variables[name].lb))
                for name in dap.program.binaries()}
    return PriceSurface(
        buses=list(case.buses), hours=hours, tau_p=tau_p, tau_q=tau_q,
        objective=float(sol.objective), dual_objective=dual_obj,
        binaries=binaries, gamma=fixed.gamma,
        check={"strong_duality": gap, "price_gap": worst,
               "stationarity": stat},
        solution=sol, dual_solution=dsol)


@dataclass
class PriceDelta:
    """Per-bus-hour price differences between two surfaces."""

    buses: List[int]
    hours: List[int]
    delta_p: Dict[Tuple[int, int], float]
    delta_q: Dict[Tuple[int, int], float]

    def matrix(self, reactive: bool = False) -> np.ndarray:
        src = self.delta_q if reactive else self.delta_p
        return np.array([[src[(b, t)] for t in self.hours]
                         for b in self.buses])

    def table(self, reactive: bool = False) -> str:
        """Bus-by-hour difference table, $/MWh with 4 decimals."""
        src = self.delta_q if reactive else self.delta_p
        head = "bus," + ",".join(f"h{t}" for t in self.hours)
        lines = [head]
        for b in self.buses:
            row = ",".join(f"{src[(b, t)]:.4f}" for t in self.hours)
            lines.append(f"{b},{row}")
        return "\n".join(lines)


def price_delta_report(surface_cc: PriceSurface,
                       surface_det: PriceSurface) -> PriceDelta:
    """Adjusted minus deterministic prices on the same bus-hour grid."""
    if surface_cc.buses != surface_det.buses \
            or surface_cc.hours != surface_det.hours:
        raise PricingError("price surfaces live on different grids")
    dp = {k: surface_cc.tau_p[k] - surface_det.tau_p[k]
          for k in surface_cc.tau_p}
    dq = {k: surface_cc.tau_q[k] - surface_det.tau_q[k]
          for k in surface_cc.tau_q}
    return PriceDelta(buses=list(surface_cc.buses),
                      hours=list(surface_cc.hours), delta_p=dp, delta_q=dq)
