"""Nodal price extraction, cross-route verification, and delta reports.

The uncongested loss mark-up is checked against a finite-difference
marginal-loss factor from the exact Newton power flow; the congestion
shadow price is checked against an objective finite difference of the
clearing problem itself.
"""

import dataclasses
import re

import numpy as np
import pytest

from cases import five_bus, two_bus
from oracles import feeder_state, newton_ac_pf

from gridmarket.conic import solve_socp
from gridmarket.dso import build_day_ahead, day_ahead_sensitivity, solve_day_ahead
from gridmarket.network import Generator
from gridmarket.pricing import (PriceSurface, PricingError, compute_ccudlmp,
                                price_delta_report)
from gridmarket.uncertainty import GaussianUncertainty, Source


def quiet(T=1):
    return GaussianUncertainty([], corr_lambda=3.0, tan_theta=0.3, horizon=T)


def upstream(case, cost=50.0, cap=5.0):
    case.generators.append(
        Generator("sub", 1, "upstream", np.full(case.horizon, cap), 5.0,
                  np.full(case.horizon, float(cost))))
    return case


def priced_two_bus(p_cap=None, peaker_cost=None):
    case = two_bus(load2=1.0, T=1)
    if p_cap is not None:
        case.feeders[0] = dataclasses.replace(case.feeders[0], p_cap=p_cap)
    upstream(case)
    if peaker_cost is not None:
        case.generators.append(
            Generator("peaker", 2, "pv", np.full(1, 5.0), 5.0,
                      np.full(1, float(peaker_cost))))
    return case


def clear_and_price(case, gu, sensitivity=None):
    dap = build_day_ahead(case, gu, sensitivity=sensitivity)
    disp = solve_day_ahead(dap, gap_tol=1e-9)
    return disp, compute_ccudlmp(case, gu, fixed=disp, sensitivity=sensitivity)


def test_slack_price_is_substation_marginal_cost():
    case = priced_two_bus()
    disp, surf = clear_and_price(case, quiet())
    # nothing upstream of the substation: its bus prices at the offer
    assert surf.price(1, 0) == pytest.approx(50.0, abs=1e-7)
    m = surf.matrix()
    assert m.shape == (2, 1)
    assert m[0, 0] == surf.price(1, 0)
    assert m[1, 0] == surf.price(2, 0)
    assert surf.check["strong_duality"] < 1e-6
    assert surf.check["price_gap"] < 1e-4
    assert surf.check["stationarity"] < 1e-6


def test_uncongested_losses_mark_up_downstream_price():
    case = priced_two_bus()
    disp, surf = clear_and_price(case, quiet())

    # marginal loss factors from the exact AC equations, central differences
    def loss_at(p_load, q_load):
        V = newton_ac_pf([1, 2], [(1, 2, 0.04, 0.03)],
                         {2: -p_load}, {2: -q_load})
        return feeder_state(V, 1, 2, 0.04, 0.03)["loss_p"]

    h = 1e-5
    mlf_p = (loss_at(1.0 + h, 0.3) - loss_at(1.0 - h, 0.3)) / (2 * h)
    mlf_q = (loss_at(1.0, 0.3 + h) - loss_at(1.0, 0.3 - h)) / (2 * h)
    # serving one more MW at bus 2 costs its import plus the extra loss,
    # which is bought at the offer and charged the loss price on top
    c_e, c_nl = 50.0, case.costs["c_nl"]
    assert surf.price(2, 0) == pytest.approx(c_e * (1 + mlf_p) + c_nl * mlf_p,
                                             abs=1e-4)
    assert surf.price(2, 0, reactive=True) == pytest.approx(
        (c_e + c_nl) * mlf_q, abs=1e-4)
    assert surf.price(1, 0, reactive=True) == pytest.approx(0.0, abs=1e-6)


def test_congested_feeder_separates_prices():
    case = priced_two_bus(p_cap=0.8, peaker_cost=200.0)
    gu = quiet()
    disp, surf = clear_and_price(case, gu)
    assert disp.pg[("sub", 0)] == pytest.approx(0.8, abs=1e-6)
    assert surf.price(1, 0) == pytest.approx(50.0, abs=1e-6)
    assert surf.price(2, 0) == pytest.approx(200.0, abs=1e-6)

    # the cap row dual is d(cost)/d(rhs); widening the feeder must save
    # exactly that rate, measured by re-clearing at nudged caps
    dual = surf.solution.duals["da:cap:p+:0:0"]
    assert dual < 0

    def cleared_cost(p_cap):
        nudged = priced_two_bus(p_cap=p_cap, peaker_cost=200.0)
        return solve_day_ahead(build_day_ahead(nudged, gu),
                               gap_tol=1e-11, feas_tol=1e-11).objective

    h = 1e-4
    fd = (cleared_cost(0.8 + h) - cleared_cost(0.8 - h)) / (2 * h)
    assert dual == pytest.approx(fd, abs=1e-3)
    assert -dual > 100.0


def test_zero_reserve_requirement_prices_match_full_program():
    case = five_bus(T=2)
    upstream(case)
    case.generators.append(
        Generator("w3", 3, "wind", np.full(2, 0.25), 0.2, np.full(2, 8.0)))
    gu = quiet(T=2)
    disp, surf = clear_and_price(case, gu)
    assert all(abs(v) < 1e-6 for v in disp.reserve_up.values())

    # with no reserve cleared, dropping the reserve machinery must not
    # move a single nodal price
    dap = build_day_ahead(case, gu, pricing_variant=False, fix_from=disp)
    sol = solve_socp(dap.program, feas_tol=1e-11, gap_tol=1e-12)
    worst = max(abs(surf.tau_p[(b, t)] - sol.duals[dap.block.p_bal[(b, t)]])
                for b in case.buses for t in range(2))
    assert worst < 1e-5


def test_pricing_requires_cleared_dispatch():
    case = priced_two_bus()
    with pytest.raises(PricingError, match="cleared day-ahead dispatch"):
        compute_ccudlmp(case, quiet())


def fake_surface(buses, hours, val):
    tau = {(b, t): float(val) for b in buses for t in hours}
    return PriceSurface(buses=list(buses), hours=list(hours), tau_p=dict(tau),
                        tau_q={k: 0.0 for k in tau}, objective=0.0,
                        dual_objective=0.0, binaries={}, gamma=0.05,
                        check={}, solution=None, dual_solution=None)


def test_delta_report_zero_and_table_format():
    a = fake_surface([1, 2, 3], [0, 1], 42.0)
    rep = price_delta_report(a, fake_surface([1, 2, 3], [0, 1], 42.0))
    assert np.allclose(rep.matrix(), 0.0)
    lines = rep.table().splitlines()
    assert lines[0] == "bus,h0,h1"
    assert len(lines) == 4
    row = re.compile(r"^\d+(,-?\d+\.\d{4}){2}$")
    for line in lines[1:]:
        assert row.match(line), line

    shifted = fake_surface([1, 2, 3], [0, 1], 45.5)
    rep = price_delta_report(shifted, a)
    assert np.allclose(rep.matrix(), 3.5)
    assert np.allclose(rep.matrix(reactive=True), 0.0)
    assert rep.table().splitlines()[1] == "1,3.5000,3.5000"


def test_delta_report_grid_mismatch():
    with pytest.raises(PricingError, match="different grids"):
        price_delta_report(fake_surface([1, 2], [0], 1.0),
                           fake_surface([1, 2], [0, 1], 1.0))
    with pytest.raises(PricingError, match="different grids"):
        price_delta_report(fake_surface([1, 2], [0], 1.0),
                           fake_surface([1, 3], [0], 1.0))


def test_chance_tightening_raises_downstream_prices():
    def mk():
        case = five_bus(T=1)
        case.feeders[0] = dataclasses.replace(case.feeders[0], l_cap=1.25)
        upstream(case)
        case.generators.append(
            Generator("g3", 3, "pv", np.full(1, 1.0), 1.0, np.full(1, 150.0)))
        return case

    case = mk()
    srcs = [Source("load", str(b), np.array(case.loads[b], float),
                   np.zeros(1), np.full(1, 0.06)) for b in sorted(case.loads)]
    gu = GaussianUncertainty(srcs, corr_lambda=3.0, tan_theta=0.3, horizon=1)
    sens = day_ahead_sensitivity(case, gu, gap_tol=1e-9)
    disp_cc, surf_cc = clear_and_price(mk(), gu, sensitivity=sens)
    disp_det, surf_det = clear_and_price(mk(), quiet())

    # deterministic clearing never touches the current limit
    p, q, l = disp_det.block.net_flow(disp_det.solution, 0, 0)
    assert l < 1.25 - 1e-3
    assert surf_cc.solution.duals["da:cap:l+:0:0"] < -1.0

    rep = price_delta_report(surf_cc, surf_det)
    assert abs(rep.delta_p[(1, 0)]) < 1e-6
    downstream = [rep.delta_p[(b, 0)] for b in (2, 3, 4, 5)]
    assert min(downstream) > 50.0
    # the premium grows with electrical distance from the substation
    assert downstream == sorted(downstream)
