"""Day-ahead clearing vs a Newton OPF oracle; intra-day windows vs
hand-sized constructions."""

import numpy as np
import pytest

from gridmarket.dso import (DispatchError, build_day_ahead, build_intraday,
                            day_ahead_sensitivity, solve_day_ahead,
                            solve_intraday)
from gridmarket.network import Feeder, Generator, PccPoint, Storage
from gridmarket.uncertainty import (GaussianUncertainty, Realization,
                                    RollingEstimate, Source, rolling_estimate)

from cases import COSTS, five_bus, two_bus
from oracles import newton_ac_pf, feeder_state


def no_uncertainty(case):
    return GaussianUncertainty([], corr_lambda=3.0,
                               tan_theta=case.tan_theta,
                               horizon=case.horizon)


def with_load_noise(case, bus, std, mu=0.0):
    T = case.horizon
    src = Source("load", str(bus), np.array(case.loads[bus], dtype=float),
                 np.full(T, float(mu)), np.full(T, float(std)))
    return GaussianUncertainty([src], corr_lambda=3.0,
                               tan_theta=case.tan_theta, horizon=T)


def upstream(case, cost, cap=5.0, q_cap=5.0):
    case.generators.append(
        Generator("sub", case.slack, "upstream", np.full(case.horizon, cap),
                  q_cap, np.asarray(cost, dtype=float)))
    return case


def typical_realization(case, gu):
    series = {s.name: np.array(s.typical, dtype=float) for s in gu.sources}
    return Realization(series=series, seed=0, tan_theta=case.tan_theta)


# ------------------------------------------------------------- first stage --

def test_day_ahead_matches_deterministic_opf_oracle():
    case = five_bus(T=2)
    upstream(case, [50.0, 60.0])
    dap = build_day_ahead(case, no_uncertainty(case))
    disp = solve_day_ahead(dap, feas_tol=1e-9, gap_tol=1e-9)
    assert disp.report.tight

    want = 0.0
    for t in range(2):
        p_inj = {b: -case.load_p(b, t) for b in case.buses if b != 1}
        q_inj = {b: case.tan_theta * p for b, p in p_inj.items()}
        V = newton_ac_pf(case.buses, [(f.from_bus, f.to_bus, f.r, f.x)
                                      for f in case.feeders], p_inj, q_inj)
        states = [feeder_state(V, f.from_bus, f.to_bus, f.r, f.x)
                  for f in case.feeders]
        load = sum(case.load_p(b, t) for b in case.buses)
        loss = sum(st["loss_p"] for st in states)
        cur = sum(f.r * st["l"] for f, st in zip(case.feeders, states))
        want += case.generators[0].cost[t] * (load + loss) \
            + COSTS["c_nl"] * cur
    assert abs(disp.objective - want) <= 1e-5


def test_zero_load_zero_dispatch():
    case = two_bus(load2=0.0, T=2)
    upstream(case, 50.0)
    disp = solve_day_ahead(build_day_ahead(case, no_uncertainty(case)))
    assert abs(disp.objective) <= 1e-7
    assert all(abs(v) <= 1e-7 for v in disp.pg.values())


def test_free_reserves_stay_zero():
    case = five_bus(T=2)
    upstream(case, 50.0)
    disp = solve_day_ahead(build_day_ahead(case, no_uncertainty(case)))
    for m in (disp.reserve_up, disp.reserve_dn):
        assert all(v == 0.0 for v in m.values())


def test_reserve_adequacy_sizes_to_load_spread():
    case = two_bus(load2=0.5, T=2)
    case.costs["reserve_adequacy"] = 2.0
    upstream(case, 50.0)
    gu = with_load_noise(case, 2, std=0.03)
    sens = day_ahead_sensitivity(case, gu)
    disp = solve_day_ahead(build_day_ahead(case, gu, gamma=0.05,
                                           sensitivity=sens))
    req = 2.0 * 0.03
    for t in range(2):
        assert disp.reserve_up[("sub", t)] >= req - 1e-6
        assert disp.reserve_dn[("sub", t)] >= req - 1e-6
        # nothing pushes capacity beyond the requirement
        assert disp.reserve_up[("sub", t)] <= req + 1e-3


def test_cdc_cost_monotone_in_gamma():
    case = two_bus(load2=0.5, T=1)
    upstream(case, 50.0)
    case.generators.append(Generator("w", 2, "wind", np.array([0.4]), 0.0,
                                     np.array([5.0])))
    src = Source("wind", "w", np.array([0.4]), np.zeros(1), np.array([0.1]))
    gu = GaussianUncertainty([src], corr_lambda=3.0,
                             tan_theta=case.tan_theta, horizon=1)
    objs = [solve_day_ahead(build_day_ahead(case, gu, gamma=g)).objective
            for g in (0.05, 0.2, 0.5)]
    # shakier confidence -> less dispatchable wind -> costlier plan
    assert objs[0] > objs[1] + 1.0
    assert objs[1] > objs[2] + 1.0


def test_tightened_flow_cap_forces_local_generation():
    case = five_bus(T=1)
    case.feeders[0] = Feeder(1, 2, 0.03, 0.02, 9.0, 1.06, 3.0)
    upstream(case, 50.0)
    case.generators.append(Generator("local", 3, "pv", np.array([1.0]), 0.0,
                                     np.array([200.0])))
    gu = with_load_noise(case, 3, std=0.05)
    sens = day_ahead_sensitivity(case, gu)
    base = solve_day_ahead(build_day_ahead(case, gu))
    tight = solve_day_ahead(build_day_ahead(case, gu, gamma=0.05,
                                            sensitivity=sens))
    # untightened the root feeder carries everything; the revised cap
    # pushes part of the service onto the expensive unit behind it
    assert base.pg[("local", 0)] <= 1e-6
    assert tight.pg[("local", 0)] >= 0.03
    assert tight.objective > base.objective + 1.0


def test_overtightened_state_reported():
    case = two_bus(load2=1.0, T=1)
    case.v_lo[2] = 0.85          # narrow but feasible window at the load bus
    case.v_hi[2] = 0.95
    upstream(case, 50.0)
    gu = with_load_noise(case, 2, std=0.5)
    sens = day_ahead_sensitivity(case, gu)
    with pytest.raises(DispatchError, match="over-tightened.*v:2"):
        build_day_ahead(case, gu, gamma=0.05, sensitivity=sens)


def test_cdc_limits_uncertain_availability():
    case = two_bus(load2=0.5, T=1)
    upstream(case, 50.0)
    case.generators.append(Generator("w", 2, "wind", np.array([0.4]), 0.0,
                                     np.array([5.0])))
    src = Source("wind", "w", np.array([0.4]), np.array([-0.05]),
                 np.array([0.1]))
    gu = GaussianUncertainty([src], corr_lambda=3.0,
                             tan_theta=case.tan_theta, horizon=1)
    disp = solve_day_ahead(build_day_ahead(case, gu, gamma=0.05))
    # 0.4 - 0.05 + ndtri(0.05)*0.1 = 0.18551
    assert disp.pg[("w", 0)] <= 0.1856
    assert disp.pg[("w", 0)] >= 0.1854   # cheap unit runs at its whole cap


def test_negative_price_forces_charging():
    case = two_bus(load2=0.4, T=3)
    upstream(case, [50.0, -10.0, 50.0])
    case.storage.append(Storage("b", 2, energy=2.0, eta_ch=0.9, eta_dic=0.9,
                                p_ch_cap=0.5, p_dic_cap=0.5, soc_lo=0.1,
                                soc_hi=0.9, soc_ini=0.5, soc_end=0.5))
    disp = solve_day_ahead(build_day_ahead(case, no_uncertainty(case)))
    assert disp.z_ch[("b", 1)] == 1
    assert disp.ch[("b", 1)] >= 0.5 - 1e-6
    for t in range(3):
        assert min(disp.ch[("b", t)], disp.dic[("b", t)]) <= 1e-6
    # the reported SOC path follows the charge/discharge schedule
    s = 0.5
    for t in range(3):
        s += (disp.ch[("b", t)] * 0.9 - disp.dic[("b", t)] / 0.9) / 2.0
        assert abs(disp.soc[("b", t + 1)] - s) <= 1e-6
    assert abs(disp.soc[("b", 3)] - 0.5) <= 1e-7


def test_pcc_bid_enters_balance():
    case = two_bus(load2=0.5, T=1)
    case.pcc_points.append(PccPoint("mg1", 2, p_cap=1.0, q_cap=0.5))
    upstream(case, 50.0)
    gu = no_uncertainty(case)
    plain = solve_day_ahead(build_day_ahead(case, gu))
    bid = solve_day_ahead(build_day_ahead(
        case, gu, {"mg1": (np.array([0.3]), np.array([0.1]))}))
    got = bid.pg[("sub", 0)] - plain.pg[("sub", 0)]
    assert 0.3 < got < 0.35              # the bid plus its marginal loss


# ------------------------------------------------------------ second stage --

def _cleared_two_bus(T=2, load=0.5, std=0.02, kappa=2.5):
    case = two_bus(load2=load, T=T)
    case.costs["reserve_adequacy"] = kappa
    upstream(case, 50.0)
    gu = with_load_noise(case, 2, std=std)
    sens = day_ahead_sensitivity(case, gu)
    disp = solve_day_ahead(build_day_ahead(case, gu, gamma=0.1,
                                           sensitivity=sens))
    return case, gu, disp


def test_zero_deviation_window_costs_nothing():
    case, gu, disp = _cleared_two_bus()
    r = typical_realization(case, gu)
    for s in (1, 2):
        adj = solve_intraday(build_intraday(case, disp,
                                            rolling_estimate(r, s)))
        assert abs(adj.objective) <= 1e-6
        for m in (adj.pg_up, adj.pg_dn, adj.ppc_up, adj.ppc_dn):
            assert all(abs(v) <= 1e-6 for v in m.values())


def test_demand_bump_covered_by_upward_reserve():
    case, gu, disp = _cleared_two_bus(T=2, load=0.1, std=0.02)
    bump = 0.02
    r = typical_realization(case, gu)
    r.series["load:2"] = np.array([0.1 + bump, 0.1])
    adj = solve_intraday(build_intraday(case, disp, rolling_estimate(r, 1)))
    dep = adj.pg_up[("sub", 0)]
    assert bump <= dep <= bump * 1.05          # bump plus marginal loss
    assert adj.pg_up[("sub", 1)] <= 1e-6
    assert COSTS["c_2d"] * bump <= adj.objective <= COSTS["c_2d"] * bump * 1.05
    # deployments never exceed retained capacity
    for key, v in adj.pg_up.items():
        assert v <= disp.reserve_up[key] + 1e-9


def test_wind_shortfall_curtails_unit_and_deploys_reserve():
    case = two_bus(load2=0.5, T=1)
    case.costs["reserve_adequacy"] = 3.0
    upstream(case, 50.0)
    case.generators.append(Generator("w", 2, "wind", np.array([0.3]), 0.0,
                                     np.array([5.0])))
    wind = Source("wind", "w", np.array([0.3]), np.zeros(1),
                  np.array([0.05]))
    load = Source("load", "2", np.array([0.5]), np.zeros(1),
                  np.array([0.02]))
    gu = GaussianUncertainty([wind, load], corr_lambda=3.0,
                             tan_theta=case.tan_theta, horizon=1)
    disp = solve_day_ahead(build_day_ahead(case, gu, gamma=0.4))
    short = 0.04
    r = Realization(series={"wind:w": np.array([disp.pg[("w", 0)] - short]),
                            "load:2": np.array([0.5])},
                    seed=0, tan_theta=case.tan_theta)
    adj = solve_intraday(build_intraday(case, disp, rolling_estimate(r, 1)))
    assert abs(adj.pr_dn[("w", 0)] - short) <= 1e-6
    assert short <= adj.pg_up[("sub", 0)] <= short * 1.1


def test_shortfall_without_retained_reserve_is_infeasible():
    case = two_bus(load2=0.5, T=1)
    upstream(case, 50.0)
    case.generators.append(Generator("w", 2, "wind", np.array([0.3]), 0.0,
                                     np.array([5.0])))
    src = Source("wind", "w", np.array([0.3]), np.zeros(1),
                 np.array([0.05]))
    gu = GaussianUncertainty([src], corr_lambda=3.0,
                             tan_theta=case.tan_theta, horizon=1)
    disp = solve_day_ahead(build_day_ahead(case, gu, gamma=0.4))
    r = Realization(series={"wind:w": np.array([disp.pg[("w", 0)] - 0.04])},
                    seed=0, tan_theta=case.tan_theta)
    with pytest.raises(DispatchError, match="infeasible"):
        solve_intraday(build_intraday(case, disp, rolling_estimate(r, 1)))


def test_mg_flex_beyond_pcc_cap_gets_countered():
    case = two_bus(load2=0.1, T=2)
    case.costs["reserve_adequacy"] = 4.0
    case.pcc_points.append(PccPoint("mg1", 2, p_cap=0.3, q_cap=0.2))
    upstream(case, 50.0)
    gu = with_load_noise(case, 2, std=0.02)
    bids = {"mg1": (np.full(2, 0.25), np.zeros(2))}
    sens = day_ahead_sensitivity(case, gu, bids)
    disp = solve_day_ahead(build_day_ahead(case, gu, bids, gamma=0.1,
                                           sensitivity=sens))
    r = typical_realization(case, gu)
    flex = {"mg1": (np.array([0.1, 0.0]), np.zeros(2))}
    adj = solve_intraday(build_intraday(case, disp, rolling_estimate(r, 1),
                                        mg_flex=flex))
    # 0.25 + 0.1 busts the 0.3 exchange cap; the counter claws back 0.05
    assert abs(adj.ppc_dn[("mg1", 0)] - 0.05) <= 1e-4
    assert abs(adj.pcc_net_p[("mg1", 0)] - 0.3) <= 1e-5
    assert abs(adj.pcc_net_p[("mg1", 1)] - 0.25) <= 1e-5


def test_missing_bid_and_long_window_rejected():
    case, gu, disp = _cleared_two_bus()
    r = typical_realization(case, gu)
    with pytest.raises(DispatchError, match="window"):
        build_intraday(case, disp,
                       RollingEstimate(s=1, hours=list(range(5)), values={}))
    case.pcc_points.append(PccPoint("mgX", 2, p_cap=1.0, q_cap=0.5))
    with pytest.raises(DispatchError, match="mgX"):
        build_intraday(case, disp, rolling_estimate(r, 1))
