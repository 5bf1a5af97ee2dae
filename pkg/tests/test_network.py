"""Branch-flow builders vs an independent Newton AC power-flow oracle."""

import math

import numpy as np
import pytest

from gridmarket.conic import ConicProgram, Solution, OPTIMAL, INFEASIBLE
from gridmarket.conic import solve_socp, solve_misocp_bnb
from gridmarket.network import (CaseError, Feeder, Generator, NetworkCase,
                                PccPoint, Storage, build_directed_flow,
                                build_undirected_flow, validate_flow)

from cases import COSTS, add_loss_cost, attach_gen, five_bus, two_bus
from oracles import newton_ac_pf, feeder_state


# ----------------------------------------------------------- undirected ---

def test_no_load_all_flows_zero_voltage_one():
    case = two_bus(load2=0.0)
    prog = ConicProgram()
    blk = build_undirected_flow(prog, case, [0], {1: [0.0], 2: [0.0]})
    add_loss_cost(prog, blk, COSTS["c_nl"])
    s = solve_misocp_bnb(prog)
    assert s.status == OPTIMAL
    for d in (blk.pp, blk.pm, blk.qp, blk.qm, blk.lp, blk.lm):
        for name in d.values():
            assert abs(s.primal[name]) <= 1e-6
    for name in blk.v.values():
        assert abs(s.primal[name] - 1.0) <= 1e-6


def test_two_bus_matches_newton_oracle():
    case = two_bus(load2=1.0)
    prog = ConicProgram()
    blk = build_undirected_flow(prog, case, [0], {1: [0.0], 2: [1.0]})
    attach_gen(prog, blk, "sub", 1, [0], p_cap=5.0, cost=50.0, q_cap=5.0)
    add_loss_cost(prog, blk, COSTS["c_nl"])
    s = solve_socp(prog, fixed_binaries={blk.zp[(0, 0)]: 1,
                                         blk.zm[(0, 0)]: 0},
                   feas_tol=1e-9, gap_tol=1e-9)
    assert s.status == OPTIMAL

    V = newton_ac_pf([1, 2], [(1, 2, 0.04, 0.03)],
                     p_inj={2: -1.0}, q_inj={2: -0.3})
    oracle = feeder_state(V, 1, 2, 0.04, 0.03)
    got_v2 = s.primal[blk.v[(2, 0)]]
    assert abs(got_v2 - abs(V[2]) ** 2) <= 1e-4
    got_loss = 0.04 * (s.primal[blk.lp[(0, 0)]] - s.primal[blk.lm[(0, 0)]])
    assert abs(got_loss - oracle["loss_p"]) <= 1e-4
    assert abs(s.primal[blk.pp[(0, 0)]] - oracle["p"]) <= 1e-4
    assert abs(s.primal[blk.lp[(0, 0)]] - oracle["l"]) <= 1e-4

    rep = validate_flow(s, blk)
    assert rep.max_cone_gap <= 1e-5          # positive loss cost => tight
    assert rep.max_kcl_residual <= 1e-6
    assert not rep.direction_violations


def test_generator_surplus_selects_reverse_direction():
    # cheap generation at bus 2 beyond its own load must flow back to bus 1
    case = two_bus(load2=0.3)
    case.loads[1] = np.array([1.0])

    def build_and_solve(fix=None):
        prog = ConicProgram()
        blk = build_undirected_flow(prog, case, [0], {1: [1.0], 2: [0.3]})
        attach_gen(prog, blk, "sub", 1, [0], p_cap=5.0, cost=50.0, q_cap=5.0)
        attach_gen(prog, blk, "der", 2, [0], p_cap=1.0, cost=10.0, q_cap=1.0)
        add_loss_cost(prog, blk, COSTS["c_nl"])
        if fix is None:
            return blk, solve_misocp_bnb(prog)
        return blk, solve_socp(prog, {blk.zp[(0, 0)]: fix[0],
                                      blk.zm[(0, 0)]: fix[1]})

    _, fwd = build_and_solve((1, 0))
    _, rev = build_and_solve((0, 1))
    assert fwd.status == OPTIMAL and rev.status == OPTIMAL
    assert rev.objective < fwd.objective - 1e-6   # exhaustive: reverse wins
    blk, best = build_and_solve()
    assert best.status == OPTIMAL
    assert best.primal[blk.zm[(0, 0)]] == 1.0
    assert abs(best.objective - rev.objective) <= 1e-6 * max(1.0, rev.objective)


def test_five_bus_mixed_directions_match_newton():
    case = five_bus()
    prog = ConicProgram()
    dem = {b: case.loads.get(b, np.zeros(1)) for b in case.buses}
    dem[1] = np.zeros(1)
    blk = build_undirected_flow(prog, case, [0], dem)
    attach_gen(prog, blk, "sub", 1, [0], p_cap=5.0, cost=50.0, q_cap=5.0)
    attach_gen(prog, blk, "der", 5, [0], p_cap=0.8, cost=5.0, q_cap=0.8)
    add_loss_cost(prog, blk, COSTS["c_nl"])
    s = solve_misocp_bnb(prog)
    assert s.status == OPTIMAL
    # the cheap unit at bus 5 runs at full cap, reversing feeders 4-5 and 2-4
    dirs = blk.direction_assignment(s)
    assert dirs[(3, 0)] == -1 and dirs[(2, 0)] == -1
    assert dirs[(0, 0)] == 1 and dirs[(1, 0)] == 1

    # feed the solved injections to the AC oracle and compare states
    tan = case.tan_theta
    p_inj = {b: -case.load_p(b, 0) for b in case.buses if b != 1}
    q_inj = {b: tan * p for b, p in p_inj.items()}
    p_inj[5] += s.primal["der:p:0"]
    q_inj[5] += s.primal["der:q:0"]
    V = newton_ac_pf(case.buses, [(f.from_bus, f.to_bus, f.r, f.x)
                                  for f in case.feeders], p_inj, q_inj)
    for b in case.buses:
        assert abs(s.primal[blk.v[(b, 0)]] - abs(V[b]) ** 2) <= 1e-4
    for k, f in enumerate(case.feeders):
        st = feeder_state(V, f.from_bus, f.to_bus, f.r, f.x)
        p, q, l = blk.net_flow(s, k, 0)
        want_p = st["p"] if st["send"] == f.from_bus else -st["p"]
        assert abs(p - want_p) <= 1e-4
        assert abs(abs(l) - st["l"]) <= 1e-4

    # aggregated energy balance: generation - demand - losses = 0
    total_gen = s.primal["sub:p:0"] + s.primal["der:p:0"]
    total_load = sum(case.load_p(b, 0) for b in case.buses)
    total_loss = sum(f.r * (s.primal[blk.lp[(k, 0)]]
                            - s.primal[blk.lm[(k, 0)]])
                     for k, f in enumerate(case.feeders))
    assert abs(total_gen - total_load - total_loss) <= 1e-6


# ------------------------------------------------------------- directed ---

def test_directed_matches_undirected_objective():
    case = five_bus()
    dem = {b: case.loads.get(b, np.zeros(1)) for b in case.buses}
    dem[1] = np.zeros(1)

    prog_u = ConicProgram()
    blk_u = build_undirected_flow(prog_u, case, [0], dem)
    attach_gen(prog_u, blk_u, "sub", 1, [0], 5.0, 50.0, q_cap=5.0)
    attach_gen(prog_u, blk_u, "der", 5, [0], 0.8, 5.0, q_cap=0.8)
    add_loss_cost(prog_u, blk_u, COSTS["c_nl"])
    su = solve_misocp_bnb(prog_u)
    assert su.status == OPTIMAL

    prog_d = ConicProgram()
    blk_d = build_directed_flow(prog_d, case, [0], dem,
                                blk_u.direction_assignment(su))
    attach_gen(prog_d, blk_d, "sub", 1, [0], 5.0, 50.0, q_cap=5.0)
    attach_gen(prog_d, blk_d, "der", 5, [0], 0.8, 5.0, q_cap=0.8)
    add_loss_cost(prog_d, blk_d, COSTS["c_nl"])
    sd = solve_socp(prog_d)
    assert sd.status == OPTIMAL
    assert abs(sd.objective - su.objective) <= 1e-6 * max(1.0, su.objective)
    rep = validate_flow(sd, blk_d)
    assert rep.max_cone_gap <= 1e-5
    assert not rep.direction_violations


def test_directed_zero_demand_zero_flows():
    case = two_bus(load2=0.0)
    prog = ConicProgram()
    blk = build_directed_flow(prog, case, [0], {1: [0.0], 2: [0.0]},
                              {(0, 0): 1})
    add_loss_cost(prog, blk, COSTS["c_nl"])
    s = solve_socp(prog)
    assert s.status == OPTIMAL
    assert abs(s.primal[blk.p[(0, 0)]]) <= 1e-6
    assert abs(s.primal[blk.v[(2, 0)]] - 1.0) <= 1e-6


def test_direction_forced_against_flow_is_infeasible():
    case = two_bus(load2=1.0)
    prog = ConicProgram()
    blk = build_directed_flow(prog, case, [0], {1: [0.0], 2: [1.0]},
                              {(0, 0): -1})   # claims power flows 2 -> 1
    attach_gen(prog, blk, "sub", 1, [0], 5.0, 50.0, q_cap=5.0)
    s = solve_socp(prog)
    assert s.status == INFEASIBLE


def test_partial_direction_assignment_rejected():
    case = five_bus()
    prog = ConicProgram()
    with pytest.raises(CaseError, match="direction"):
        build_directed_flow(prog, case, [0],
                            {b: np.zeros(1) for b in case.buses},
                            {(0, 0): 1})


# ------------------------------------------------------------ validation --

def test_missing_demand_names_bus():
    case = two_bus()
    with pytest.raises(CaseError, match="bus 2"):
        build_undirected_flow(ConicProgram(), case, [0], {1: [0.0]})


def test_cycle_rejected():
    case = five_bus()
    case.feeders.append(Feeder(3, 5, 0.02, 0.02, 9.0, 3.0, 3.0))
    with pytest.raises(CaseError, match="radiality"):
        case.validate()


def test_disconnected_rejected():
    case = five_bus()
    case.feeders[3] = Feeder(3, 3, 0.02, 0.02, 9.0, 3.0, 3.0)
    with pytest.raises(CaseError):
        case.validate()


def test_zero_impedance_rejected():
    case = two_bus()
    case.feeders[0] = Feeder(1, 2, 0.0, 0.0, 9.0, 3.0, 3.0)
    with pytest.raises(CaseError, match="r, x > 0"):
        case.validate()


def test_bad_efficiency_rejected():
    case = two_bus()
    case.storage.append(Storage("b", 2, 1.0, eta_ch=-0.5, eta_dic=0.9,
                                p_ch_cap=1, p_dic_cap=1, soc_lo=0.1,
                                soc_hi=0.9, soc_ini=0.5, soc_end=0.5))
    with pytest.raises(CaseError, match="efficiency"):
        case.validate()


def test_soc_endpoints_rejected():
    case = two_bus()
    case.storage.append(Storage("b", 2, 1.0, 0.9, 0.9, 1, 1,
                                soc_lo=0.2, soc_hi=0.9, soc_ini=0.1,
                                soc_end=0.5))
    with pytest.raises(CaseError, match="SOC"):
        case.validate()


def test_slack_cones_flagged_not_failed():
    # a feasible but deliberately slack point must be reported, not rejected
    case = two_bus(load2=0.0)
    prog = ConicProgram()
    blk = build_undirected_flow(prog, case, [0], {1: [0.0], 2: [0.0]})
    primal = {name: 0.0 for name in prog.variables}
    for name in blk.v.values():
        primal[name] = 1.0
    key = (0, 0)
    primal[blk.zp[key]] = 1.0
    primal[blk.lp[key]] = 0.5      # current with no flow: slack cone
    rep = validate_flow(Solution(status=OPTIMAL, primal=primal), blk)
    assert rep.slack_cones and rep.slack_cones[0][1] > 1e-5
    assert not rep.tight
