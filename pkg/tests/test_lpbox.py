"""The consensus-splitting engine: projections, subproblem, full solves.

Exactness evidence comes from the branch-and-bound engine, which proves
its optimum; the splitting engine must land within the tolerance band on
the decisive-direction instance class and fall back gracefully off it.
"""

import numpy as np
import pytest

from cases import random_dispatch_case, two_bus

from gridmarket.conic import (ConicProgram, Solution, solve_misocp_bnb,
                              solve_relaxation, solve_socp)
from gridmarket.dso import build_day_ahead, solve_day_ahead
from gridmarket.lpbox import (LpBoxState, _lagrangian, project_box,
                              project_sphere, round_and_polish, run,
                              solve_misocp_lpbox, solve_penalized_subproblem,
                              step, trace_csv)
from gridmarket.network import Generator
from gridmarket.uncertainty import GaussianUncertainty


def quiet(T=1):
    return GaussianUncertainty([], corr_lambda=3.0, tan_theta=0.3, horizon=T)


def gated_pair(demand=5.0, caps=(4.0, 10.0), costs=(1.0, 3.0),
               fixed=(5.0, 1.0)):
    """Two gated suppliers covering a firm demand."""
    p = ConicProgram("pair")
    for i in range(2):
        p.add_var(f"x{i}", lb=0.0, ub=caps[i])
        p.add_var(f"z{i}", binary=True)
        p.add_le(f"gate{i}", {f"x{i}": 1.0, f"z{i}": -caps[i]}, 0.0)
        p.add_obj(f"x{i}", costs[i])
        p.add_obj(f"z{i}", fixed[i])
    p.add_ge("demand", {"x0": 1.0, "x1": 1.0}, demand)
    return p


def test_project_box():
    assert np.allclose(project_box([1.3, -0.2, 0.5]), [1.0, 0.0, 0.5])
    v = np.array([0.0, 0.25, 1.0])
    assert np.array_equal(project_box(v), v)
    w = project_box([7.0, -3.0, 0.4])
    assert np.array_equal(project_box(w), w)


def test_project_sphere():
    assert np.allclose(project_sphere([1.0, 0.0]), [1.0, 0.0], atol=1e-12)
    out = project_sphere([2.0, 0.5])
    assert np.allclose(out, [0.5 + np.sqrt(2) / 2, 0.5], atol=1e-12)
    rng = np.random.default_rng(3)
    for n in (1, 2, 5, 9):
        for _ in range(20):
            w = project_sphere(rng.normal(0.5, 2.0, n))
            assert abs(np.sum((w - 0.5) ** 2) - n / 4) < 1e-10
    center = project_sphere(np.full(4, 0.5))
    assert np.allclose(center, [1.5, 0.5, 0.5, 0.5])


def test_box_sphere_intersection_is_binary_set():
    rng = np.random.default_rng(11)
    for n in range(1, 13):
        for k in range(2 ** min(n, 6)):
            v = np.array([(k >> j) & 1 for j in range(n)], dtype=float)
            assert abs(np.sum((v - 0.5) ** 2) - n / 4) < 1e-12
            assert np.all((v >= 0) & (v <= 1))
        for _ in range(50):
            v = rng.uniform(0.0, 1.0, n)
            if np.min(np.abs(v - np.round(v))) < 1e-3:
                continue
            # inside the box but strictly off every vertex: off the sphere
            assert abs(np.sum((v - 0.5) ** 2) - n / 4) > 1e-6


def state_for(names, z, rho=1.0):
    z = np.asarray(z, dtype=float)
    return LpBoxState(list(names), 0, {}, z, project_box(z),
                      project_sphere(z), np.zeros(z.size), np.zeros(z.size),
                      rho, rho)


def test_subproblem_pins_z_at_penalty_average():
    p = ConicProgram("free")
    p.add_var("x", lb=0.0, ub=1.0)
    p.add_var("z", binary=True)
    p.add_obj("x", 1.0)
    p.add_ge("floor", {"x": 1.0}, 0.2)
    st = state_for(["z"], [0.5], rho=1000.0)
    st.z1 = np.array([0.3])
    st.z2 = np.array([0.8])
    st.sig1 = np.array([0.1])
    st.sig2 = np.array([-0.2])
    x, z = solve_penalized_subproblem(p, st, feas_tol=1e-10,
                                      gap_tol=1e-10)
    want = (1000 * 0.3 + 1000 * 0.8 - 0.1 + 0.2) / 2000.0
    assert z[0] == pytest.approx(want, abs=1e-5)


def test_subproblem_keeps_feasible_consensus():
    p = gated_pair(fixed=(0.0, 0.0))
    st = state_for(["z0", "z1"], [1.0, 1.0], rho=10.0)
    x, z = solve_penalized_subproblem(p, st, feas_tol=1e-10,
                                      gap_tol=1e-10)
    assert np.allclose(z, [1.0, 1.0], atol=1e-5)


def test_subproblem_decreases_augmented_lagrangian():
    p = gated_pair()
    rel = solve_relaxation(p)
    names = ["z0", "z1"]
    z_prev = np.array([rel.primal[n] for n in names])
    st = state_for(names, z_prev, rho=2.0)
    st.sig1 = np.array([0.05, -0.1])
    x, z = solve_penalized_subproblem(p, st)
    l_prev = _lagrangian(p, st, rel.primal, z_prev)
    l_new = _lagrangian(p, st, x, z)
    assert l_new <= l_prev + 1e-6


def test_step_at_exact_consensus_is_stationary():
    p = ConicProgram("gate")
    p.add_var("x", lb=0.0, ub=2.0)
    p.add_var("z", binary=True)
    p.add_le("gate", {"x": 1.0, "z": -2.0}, 0.0)
    p.add_ge("need", {"x": 1.0}, 0.5)
    p.add_obj("x", 1.0)
    st = state_for(["z"], [1.0], rho=5.0)
    st.x = {"x": 0.5, "z": 1.0}
    out = step(st, p, feas_tol=1e-11, gap_tol=1e-11)
    assert out.residuals[-1] == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(out.sig1, 0.0, atol=1e-6)
    assert np.allclose(out.sig2, 0.0, atol=1e-6)
    assert np.allclose(out.z, 1.0, atol=1e-6)


def test_penalty_schedule_and_state_invariants():
    case = two_bus(load2=1.0, T=1)
    case.generators.append(Generator("sub", 1, "upstream", np.full(1, 5.0),
                                     5.0, np.full(1, 50.0)))
    prog = build_day_ahead(case, quiet()).program
    rel = solve_relaxation(prog)
    names = [n for n in prog.binaries()]
    st = state_for(names, [rel.primal[n] for n in names])
    rhos = [st.rho1]
    for _ in range(9):
        st = step(st, prog)
        rhos.append(st.rho1)
        assert np.all((st.z1 >= 0.0) & (st.z1 <= 1.0))
        assert abs(np.sum((st.z2 - 0.5) ** 2) - len(names) / 4) < 1e-10
    # constant for the first rounds, then geometric growth
    assert rhos[:6] == [1.0] * 6
    for a, b in zip(rhos[6:], rhos[7:]):
        assert b == pytest.approx(1.2 * a)


def test_run_converges_to_integral_on_decisive_instance():
    case = two_bus(load2=1.0, T=2)
    case.generators.append(Generator("sub", 1, "upstream", np.full(2, 5.0),
                                     5.0, np.full(2, 50.0)))
    prog = build_day_ahead(case, quiet(T=2)).program
    sol = run(prog, params={"eps": 1e-8}, feas_tol=1e-9, gap_tol=1e-9)
    assert sol.ok
    assert sol.meta["binary_error"] <= 1e-4
    assert sol.meta["lpbox_residual"] <= 1e-8
    rows = trace_csv(sol.meta["trace"]).splitlines()
    assert rows[0] == "iteration,residual,lagrangian,rho1,rho2"
    assert len(rows) == sol.meta["lpbox_iterations"] + 1
    assert all(len(r.split(",")) == 5 for r in rows[1:])


def test_run_stops_after_one_step_when_eps_is_loose():
    prog = gated_pair()
    sol = run(prog, params={"eps": 1e9})
    assert sol.meta["lpbox_iterations"] == 1


def test_run_without_binaries_is_plain_relaxation():
    p = ConicProgram("lp")
    p.add_var("x", lb=0.0, ub=2.0)
    p.add_ge("need", {"x": 1.0}, 0.5)
    p.add_obj("x", 3.0)
    sol = run(p)
    assert sol.ok and sol.objective == pytest.approx(1.5, abs=1e-6)
    assert sol.meta["engine"] == "lpbox"


def test_polish_repairs_paired_binaries():
    case = two_bus(load2=1.0, T=1)
    case.generators.append(Generator("sub", 1, "upstream", np.full(1, 5.0),
                                     5.0, np.full(1, 50.0)))
    prog = build_day_ahead(case, quiet()).program
    fuzzy = {n: 0.0 for n in prog.variables}
    fuzzy["da:zp:0:0"] = 0.51
    fuzzy["da:zm:0:0"] = 0.49
    sol = round_and_polish(prog, Solution(status="optimal", primal=fuzzy))
    assert sol.ok
    assert sol.primal["da:zp:0:0"] == pytest.approx(1.0, abs=1e-6)
    assert sol.primal["da:zm:0:0"] == pytest.approx(0.0, abs=1e-6)


def test_polish_of_integral_point_equals_pinned_solve():
    prog = gated_pair()
    exact = solve_misocp_bnb(prog)
    pol = round_and_polish(prog, exact)
    pinned = solve_socp(prog, fixed_binaries={"z0": 1, "z1": 1})
    assert pol.objective == pytest.approx(pinned.objective, abs=1e-7)
    assert pol.meta["engine"] == "lpbox+polish"


def test_fallback_rescues_infeasible_rounding():
    # the nearest vertex to the relaxed point is infeasible: demand sits
    # exactly on the joint capacity, pinning one gate at a fraction
    prog = gated_pair(demand=6.0)
    exact = solve_misocp_bnb(prog)
    sol = solve_misocp_lpbox(prog)
    assert sol.ok
    assert sol.meta["engine"] == "lpbox+polish+bnb"
    assert sol.objective == pytest.approx(exact.objective, abs=1e-6)


def test_engine_tracks_exact_search_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(8):
        case = random_dispatch_case(rng)
        prog = build_day_ahead(case, quiet(T=case.horizon)).program
        exact = solve_misocp_bnb(prog)
        sol = solve_misocp_lpbox(prog)
        assert sol.ok
        gap = (sol.objective - exact.objective) / max(1.0,
                                                      abs(exact.objective))
        assert -1e-6 <= gap <= 0.02
        assert sol.meta["binary_error"] <= 1e-3


def test_dispatch_through_lpbox_engine():
    case = two_bus(load2=1.0, T=1)
    case.generators.append(Generator("sub", 1, "upstream", np.full(1, 5.0),
                                     5.0, np.full(1, 50.0)))
    dap = build_day_ahead(case, quiet())
    via_bnb = solve_day_ahead(dap, engine="bnb")
    via_box = solve_day_ahead(build_day_ahead(case, quiet()), engine="lpbox")
    assert via_box.objective == pytest.approx(via_bnb.objective, abs=1e-5)
