import csv
import math

import numpy as np
import pytest

from seirmpc.integrate import ControlSignal, simulate
from seirmpc.model import Params, State
from seirmpc.mpc import shift_warm_start
from seirmpc.ocp import (
    OcpProblem,
    SolverConfig,
    TerminalBranch,
    candidate_cost,
    project_signal,
    solve_ocp,
    terminal_cost,
    transcribe,
    value_function,
    write_solution_csv,
)
from seirmpc.sets import RegionKind, region_contains

P = Params()
CASE = State(0.50, 0.18, 0.01, 0.31)
REST = State(0.9, 0.0, 0.0, 0.1)
INSIDE = State(0.3, 0.03, 0.04, 0.63)


@pytest.fixture(scope="module")
def case_solution():
    return solve_ocp(OcpProblem(CASE, 25.0, P))


def random_terminal_point(rng) -> State:
    return State.from_sei(rng.uniform(0, P.s_bar), rng.uniform(0, P.e_cap), rng.uniform(1e-4, P.i_max))


def test_terminal_cost_examples():
    assert terminal_cost(REST, P).value == 0.0
    tc = terminal_cost(INSIDE, P)
    assert tc.converged
    assert tc.value == pytest.approx(0.04602923846363724, rel=1e-9)
    assert terminal_cost(CASE, P).value == pytest.approx(0.5692818489914845, rel=1e-9)


def test_terminal_cost_step_consistency(rng):
    for _ in range(20):
        x = random_terminal_point(rng)
        coarse = terminal_cost(x, P, h=0.05).value
        fine = terminal_cost(x, P, h=0.025).value
        assert 0 < coarse < 15.7
        assert abs(coarse - fine) <= 1e-8


def test_terminal_cost_flags_truncation():
    tc = terminal_cost(State.from_sei(0.3, 0.01, 0.01), P, t_cap=5.0)
    assert not tc.converged
    assert 5.0 <= tc.t_stop <= 5.0 + 0.05 + 1e-9


def test_transcription_layout():
    tr = transcribe(OcpProblem(CASE, 25.0, P))
    assert tr.n_vars == 50
    assert tr.steps_per_interval == 20
    z = tr.pack(np.full(25, P.beta_nom), np.full(25, P.gamma_nom))
    assert np.array_equal(tr.unpack(z)[0], np.full(25, P.beta_nom))
    assert tr.signal(z).n_intervals == 25


def test_nominal_control_at_rest_costs_nothing():
    tr = transcribe(OcpProblem(REST, 25.0, P))
    z = tr.pack(np.full(25, P.beta_nom), np.full(25, P.gamma_nom))
    assert tr.objective(z) == 0.0
    assert np.all(tr.constraints(z) <= 0)


def test_nominal_control_from_case_start_breaks_the_cap():
    tr = transcribe(OcpProblem(CASE, 25.0, P))
    c = tr.constraints(tr.pack(np.full(25, P.beta_nom), np.full(25, P.gamma_nom)))
    # the uncontrolled outbreak overshoots the cap and burns S down below S-bar by day 25
    assert c[:-3].max() == pytest.approx(0.12333988962355143 - P.i_max, rel=1e-6)
    assert c[-3] < 0
    assert c[-2] > 0


def test_merit_gradient_matches_finite_differences(rng):
    tr = transcribe(OcpProblem(CASE, 10.0, P, n_ctrl=5))
    z = tr.pack(rng.uniform(P.beta_min, P.beta_nom, 5), rng.uniform(P.gamma_nom, P.gamma_max, 5))
    mult = rng.uniform(0, 1, tr.n_samples + 3)
    _, grad = tr.merit(z, mult, 50.0)
    fd = np.zeros_like(z)
    for k in range(z.size):
        dz = np.zeros_like(z)
        dz[k] = 1e-6
        fd[k] = (tr.merit(z + dz, mult, 50.0)[0] - tr.merit(z - dz, mult, 50.0)[0]) / 2e-6
    assert np.allclose(grad, fd, rtol=1e-4, atol=1e-7)


def test_project_signal_averages_over_intervals():
    sig = ControlSignal(np.array([0.0, 1.5]), np.array([0.3]), np.array([0.2]), P.u_nom)
    b, g = project_signal(sig, 3, 3.0)
    assert b == pytest.approx([0.3, 0.5 * 0.3 + 0.5 * 0.44, 0.44])
    assert g[0] == pytest.approx(0.2)


def test_solve_at_rest():
    sol = solve_ocp(OcpProblem(REST, 25.0, P))
    assert sol.feasible
    assert sol.value == 0.0
    assert np.all(sol.control.betas == P.beta_nom) and np.all(sol.control.gammas == P.gamma_nom)


def test_solve_reports_cap_violation_at_start():
    sol = solve_ocp(OcpProblem(State.from_sei(0.5, 0.1, 0.06), 25.0, P))
    assert not sol.feasible
    assert "I0" in sol.diagnostic


def test_case_study_solution_is_feasible(case_solution):
    assert case_solution.feasible
    assert case_solution.predicted.i.max() <= P.i_max + 1e-4
    assert region_contains(RegionKind.TERMINAL_SET, case_solution.predicted.final, P)
    assert case_solution.value == pytest.approx(0.7732, abs=5e-3)


def test_case_study_solution_holds_on_finer_grid(case_solution):
    fine = simulate(CASE, case_solution.control, 25.0, P, h=0.0125)
    assert fine.i.max() <= P.i_max + 1e-5
    assert region_contains(RegionKind.TERMINAL_SET, fine.final, P)


def test_solution_csv(tmp_path, case_solution):
    ctrl, traj = write_solution_csv(tmp_path / "sol", case_solution, P)
    rows = list(csv.reader(ctrl.open()))
    assert rows[0] == ["k", "t_start", "beta", "gamma"]
    assert len(rows) == 26
    assert traj.name == "sol_trajectory.csv"


def test_value_function_examples():
    assert value_function(REST, 25.0, P) == 0.0
    assert value_function(State.from_sei(0.5, 0.1, 0.06), 25.0, P) == math.inf
    prob = OcpProblem(INSIDE, 25.0, P)
    upper, viol = candidate_cost(prob, ControlSignal.constant(P.u_nom))
    assert viol <= 0
    assert upper == pytest.approx(terminal_cost(INSIDE, P).value, rel=1e-6)
    assert value_function(INSIDE, 25.0, P) <= upper + 1e-9


def test_solver_never_worsens_feasible_warm_start(rng):
    # the terminal box is invariant under every control, so any signal is feasible from inside it
    for _ in range(3):
        x0 = random_terminal_point(rng)
        warm = ControlSignal.uniform(1.0, rng.choice([P.beta_min, P.beta_nom], 25),
                                     rng.choice([P.gamma_nom, P.gamma_max], 25), P.u_nom)
        prob = OcpProblem(x0, 25.0, P)
        cand, viol = candidate_cost(prob, warm)
        assert viol <= 0
        sol = solve_ocp(prob, warm)
        assert sol.feasible
        assert sol.value <= cand + 1e-6


def test_equilibria_branch_is_infeasible_in_finite_time():
    sol = solve_ocp(OcpProblem(INSIDE, 5.0, P, n_ctrl=5, terminal_branch=TerminalBranch.EQUILIBRIA_ONLY),
                    config=SolverConfig(n_ctrl=5, max_outer_iters=3))
    assert not sol.feasible


def test_terminal_cost_switch_changes_objective():
    with_jf = transcribe(OcpProblem(INSIDE, 5.0, P, n_ctrl=5))
    without = transcribe(OcpProblem(INSIDE, 5.0, P, n_ctrl=5), SolverConfig(use_terminal_cost=False))
    z = with_jf.pack(np.full(5, P.beta_nom), np.full(5, P.gamma_nom))
    assert with_jf.objective(z) > without.objective(z) > 0


def test_dynamic_programming_consistency(case_closed_loop, p):
    """V_T(x_k) <= cost of the first day + V_{T-1}(x_{k+1}) along the closed loop."""
    res = case_closed_loop
    traj = res.closed_loop
    cfg = SolverConfig(n_ctrl=24)
    for k in range(3):
        rec = res.per_step[k]
        seg = (traj.times >= k - 1e-9) & (traj.times <= k + 1 + 1e-9)
        t, e, i = traj.times[seg], traj.e[seg], traj.i[seg]
        u = res.applied_controls.value_at(float(k))
        first_day = float(np.trapezoid(e ** 2 + i ** 2, t)) + (
            (u.beta - p.beta_nom) ** 2 + (u.gamma - p.gamma_nom) ** 2)
        x_next = State(*traj.states[np.flatnonzero(seg)[-1]])
        prob = OcpProblem(x_next, 24.0, p, n_ctrl=24)
        prev = solve_ocp(OcpProblem(State(*traj.states[np.flatnonzero(seg)[0]]), 25.0, p))
        warm = shift_warm_start(prev, 1.0, p)
        v_short = solve_ocp(prob, warm, cfg).value
        assert rec.value <= first_day + v_short + 1e-4
