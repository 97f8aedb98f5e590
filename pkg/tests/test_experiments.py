import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from seirmpc.cli import main
from seirmpc.experiments import (
    MACHINE_EPS,
    SCENARIO_KEYS,
    Scenario,
    ScenarioError,
    SweepSpec,
    cap_riding_interval,
    default_scenario_path,
    load_scenario,
    parse_scenario,
    relative_spread,
    run_fig1,
    run_fig2,
    run_fig3,
)
from seirmpc.model import Params
from seirmpc.sets import admissible_membership, in_gpi_tol, mrpi_membership


def read_rows(path):
    return list(csv.reader(open(path)))


# ------------------------------------------------------------ scenario files

def test_default_scenario_matches_case_study():
    scn = load_scenario(default_scenario_path())
    p = scn.params
    assert (p.beta_nom, p.beta_min, p.gamma_max, p.i_max) == (0.44, 0.22, 0.5, 0.05)
    assert p.gamma_nom == 1 / 6.5 and p.eta == 1 / 4.6
    assert (scn.mpc.delta, scn.mpc.n_horizon) == (1.0, 25)
    assert scn.x0.sei.tolist() == [0.5, 0.18, 0.01]
    assert scn.x0.r == pytest.approx(0.31, abs=1e-15)


def test_empty_scenario_uses_defaults():
    scn = parse_scenario("{}")
    assert scn.params == Params()
    assert scn.x0.sei.tolist() == [0.5, 0.18, 0.01]
    assert scn.solver.n_ctrl == scn.mpc.n_horizon


def test_unknown_key_names_key_and_line():
    text = '{\n  "beta_nom": 0.44,\n  "beta_nmo": 0.3\n}'
    with pytest.raises(ScenarioError, match=r"line 3: unknown key 'beta_nmo'"):
        parse_scenario(text)


def test_syntax_error_names_line():
    with pytest.raises(ScenarioError, match="line 2"):
        parse_scenario('{\n  "seed": ,\n}')


def test_invalid_values_are_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario('{"beta_min": 0.5}')
    with pytest.raises(ScenarioError):
        parse_scenario('{"sweep_epsilons": [1e-8, 1e-4]}')
    with pytest.raises(ScenarioError):
        parse_scenario('{"delta": {"a": 1}}')
    with pytest.raises(ScenarioError):
        parse_scenario("[1, 2]")


def test_every_key_is_accepted():
    values = {"sweep_epsilons": [1e-3], "use_terminal_cost": True, "out_dir": "x"}
    base = Scenario()
    for key, (section, name) in SCENARIO_KEYS.items():
        if key in values:
            continue
        obj = {"params": base.params, "mpc": base.mpc, "solver": base.solver,
               "sweep": base.sweep}.get(section, base)
        if section == "top":
            values[key] = {"s0": 0.5, "e0": 0.18, "i0": 0.01}.get(key, getattr(base, key, None))
        else:
            values[key] = getattr(obj, name)
    values = {k: (str(v) if hasattr(v, "parts") else v) for k, v in values.items()}
    scn = parse_scenario(json.dumps(values, indent=1))
    assert scn.sweep.epsilons == (1e-3,)


def test_seed_flows_into_solver():
    scn = parse_scenario('{"seed": 7}')
    assert scn.seed == 7 and scn.solver.seed == 7


# ------------------------------------------------------------ sweep

def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(epsilons=())
    with pytest.raises(ValueError):
        SweepSpec(epsilons=(1e-4, -1.0))
    with pytest.raises(ValueError):
        SweepSpec(epsilons=(1e-8, 1e-8))
    spec = SweepSpec().with_machine_eps()
    assert spec.epsilons[-1] == MACHINE_EPS
    assert spec.horizon >= 45000


def test_fig3_table(tmp_path, p):
    spec = SweepSpec(epsilons=(1e-6, 1e-8), horizon=6000.0)
    points, path = run_fig3(spec, p, tmp_path)
    assert [pt.eps0 for pt in points] == [1e-6, 1e-8]
    assert points[0].t_peak < points[1].t_peak
    assert all(0 < pt.cost_inf < 15.7 for pt in points)
    assert relative_spread([pt.cost_inf for pt in points]) < 0.1
    rows = read_rows(path)
    assert rows[0] == ["eps0", "t_peak", "peak_I", "J_inf", "machine_eps"]
    assert len(rows) == 3


def test_relative_spread():
    assert relative_spread([1.0, 1.0]) == 0.0
    assert relative_spread([1.0, 3.0]) == 1.0


# ------------------------------------------------------------ figures 1 and 2

def test_cap_riding_interval_picks_longest_run():
    t = np.arange(10.0)
    i = np.array([0, 0.05, 0.05, 0, 0.05, 0.05, 0.05, 0.05, 0, 0])
    assert cap_riding_interval(t, i, 0.05) == (4.0, 7.0)
    start, stop = cap_riding_interval(t, np.zeros(10), 0.05)
    assert math.isnan(start) and math.isnan(stop)


@pytest.fixture(scope="module")
def small_scenario(tmp_path_factory):
    return replace(Scenario(), out_dir=tmp_path_factory.mktemp("figs"), n_barrier_starts=4,
                   oracle_samples=16)


def test_fig1_outputs(small_scenario, case_closed_loop, p):
    files = run_fig1(small_scenario, case_closed_loop)
    clouds = read_rows(files["clouds"])[1:]
    assert {r[0] for r in clouds} == {"Admissible", "Mrpi"}
    assert all(in_gpi_tol([float(v) for v in r[2:]], p) for r in clouds)
    start = read_rows(files["start"])
    assert start[1][3] == "1" and start[1][5] == "0"
    box = read_rows(files["terminal_box"])
    assert box[1][0] == "S" and float(box[1][2]) == pytest.approx(p.s_bar)
    last = read_rows(files["closed_loop"])[-1]
    assert float(last[2]) + float(last[3]) < 1e-6


def test_case_start_in_admissible_not_mrpi(case_start, p):
    assert admissible_membership(case_start, p).inside
    assert not mrpi_membership(case_start, p).inside


def test_fig2_outputs(small_scenario, case_closed_loop, p):
    files = run_fig2(small_scenario, case_closed_loop)
    rows = read_rows(files["series"])
    assert rows[0] == ["t", "I", "beta", "gamma"]
    events = dict(line.split("=", 1) for line in open(files["events"]).read().splitlines())
    ride = float(events["ride_start"]), float(events["ride_stop"])
    assert ride[1] > ride[0]
    assert float(events["S_at_t3"]) == pytest.approx(p.s_bar, abs=0.01)
    assert float(events["t2"]) <= ride[0] + 1e-9
    t3 = float(events["t3"])
    i_after = [float(r[1]) for r in rows[1:] if float(r[0]) >= t3]
    assert np.all(np.diff(i_after) < 0)


# ------------------------------------------------------------ CLI

def test_cli_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_bad_subcommand_and_flags(capsys):
    assert main(["plot"]) == 2
    assert main(["simulate", "--seed", "-1"]) == 2
    assert main(["simulate", "--bogus"]) == 2


def test_cli_bad_config_content(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n "gamma": 1\n}')
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_cli_domain_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"s0": 0.6, "e0": 0.3, "i0": 0.04, "max_days": 3}')
    assert main(["mpc", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "terminated=InfeasibleStep" in capsys.readouterr().out


def test_cli_simulate_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--out", str(a)]) == 0
    assert main(["simulate", "--out", str(b), "--seed", "0"]) == 0
    assert (a / "simulate.csv").read_bytes() == (b / "simulate.csv").read_bytes()
    rows = read_rows(a / "simulate.csv")
    assert rows[0][:5] == ["t", "S", "E", "I", "R"]
    assert float(rows[-1][0]) == 400.0


def test_cli_sets_and_fig3(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_barrier_starts": 3, "oracle_samples": 8,
                               "sweep_epsilons": [1e-5, 1e-7], "sweep_horizon": 3000}))
    assert main(["sets", "--config", str(cfg), "--out", str(tmp_path), "--grid", "4"]) == 0
    assert (tmp_path / "sets_grid.csv").exists()
    assert main(["fig3", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "fig3_sweep.csv")) == 3


def test_cli_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "7 passed, 0 failed" in capsys.readouterr().out
