"""Command line entry point: ``seirmpc <subcommand> [--config F] [--out DIR] [--seed N]``.

Exit status 0 on success, 1 on a domain error (bad state, infeasible problem,
failed check), 2 on a usage error (bad flags, unreadable or invalid config).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import (
    Scenario,
    ScenarioError,
    closed_loop,
    default_scenario_path,
    load_scenario,
    run_fig1,
    run_fig2,
    run_fig3,
)
from .integrate import ControlSignal, IntegrationError, simulate, write_trajectory_csv
from .mpc import Termination, run_summary, write_closed_loop_csv, write_summary
from .ocp import OcpProblem, solve_ocp, write_solution_csv
from .selftest import run_selftest
from .sets import (
    BarrierOptions,
    DomainError,
    SetKind,
    admissible_membership,
    boundary_cloud,
    grid_membership,
    mrpi_membership,
    pi_grid,
    write_cloud_csv,
    write_grid_csv,
)

log = logging.getLogger("seirmpc")

SUBCOMMANDS = ("simulate", "ocp", "mpc", "sets", "fig1", "fig2", "fig3", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seirmpc", description="SEIR infection-cap MPC experiments")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, default=None,
                        help="scenario JSON (default: the shipped case-study scenario)")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="root seed (u64)")
    parser.add_argument("--grid", type=int, default=0,
                        help="sets: also classify an n^3 lattice on Pi")
    parser.add_argument("--machine-eps", action="store_true",
                        help="fig3: add machine epsilon with an extended horizon")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _scenario(args) -> Scenario:
    path = args.config if args.config is not None else default_scenario_path()
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    scn = load_scenario(path)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        scn = replace(scn, seed=args.seed, solver=replace(scn.solver, seed=args.seed))
    if args.out is not None:
        scn = replace(scn, out_dir=args.out)
    return scn


def _out(scn: Scenario) -> Path:
    out = Path(scn.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(scn: Scenario, args) -> int:
    p = scn.params
    traj = simulate(scn.x0, ControlSignal.constant(p.u_nom), scn.sim_days, p, scn.solver.h)
    path = write_trajectory_csv(_out(scn) / "simulate.csv", traj, p)
    print(f"wrote {path}")
    return 0


def cmd_ocp(scn: Scenario, args) -> int:
    prob = OcpProblem(scn.x0, scn.mpc.horizon, scn.params, scn.solver.n_ctrl,
                      scn.solver.constraint_tol)
    sol = solve_ocp(prob, config=scn.solver)
    paths = write_solution_csv(_out(scn) / "ocp", sol, scn.params)
    print(f"feasible={sol.feasible} value={sol.value:.10g} iterations={sol.iterations}")
    for path in paths:
        print(f"wrote {path}")
    if not sol.feasible:
        print(f"infeasible: {sol.diagnostic}", file=sys.stderr)
        return 1
    return 0


def cmd_mpc(scn: Scenario, args) -> int:
    res = closed_loop(scn)
    out = _out(scn)
    summary = run_summary(res, scn.params)
    write_closed_loop_csv(out / "mpc_closed_loop.csv", res, scn.params)
    write_summary(out / "mpc_summary.txt", summary)
    for key, value in summary.items():
        print(f"{key}={value}")
    return 1 if res.terminated is Termination.INFEASIBLE_STEP else 0


def cmd_sets(scn: Scenario, args) -> int:
    p = scn.params
    out = _out(scn)
    opts = BarrierOptions(h=scn.solver.h)
    clouds = [boundary_cloud(kind, p, scn.n_barrier_starts, opts)
              for kind in (SetKind.ADMISSIBLE, SetKind.MRPI)]
    print(f"wrote {write_cloud_csv(out / 'sets_clouds.csv', clouds)}")
    adm = admissible_membership(scn.x0, p, scn.oracle)
    mrpi = mrpi_membership(scn.x0, p, scn.oracle)
    print(f"x0 in admissible set: {adm.inside} (peak I {adm.certificate:.6g})")
    print(f"x0 in MRPI: {mrpi.inside} (peak I {mrpi.certificate:.6g})")
    if args.grid:
        pts = pi_grid(args.grid)
        table = grid_membership(pts, p, scn.oracle)
        print(f"wrote {write_grid_csv(out / 'sets_grid.csv', pts, table)}")
    return 0


def cmd_fig1(scn: Scenario, args) -> int:
    for path in run_fig1(scn).values():
        print(f"wrote {path}")
    return 0


def cmd_fig2(scn: Scenario, args) -> int:
    for path in run_fig2(scn).values():
        print(f"wrote {path}")
    return 0


def cmd_fig3(scn: Scenario, args) -> int:
    spec = scn.sweep.with_machine_eps() if args.machine_eps else scn.sweep
    points, path = run_fig3(spec, scn.params, _out(scn))
    for pt in points:
        print(f"eps0={pt.eps0:.3g} t_peak={pt.t_peak:.6g} peak_I={pt.peak_i:.6g} J_inf={pt.cost_inf:.6g}")
    print(f"wrote {path}")
    return 0


def cmd_selftest(scn: Scenario, args) -> int:
    _, failed = run_selftest(scn.params, scn.seed)
    return 1 if failed else 0


COMMANDS = {
    "simulate": cmd_simulate,
    "ocp": cmd_ocp,
    "mpc": cmd_mpc,
    "sets": cmd_sets,
    "fig1": cmd_fig1,
    "fig2": cmd_fig2,
    "fig3": cmd_fig3,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        scn = _scenario(args)
    except UsageError as exc:
        print(f"seirmpc: error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 2
    except ScenarioError as exc:
        print(f"seirmpc: invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](scn, args)
    except (DomainError, IntegrationError, ValueError) as exc:
        print(f"seirmpc: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
