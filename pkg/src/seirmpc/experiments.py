"""Scenario files and the three figure reproductions as CSV artifacts."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .integrate import ControlSignal, fmt, integral_functionals, simulate
from .model import Params, State
from .mpc import (
    MpcConfig,
    MpcResult,
    mpc_run,
    run_summary,
    sbar_cross_time,
    cap_entry_time,
    write_closed_loop_csv,
    write_summary,
)
from .ocp import SolverConfig
from .sets import (
    BarrierOptions,
    OracleOptions,
    SetKind,
    admissible_membership,
    boundary_cloud,
    mrpi_membership,
    write_cloud_csv,
)

log = logging.getLogger(__name__)

MACHINE_EPS = float(np.finfo(float).eps)


class ScenarioError(ValueError):
    """Bad scenario file; the message names the key and line."""


@dataclass(frozen=True)
class SweepSpec:
    """Small-initial-value sweep under u_nom from (S-bar + offset, eps, eps)."""

    epsilons: tuple[float, ...] = (1e-4, 1e-8, 1e-12)
    s_offset: float = 0.01
    horizon: float = 30000.0
    h: float = 0.05

    def __post_init__(self):
        eps = tuple(float(v) for v in self.epsilons)
        if not eps:
            raise ValueError("need at least one epsilon")
        if any(v <= 0 for v in eps):
            raise ValueError("epsilons must be positive")
        if any(a <= b for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilons must be sorted strictly descending")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "epsilons", eps)

    def with_machine_eps(self) -> SweepSpec:
        """Append machine epsilon and extend the horizon so its peak still fits."""
        eps = tuple(v for v in self.epsilons if v > MACHINE_EPS) + (MACHINE_EPS,)
        return replace(self, epsilons=eps, horizon=max(self.horizon, 45000.0))


@dataclass(frozen=True)
class Scenario:
    params: Params = field(default_factory=Params)
    x0: State = field(default_factory=lambda: State.from_sei(0.50, 0.18, 0.01))
    mpc: MpcConfig = field(default_factory=MpcConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    out_dir: Path = Path("out")
    seed: int = 0
    n_barrier_starts: int = 20
    oracle_samples: int = 64
    sim_days: float = 400.0

    @property
    def oracle(self) -> OracleOptions:
        return OracleOptions(n_samples=self.oracle_samples, seed=self.seed, h=self.solver.h)


# key -> (section, field name); sections are filled from dataclass defaults
_PARAM_KEYS = {f.name: ("params", f.name) for f in fields(Params)}
_MPC_KEYS = {"delta": ("mpc", "delta"), "n_horizon": ("mpc", "n_horizon"),
             "stop_threshold": ("mpc", "stop_threshold"), "max_days": ("mpc", "max_days")}
_SOLVER_KEYS = {k: ("solver", k) for k in (
    "h", "constraint_tol", "max_outer_iters", "max_inner_iters", "penalty_init",
    "penalty_growth", "fd_step", "terminal_margin", "feas_tol", "use_terminal_cost")}
_SWEEP_KEYS = {"sweep_epsilons": ("sweep", "epsilons"), "sweep_s_offset": ("sweep", "s_offset"),
               "sweep_horizon": ("sweep", "horizon")}
_TOP_KEYS = {k: ("top", k) for k in (
    "s0", "e0", "i0", "out_dir", "seed", "n_barrier_starts", "oracle_samples", "sim_days")}
SCENARIO_KEYS = {**_PARAM_KEYS, **_MPC_KEYS, **_SOLVER_KEYS, **_SWEEP_KEYS, **_TOP_KEYS}


def _line_of(text: str, key: str) -> int:
    needle = f'"{key}"'
    for n, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return n
    return 0


def parse_scenario(text: str) -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("line 1: scenario must be a JSON object")
    sections: dict[str, dict] = {"params": {}, "mpc": {}, "solver": {}, "sweep": {}, "top": {}}
    for key, value in raw.items():
        if key not in SCENARIO_KEYS:
            raise ScenarioError(f"line {_line_of(text, key)}: unknown key '{key}'")
        if isinstance(value, (dict, list)) and key != "sweep_epsilons":
            raise ScenarioError(f"line {_line_of(text, key)}: key '{key}' needs a scalar value")
        section, name = SCENARIO_KEYS[key]
        sections[section][name] = value

    top = sections["top"]
    try:
        params = Params(**sections["params"])
        x0 = State.from_sei(top.pop("s0", 0.50), top.pop("e0", 0.18), top.pop("i0", 0.01))
        mpc = MpcConfig(**sections["mpc"])
        solver = SolverConfig(n_ctrl=mpc.n_horizon, seed=int(top.get("seed", 0)),
                              **sections["solver"])
        if "epsilons" in sections["sweep"]:
            sections["sweep"]["epsilons"] = tuple(sections["sweep"]["epsilons"])
        sweep = SweepSpec(**sections["sweep"])
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    return Scenario(params, x0, mpc, solver, sweep, Path(top.pop("out_dir", "out")),
                    seed=int(top.pop("seed", 0)),
                    n_barrier_starts=int(top.pop("n_barrier_starts", 20)),
                    oracle_samples=int(top.pop("oracle_samples", 64)),
                    sim_days=float(top.pop("sim_days", 400.0)))


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text())


def default_scenario_path() -> Path:
    return Path(__file__).with_name("default_scenario.json")


# ------------------------------------------------------------ shared runs

def closed_loop(scn: Scenario) -> MpcResult:
    return mpc_run(scn.x0, scn.mpc, scn.params, scn.solver)


def _write_rows(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    return path


def write_terminal_box(path: Path, p: Params) -> Path:
    rows = [("S", 0.0, p.s_bar), ("E", 0.0, p.e_cap), ("I", 0.0, p.i_max)]
    return _write_rows(path, ["coord", "lower", "upper"], rows)


# ------------------------------------------------------------ figure 1

def run_fig1(scn: Scenario, result: MpcResult | None = None) -> dict[str, Path]:
    """Boundary clouds of both sets, the terminal box and the closed loop."""
    out = Path(scn.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = scn.params
    opts = BarrierOptions(h=scn.solver.h)
    clouds = [boundary_cloud(kind, p, scn.n_barrier_starts, opts)
              for kind in (SetKind.ADMISSIBLE, SetKind.MRPI)]
    for cloud in clouds:
        for cid, msg in sorted(cloud.errors.items()):
            log.warning("%s curve %d: %s", cloud.kind.value, cid, msg)
    files = {
        "clouds": write_cloud_csv(out / "fig1_clouds.csv", clouds),
        "terminal_box": write_terminal_box(out / "fig1_terminal_box.csv", p),
    }
    adm = admissible_membership(scn.x0, p, scn.oracle)
    mrpi = mrpi_membership(scn.x0, p, scn.oracle)
    files["start"] = _write_rows(
        out / "fig1_start.csv",
        ["S", "E", "I", "in_admissible", "admissible_peak_I", "in_mrpi", "mrpi_peak_I"],
        [(scn.x0.s, scn.x0.e, scn.x0.i, int(adm.inside), adm.certificate,
          int(mrpi.inside), mrpi.certificate)])
    if result is None:
        result = closed_loop(scn)
    files["closed_loop"] = write_closed_loop_csv(out / "fig1_closed_loop.csv", result, p)
    return files


# ------------------------------------------------------------ figure 2

def cap_riding_interval(times, infectious, i_max: float, band: float = 5e-4) -> tuple[float, float]:
    """Longest contiguous run of samples with |I - I_max| <= band, as (start, stop)."""
    inside = np.abs(np.asarray(infectious) - i_max) <= band
    best, start = (math.nan, math.nan), None
    best_len = -1.0
    for k, flag in enumerate(np.append(inside, False)):
        if flag and start is None:
            start = k
        elif not flag and start is not None:
            length = times[k - 1] - times[start]
            if length > best_len:
                best_len, best = length, (float(times[start]), float(times[k - 1]))
            start = None
    return best


def run_fig2(scn: Scenario, result: MpcResult | None = None) -> dict[str, Path]:
    out = Path(scn.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = scn.params
    if result is None:
        result = closed_loop(scn)
    traj = result.closed_loop
    u = traj.sample_controls()
    series = _write_rows(out / "fig2_series.csv", ["t", "I", "beta", "gamma"],
                         ((float(t), float(i), float(b), float(g))
                          for t, i, (b, g) in zip(traj.times, traj.i, u)))
    ride = cap_riding_interval(traj.times, traj.i, p.i_max)
    t3 = sbar_cross_time(traj, p)
    s_t3 = float(np.interp(t3, traj.times, traj.s)) if math.isfinite(t3) else math.nan
    events = dict(run_summary(result, p))
    events.update({
        "t2": cap_entry_time(traj, p),
        "t3": t3,
        "S_at_t3": s_t3,
        "ride_start": ride[0],
        "ride_stop": ride[1],
    })
    return {"series": series, "events": write_summary(out / "fig2_events.txt", events)}


# ------------------------------------------------------------ figure 3

@dataclass(frozen=True)
class SweepPoint:
    eps0: float
    t_peak: float
    peak_i: float
    cost_inf: float
    machine_eps: bool


def sweep_point(eps0: float, spec: SweepSpec, p: Params) -> SweepPoint:
    x0 = State.from_sei(p.s_bar + spec.s_offset, eps0, eps0)
    sig = ControlSignal.constant(p.u_nom)
    traj = simulate(x0, sig, spec.horizon, p, spec.h)
    k = int(np.argmax(traj.i))
    if k == len(traj.times) - 1:
        log.warning("peak for eps0=%g not reached within %g days", eps0, spec.horizon)
    f = integral_functionals(x0, sig, spec.horizon, p, spec.h)
    return SweepPoint(eps0, float(traj.times[k]), float(traj.i[k]), f.int_e2 + f.int_i2,
                      eps0 <= MACHINE_EPS)


def run_fig3(spec: SweepSpec, p: Params, out_dir) -> tuple[list[SweepPoint], Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = [sweep_point(eps, spec, p) for eps in spec.epsilons]
    path = _write_rows(out / "fig3_sweep.csv",
                       ["eps0", "t_peak", "peak_I", "J_inf", "machine_eps"],
                       ((pt.eps0, pt.t_peak, pt.peak_i, pt.cost_inf, int(pt.machine_eps))
                        for pt in points))
    return points, path


def relative_spread(values) -> float:
    v = np.asarray(values, dtype=float)
    return float((v.max() - v.min()) / abs(v.mean()))
