"""Receding-horizon loop and the three-phase feasible-control construction."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .integrate import DEFAULT_H, ControlSignal, Trajectory, fmt, simulate, trajectory_rows
from .model import Params, State
from .ocp import OcpProblem, OcpSolution, SolverConfig, solve_ocp
from .sets import DomainError, OracleOptions, RegionKind, admissible_membership, region_contains

log = logging.getLogger(__name__)


S_BAR_MARGIN = 1e-11


class SynthesisError(ValueError):
    """The start state does not qualify for the construction, or it stalled."""


# ------------------------------------------------------------ synthesizer

@dataclass(frozen=True)
class SynthOptions:
    dt: float = 0.1
    h: float = DEFAULT_H
    eps_floor: float = 1e-10
    # relative distance to the line eta*E = gamma_nom*I that ends phase 2
    line_tol: float = 1e-3
    # phase 2 keeps E + I at most this fraction of the level that rides the cap
    cap_margin: float = 1e-3
    max_days: float = 3000.0
    bisect_tol: float = 1e-12


@dataclass
class PhaseInfo:
    start: float
    stop: float
    clip_events: int = 0
    note: str = ""


@dataclass
class SynthesizedControl:
    signal: ControlSignal
    t1: float
    t2: float
    t3: float
    phases: dict[str, PhaseInfo] = field(default_factory=dict)
    degraded: bool = False
    end_state: State | None = None


class _Builder:
    """Accumulates piecewise-constant pieces while advancing the state."""

    def __init__(self, x: State, p: Params, opts: SynthOptions):
        self.p = p
        self.opts = opts
        self.t = 0.0
        self.sei = x.sei
        self.grid = [0.0]
        self.betas: list[float] = []
        self.gammas: list[float] = []

    def peek(self, beta, gamma, duration):
        s, e, i = self.sei
        return _kernels.advance(s, e, i, beta, gamma, self.p.eta, duration, self.opts.h)

    def push(self, beta, gamma, duration):
        s, e, i, peak = self.peek(beta, gamma, duration)
        self.sei = np.array([s, e, i])
        self.t += duration
        self.grid.append(self.t)
        self.betas.append(beta)
        self.gammas.append(gamma)
        return peak

    def bisect(self, beta, gamma, event, dt):
        """Shortest duration in (0, dt] at which event(sei) >= 0 (assumed at dt)."""
        lo, hi = 0.0, dt
        while hi - lo > self.opts.bisect_tol:
            mid = 0.5 * (lo + hi)
            s, e, i, _ = self.peek(beta, gamma, mid)
            if event(np.array([s, e, i])) >= 0:
                hi = mid
            else:
                lo = mid
        return hi

    def signal(self) -> ControlSignal:
        return ControlSignal(np.array(self.grid), np.array(self.betas),
                             np.array(self.gammas), self.p.u_nom)


def _in_terminal(sei, p: Params) -> bool:
    return region_contains(RegionKind.TERMINAL_SET, State.from_sei(*sei), p)


def synthesize_feasible_control(x0: State, p: Params,
                                opts: SynthOptions = SynthOptions()) -> SynthesizedControl:
    """Cap-respecting control that steers ``x0`` into the terminal set.

    Phase 1 ends when I crosses I_max/2 at a level of E + I from which holding
    E + I fixed cannot push I over the cap. Until then it applies the cautious
    control while E + I is above that level or I is above I_max/2, and u_nom
    otherwise as long as the cautious control can still hold the cap afterwards.
    Phase 2 keeps E + I constant (gamma/beta = S) and moves (E, I) onto the line
    eta*E = gamma_nom*I. Phase 3 keeps E and I constant (gamma = eta*E/I,
    beta = eta*E(t2)/(S*I(t2))) until S reaches gamma_nom/beta_nom. If E or I
    still exceed the terminal box after that (starts with S below the threshold),
    the cautious control is applied until the box is reached; t3 is that time.
    State-dependent laws are evaluated at the predicted midpoint of each
    ``opts.dt`` sub-interval.
    """
    if region_contains(RegionKind.TERMINAL_SET, x0, p):
        return SynthesizedControl(ControlSignal.constant(p.u_nom), 0.0, 0.0, 0.0,
                                  end_state=x0)
    if x0.e + x0.i > 0 and min(x0.e, x0.i) < opts.eps_floor:
        raise SynthesisError(f"min(E0, I0)={min(x0.e, x0.i):.3g} below floor {opts.eps_floor}")
    if not admissible_membership(x0, p, OracleOptions(tol=0.0)).inside:
        raise SynthesisError("start is not certified admissible")

    b = _Builder(x0, p, opts)
    half = 0.5 * p.i_max
    c_max = (1 - opts.cap_margin) * p.i_max * (p.eta + p.gamma_nom) / p.eta
    phases: dict[str, PhaseInfo] = {}
    cautious, nominal = p.u_cautious, p.u_nom

    def cautious_ok(sei) -> bool:
        s, e, i = sei
        return _kernels.constant_peak(s, e, i, cautious.beta, cautious.gamma, p.eta,
                                      opts.h, 600.0, p.i_max) <= p.i_max

    # phase 1 ------------------------------------------------------------
    p1 = PhaseInfo(0.0, 0.0)
    while True:
        if b.t > opts.max_days:
            raise SynthesisError(f"phase 1 did not finish within {opts.max_days} days")
        if _in_terminal(b.sei, p):
            p1.stop = b.t
            p1.note = "entered terminal set"
            phases["phase1"] = p1
            end = State.from_sei(*b.sei)
            return SynthesizedControl(b.signal(), b.t, b.t, b.t, phases, end_state=end)
        u = cautious
        if b.sei[1] + b.sei[2] <= c_max and b.sei[2] <= half:
            s, e, i, peak = b.peek(nominal.beta, nominal.gamma, opts.dt)
            if peak <= p.i_max and cautious_ok((s, e, i)):
                u = nominal
        if u is cautious:
            p1.clip_events += 1
        s, e, i, peak = b.peek(u.beta, u.gamma, opts.dt)
        below = b.sei[2] < half
        crosses = (i >= half) if below else (i <= half)
        if crosses:
            sign = 1.0 if below else -1.0
            tau = b.bisect(u.beta, u.gamma, lambda x: sign * (x[2] - half), opts.dt)
            s, e, i, _ = b.peek(u.beta, u.gamma, tau)
            if e + i <= c_max:
                b.push(u.beta, u.gamma, tau)
                break
        b.push(u.beta, u.gamma, opts.dt)
    t1 = b.t
    p1.stop = t1
    phases["phase1"] = p1
    level = float(b.sei[1] + b.sei[2])

    # phase 2 ------------------------------------------------------------
    p2 = PhaseInfo(t1, t1)

    def phase2_law(sei):
        # beta*S = gamma keeps E + I fixed; beta >= beta_min forces gamma >= beta_min*S,
        # so while S > gamma_nom/beta_min the ratio eta*E/I tracks beta_min*S instead
        s, e, i = sei
        if p.eta * e >= p.gamma_nom * i:
            gamma = max(p.gamma_nom, p.beta_min * s)
        else:
            gamma = min(p.gamma_max, p.beta_nom * s)
        return gamma / s, gamma

    def line_gap(sei):
        # relative offset of eta*E/I from gamma_nom
        return (p.eta * sei[1] - p.gamma_nom * sei[2]) / (p.gamma_nom * sei[2])

    def midpoint(law, dt):
        beta, gamma = law(b.sei)
        s, e, i, _ = b.peek(*p.clip_control(beta, gamma), 0.5 * dt)
        beta, gamma = law(np.array([s, e, i]))
        clipped = p.clip_control(beta, gamma)
        return clipped, clipped != (beta, gamma)

    # phase 3 needs beta = gamma_nom/S >= beta_min from its first instant
    s_hi = p.gamma_nom / p.beta_min

    def on_line(sei):
        # from the E side the line is only approached asymptotically, hence the tolerance;
        # from the I side it is crossed and located by bisection
        gap = line_gap(sei)
        return sei[0] <= s_hi and 0.0 <= gap <= opts.line_tol

    while not on_line(b.sei) and b.sei[0] > p.s_bar:
        if b.t > opts.max_days:
            raise SynthesisError(f"phase 2 did not finish within {opts.max_days} days")
        (beta, gamma), clipped = midpoint(phase2_law, opts.dt)
        p2.clip_events += clipped
        start_gap = line_gap(b.sei)
        s, e, i, _ = b.peek(beta, gamma, opts.dt)
        end_gap = line_gap((s, e, i))
        if s <= s_hi and (start_gap < 0 < end_gap or end_gap < 0 < start_gap):
            sgn = 1.0 if end_gap > 0 else -1.0
            tau = b.bisect(beta, gamma, lambda x: sgn * line_gap(x), opts.dt)
            b.push(beta, gamma, tau)
            break
        b.push(beta, gamma, opts.dt)
    t2 = b.t
    p2.stop = t2
    phases["phase2"] = p2

    # phase 3 ------------------------------------------------------------
    p3 = PhaseInfo(t2, t2)
    e2, i2 = float(b.sei[1]), float(b.sei[2])

    def phase3_law(sei):
        s, e, i = sei
        return p.eta * e2 / (s * i2), p.eta * e / i

    # aim just below S-bar so re-simulating the signal cannot land a rounding error above it
    s_target = p.s_bar - S_BAR_MARGIN
    while b.sei[0] > s_target:
        if b.t > opts.max_days:
            raise SynthesisError(f"phase 3 did not finish within {opts.max_days} days")
        (beta, gamma), clipped = midpoint(phase3_law, opts.dt)
        p3.clip_events += clipped
        s, e, i, _ = b.peek(beta, gamma, opts.dt)
        if s <= s_target:
            tau = b.bisect(beta, gamma, lambda x: s_target - x[0], opts.dt)
            b.push(beta, gamma, tau)
            break
        b.push(beta, gamma, opts.dt)
    p3.stop = b.t
    phases["phase3"] = p3

    # settle: S <= S-bar already, so E + I shrinks under any input; the cautious
    # control also keeps I down while E or I still sit above the box
    settle = PhaseInfo(b.t, b.t)
    while not _in_terminal(b.sei, p):
        if b.t > opts.max_days:
            raise SynthesisError(f"settling did not finish within {opts.max_days} days")
        b.push(cautious.beta, cautious.gamma, opts.dt)
        settle.clip_events += 1
    settle.stop = b.t
    phases["settle"] = settle
    t3 = b.t

    end = State.from_sei(*b.sei)
    degraded = not region_contains(RegionKind.TERMINAL_SET, end, p)
    if degraded:
        log.warning("synthesized control ends outside the terminal set at %s", end.sei)
    phases["phase2"].note = f"E+I level {level:.6g}"
    return SynthesizedControl(b.signal(), t1, t2, t3, phases, degraded, end)


# ------------------------------------------------------------ warm start

def shift_warm_start(prev: OcpSolution, delta: float, p: Params) -> ControlSignal:
    """Tail of the previous optimal control, followed by u_nom over the last delta."""
    if not prev.feasible:
        raise ValueError("can only shift a feasible solution")
    sig = prev.control
    horizon = sig.horizon
    grid, betas, gammas = [0.0], [], []
    for a, b, beta, gamma in sig.segments(horizon):
        if b <= delta:
            continue
        grid.append(b - delta)
        betas.append(beta)
        gammas.append(gamma)
    end = grid[-1]
    if horizon - end > 1e-12:
        grid.append(horizon)
        betas.append(p.beta_nom)
        gammas.append(p.gamma_nom)
    return ControlSignal(np.array(grid), np.array(betas), np.array(gammas), p.u_nom)


# ------------------------------------------------------------ MPC loop

class Termination(enum.Enum):
    CONVERGED = "Converged"
    MAX_DAYS = "MaxDays"
    INFEASIBLE_STEP = "InfeasibleStep"


@dataclass(frozen=True)
class MpcConfig:
    delta: float = 1.0
    n_horizon: int = 25
    stop_threshold: float = 1e-6
    max_days: float = 1000.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.n_horizon < 1:
            raise ValueError("n_horizon must be >= 1")

    @property
    def horizon(self) -> float:
        return self.n_horizon * self.delta


@dataclass
class StepRecord:
    step: int
    t: float
    value: float
    feasible: bool
    iterations: int
    warm_start: str
    candidate_feasible: bool | None = None


@dataclass
class MpcResult:
    closed_loop: Trajectory
    applied_controls: ControlSignal
    per_step: list[StepRecord]
    terminated: Termination
    sample_step: np.ndarray       # MPC step index owning each closed-loop sample
    min_infectious_ratio: float = math.nan

    @property
    def days_elapsed(self) -> float:
        return float(self.closed_loop.times[-1])


def candidate_feasible(x: State, sig: ControlSignal, horizon: float, p: Params,
                       constraint_tol: float, h: float = DEFAULT_H) -> bool:
    traj = simulate(x, sig, horizon, p, h)
    return (float(traj.i.max()) <= p.i_max + constraint_tol
            and region_contains(RegionKind.TERMINAL_SET, traj.final, p))


def mpc_run(x0: State, cfg: MpcConfig, p: Params,
            solver: SolverConfig | None = None) -> MpcResult:
    if not region_contains(RegionKind.GPI, x0, p):
        raise DomainError(f"MPC needs a start in G_Pi, got {x0}")
    if solver is None:
        solver = SolverConfig(n_ctrl=cfg.n_horizon)
    horizon = cfg.horizon
    times, states, controls, running = [np.zeros(1)], [x0.as_array()[None, :]], [], [np.zeros(1)]
    sample_step = [np.zeros(1, dtype=int)]
    records: list[StepRecord] = []
    applied_b, applied_g = [], []
    x, t, total = x0, 0.0, 0.0
    prev: OcpSolution | None = None
    terminated = Termination.MAX_DAYS
    ratio_min = math.inf

    step = 0
    while True:
        if x.e + x.i < cfg.stop_threshold:
            terminated = Termination.CONVERGED
            break
        if t >= cfg.max_days - 1e-9:
            terminated = Termination.MAX_DAYS
            break
        if x.e + x.i > 0:
            ratio_min = min(ratio_min, x.i / (x.e + x.i))
        prob = OcpProblem(x, horizon, p, cfg.n_horizon, solver.constraint_tol)
        if prev is None:
            warm, label, cand_ok = None, "synthesized", None
        else:
            warm = shift_warm_start(prev, cfg.delta, p)
            label = "shifted"
            cand_ok = candidate_feasible(x, warm, horizon, p, solver.constraint_tol, solver.h)
        sol = solve_ocp(prob, warm, solver)
        records.append(StepRecord(step, t, sol.value, sol.feasible, sol.iterations,
                                  label, cand_ok))
        log.info("MPC step %d t=%.1f value=%.6g feasible=%s iters=%d E+I=%.3e",
                 step, t, sol.value, sol.feasible, sol.iterations, x.e + x.i)
        if not sol.feasible:
            terminated = Termination.INFEASIBLE_STEP
            break
        seg = simulate(x, sol.control, cfg.delta, p, solver.h)
        times.append(t + seg.times[1:])
        states.append(seg.states[1:])
        controls.append(seg.controls)
        running.append(total + seg.running_cost[1:])
        sample_step.append(np.full(len(seg.times) - 1, step))
        u0 = sol.control.value_at(0.0)
        applied_b.append(u0.beta)
        applied_g.append(u0.gamma)
        total += float(seg.running_cost[-1])
        t += cfg.delta
        x = seg.final
        prev = sol
        step += 1

    traj = Trajectory(np.concatenate(times), np.vstack(states),
                      np.vstack(controls) if controls else np.zeros((0, 2)),
                      np.concatenate(running))
    applied = ControlSignal.uniform(cfg.delta, applied_b, applied_g, p.u_nom)
    steps = np.concatenate(sample_step)
    if len(steps) > 1:
        steps[0] = 0
    return MpcResult(traj, applied, records, terminated, steps,
                     ratio_min if ratio_min < math.inf else math.nan)


# ------------------------------------------------------------ outputs

CLOSED_LOOP_EXTRA = ["step", "ocp_value", "ocp_feasible", "ocp_iters"]


def cap_entry_time(traj: Trajectory, p: Params, band: float = 5e-4) -> float:
    hit = np.flatnonzero(traj.i >= p.i_max - band)
    return float(traj.times[hit[0]]) if hit.size else math.nan


def sbar_cross_time(traj: Trajectory, p: Params) -> float:
    hit = np.flatnonzero(traj.s <= p.s_bar)
    return float(traj.times[hit[0]]) if hit.size else math.nan


def write_closed_loop_csv(path, res: MpcResult, p: Params) -> Path:
    from .integrate import TRAJECTORY_HEADER

    path = Path(path)
    by_step = {r.step: r for r in res.per_step}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER + CLOSED_LOOP_EXTRA)
        for k, row in enumerate(trajectory_rows(res.closed_loop, p)):
            rec = by_step.get(int(res.sample_step[k]))
            extra = ([rec.step, fmt(rec.value), int(rec.feasible), rec.iterations]
                     if rec else ["", "", "", ""])
            w.writerow([fmt(v) for v in row] + extra)
    return path


def run_summary(res: MpcResult, p: Params) -> dict[str, object]:
    traj = res.closed_loop
    return {
        "terminated": res.terminated.value,
        "days_elapsed": res.days_elapsed,
        "max_I": float(traj.i.max()),
        "t_cap_entry": cap_entry_time(traj, p),
        "t_sbar_cross": sbar_cross_time(traj, p),
        "total_cost": float(traj.running_cost[-1]),
    }


def write_summary(path, summary: dict[str, object]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for key, value in summary.items():
            fh.write(f"{key}={fmt(value) if isinstance(value, float) else value}\n")
    return path
