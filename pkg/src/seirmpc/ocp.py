"""Finite-horizon optimal control by single shooting.

The horizon is split into ``n_ctrl`` intervals with constant (beta, gamma) on each.
The cost is the trapezoid integral of the stage cost over the RK4 grid plus the
terminal cost J_f, the nominal-input tail integral of E^2 + I^2. Constraints are
the infection cap at every RK4 sample and the box part of the terminal set at T.

The NLP is solved by an augmented Lagrangian (PHR) outer loop over the state and
terminal constraints, with L-BFGS-B on the control box as the inner solver.
Gradients come from the discrete adjoint of the RK4 recursion; the gradient of
J_f with respect to x(T) is taken by central differences.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .integrate import DEFAULT_H, ControlSignal, Trajectory, fmt, simulate, write_trajectory_csv
from .model import Params, State
from .sets import EQUILIBRIUM_TOL, RegionKind, region_contains

log = logging.getLogger(__name__)

TERMINAL_T_CAP = 2e4
TERMINAL_TRUNC_TOL = 1e-12


# ------------------------------------------------------------ terminal cost

@dataclass(frozen=True)
class TerminalCost:
    value: float
    t_stop: float
    converged: bool


def terminal_cost(x_hat: State, p: Params, trunc_tol: float = TERMINAL_TRUNC_TOL,
                  h: float = DEFAULT_H, t_cap: float = TERMINAL_T_CAP) -> TerminalCost:
    """Integral of E^2 + I^2 along the u_nom trajectory from ``x_hat``.

    Integration stops once E + I < ``trunc_tol``; ``converged`` is False when
    ``t_cap`` days pass first (the partial integral is still returned).
    """
    if not region_contains(RegionKind.PI, x_hat, p):
        raise ValueError(f"terminal cost needs a state in Pi, got {x_hat}")
    value, t_stop, ok = _kernels.nominal_tail_cost(
        x_hat.s, x_hat.e, x_hat.i, p.beta_nom, p.gamma_nom, p.eta, h, trunc_tol, t_cap)
    if not ok:
        log.warning("terminal cost truncated at t=%g with E+I >= %g", t_stop, trunc_tol)
    return TerminalCost(float(value), float(t_stop), bool(ok))


def _jf(sei, p: Params, h: float) -> float:
    return _kernels.nominal_tail_cost(sei[0], sei[1], sei[2], p.beta_nom, p.gamma_nom,
                                      p.eta, h, TERMINAL_TRUNC_TOL, TERMINAL_T_CAP)[0]


def _jf_grad(sei, p: Params, h: float, step: float) -> np.ndarray:
    g = np.zeros(3)
    for k in range(3):
        up = sei.copy()
        dn = sei.copy()
        up[k] += step
        dn[k] -= step
        g[k] = (_jf(up, p, h) - _jf(dn, p, h)) / (2 * step)
    return g


# ------------------------------------------------------------ problem types

class TerminalBranch(enum.Enum):
    BOX = "Box"
    EQUILIBRIA_ONLY = "EquilibriaOnly"


@dataclass(frozen=True)
class SolverConfig:
    n_ctrl: int = 25
    h: float = DEFAULT_H
    constraint_tol: float = 1e-5
    max_outer_iters: int = 30
    max_inner_iters: int = 300
    penalty_init: float = 1e3
    penalty_growth: float = 10.0
    fd_step: float = 1e-6
    seed: int = 0
    # tightening of the terminal box inside the NLP
    terminal_margin: float = 1e-5
    # AL stops once every tightened constraint is violated by less than this
    feas_tol: float = 1e-7
    inner_gtol: float = 1e-9
    use_terminal_cost: bool = True


@dataclass(frozen=True)
class OcpProblem:
    x0: State
    horizon_T: float
    p: Params
    n_ctrl: int = 25
    constraint_tol: float = 1e-5
    terminal_branch: TerminalBranch = TerminalBranch.BOX

    def __post_init__(self):
        if not self.horizon_T > 0:
            raise ValueError("horizon_T must be positive")
        if self.n_ctrl < 1:
            raise ValueError("n_ctrl must be >= 1")


@dataclass
class OcpSolution:
    control: ControlSignal
    predicted: Trajectory
    value: float
    feasible: bool
    kkt_residual: float
    iterations: int
    diagnostic: str = ""
    max_violation: float = 0.0


# ------------------------------------------------------------ transcription

@dataclass
class Transcription:
    """Single-shooting NLP for one OCP instance.

    Decision vector: ``z[2k] = beta_k``, ``z[2k+1] = gamma_k``.
    Constraint vector: ``I(t_j) - I_max`` for every RK4 sample j >= 1, followed by
    the three terminal inequalities (S, E, I at T against the tightened box).
    """

    prob: OcpProblem
    h: float
    steps_per_interval: int
    terminal_margin: float = 0.0
    fd_step: float = 1e-6
    use_terminal_cost: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vars(self) -> int:
        return 2 * self.prob.n_ctrl

    @property
    def n_samples(self) -> int:
        return self.prob.n_ctrl * self.steps_per_interval

    @property
    def dt(self) -> float:
        return self.prob.horizon_T / self.prob.n_ctrl

    def bounds(self):
        p = self.prob.p
        return [(p.beta_min, p.beta_nom), (p.gamma_nom, p.gamma_max)] * self.prob.n_ctrl

    def unpack(self, z):
        z = np.asarray(z, dtype=float)
        return np.ascontiguousarray(z[0::2]), np.ascontiguousarray(z[1::2])

    def pack(self, betas, gammas) -> np.ndarray:
        z = np.empty(self.n_vars)
        z[0::2] = betas
        z[1::2] = gammas
        return z

    def signal(self, z) -> ControlSignal:
        b, g = self.unpack(z)
        return ControlSignal.uniform(self.dt, b, g, self.prob.p.u_nom)

    def terminal_bounds(self) -> np.ndarray:
        p = self.prob.p
        if self.prob.terminal_branch is TerminalBranch.EQUILIBRIA_ONLY:
            return np.array([1.0, 1e-12, 1e-12])
        m = self.terminal_margin
        return np.array([p.s_bar - m, p.e_cap - m, p.i_max - m])

    def _forward(self, z):
        key = z.tobytes()
        hit = self._cache.get("fwd")
        if hit is not None and hit[0] == key:
            return hit[1]
        b, g = self.unpack(z)
        states = _kernels.shooting_forward(
            self.prob.x0.sei, b, g, self.steps_per_interval, self.h, self.prob.p.eta)
        self._cache["fwd"] = (key, states)
        return states

    def _weights(self) -> np.ndarray:
        w = np.full(self.n_samples + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        p = self.prob.p
        states = self._forward(z)
        b, g = self.unpack(z)
        w = self._weights()
        run = float(np.dot(w, states[:, 1] ** 2 + states[:, 2] ** 2))
        run += self.dt * float(np.sum((b - p.beta_nom) ** 2 + (g - p.gamma_nom) ** 2))
        if self.use_terminal_cost:
            run += _jf(states[-1], p, self.h)
        return run

    def _at_rest(self, xt) -> bool:
        # a disease-free end state satisfies the terminal set whatever S is
        return (self.prob.terminal_branch is TerminalBranch.BOX
                and max(xt[1], xt[2]) <= EQUILIBRIUM_TOL)

    def constraints(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        states = self._forward(z)
        path = states[1:, 2] - self.prob.p.i_max
        term = states[-1] - self.terminal_bounds()
        if self._at_rest(states[-1]):
            term[0] = min(term[0], max(states[-1, 1], states[-1, 2]) - EQUILIBRIUM_TOL)
        return np.concatenate([path, term])

    def merit(self, z, mult: np.ndarray, rho: float):
        """PHR augmented Lagrangian and its gradient."""
        z = np.asarray(z, dtype=float)
        p = self.prob.p
        states = self._forward(z)
        b, g = self.unpack(z)
        c = self.constraints(z)
        shifted = np.maximum(0.0, mult + rho * c)
        value = self.objective(z) + float(np.sum(shifted ** 2 - mult ** 2)) / (2 * rho)

        w = self._weights()
        weight = np.zeros_like(states)
        weight[:, 1] = 2 * w * states[:, 1]
        weight[:, 2] = 2 * w * states[:, 2]
        weight[1:, 2] += shifted[: self.n_samples]
        lam_t = shifted[self.n_samples:].copy()
        xt = states[-1]
        if self._at_rest(xt) and xt[0] - self.terminal_bounds()[0] > c[-3]:
            # the S row is the equilibrium residual max(E, I) here
            lam_t[1 if xt[1] >= xt[2] else 2] += lam_t[0]
            lam_t[0] = 0.0
        if self.use_terminal_cost:
            lam_t += _jf_grad(states[-1], p, self.h, self.fd_step)
        gb, gg = _kernels.shooting_backward(
            states, b, g, self.steps_per_interval, self.h, p.eta, weight, lam_t)
        gb += 2 * self.dt * (b - p.beta_nom)
        gg += 2 * self.dt * (g - p.gamma_nom)
        return value, self.pack(gb, gg)


def transcribe(prob: OcpProblem, config: SolverConfig = SolverConfig()) -> Transcription:
    m = max(1, math.ceil(prob.horizon_T / prob.n_ctrl / config.h - 1e-9))
    h = prob.horizon_T / prob.n_ctrl / m
    return Transcription(prob, h, m, config.terminal_margin, config.fd_step,
                         config.use_terminal_cost)


def project_signal(sig: ControlSignal, n_ctrl: int, horizon: float) -> tuple[np.ndarray, np.ndarray]:
    """Interval averages of a signal on a uniform grid over [0, horizon)."""
    dt = horizon / n_ctrl
    betas = np.zeros(n_ctrl)
    gammas = np.zeros(n_ctrl)
    for a, b, beta, gamma in sig.segments(horizon):
        k0 = int(a // dt)
        k1 = min(n_ctrl - 1, int(math.ceil(b / dt)) - 1)
        for k in range(k0, k1 + 1):
            overlap = min(b, (k + 1) * dt) - max(a, k * dt)
            if overlap > 0:
                betas[k] += overlap * beta
                gammas[k] += overlap * gamma
    return betas / dt, gammas / dt


# ------------------------------------------------------------ solver

def _projected_grad_norm(z, grad, lo, hi) -> float:
    step = np.clip(z - grad, lo, hi) - z
    return float(np.max(np.abs(step))) if step.size else 0.0


def _trajectory_cost(tr: Transcription, z) -> tuple[float, float, float]:
    """(J_T, cap violation, terminal-box violation) against the untightened constraints."""
    p = tr.prob.p
    states = tr._forward(np.asarray(z, dtype=float))
    path_viol = float(np.max(states[1:, 2]) - p.i_max)
    xt = states[-1]
    if tr.prob.terminal_branch is TerminalBranch.EQUILIBRIA_ONLY:
        term_viol = max(xt[1], xt[2]) - 1e-12
    else:
        term_viol = max(xt[0] - p.s_bar, xt[1] - p.e_cap, xt[2] - p.i_max)
        if max(xt[1], xt[2]) <= EQUILIBRIUM_TOL:
            term_viol = min(term_viol, 0.0)
    return tr.objective(z), path_viol, float(term_viol)


def _rank(tr: Transcription, z, constraint_tol: float):
    cost, path_viol, term_viol = _trajectory_cost(tr, z)
    if path_viol <= constraint_tol and term_viol <= 0.0:
        return (0, cost)
    return (1, max(path_viol, term_viol))


def default_initial_guess(prob: OcpProblem) -> ControlSignal:
    from .mpc import SynthesisError, synthesize_feasible_control

    try:
        synth = synthesize_feasible_control(prob.x0, prob.p)
    except SynthesisError as exc:
        log.info("no synthesized start (%s); using u_nom", exc)
        return ControlSignal.constant(prob.p.u_nom)
    return synth.signal


def solve_ocp(prob: OcpProblem, warm_start: ControlSignal | None = None,
              config: SolverConfig = SolverConfig()) -> OcpSolution:
    p = prob.p
    tr = transcribe(prob, config)
    u_nom_sig = ControlSignal.constant(p.u_nom)

    if prob.x0.i > p.i_max:
        traj = simulate(prob.x0, u_nom_sig, 0.0, p, tr.h)
        return OcpSolution(u_nom_sig, traj, math.inf, False, math.inf, 0,
                           f"infeasible at t=0: I0={prob.x0.i} > I_max={p.i_max}",
                           prob.x0.i - p.i_max)

    if warm_start is not None:
        warm_start.check(p)
        init = warm_start
    else:
        init = default_initial_guess(prob)
    z = tr.pack(*project_signal(init, prob.n_ctrl, prob.horizon_T))
    bounds = tr.bounds()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    z = np.clip(z, lo, hi)

    candidates = [z.copy()]
    n_con = tr.n_samples + 3
    mult = np.zeros(n_con)
    rho = config.penalty_init
    prev_viol = math.inf
    iters = 0
    grad = np.zeros_like(z)
    for outer in range(config.max_outer_iters):
        res = minimize(tr.merit, z, args=(mult, rho), jac=True, method="L-BFGS-B",
                       bounds=bounds,
                       options={"maxiter": config.max_inner_iters, "gtol": config.inner_gtol,
                                "ftol": 1e-15, "maxcor": 20})
        z = np.clip(res.x, lo, hi)
        iters += int(res.nit)
        grad = res.jac
        c = tr.constraints(z)
        viol = float(max(0.0, c.max()))
        mult = np.maximum(0.0, mult + rho * c)
        pg = _projected_grad_norm(z, grad, lo, hi)
        log.debug("AL outer %d: viol=%.3e pg=%.3e rho=%.1e nit=%d", outer, viol, pg, rho, res.nit)
        if viol <= config.feas_tol and pg <= 1e-6:
            break
        if viol > 0.25 * prev_viol:
            rho *= config.penalty_growth
        prev_viol = viol
    candidates.append(z.copy())

    # never return something worse than a feasible starting candidate
    z = min(candidates, key=lambda cand: _rank(tr, cand, prob.constraint_tol))

    sig = tr.signal(z)
    traj = simulate(prob.x0, sig, prob.horizon_T, p, tr.h)
    value = tr.objective(z)
    path_ok = float(traj.i.max()) <= p.i_max + prob.constraint_tol
    if prob.terminal_branch is TerminalBranch.EQUILIBRIA_ONLY:
        term_ok = region_contains(RegionKind.EQUILIBRIA_SET, traj.final, p)
    else:
        term_ok = region_contains(RegionKind.TERMINAL_SET, traj.final, p)
    c = tr.constraints(z)
    kkt = max(_projected_grad_norm(z, grad, lo, hi), float(max(0.0, c.max())))
    diag = "" if path_ok and term_ok else (
        f"max I={traj.i.max():.6g}, terminal state {traj.final.sei} outside X_f"
        if not term_ok else f"max I={traj.i.max():.6g} exceeds cap")
    return OcpSolution(sig, traj, value, path_ok and term_ok, kkt, iters, diag,
                       float(max(0.0, c.max())))


def value_function(x0: State, horizon_T: float, p: Params,
                   config: SolverConfig = SolverConfig()) -> float:
    """Optimal finite-horizon value; ``math.inf`` when no feasible control is found."""
    sol = solve_ocp(OcpProblem(x0, horizon_T, p, config.n_ctrl, config.constraint_tol),
                    config=config)
    return sol.value if sol.feasible else math.inf


def candidate_cost(prob: OcpProblem, sig: ControlSignal,
                   config: SolverConfig = SolverConfig()) -> tuple[float, float]:
    """(J_T, worst constraint violation) of a given control on the OCP grid."""
    tr = transcribe(prob, replace(config, terminal_margin=0.0))
    z = tr.pack(*project_signal(sig, prob.n_ctrl, prob.horizon_T))
    cost, path_viol, term_viol = _trajectory_cost(tr, z)
    return cost, max(path_viol, term_viol)


def write_solution_csv(prefix, sol: OcpSolution, p: Params) -> tuple[Path, Path]:
    """Writes ``<prefix>_control.csv`` and ``<prefix>_trajectory.csv``."""
    prefix = Path(prefix)
    ctrl_path = prefix.with_name(prefix.name + "_control.csv")
    with ctrl_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t_start", "beta", "gamma"])
        sig = sol.control
        for k in range(sig.n_intervals):
            w.writerow([k, fmt(sig.grid[k]), fmt(sig.betas[k]), fmt(sig.gammas[k])])
    traj_path = write_trajectory_csv(prefix.with_name(prefix.name + "_trajectory.csv"),
                                     sol.predicted, p)
    return ctrl_path, traj_path
