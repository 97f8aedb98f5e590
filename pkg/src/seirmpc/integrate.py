"""Fixed-step RK4 under piecewise-constant controls."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .model import ControlValue, Params, State

DEFAULT_H = 0.05


class IntegrationError(RuntimeError):
    """A step left the unit box beyond rounding tolerance."""


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant (beta, gamma) schedule.

    ``betas[k], gammas[k]`` act on ``[grid[k], grid[k+1])``; ``tail`` acts for
    ``t >= grid[-1]``.
    """

    grid: np.ndarray
    betas: np.ndarray
    gammas: np.ndarray
    tail: ControlValue

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        betas = np.asarray(self.betas, dtype=float)
        gammas = np.asarray(self.gammas, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("grid must be a non-empty 1-d array")
        if grid[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if betas.shape != (grid.size - 1,) or gammas.shape != (grid.size - 1,):
            raise ValueError("need one control value per grid interval")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "gammas", gammas)

    @classmethod
    def constant(cls, u: ControlValue) -> ControlSignal:
        return cls(np.zeros(1), np.zeros(0), np.zeros(0), u)

    @classmethod
    def uniform(cls, period: float, betas, gammas, tail: ControlValue) -> ControlSignal:
        betas = np.asarray(betas, dtype=float)
        return cls(period * np.arange(betas.size + 1), betas, gammas, tail)

    @property
    def n_intervals(self) -> int:
        return self.betas.size

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def value_at(self, t: float) -> ControlValue:
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        if k >= self.n_intervals:
            return self.tail
        return ControlValue(float(self.betas[k]), float(self.gammas[k]))

    def check(self, p: Params) -> None:
        for b, g in zip(self.betas, self.gammas):
            p.check_control(ControlValue(b, g))
        p.check_control(self.tail)

    def segments(self, t_end: float):
        """Yield (t_start, t_stop, beta, gamma) covering [0, t_end]."""
        for k in range(self.n_intervals):
            a, b = self.grid[k], self.grid[k + 1]
            if a >= t_end:
                return
            yield a, min(b, t_end), self.betas[k], self.gammas[k]
        if t_end > self.grid[-1]:
            yield self.grid[-1], t_end, self.tail.beta, self.tail.gamma


@dataclass
class Trajectory:
    times: np.ndarray           # (n+1,)
    states: np.ndarray          # (n+1, 4) columns S, E, I, R
    controls: np.ndarray        # (n, 2) per step
    running_cost: np.ndarray    # (n+1,)

    @property
    def s(self):
        return self.states[:, 0]

    @property
    def e(self):
        return self.states[:, 1]

    @property
    def i(self):
        return self.states[:, 2]

    @property
    def r(self):
        return self.states[:, 3]

    @property
    def final(self) -> State:
        return State(*self.states[-1])

    def sample_controls(self) -> np.ndarray:
        """Control at each sample; the last sample repeats the last step's control."""
        if len(self.controls) == 0:
            return np.full((len(self.times), 2), np.nan)
        return np.vstack([self.controls, self.controls[-1:]])

    def stage_costs(self, p: Params) -> np.ndarray:
        u = self.sample_controls()
        return (
            self.e ** 2 + self.i ** 2
            + (u[:, 0] - p.beta_nom) ** 2 + (u[:, 1] - p.gamma_nom) ** 2
        )


def step_schedule(sig: ControlSignal, t_end: float, h: float):
    """Step sizes and controls with every control breakpoint on a step boundary.

    Returns (times (n+1,), hs, betas, gammas).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    times = [np.zeros(1)]
    hs, betas, gammas = [], [], []
    for a, b, beta, gamma in sig.segments(t_end):
        n = max(1, math.ceil((b - a) / h - 1e-9))
        dt = (b - a) / n
        times.append(a + dt * np.arange(1, n + 1))
        times[-1][-1] = b
        hs.append(np.full(n, dt))
        betas.append(np.full(n, beta))
        gammas.append(np.full(n, gamma))
    if not hs:
        return np.zeros(1), np.zeros(0), np.zeros(0), np.zeros(0)
    return (np.concatenate(times), np.concatenate(hs),
            np.concatenate(betas), np.concatenate(gammas))


def step_rk4(x: State, u: ControlValue, h: float, p: Params) -> State:
    if h <= 0:
        raise ValueError("step size must be positive")
    s, e, i, ok = _kernels.rk4_clamped(x.s, x.e, x.i, u.beta, u.gamma, p.eta, h)
    if not ok:
        raise IntegrationError(f"RK4 step of size {h} left [0, 1]: {(s, e, i)}")
    # R grows by what leaves S + E + I, so equilibria stay bit-exact; rounding
    # of the sums must not make it shrink
    return State(s, e, i, max(0.0, x.r, x.r + ((x.s + x.e + x.i) - (s + e + i))))


def _with_r(sei: np.ndarray, r0: float) -> np.ndarray:
    r = np.maximum.accumulate(np.clip(r0 + (sei[0].sum() - sei.sum(axis=1)), 0.0, None))
    return np.column_stack([sei, r])


def simulate(x0: State, sig: ControlSignal, t_end: float, p: Params,
             h: float = DEFAULT_H) -> Trajectory:
    """Trajectory sampled at every step; steps are refined to hit each breakpoint."""
    times, hs, betas, gammas = step_schedule(sig, t_end, h)
    sei, cost, failed = _kernels.simulate_steps(
        x0.sei, hs, betas, gammas, p.eta, p.beta_nom, p.gamma_nom)
    if failed >= 0:
        raise IntegrationError(f"integration blew up at t={times[failed]:.6g}")
    return Trajectory(times, _with_r(sei, x0.r), np.column_stack([betas, gammas]), cost)


@dataclass(frozen=True)
class IntegralFunctionals:
    int_e: float
    int_i: float
    int_e2: float
    int_i2: float
    int_beta_si: float
    s_final: float
    r_final: float


def integral_functionals(x0: State, sig: ControlSignal, t_end: float, p: Params,
                         h: float = DEFAULT_H) -> IntegralFunctionals:
    _, hs, betas, gammas = step_schedule(sig, t_end, h)
    sums, xf, ok = _kernels.integral_sums(x0.sei, hs, betas, gammas, p.eta)
    if not ok:
        raise IntegrationError("integration blew up")
    return IntegralFunctionals(*map(float, sums), float(xf[0]), float(1.0 - xf.sum()))


TRAJECTORY_HEADER = ["t", "S", "E", "I", "R", "beta", "gamma", "stage_cost", "running_cost"]


def trajectory_rows(traj: Trajectory, p: Params):
    u = traj.sample_controls()
    ell = traj.stage_costs(p)
    for k in range(len(traj.times)):
        yield [traj.times[k], *traj.states[k], u[k, 0], u[k, 1], ell[k], traj.running_cost[k]]


def fmt(x) -> str:
    """Round-trippable float formatting (17 significant digits)."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_trajectory_csv(path, traj: Trajectory, p: Params) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for row in trajectory_rows(traj, p):
            w.writerow([fmt(v) for v in row])
    return path
