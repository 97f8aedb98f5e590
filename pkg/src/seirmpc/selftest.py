"""Quick invariant checks run by ``seirmpc selftest``.

Each check returns (passed, detail). These are small versions of the test suite
that need no pytest and finish in well under a minute.
"""

from __future__ import annotations

import numpy as np

from .integrate import ControlSignal, integral_functionals, simulate
from .model import ControlValue, Params, State, linear_tail, vector_field
from .mpc import synthesize_feasible_control
from .sets import (
    OracleOptions,
    RegionKind,
    SetKind,
    mrpi_membership,
    region_contains,
    tangency_points,
)


def _random_start(rng) -> State:
    w = rng.dirichlet(np.ones(4))
    return State(*w)


def _bang_bang(rng, p: Params, days: int) -> ControlSignal:
    b = np.where(rng.integers(0, 2, days) == 1, p.beta_nom, p.beta_min)
    g = np.where(rng.integers(0, 2, days) == 1, p.gamma_max, p.gamma_nom)
    return ControlSignal.uniform(1.0, b, g, p.u_nom)


def check_conservation(p: Params, rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(10):
        traj = simulate(_random_start(rng), _bang_bang(rng, p, 100), 100.0, p)
        worst = max(worst, float(np.abs(traj.states.sum(axis=1) - 1).max()))
        if np.any(np.diff(traj.s) > 0) or np.any(np.diff(traj.r) < 0):
            return False, "S increased or R decreased"
    return worst <= 1e-9, f"max |sum-1| = {worst:.2e}"


def check_threshold_law(p: Params, rng) -> tuple[bool, str]:
    bad = 0
    for _ in range(2000):
        x = _random_start(rng)
        if x.i <= 1e-9:
            continue
        u = ControlValue(rng.uniform(p.beta_min, p.beta_nom), rng.uniform(p.gamma_nom, p.gamma_max))
        f = vector_field(x, u, p)
        growth = f[1] + f[2]
        if np.sign(growth) != np.sign(x.s - u.gamma / u.beta):
            bad += 1
    return bad == 0, f"{bad} sign mismatches"


def check_eigenvalues(p: Params, rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        s = rng.uniform(0, 1)
        b, g = rng.uniform(p.beta_min, p.beta_nom), rng.uniform(p.gamma_nom, p.gamma_max)
        tail = linear_tail(s, b, g, p)
        ref = np.sort_complex(np.roots([1.0, p.eta + g, p.eta * g - p.eta * b * s]))
        got = np.sort_complex(np.array([tail.eig1, tail.eig2]))
        worst = max(worst, float(np.abs(ref - got).max()))
    return worst <= 1e-12, f"max root error {worst:.2e}"


def check_final_size(p: Params, rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        x0 = State.from_sei(rng.uniform(0.1, p.s_bar), rng.uniform(0, 0.01), rng.uniform(0, 0.01))
        f = integral_functionals(x0, ControlSignal.constant(p.u_nom), 3000.0, p)
        worst = max(worst, abs(f.int_beta_si - (x0.s - f.s_final)))
    return worst <= 1e-6, f"max identity gap {worst:.2e}"


def check_terminal_in_mrpi(p: Params, rng) -> tuple[bool, str]:
    opts = OracleOptions(n_samples=16)
    checked = 0
    for _ in range(10):
        s = rng.uniform(0, p.s_bar)
        x = State.from_sei(s, rng.uniform(0, p.e_cap), rng.uniform(0, p.i_max))
        if not region_contains(RegionKind.TERMINAL_SET, x, p):
            continue
        if not mrpi_membership(x, p, opts).inside:
            return False, f"terminal point {x.sei} failed the MRPI oracle"
        checked += 1
    return True, f"{checked} terminal points inside"


def check_tangency(p: Params, rng) -> tuple[bool, str]:
    m = tangency_points(SetKind.MRPI, p).e_star
    a = tangency_points(SetKind.ADMISSIBLE, p).e_star
    ok = abs(m - p.gamma_nom * p.i_max / p.eta) <= 1e-12 and abs(a - p.gamma_max * p.i_max / p.eta) <= 1e-12
    return ok, f"E* = {m:.10g} (MRPI), {a:.10g} (admissible)"


def check_synthesizer(p: Params, rng) -> tuple[bool, str]:
    x0 = State.from_sei(0.50, 0.18, 0.01)
    sc = synthesize_feasible_control(x0, p)
    traj = simulate(x0, sc.signal, sc.t3, p)
    ok = (traj.i.max() <= p.i_max + 1e-4
          and abs(traj.s[-1] - p.s_bar) <= 1e-3
          and region_contains(RegionKind.TERMINAL_SET, traj.final, p))
    return ok, f"t3 = {sc.t3:.3f}, S(t3) = {traj.s[-1]:.6f}, max I = {traj.i.max():.6f}"


CHECKS = {
    "conservation": check_conservation,
    "threshold_law": check_threshold_law,
    "eigenvalues": check_eigenvalues,
    "final_size": check_final_size,
    "terminal_in_mrpi": check_terminal_in_mrpi,
    "tangency": check_tangency,
    "synthesizer": check_synthesizer,
}


def run_selftest(p: Params, seed: int = 0, out=print) -> tuple[int, int]:
    """Runs every check, prints one line each, returns (passed, failed)."""
    rng = np.random.default_rng(seed)
    passed = failed = 0
    for name, check in CHECKS.items():
        try:
            ok, detail = check(p, rng)
        except Exception as exc:  # a crash counts as a failure, keep going
            ok, detail = False, f"error: {exc}"
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        passed += ok
        failed += not ok
    out(f"{passed} passed, {failed} failed")
    return passed, failed
