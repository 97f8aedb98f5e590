"""Terminal set, membership oracles for the admissible set and the MRPI, and
barrier-curve point clouds for their boundaries.

The oracles are simulation based:

* admissible: the cap holds forever under the cautious control (beta_min, gamma_max);
* MRPI: the cap holds under u_nom and under a seeded family of random bang-bang
  signals.

Barrier curves start at ultimate-tangency points on I = I_max and are integrated
backward together with an adjoint; the input at each step extremizes the
Hamiltonian over the vertices of U (max for the MRPI, min for the admissible set).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import _kernels
from .integrate import DEFAULT_H, fmt
from .model import Params, State

EQUILIBRIUM_TOL = 1e-12
DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class BarrierError(RuntimeError):
    pass


class RegionKind(enum.Enum):
    PI = "Pi"
    G = "G"
    GPI = "GPi"
    TERMINAL_SET = "TerminalSet"
    EQUILIBRIA_SET = "EquilibriaSet"


class SetKind(enum.Enum):
    ADMISSIBLE = "Admissible"
    MRPI = "Mrpi"


def _in_pi(s, e, i) -> bool:
    return s >= 0 and e >= 0 and i >= 0 and s + e + i <= 1


def region_contains(kind: RegionKind, x: State, p: Params) -> bool:
    s, e, i = x.s, x.e, x.i
    if kind is RegionKind.PI:
        return _in_pi(s, e, i)
    if kind is RegionKind.G:
        return i <= p.i_max
    if kind is RegionKind.GPI:
        return i <= p.i_max and _in_pi(s, e, i)
    equilibrium = e <= EQUILIBRIUM_TOL and i <= EQUILIBRIUM_TOL
    if kind is RegionKind.EQUILIBRIA_SET:
        return equilibrium
    if kind is RegionKind.TERMINAL_SET:
        in_box = s <= p.s_bar and i <= p.i_max and e <= p.e_cap and _in_pi(s, e, i)
        return in_box or equilibrium
    raise ValueError(f"unknown region {kind!r}")


def in_gpi_tol(x, p: Params, tol: float = DOMAIN_TOL) -> bool:
    s, e, i = x
    return (s >= -tol and e >= -tol and i >= -tol
            and s + e + i <= 1 + tol and i <= p.i_max + tol)


# ---------------------------------------------------------------- oracles

@dataclass(frozen=True)
class OracleOptions:
    tol: float = 1e-6
    n_samples: int = 64
    switch_period: float = 2.0
    horizon: float = 600.0
    h: float = DEFAULT_H
    seed: int = 0


@dataclass(frozen=True)
class Membership:
    inside: bool
    certificate: float


@lru_cache(maxsize=32)
def adversary_family(p: Params, opts: OracleOptions) -> tuple[np.ndarray, np.ndarray]:
    """u_nom followed by ``n_samples`` seeded random bang-bang signals.

    Returns (beta_table, gamma_table), one row per signal, one column per
    switching period.
    """
    n_per = int(np.ceil(opts.horizon / opts.switch_period))
    rng = np.random.default_rng(opts.seed)
    pick_b = rng.integers(0, 2, size=(opts.n_samples, n_per))
    pick_g = rng.integers(0, 2, size=(opts.n_samples, n_per))
    betas = np.where(pick_b == 1, p.beta_nom, p.beta_min)
    gammas = np.where(pick_g == 1, p.gamma_max, p.gamma_nom)
    betas = np.vstack([np.full(n_per, p.beta_nom), betas])
    gammas = np.vstack([np.full(n_per, p.gamma_nom), gammas])
    betas.setflags(write=False)
    gammas.setflags(write=False)
    return betas, gammas


def mrpi_membership(x0: State, p: Params, opts: OracleOptions = OracleOptions()) -> Membership:
    if not region_contains(RegionKind.GPI, x0, p):
        raise DomainError(f"MRPI oracle needs a start in G_Pi, got {x0}")
    betas, gammas = adversary_family(p, opts)
    peaks, _ = _kernels.worst_max_i(
        x0.sei, betas, gammas, opts.switch_period, opts.h, opts.horizon,
        p.eta, p.i_max + opts.tol)
    worst = float(peaks.max())
    return Membership(worst <= p.i_max + opts.tol, worst)


def admissible_membership(x0: State, p: Params, opts: OracleOptions = OracleOptions()) -> Membership:
    if x0.i > p.i_max:
        return Membership(False, x0.i)
    u = p.u_cautious
    table_b = np.full((1, 1), u.beta)
    table_g = np.full((1, 1), u.gamma)
    peaks, _ = _kernels.worst_max_i(
        x0.sei, table_b, table_g, opts.horizon, opts.h, opts.horizon,
        p.eta, p.i_max + opts.tol)
    worst = float(peaks[0])
    return Membership(worst <= p.i_max + opts.tol, worst)


# ------------------------------------------------------------ tangency

@dataclass(frozen=True)
class Tangency:
    """Ultimate-tangency locus on I = I_max: the line E = e_star for S in [s_min, s_max]."""

    kind: SetKind
    e_star: float
    i_star: float
    s_min: float
    s_max: float
    beta_ext: float
    gamma_ext: float

    def point(self, s: float) -> State:
        return State.from_sei(s, self.e_star, self.i_star)

    def starts(self, n: int) -> np.ndarray:
        """``n`` start values of S spread over the open range."""
        k = np.arange(n) + 0.5
        return self.s_min + (self.s_max - self.s_min) * k / n


def tangency_points(kind: SetKind, p: Params) -> Tangency:
    if kind is SetKind.ADMISSIBLE:
        beta, gamma = p.beta_min, p.gamma_max
    else:
        beta, gamma = p.beta_nom, p.gamma_nom
    e_star = gamma * p.i_max / p.eta
    room = 1.0 - p.i_max
    if e_star > room:
        raise DegenerateGeometryError(
            f"tangency E*={e_star:.6g} exceeds 1 - I_max={room:.6g}")
    # touching from below needs d2I/dt2 <= 0, i.e. beta*S <= gamma
    s_max = min(gamma / beta, room - e_star)
    return Tangency(kind, e_star, p.i_max, 0.0, s_max, beta, gamma)


# ------------------------------------------------------------ barriers

@dataclass(frozen=True)
class BarrierOptions:
    h: float = DEFAULT_H
    t_max: float = 300.0
    i_floor: float = 1e-4
    sing_tol: float = 1e-10
    stride: int = 2


@dataclass(frozen=True)
class BarrierState:
    x: State
    lam: tuple[float, float, float] = (0.0, 0.0, 1.0)
    t_back: float = 0.0


STOP_REASONS = {
    _kernels.FLOOR: "i_floor",
    _kernels.LEFT_DOMAIN: "left_domain",
    _kernels.TIME_LIMIT: "t_max",
    _kernels.ADJOINT_BLOWUP: "adjoint_blowup",
}


@dataclass
class BarrierCurve:
    kind: SetKind
    curve_id: int
    points: np.ndarray      # (n, 3) S, E, I
    betas: np.ndarray       # extremal input active at each point
    gammas: np.ndarray
    t_back: np.ndarray
    stop: str

    @property
    def flagged(self) -> bool:
        return self.stop == "adjoint_blowup"


def barrier_curve(start: BarrierState, kind: SetKind, p: Params,
                  opts: BarrierOptions = BarrierOptions(), curve_id: int = 0) -> BarrierCurve:
    x = start.x
    tang = tangency_points(kind, p)
    if abs(x.i - p.i_max) > EQUILIBRIUM_TOL:
        raise BarrierError(f"barrier start must lie on I = I_max, got I={x.i}")
    if abs(p.eta * x.e - tang.gamma_ext * x.i) > 1e-12:
        raise BarrierError("barrier start is not an ultimate-tangency point")
    lam = np.asarray(start.lam, dtype=float)
    if not np.any(lam):
        raise BarrierError("adjoint must not vanish")
    pts, ub, ug, code = _kernels.barrier_backward(
        x.sei, lam, kind is SetKind.MRPI,
        p.beta_min, p.beta_nom, p.gamma_nom, p.gamma_max, p.eta,
        opts.h, opts.t_max - start.t_back, opts.i_floor, p.i_max, opts.sing_tol)
    keep = np.arange(0, len(pts), max(1, opts.stride))
    if keep[-1] != len(pts) - 1:
        keep = np.append(keep, len(pts) - 1)
    return BarrierCurve(kind, curve_id, pts[keep], ub[keep], ug[keep],
                        start.t_back + opts.h * keep, STOP_REASONS[code])


@dataclass
class BoundaryPointCloud:
    kind: SetKind
    points: np.ndarray          # (n, 3)
    curve_ids: np.ndarray       # (n,)
    curves: list[BarrierCurve] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)


def boundary_cloud(kind: SetKind, p: Params, n_starts: int,
                   opts: BarrierOptions = BarrierOptions()) -> BoundaryPointCloud:
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    tang = tangency_points(kind, p)
    curves, errors = [], {}
    for cid, s0 in enumerate(tang.starts(n_starts)):
        try:
            c = barrier_curve(BarrierState(tang.point(s0)), kind, p, opts, curve_id=cid)
        except (BarrierError, ValueError) as exc:
            errors[cid] = str(exc)
            continue
        if c.flagged:
            errors[cid] = "adjoint blow-up; curve truncated"
        curves.append(c)
    if curves:
        pts = np.vstack([c.points for c in curves])
        ids = np.concatenate([np.full(len(c.points), c.curve_id) for c in curves])
    else:
        pts, ids = np.zeros((0, 3)), np.zeros(0, dtype=int)
    return BoundaryPointCloud(kind, pts, ids, curves, errors)


def write_cloud_csv(path, clouds, append: bool = False) -> Path:
    path = Path(path)
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(["kind", "curve_id", "S", "E", "I"])
        for cloud in clouds:
            for cid, (s, e, i) in zip(cloud.curve_ids, cloud.points):
                w.writerow([cloud.kind.value, int(cid), fmt(s), fmt(e), fmt(i)])
    return path


# ------------------------------------------------------------ grid sweeps

def pi_grid(n: int = 30) -> np.ndarray:
    """All points of an n^3 lattice on [0, 1]^3 that lie in Pi."""
    g = np.linspace(0.0, 1.0, n)
    s, e, i = np.meshgrid(g, g, g, indexing="ij")
    pts = np.column_stack([s.ravel(), e.ravel(), i.ravel()])
    return pts[pts.sum(axis=1) <= 1.0 + 1e-12]


def grid_membership(points: np.ndarray, p: Params, opts: OracleOptions = OracleOptions()) -> np.ndarray:
    """Boolean table (n, 3): in_admissible, in_mrpi, in_terminal."""
    out = np.zeros((len(points), 3), dtype=bool)
    for k, (s, e, i) in enumerate(points):
        x = State.from_sei(s, e, i)
        if x.i > p.i_max:
            continue
        out[k, 0] = admissible_membership(x, p, opts).inside
        out[k, 1] = mrpi_membership(x, p, opts).inside
        out[k, 2] = region_contains(RegionKind.TERMINAL_SET, x, p)
    return out


def write_grid_csv(path, points: np.ndarray, table: np.ndarray) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["S", "E", "I", "in_admissible", "in_mrpi", "in_terminal"])
        for (s, e, i), row in zip(points, table):
            w.writerow([fmt(s), fmt(e), fmt(i), *(int(v) for v in row)])
    return path
