"""Controlled SEIR dynamics, stage cost and the linearized (E, I) tail system."""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass

import numpy as np

CLAMP_TOL = 1e-12
SUM_TOL = 1e-9


class ConfigurationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Params:
    """Model rates (per day) and the infection cap."""

    beta_nom: float = 0.44
    beta_min: float = 0.22
    gamma_nom: float = 1 / 6.5
    gamma_max: float = 0.5
    eta: float = 1 / 4.6
    i_max: float = 0.05

    def __post_init__(self):
        if not 0 < self.beta_min <= self.beta_nom:
            raise ValueError(f"need 0 < beta_min <= beta_nom, got {self.beta_min}, {self.beta_nom}")
        if not 0 < self.gamma_nom <= self.gamma_max < math.inf:
            raise ValueError(f"need 0 < gamma_nom <= gamma_max < inf, got {self.gamma_nom}, {self.gamma_max}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0 < self.i_max < 1:
            raise ValueError(f"i_max must lie in (0, 1), got {self.i_max}")
        if self.beta_min > self.gamma_max:
            warnings.warn(
                f"beta_min={self.beta_min} exceeds gamma_max={self.gamma_max}; "
                "the feasible-control construction assumes beta_min <= gamma_max",
                ConfigurationWarning,
                stacklevel=3,
            )

    @property
    def u_nom(self) -> ControlValue:
        return ControlValue(self.beta_nom, self.gamma_nom)

    @property
    def u_cautious(self) -> ControlValue:
        """Strictest measures: lowest contact rate, highest removal rate."""
        return ControlValue(self.beta_min, self.gamma_max)

    @property
    def s_bar(self) -> float:
        return herd_immunity_threshold(self)

    @property
    def e_cap(self) -> float:
        """Upper bound on E in the terminal box."""
        return self.gamma_nom / self.eta * self.i_max

    def check_control(self, u: ControlValue, tol: float = 1e-12) -> None:
        if not (self.beta_min - tol <= u.beta <= self.beta_nom + tol):
            raise ValueError(f"beta={u.beta} outside [{self.beta_min}, {self.beta_nom}]")
        if not (self.gamma_nom - tol <= u.gamma <= self.gamma_max + tol):
            raise ValueError(f"gamma={u.gamma} outside [{self.gamma_nom}, {self.gamma_max}]")

    def clip_control(self, beta: float, gamma: float) -> tuple[float, float]:
        return (
            min(max(beta, self.beta_min), self.beta_nom),
            min(max(gamma, self.gamma_nom), self.gamma_max),
        )


def _clamp_fraction(name: str, value: float, tol: float = CLAMP_TOL) -> float:
    value = float(value)
    if -tol <= value < 0.0:
        return 0.0
    if 1.0 < value <= 1.0 + tol:
        return 1.0
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"compartment {name}={value!r} outside [0, 1]")
    return value


@dataclass(frozen=True)
class State:
    """Compartment fractions (S, E, I, R) summing to one."""

    s: float
    e: float
    i: float
    r: float

    def __post_init__(self):
        for name in ("s", "e", "i", "r"):
            object.__setattr__(self, name, _clamp_fraction(name, getattr(self, name)))
        total = self.s + self.e + self.i + self.r
        if abs(total - 1.0) > SUM_TOL:
            raise ValueError(f"compartments sum to {total!r}, expected 1")

    @classmethod
    def from_sei(cls, s: float, e: float, i: float) -> State:
        """Build a state from (S, E, I); R takes up the remainder."""
        return cls(s, e, i, 1.0 - s - e - i)

    @classmethod
    def from_array(cls, x) -> State:
        x = np.asarray(x, dtype=float)
        if x.shape == (3,):
            return cls.from_sei(*x)
        if x.shape == (4,):
            return cls(*x)
        raise ValueError(f"expected 3 or 4 components, got shape {x.shape}")

    @property
    def sei(self) -> np.ndarray:
        return np.array([self.s, self.e, self.i])

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.e, self.i, self.r])


@dataclass(frozen=True)
class ControlValue:
    beta: float
    gamma: float


@dataclass(frozen=True)
class LinearTail:
    """Linear upper-bound system for (E, I) with S frozen.

    ``matrix_a`` has rows (-eta, beta*s_frozen) and (eta, -gamma).
    """

    matrix_a: np.ndarray
    eig1: complex
    eig2: complex

    @property
    def is_stable(self) -> bool:
        return self.eig1.real < 0 and self.eig2.real < 0


def vector_field(x: State, u: ControlValue, p: Params) -> np.ndarray:
    """Time derivative of (S, E, I, R)."""
    p.check_control(u)
    infection = u.beta * x.s * x.i
    return np.array([
        -infection,
        infection - p.eta * x.e,
        p.eta * x.e - u.gamma * x.i,
        u.gamma * x.i,
    ])


def stage_cost(x: State, u: ControlValue, p: Params) -> float:
    return (
        x.e ** 2 + x.i ** 2
        + (u.beta - p.beta_nom) ** 2
        + (u.gamma - p.gamma_nom) ** 2
    )


def herd_immunity_threshold(p: Params) -> float:
    return p.gamma_nom / p.beta_nom


def linear_tail(s_frozen: float, beta: float, gamma: float, p: Params) -> LinearTail:
    if not 0.0 <= s_frozen <= 1.0:
        raise ValueError(f"s_frozen={s_frozen} outside [0, 1]")
    p.check_control(ControlValue(beta, gamma))
    eta = p.eta
    a = np.array([[-eta, beta * s_frozen], [eta, -gamma]])
    half_trace = (eta + gamma) / 2
    disc = half_trace ** 2 - eta * gamma + eta * beta * s_frozen
    root = cmath.sqrt(disc)
    return LinearTail(a, complex(-half_trace + root), complex(-half_trace - root))
