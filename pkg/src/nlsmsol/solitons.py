"""Ground states, travelling solitons, symmetries and conservation laws.

Equation: i u_t + u_xx + |u|^{p-1} u = 0 on the line, p > 5.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .grid import Field, Grid, deriv_array, shift_array, trig_interpolate


class InsufficientGridError(ValueError):
    """Grid too short (tails touch the boundary) or too coarse."""


def _check_p(p: float) -> None:
    if not (np.isfinite(p) and p > 5):
        raise ValueError(f"nonlinearity exponent must satisfy p > 5, got {p}")


def _check_c(c: float) -> None:
    if not (np.isfinite(c) and c > 0):
        raise ValueError(f"soliton frequency must be positive, got {c}")


@dataclass(frozen=True)
class SolitonParams:
    c: float
    v: float = 0.0
    gamma: float = 0.0
    x0: float = 0.0

    def __post_init__(self):
        _check_c(self.c)
        for name in ("v", "gamma", "x0"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"soliton parameter {name} must be finite")

    def lam(self, t: float, x: NDArray) -> NDArray:
        """Moving coordinate x - v t - x0."""
        return x - self.v * t - self.x0

    def theta(self, t: float, x: NDArray) -> NDArray:
        """Phase v x/2 - v^2 t/4 + c t + gamma."""
        return 0.5 * self.v * x - 0.25 * self.v ** 2 * t + self.c * t + self.gamma


@dataclass(frozen=True)
class SolitonFamily:
    p: float
    members: tuple[SolitonParams, ...] = field(default_factory=tuple)

    def __post_init__(self):
        _check_p(self.p)
        members = tuple(self.members)
        if not members:
            raise ValueError("a soliton family needs at least one member")
        v = np.array([m.v for m in members])
        if np.any(np.diff(v) <= 0):
            raise ValueError("soliton velocities must be strictly increasing")
        object.__setattr__(self, "members", members)

    @property
    def N(self) -> int:
        return len(self.members)

    @property
    def c(self) -> NDArray:
        return np.array([m.c for m in self.members])

    @property
    def v(self) -> NDArray:
        return np.array([m.v for m in self.members])


@dataclass(frozen=True)
class ConservedTriple:
    mass: float
    energy: float
    momentum: float


# ---------------------------------------------------------------------------
# ground state

def unit_profile(p: float, y: NDArray) -> NDArray[np.float64]:
    """Q(y) = [((p+1)/2) sech^2((p-1) y / 2)]^{1/(p-1)}, overflow-safe."""
    a = 0.5 * (p - 1) * np.abs(np.asarray(y, dtype=float))
    # log sech(a) = -a + log 2 - log(1 + e^{-2a})
    log_sech = -a + np.log(2.0) - np.log1p(np.exp(-2.0 * a))
    return np.exp((np.log(0.5 * (p + 1)) + 2.0 * log_sech) / (p - 1))


def unit_profile_dx(p: float, y: NDArray) -> NDArray[np.float64]:
    """Derivative Q'(y) = -tanh((p-1) y / 2) Q(y)."""
    y = np.asarray(y, dtype=float)
    return -np.tanh(0.5 * (p - 1) * y) * unit_profile(p, y)


def profile(p: float, c: float, x: NDArray) -> NDArray[np.float64]:
    """Q_c(x) = c^{1/(p-1)} Q(sqrt(c) x) evaluated at arbitrary points."""
    return c ** (1.0 / (p - 1)) * unit_profile(p, np.sqrt(c) * np.asarray(x, dtype=float))


def profile_dx(p: float, c: float, x: NDArray) -> NDArray[np.float64]:
    return c ** (1.0 / (p - 1) + 0.5) * unit_profile_dx(p, np.sqrt(c) * np.asarray(x, dtype=float))


def _check_tails(p: float, c: float, grid: Grid) -> None:
    edge = profile(p, c, np.array([0.5 * grid.length]))[0]
    if edge >= 1e-14 * profile(p, c, np.array([0.0]))[0]:
        raise InsufficientGridError(
            f"Q_c (p={p}, c={c}) is {edge:.2e} at the boundary; enlarge L beyond {grid.length}")


def ground_state(p: float, c: float, grid: Grid) -> Field:
    """Sampled ground state Q_c (real, even, positive)."""
    _check_p(p)
    _check_c(c)
    _check_tails(p, c, grid)
    return Field(grid, profile(p, c, grid.x))


def ground_state_residual(Q: Field, p: float, c: float) -> float:
    """Sup norm of Q'' + Q^p - c Q, the oracle for the closed form."""
    q = Q.values.real
    r = deriv_array(q, Q.grid, 2).real + np.abs(q) ** p - c * q
    return float(np.max(np.abs(r)))


# ---------------------------------------------------------------------------
# solitons

def soliton_array(t: float, m: SolitonParams, p: float, grid: Grid) -> NDArray[np.complex128]:
    x = grid.x
    return profile(p, m.c, m.lam(t, x)) * np.exp(1j * m.theta(t, x))


def soliton(t: float, params: SolitonParams, p: float, grid: Grid) -> Field:
    """R_j(t) = Q_c(lambda) e^{i theta}."""
    _check_p(p)
    _check_tails(p, params.c, grid)
    return Field(grid, soliton_array(t, params, p, grid))


def soliton_sum(t: float, family: SolitonFamily, grid: Grid) -> Field:
    out = np.zeros(grid.points, dtype=complex)
    for m in family.members:
        _check_tails(family.p, m.c, grid)
        out += soliton_array(t, m, family.p, grid)
    return Field(grid, out)


# ---------------------------------------------------------------------------
# symmetries

@dataclass(frozen=True)
class Translate:
    t0: float = 0.0
    x0: float = 0.0


@dataclass(frozen=True)
class Scale:
    lam: float
    target: Grid | None = None

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"scaling factor must be positive, got {self.lam}")


@dataclass(frozen=True)
class Phase:
    gamma0: float


@dataclass(frozen=True)
class Galilean:
    v0: float


def apply_symmetry(u: Field, kind, t: float, p: float | None = None) -> Field:
    """Transform a solution snapshot and return the new solution at time ``t``.

    ``u`` must be the source solution sampled at the source time that maps
    to ``t``: t - t0 for translations, lam^2 t for scaling, t otherwise.
    Scaling changes the natural box length by 1/lam, so the caller supplies
    the target grid (defaults to the source grid).
    """
    g = u.grid
    if isinstance(kind, Translate):
        if kind.x0 == 0.0:
            return u
        return Field(g, shift_array(u.values, g, kind.x0))
    if isinstance(kind, Phase):
        return Field(g, u.values * np.exp(1j * kind.gamma0))
    if isinstance(kind, Galilean):
        v0 = kind.v0
        # u(t, x - v0 t) via Fourier shift, then the unimodular phase
        w = shift_array(u.values, g, v0 * t) if v0 * t != 0.0 else u.values
        return Field(g, w * np.exp(1j * (0.5 * v0 * g.x - 0.25 * v0 ** 2 * t)))
    if isinstance(kind, Scale):
        if p is None:
            raise ValueError("scaling needs the exponent p")
        target = kind.target or g
        lam = kind.lam
        vals = trig_interpolate(u.values, g, lam * target.x)
        return Field(target, lam ** (2.0 / (p - 1)) * vals)
    raise TypeError(f"unknown symmetry {kind!r}")


# ---------------------------------------------------------------------------
# conservation laws

def conserved_arrays(u: NDArray, grid: Grid, p: float) -> ConservedTriple:
    ux = deriv_array(u, grid, 1)
    dx = grid.dx
    a2 = np.abs(u) ** 2
    mass = np.sum(a2) * dx
    energy = (0.5 * np.sum(np.abs(ux) ** 2) - np.sum(a2 ** (0.5 * (p + 1))) / (p + 1)) * dx
    momentum = np.sum(np.imag(ux * np.conj(u))) * dx
    return ConservedTriple(float(mass), float(energy), float(momentum))


def conserved(u: Field, p: float) -> ConservedTriple:
    """Mass, energy and momentum (momentum = Im of the integral of u_x conj(u))."""
    return conserved_arrays(u.values, u.grid, p)


def interaction_integral(t: float, a: SolitonParams, b: SolitonParams, p: float,
                         grid: Grid) -> float:
    """Integral of |R_a||R_b| + |d_x R_a||d_x R_b| at time t."""
    Qa, dQa = soliton_moduli(t, a, p, grid.x)
    Qb, dQb = soliton_moduli(t, b, p, grid.x)
    return float(np.sum(Qa * Qb + dQa * dQb) * grid.dx)


def soliton_moduli(t: float, m: SolitonParams, p: float, x: NDArray):
    """(|R|, |d_x R|) in closed form; avoids spectral noise in far tails."""
    lam = m.lam(t, x)
    q = profile(p, m.c, lam)
    dq = profile_dx(p, m.c, lam)
    return q, np.sqrt(dq ** 2 + 0.25 * m.v ** 2 * q ** 2)


def make_family(p: float, members: Sequence[dict | SolitonParams]) -> SolitonFamily:
    ms = [m if isinstance(m, SolitonParams) else SolitonParams(**m) for m in members]
    return SolitonFamily(p, tuple(ms))
