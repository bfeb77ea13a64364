"""Split-step Fourier integration of the NLS in both time directions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from numpy.typing import NDArray
import scipy.fft as sfft

from .grid import Field, Grid
from .solitons import ConservedTriple, conserved_arrays

# Yoshida triple-jump weights for the fourth-order composition
_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_W0 = -(2.0 ** (1.0 / 3.0)) * _W1


class BlowUpError(RuntimeError):
    """The gradient norm exceeded the configured threshold."""

    def __init__(self, t: float, grad: float, limit: float):
        super().__init__(f"blow-up guard tripped at t={t:.6g}: |u_x|_L2={grad:.3e} > {limit:.3e}")
        self.t = t
        self.grad = grad
        self.limit = limit


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    scheme: Literal["strang", "fourth-order"] = "strang"
    max_gradient: float | None = None   # None: 1e3 x initial gradient norm
    dealias: bool = True
    stride: int = 100

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.max_gradient is not None and not self.max_gradient > 0:
            raise ValueError("max_gradient must be positive")
        if self.scheme not in ("strang", "fourth-order"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be a positive integer")


@dataclass
class Trajectory:
    times: NDArray[np.float64]
    snapshots: list[Field]
    conserved_series: list[ConservedTriple] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.snapshots) != self.times.size:
            raise ValueError("snapshot count does not match times")
        d = np.diff(self.times)
        if d.size and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("trajectory times must be strictly monotone")

    def __len__(self):
        return self.times.size

    @property
    def grid(self) -> Grid:
        return self.snapshots[0].grid

    def ascending(self) -> "Trajectory":
        if self.times.size > 1 and self.times[1] < self.times[0]:
            return Trajectory(self.times[::-1].copy(), self.snapshots[::-1],
                              self.conserved_series[::-1])
        return self

    def at(self, t: float, atol: float = 1e-9) -> Field:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > atol:
            raise KeyError(f"no snapshot at t={t}")
        return self.snapshots[i]

    def index(self, t: float, atol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > atol:
            raise KeyError(f"no snapshot at t={t}")
        return i


class Stepper:
    """Precomputed multipliers for a fixed signed step on a fixed grid."""

    def __init__(self, grid: Grid, p: float, dt: float, scheme: str = "strang",
                 dealias: bool = True):
        self.grid = grid
        self.p = p
        self.dt = dt
        self.scheme = scheme
        k = grid.k
        if scheme == "strang":
            self.subs = [dt]
        else:
            self.subs = [_W1 * dt, _W0 * dt, _W1 * dt]
        mask = np.ones_like(k)
        if dealias:
            mask[np.abs(k) > (2.0 / 3.0) * np.max(np.abs(k))] = 0.0
        self.lin = {h: mask * np.exp(-1j * k ** 2 * h) for h in set(self.subs)}
        self.half = (p - 1) / 2.0

    def _nl(self, u, h):
        return u * np.exp(1j * h * (u.real ** 2 + u.imag ** 2) ** self.half)

    def __call__(self, u: NDArray[np.complex128]) -> NDArray[np.complex128]:
        for h in self.subs:
            u = self._nl(u, 0.5 * h)
            u = sfft.ifft(self.lin[h] * sfft.fft(u))
            u = self._nl(u, 0.5 * h)
        return u


def gradient_norm(u: NDArray, grid: Grid) -> float:
    uh = sfft.fft(u)
    return float(np.sqrt(np.sum(grid.k ** 2 * np.abs(uh) ** 2) * grid.length) / grid.points)


def step(u: Field, dt: float, p: float, cfg: IntegratorConfig) -> Field:
    """One step of the configured splitting scheme (dt may be negative)."""
    if abs(dt) > 2 * cfg.dt:
        raise ValueError(f"|dt|={abs(dt)} exceeds twice the configured step {cfg.dt}")
    st = Stepper(u.grid, p, dt, cfg.scheme, cfg.dealias)
    out = st(u.values)
    if cfg.max_gradient is not None:
        g = gradient_norm(out, u.grid)
        if g > cfg.max_gradient:
            raise BlowUpError(dt, g, cfg.max_gradient)
    return Field(u.grid, out)


def step_count(t_from: float, t_to: float, dt: float) -> int:
    return max(1, int(round(abs(t_to - t_from) / dt)))


def evolve(u0: Field, t_from: float, t_to: float, p: float, cfg: IntegratorConfig,
           monitor: Callable[[float, NDArray], bool] | None = None,
           record_conserved: bool = True) -> Trajectory:
    """Integrate from t_from to t_to with a fixed step.

    Snapshots are taken every ``cfg.stride`` steps plus the endpoints.
    ``monitor(t, u)`` may return True to stop early (the trajectory then
    ends at the last recorded snapshot).
    """
    if not u0.is_finite():
        raise ValueError("initial field contains non-finite samples")
    grid = u0.grid
    if t_to == t_from:
        cs = [conserved_arrays(u0.values, grid, p)] if record_conserved else []
        return Trajectory(np.array([t_from]), [u0], cs)
    n = step_count(t_from, t_to, cfg.dt)
    h = (t_to - t_from) / n
    st = Stepper(grid, p, h, cfg.scheme, cfg.dealias)
    limit = cfg.max_gradient
    if limit is None:
        limit = 1e3 * max(gradient_norm(u0.values, grid), 1e-300)
    u = u0.values.copy()
    times = [t_from]
    snaps = [u0]
    cs = [conserved_arrays(u, grid, p)] if record_conserved else []
    if monitor is not None and monitor(t_from, u):
        return Trajectory(np.array(times), snaps, cs)
    for i in range(1, n + 1):
        u = st(u)
        if i % cfg.stride == 0 or i == n:
            t = t_from + i * h
            g = gradient_norm(u, grid)
            if not np.isfinite(g) or g > limit:
                raise BlowUpError(t, g, limit)
            times.append(t)
            snaps.append(Field(grid, u))
            if record_conserved:
                cs.append(conserved_arrays(u, grid, p))
            if monitor is not None and monitor(t, u):
                break
    return Trajectory(np.array(times), snaps, cs)


def conservation_drift(traj: Trajectory) -> tuple[float, float, float]:
    """(max relative mass drift, max relative energy drift, max absolute momentum drift)."""
    cs = traj.conserved_series
    if len(cs) < 2:
        return 0.0, 0.0, 0.0
    m = np.array([c.mass for c in cs])
    e = np.array([c.energy for c in cs])
    q = np.array([c.momentum for c in cs])
    rel = lambda a: float(np.max(np.abs(a - a[0])) / max(abs(a[0]), 1e-300))
    return rel(m), rel(e), float(np.max(np.abs(q - q[0])))
