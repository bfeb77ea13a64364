"""Periodic grid, complex fields and spectral calculus.

The real line is truncated to the periodic box [-L/2, L/2) sampled at M
equispaced points.  Every profile handled by the package decays
exponentially, so the periodic rectangle rule and Fourier differentiation
are spectrally accurate as long as the box is wide enough.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
import scipy.fft as sfft


class GridMismatchError(ValueError):
    """Two fields living on different grids were combined."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on [-L/2, L/2) with M points."""

    length: float
    points: int

    def __post_init__(self):
        if not (np.isfinite(self.length) and self.length > 0):
            raise ValueError(f"grid length must be positive, got {self.length}")
        if int(self.points) != self.points or self.points < 16 or self.points % 2:
            raise ValueError(f"grid points must be an even integer >= 16, got {self.points}")
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "points", int(self.points))

    @property
    def dx(self) -> float:
        return self.length / self.points

    @cached_property
    def x(self) -> NDArray[np.float64]:
        return -0.5 * self.length + self.dx * np.arange(self.points)

    @cached_property
    def k(self) -> NDArray[np.float64]:
        """Wavenumbers 2*pi*m/L in FFT order (m = 0..M/2-1, -M/2..-1)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.points, d=self.dx)

    @cached_property
    def k_odd(self) -> NDArray[np.float64]:
        # Nyquist mode has no partner; odd-order derivatives drop it so that
        # real fields stay real.
        k = self.k.copy()
        k[self.points // 2] = 0.0
        return k

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.points, dtype=complex))

    def field(self, values) -> "Field":
        return Field(self, values)


@dataclass(frozen=True, eq=False)
class Field:
    """Complex samples on a grid.  Treated as an immutable value."""

    grid: Grid
    values: NDArray[np.complex128]

    def __post_init__(self):
        v = np.array(self.values, dtype=np.complex128)
        if v.shape != (self.grid.points,):
            raise ValueError(f"field has {v.shape} samples, grid expects {self.grid.points}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # light arithmetic so that formulas read naturally
    def _other(self, other):
        if isinstance(other, Field):
            if other.grid != self.grid:
                raise GridMismatchError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return Field(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return Field(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return Field(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)

    def conj(self) -> "Field":
        return Field(self.grid, np.conj(self.values))

    @property
    def real(self) -> NDArray[np.float64]:
        return self.values.real

    @property
    def imag(self) -> NDArray[np.float64]:
        return self.values.imag

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def _check_same(f: Field, g: Field) -> None:
    if f.grid != g.grid:
        raise GridMismatchError("fields live on different grids")


def deriv_array(values: NDArray, grid: Grid, order: int = 1) -> NDArray[np.complex128]:
    """Spectral derivative of a raw sample array."""
    k = grid.k_odd if order % 2 else grid.k
    return sfft.ifft((1j * k) ** order * sfft.fft(values))


def spectral_derivative(f: Field, order: int = 1) -> Field:
    """Apply the Fourier multiplier (ik)^order."""
    if int(order) != order or order <= 0:
        raise ValueError(f"derivative order must be a positive integer, got {order}")
    if not f.is_finite():
        raise ValueError("field contains non-finite samples")
    return Field(f.grid, deriv_array(f.values, f.grid, int(order)))


def inner_real(f: Field, g: Field) -> float:
    """Re of the integral of f * conj(g)."""
    _check_same(f, g)
    return float(np.real(np.vdot(g.values, f.values)) * f.grid.dx)


def inner_imag(f: Field, g: Field) -> float:
    """Im of the integral of conj(f) * g."""
    _check_same(f, g)
    return float(np.imag(np.vdot(f.values, g.values)) * f.grid.dx)


def norm_l2(f: Field) -> float:
    return float(np.sqrt(np.sum(np.abs(f.values) ** 2) * f.grid.dx))


def h1_norm_array(values: NDArray, grid: Grid) -> float:
    """H^1 norm computed in Fourier space (same value as the physical one)."""
    fh = sfft.fft(values)
    w = 1.0 + grid.k_odd ** 2
    return float(np.sqrt(np.sum(w * np.abs(fh) ** 2) * grid.length) / grid.points)


def norm_h1(f: Field) -> float:
    d = deriv_array(f.values, f.grid, 1)
    s = np.sum(np.abs(f.values) ** 2) + np.sum(np.abs(d) ** 2)
    return float(np.sqrt(s * f.grid.dx))


def norm_hminus1(f: Field) -> float:
    fh = sfft.fft(f.values)
    s = np.sum(np.abs(fh) ** 2 / (1.0 + f.grid.k ** 2))
    return float(np.sqrt(s * f.grid.length) / f.grid.points)


def shift_array(values: NDArray, grid: Grid, s: float) -> NDArray[np.complex128]:
    """Periodic translation f(x) -> f(x - s) by a Fourier phase."""
    return sfft.ifft(sfft.fft(values) * np.exp(-1j * grid.k_odd * s))


def trig_interpolate(values: NDArray, grid: Grid, xs: NDArray, outside_zero: bool = True,
                     chunk: int = 256) -> NDArray[np.complex128]:
    """Evaluate the trigonometric interpolant of ``values`` at arbitrary points.

    Points outside [-L/2, L/2) are set to zero when ``outside_zero`` is true,
    which is the right continuation for decaying profiles (the periodic
    continuation would wrap the far tail onto the core).
    """
    xs = np.asarray(xs, dtype=float)
    M = grid.points
    coef = sfft.fft(values) / M
    m = np.fft.fftfreq(M, d=1.0 / M)
    # split the Nyquist coefficient evenly so real data interpolates to real
    nyq = M // 2
    kk = 2 * np.pi * m / grid.length
    out = np.empty(xs.shape, dtype=complex)
    flat = xs.ravel()
    res = out.ravel()
    for i in range(0, flat.size, chunk):
        xi = flat[i:i + chunk] - grid.x[0]
        ph = np.exp(1j * np.outer(xi, kk))
        r = ph @ coef
        # Nyquist: replace e^{-i pi M x/L} by cos(pi M x / L)
        r += coef[nyq] * (np.cos(np.pi * M * xi / grid.length) - ph[:, nyq])
        res[i:i + chunk] = r
    if outside_zero:
        half = 0.5 * grid.length
        res[(flat < -half) | (flat >= half)] = 0.0
    return out


def write_field_dump(path: str | Path, f: Field, t: float) -> tuple[Path, Path]:
    """Write little-endian interleaved (Re, Im) float64 samples plus a JSON sidecar."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    side = path.with_suffix(".json")
    inter = np.empty(2 * f.grid.points, dtype="<f8")
    inter[0::2] = f.values.real
    inter[1::2] = f.values.imag
    bin_path.write_bytes(inter.tobytes())
    side.write_text(json.dumps({"L": f.grid.length, "M": f.grid.points, "t": float(t)},
                               sort_keys=True))
    return bin_path, side


def read_field_dump(path: str | Path) -> tuple[Field, float]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    grid = Grid(meta["L"], meta["M"])
    if raw.size != 2 * grid.points:
        raise ValueError(f"dump {path} has {raw.size} floats, expected {2 * grid.points}")
    return Field(grid, raw[0::2] + 1j * raw[1::2]), float(meta["t"])
