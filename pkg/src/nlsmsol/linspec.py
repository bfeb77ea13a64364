"""Linearized operators around Q_c and the unstable eigenpair (e0, Y+-).

Conventions: L+ = -d^2 + c - p Q_c^{p-1}, L- = -d^2 + c - Q_c^{p-1} and the
block operator acts on v = v1 + i v2 as  Lv = -L- v2 + i L+ v1.  The pair
Y+ = Y1 + i Y2 solves L+ Y1 = e0 Y2, L- Y2 = -e0 Y1, hence
L- L+ Y1 = -e0^2 Y1.  Normalization: -2 int Y1 Y2 = 1, sign fixed by
Y1(0) > 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
import scipy.fft as sfft
from scipy import linalg as sla
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .grid import Field, Grid, deriv_array, shift_array, trig_interpolate
from .solitons import _check_p, profile

log = logging.getLogger(__name__)

DEFAULT_GRID = Grid(60.0, 2048)


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LinearizedSpectrum:
    e0: float
    Y1: NDArray[np.float64]
    Y2: NDArray[np.float64]
    eta0: float
    p: float
    grid: Grid
    c: float = 1.0
    residual: float = float("nan")

    @property
    def Yplus(self) -> Field:
        return Field(self.grid, self.Y1 + 1j * self.Y2)

    @property
    def Yminus(self) -> Field:
        return Field(self.grid, self.Y1 - 1j * self.Y2)


@dataclass(frozen=True, eq=False)
class ScaledMode:
    c: float
    e_c: float
    Yc_plus: Field

    @property
    def Yc_minus(self) -> Field:
        return self.Yc_plus.conj()


# ---------------------------------------------------------------------------
# operators

def _lap(f: NDArray, grid: Grid) -> NDArray:
    return sfft.ifft(-(grid.k ** 2) * sfft.fft(f)).real


def assemble_operators(p: float, c: float, grid: Grid
                       ) -> tuple[Callable[[NDArray], NDArray], Callable[[NDArray], NDArray]]:
    """Return (L+, L-) acting on real sample arrays."""
    _check_p(p)
    V = profile(p, c, grid.x) ** (p - 1)

    def Lplus(f):
        f = np.asarray(f, dtype=float)
        return -_lap(f, grid) + c * f - p * V * f

    def Lminus(f):
        f = np.asarray(f, dtype=float)
        return -_lap(f, grid) + c * f - V * f

    return Lplus, Lminus


def eigen_residual(spec: LinearizedSpectrum) -> float:
    """||L+Y1 - e0 Y2||_L2 + ||L-Y2 + e0 Y1||_L2."""
    Lp, Lm = assemble_operators(spec.p, spec.c, spec.grid)
    dx = spec.grid.dx
    r1 = Lp(spec.Y1) - spec.e0 * spec.Y2
    r2 = Lm(spec.Y2) + spec.e0 * spec.Y1
    return float(np.sqrt(np.sum(r1 ** 2) * dx) + np.sqrt(np.sum(r2 ** 2) * dx))


def _reflect(f: NDArray) -> NDArray:
    # x_j = -L/2 + j dx  ->  -x_j is index (M - j) mod M
    return np.roll(f[::-1], 1)


def _even(f: NDArray) -> NDArray:
    return 0.5 * (f + _reflect(f))


def _denoise(f: NDArray) -> NDArray:
    """Zero Fourier coefficients below the rounding floor of the field."""
    fh = sfft.fft(f)
    fh[np.abs(fh) < 1e-15 * np.max(np.abs(fh))] = 0.0
    return sfft.ifft(fh).real


def normalize_mode(Y1: NDArray, Y2: NDArray, grid: Grid) -> tuple[NDArray, NDArray]:
    """Scale so that -2 int Y1 Y2 = 1 and fix the sign by Y1(0) > 0."""
    s = -2.0 * np.sum(Y1 * Y2) * grid.dx
    if not s > 0:
        raise EigenSolverError(f"normalization integral -2 int Y1 Y2 = {s} is not positive")
    Y1 = Y1 / np.sqrt(s)
    Y2 = Y2 / np.sqrt(s)
    i0 = int(np.argmin(np.abs(grid.x)))
    if Y1[i0] < 0:
        Y1, Y2 = -Y1, -Y2
    return Y1, Y2


# ---------------------------------------------------------------------------
# method 1: shifted inverse iteration on L- L+ (matrix free)

def _inverse_iteration(p: float, grid: Grid, c: float, max_iter: int):
    """Unstable eigenpair by shifted inverse iteration on L- L+.

    The iteration runs on even functions (the mode is even; parity is
    checked and logged, not imposed, at the end) with the even kernel
    direction f0 = -dQ_c/dc deflated through its left eigenvector Q_c.
    GMRES with the Fourier preconditioner ((k^2 + c)^2 - s)^{-1} solves the
    shifted systems.
    """
    _check_p(p)
    Lp, Lm = assemble_operators(p, c, grid)
    x = grid.x
    Q = profile(p, c, x)
    Qx = deriv_array(Q, grid, 1).real
    f0 = -(Q / (p - 1) + 0.5 * x * Qx) / c      # L+ f0 = Q_c, so (L- L+) f0 = 0
    qf0 = np.dot(Q, f0)

    def deflate(f):
        return f - (np.dot(Q, f) / qf0) * f0

    A = lambda f: Lm(Lp(f))
    k2 = grid.k ** 2
    M = grid.points
    V = Q ** (p - 1)

    def factor(s):
        # With D = -d^2 + c:  A - s = (D^2 - s) - D(pV .) - V D + p V^2.
        # Preconditioning by (D^2 - s)^{-1} leaves I + K where K only holds
        # lower-order terms, which keeps rounding away from the k^4 symbol.
        # K is assembled densely (one batched FFT) and LU-factored once per shift.
        den = (k2 + c) ** 2 - s
        m0 = 1.0 / den
        m1 = (k2 + c) / den
        E = np.eye(M)
        DE = sfft.ifft((k2 + c)[:, None] * sfft.fft(E, axis=0), axis=0).real
        G = (-m1[:, None] * sfft.fft(p * V[:, None] * E, axis=0)
             + m0[:, None] * sfft.fft(-V[:, None] * DE + (p * V * V)[:, None] * E, axis=0))
        op = E + sfft.ifft(G, axis=0).real
        lu = sla.lu_factor(op)
        return lambda rhs: sla.lu_solve(lu, sfft.ifft(m0 * sfft.fft(rhs)).real)

    def run(s, f, iters):
        mu = np.nan
        solve = factor(s)
        for _ in range(iters):
            y = deflate(_even(solve(f)))
            y /= np.linalg.norm(y)
            Ay = A(y)
            mu_new = float(np.dot(y, Ay))
            f = y
            if abs(mu_new - mu) < 1e-14 * max(1.0, abs(mu_new)):
                mu = mu_new
                break
            mu = mu_new
        return mu, f

    f = deflate(_even(Q ** ((p + 1) / 2)))
    f /= np.linalg.norm(f)
    mu = np.nan
    for s in (-4.0 * c ** 3, -16.0 * c ** 3, -64.0 * c ** 3, -256.0 * c ** 3, -1024.0 * c ** 3):
        mu, g = run(s, f, 60)
        if mu < 0 and abs(mu - s) < abs(s):
            f = g
            break
    else:
        raise EigenSolverError(f"no negative eigenvalue of L-L+ found for p={p}, c={c}")
    # refine with a shift just below the eigenvalue
    for _ in range(3):
        mu, f = run(mu - 0.25 * c ** 3, f, max_iter)
    e0 = float(np.sqrt(-mu))
    Y1 = _denoise(f)
    Y2 = _denoise(Lp(Y1) / e0)
    Y1, Y2 = normalize_mode(Y1, Y2, grid)
    return e0, Y1, Y2


def compute_eigenmode(p: float, grid: Grid = DEFAULT_GRID, tol: float = 1e-8,
                      c: float = 1.0, max_iter: int = 400) -> LinearizedSpectrum:
    """Unstable eigenpair (e0, Y+) with residual and parity checks."""
    e0, Y1, Y2 = _inverse_iteration(p, grid, c, max_iter)
    spec = LinearizedSpectrum(e0, Y1, Y2, float("nan"), p, grid, c)
    res = eigen_residual(spec)
    if not res < tol:
        raise EigenSolverError(f"eigen residual {res:.3e} above tolerance {tol:.1e}")
    odd = max(np.max(np.abs(Y1 - _reflect(Y1))), np.max(np.abs(Y2 - _reflect(Y2))))
    if odd > 1e-9:
        log.warning("Y+ parity check: odd part %.2e exceeds 1e-9", odd)
    eta = min(decay_rate(Field(grid, Y1 + 1j * Y2)),
              decay_rate(Field(grid, deriv_array(Y1 + 1j * Y2, grid, 1))))
    return LinearizedSpectrum(e0, Y1, Y2, eta, p, grid, c, res)


# ---------------------------------------------------------------------------
# method 2: dense eigensolve of the block operator

def dense_eigenvalues(p: float, grid: Grid = Grid(30.0, 512), c: float = 1.0
                      ) -> tuple[NDArray[np.complex128], NDArray[np.complex128]]:
    """All eigenpairs of the dense 2M x 2M real block realization of L."""
    M = grid.points
    eye = np.eye(M)
    D2 = sfft.ifft(-(grid.k ** 2)[:, None] * sfft.fft(eye, axis=0), axis=0).real
    V = profile(p, c, grid.x) ** (p - 1)
    Lp = -D2 + np.diag(c - p * V)
    Lm = -D2 + np.diag(c - V)
    B = np.block([[np.zeros((M, M)), -Lm], [Lp, np.zeros((M, M))]])
    return sla.eig(B)


def dense_eigenvalue(p: float, grid: Grid = Grid(30.0, 512), c: float = 1.0
                     ) -> tuple[float, float | None]:
    """Largest genuine positive real eigenvalue and the next positive real one.

    Candidates whose eigenvector has no exponential tail (decay rate < 0.1)
    are discarded as continuous-spectrum artifacts.
    """
    w, V = dense_eigenvalues(p, grid, c)
    M = grid.points
    real = [(w[i].real, i) for i in range(w.size)
            if abs(w[i].imag) < 1e-6 * max(1.0, abs(w[i])) and w[i].real > 1e-4]
    good = []
    for lam, i in sorted(real, reverse=True):
        vec = V[:M, i] + 1j * V[M:, i]
        try:
            if decay_rate(Field(grid, vec)) >= 0.1:
                good.append(lam)
        except ValueError:
            continue
    if not good:
        raise EigenSolverError("dense solve found no positive real eigenvalue")
    return float(good[0]), (float(good[1]) if len(good) > 1 else None)


# ---------------------------------------------------------------------------
# method 3: ODE shooting on the decaying solutions

def _shoot_det(e: float, p: float, c: float, X: float, rtol: float) -> float:
    kap = np.sqrt(c + 1j * e)

    def rhs(x, y):
        Y1, Y2, d1, d2 = y
        V = profile(p, c, np.array([x]))[0] ** (p - 1)
        return [d1, d2, (c - p * V) * Y1 - e * Y2, (c - V) * Y2 + e * Y1]

    cols = []
    for C in (1.0, 1j):
        w = C * np.exp(-kap * X)
        dw = -kap * w
        scale = abs(w)
        y0 = np.array([w.real, w.imag, dw.real, dw.imag]) / scale
        sol = solve_ivp(rhs, (X, 0.0), y0, method="DOP853", rtol=rtol, atol=rtol * 1e-3)
        yend = sol.y[:, -1]
        cols.append(yend[2:] / np.linalg.norm(yend))
    return float(cols[0][0] * cols[1][1] - cols[0][1] * cols[1][0])


def shooting_eigenvalue(p: float, c: float = 1.0, X: float = 14.0,
                        e_max: float | None = None) -> float:
    """e0 from the decaying solutions of the coupled ODE system.

    Solutions decaying at +infinity behave like Re/Im of C e^{-kappa x} with
    kappa = sqrt(c + i e); an even eigenfunction needs Y1'(0) = Y2'(0) = 0,
    i.e. a vanishing 2x2 determinant.  The root is bracketed by a coarse
    scan and polished with Brent's method.
    """
    _check_p(p)
    if e_max is None:
        e_max = 2.0 * p * c ** 1.5
    grid_e = np.linspace(0.05 * c ** 1.5, e_max, 120)
    d = np.array([_shoot_det(e, p, c, X, 1e-9) for e in grid_e])
    idx = np.nonzero(np.sign(d[:-1]) * np.sign(d[1:]) < 0)[0]
    if idx.size == 0:
        raise EigenSolverError("shooting determinant has no sign change")
    roots = [brentq(_shoot_det, grid_e[i], grid_e[i + 1], args=(p, c, X, 1e-12), xtol=1e-14)
             for i in idx]
    if len(roots) > 1:
        log.info("shooting determinant has %d sign changes: %s", len(roots), roots)
    return float(max(roots))


# ---------------------------------------------------------------------------
# rescaling, decay, coercivity

def scaled_mode(spec: LinearizedSpectrum, c: float, grid: Grid) -> ScaledMode:
    """Y_c^+(x) = c^{1/4} Y^+(sqrt(c) x) on the target grid.

    The eigenvalue is e_c = c e0: the NLS scaling u -> l^{2/(p-1)} u(l^2 t, l x)
    with l = sqrt(c) maps L to c L, so the growth rate scales like time, by c.
    (The c^{3/2} law sometimes quoted is the KdV one; the independent
    eigensolve at c != 1 confirms the linear law, see tests.)
    """
    if not c > 0:
        raise ValueError("c must be positive")
    e_c = c * spec.e0
    src = spec.Y1 + 1j * spec.Y2
    if c == 1.0 and grid == spec.grid:
        vals = src.copy()
    else:
        y1 = trig_interpolate(spec.Y1, spec.grid, np.sqrt(c) * grid.x).real
        y2 = trig_interpolate(spec.Y2, spec.grid, np.sqrt(c) * grid.x).real
        vals = c ** 0.25 * (y1 + 1j * y2)
    return ScaledMode(c, e_c, Field(grid, vals))


def decay_rate(f: Field, lo: float = 1e-12, hi: float = 1e-2) -> float:
    """Exponential decay rate of |f| from a log-linear fit of its tails."""
    a = np.abs(f.values)
    peak = a.max()
    if not peak > 0:
        raise ValueError("cannot fit the decay rate of a zero field")
    x = f.grid.x
    # stay a factor 100 above the rounding floor seen near the box edge
    edge = np.abs(x) > 0.4 * f.grid.length
    lo = max(lo, 100.0 * float(np.median(a[edge])) / peak)
    if not lo < hi:
        raise ValueError("no tail above the noise floor; enlarge the box")
    # tails are the samples outside the outermost points above hi*peak,
    # measured from those points (handles profiles with several humps)
    core = np.flatnonzero(a >= hi * peak)
    left, right = x[core[0]], x[core[-1]]
    r = np.where(x < left, left - x, x - right)
    mask = (a > lo * peak) & ((x < left) | (x > right))
    if mask.sum() < 8:
        raise ValueError("too few tail samples for a decay fit")
    slope, icpt = np.polyfit(r[mask], np.log(a[mask]), 1)
    resid = np.log(a[mask]) - (slope * r[mask] + icpt)
    if slope >= 0 or np.sqrt(np.mean(resid ** 2)) > 1.0:
        raise ValueError("field has no clean exponential tail")
    return float(-slope)


def projection_functionals(spec: LinearizedSpectrum) -> NDArray[np.float64]:
    """Rows g_i with ell_i(v) = <g_i, (v1, v2)> dx for the four coercivity projections."""
    grid = spec.grid
    Q = profile(spec.p, spec.c, grid.x)
    Qx = deriv_array(Q, grid, 1).real
    z = np.zeros_like(Q)
    Y1, Y2 = spec.Y1, spec.Y2
    return np.array([
        np.concatenate([Qx, z]),            # int dQ v1
        np.concatenate([z, Q]),             # int Q v2
        np.concatenate([Y2, -Y1]),          # Im int Y+ conj(v)
        np.concatenate([-Y2, -Y1]),         # Im int Y- conj(v)
    ])


def coercivity_check(v: Field, spec: LinearizedSpectrum) -> tuple[float, NDArray[np.float64]]:
    """((L+v1, v1) + (L-v2, v2), the four squared projections)."""
    Lp, Lm = assemble_operators(spec.p, spec.c, spec.grid)
    v1, v2 = v.values.real, v.values.imag
    dx = spec.grid.dx
    quad = float((np.dot(Lp(v1), v1) + np.dot(Lm(v2), v2)) * dx)
    G = projection_functionals(spec)
    proj = (G @ np.concatenate([v1, v2]) * dx) ** 2
    return quad, proj


def remove_projections(v: Field, spec: LinearizedSpectrum) -> Field:
    """Orthogonally remove the four coercivity directions (real L2 sense)."""
    G = projection_functionals(spec)
    w = np.concatenate([v.values.real, v.values.imag])
    w = w - G.T @ np.linalg.solve(G @ G.T, G @ w)
    M = spec.grid.points
    return Field(spec.grid, w[:M] + 1j * w[M:])


# ---------------------------------------------------------------------------
# modes carried along the soliton frames

class ModeBank:
    """Y_k^{+-}(t, x) = Y_{c_k}^{+-}(lambda_k) e^{i theta_k} for every soliton of a family.

    Centered rescaled modes are interpolated once onto the run grid and then
    moved by Fourier translation.  Frames are cached per (k, t).
    """

    def __init__(self, spec: LinearizedSpectrum, family, grid: Grid):
        self.spec = spec
        self.family = family
        self.grid = grid
        self.modes = [scaled_mode(spec, m.c, grid) for m in family.members]
        self._cache: dict[tuple[int, float], NDArray[np.complex128]] = {}

    @property
    def rates(self) -> NDArray[np.float64]:
        return np.array([m.e_c for m in self.modes])

    def plus(self, k: int, t: float) -> NDArray[np.complex128]:
        key = (k, float(t))
        out = self._cache.get(key)
        if out is None:
            m = self.family.members[k]
            g = self.grid
            out = shift_array(self.modes[k].Yc_plus.values, g, m.v * t + m.x0)
            out = out * np.exp(1j * m.theta(t, g.x))
            out.setflags(write=False)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = out
        return out

    def minus(self, k: int, t: float) -> NDArray[np.complex128]:
        # Y_k^-(t) = conj(Y_{c_k}^+)(lambda_k) e^{i theta_k} = conj(Y_k^+) e^{2 i theta_k}
        m = self.family.members[k]
        return np.conj(self.plus(k, t)) * np.exp(2j * m.theta(t, self.grid.x))

    def alpha(self, z: NDArray, t: float, ks=None) -> tuple[NDArray, NDArray]:
        """(alpha^+, alpha^-) with alpha_k^{+-} = Im int conj(z) Y_k^{+-}."""
        ks = range(self.family.N) if ks is None else ks
        dx = self.grid.dx
        ap = np.array([np.imag(np.vdot(z, self.plus(k, t))) * dx for k in ks])
        am = np.array([np.imag(np.vdot(z, self.minus(k, t))) * dx for k in ks])
        return ap, am

    def gram_minus(self, t: float, ks) -> NDArray[np.float64]:
        """Phi[k][l] = alpha_k^-(Y_l^+) = Im int conj(Y_l^+) Y_k^-, diagonal 1."""
        dx = self.grid.dx
        ks = list(ks)
        G = np.empty((len(ks), len(ks)))
        for a, k in enumerate(ks):
            Ym = self.minus(k, t)
            for b, l in enumerate(ks):
                G[a, b] = np.imag(np.vdot(self.plus(l, t), Ym)) * dx
        return G
