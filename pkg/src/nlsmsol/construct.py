"""Backward shooting constructions: the base multi-soliton and its perturbations.

Every construction integrates the NLS backward from a final time Sn with
final data corrected along the modes Y_k^+ that grow backward.  Short
windows are solved by bisection (one unstable direction) or damped Newton.
Long windows exceed what double precision can resolve (the backward flow
amplifies by e^{e_max (Sn - t0)}), so they are solved by multiple shooting
over a node schedule: at each node the unstable coordinates alpha_K^- are
reset along Y_k^+ and the node values are updated until the jumps reach the
rounding floor.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .diagnostics import ProjectionSeries, fit_rate, perturbation, projection_series
from .evolve import IntegratorConfig, Trajectory, evolve
from .grid import Field, Grid, h1_norm_array
from .linspec import LinearizedSpectrum, ModeBank
from .solitons import SolitonFamily, conserved_arrays, soliton_sum

log = logging.getLogger(__name__)

ANCHOR_FLOOR = 1e-9      # amplitude term at the anchor time, well above the ~1e-14 noise of phi


class ConditioningError(ValueError):
    """Backward window too long to be resolved in double precision."""


class ShootingError(RuntimeError):
    """The shooting solver did not produce a certified trajectory."""

    def __init__(self, message: str, result: "ShootingResult | None" = None):
        super().__init__(message)
        self.result = result


class StageError(RuntimeError):
    def __init__(self, stage: int, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# scales and problem description

@dataclass(frozen=True)
class InteractionScales:
    sigma0: float
    gamma: float

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.gamma != self.sigma0 ** 1.5 / 1e6:
            raise ValueError("gamma must equal sigma0^{3/2} / 1e6")


def interaction_scales(family: SolitonFamily, spec: LinearizedSpectrum) -> InteractionScales:
    """sigma0 = min{eta0 sqrt(c_min), e0^{2/3} c_min, c_min, v gaps}, gamma = sigma0^{3/2}/1e6."""
    cmin = float(np.min(family.c))
    terms = [spec.eta0 * np.sqrt(cmin), spec.e0 ** (2.0 / 3.0) * cmin, cmin]
    terms += list(np.diff(family.v))
    s = float(min(terms))
    return InteractionScales(s, s ** 1.5 / 1e6)


def default_t0(family: SolitonFamily, scales: InteractionScales, distance: float | None = None) -> float:
    """First time all neighbours are >= 10/sqrt(sigma0) apart, but at least 1 (cutoffs need t > 0)."""
    d = 10.0 / np.sqrt(scales.sigma0) if distance is None else distance
    x = np.array([m.x0 for m in family.members])
    v = family.v
    t = 0.0
    for k in range(family.N - 1):
        gap0 = x[k + 1] - x[k]
        t = max(t, (d - gap0) / (v[k + 1] - v[k]))
    return float(max(t, 1.0))


def conditioning_cap(e_max: float, budget: float = 1e8) -> float:
    """Longest backward window with amplification e^{e_max w} <= budget."""
    return float(np.log(budget) / e_max)


@dataclass(frozen=True)
class ShootingOptions:
    newton_tol: float = 1e-6        # on |alpha^-(t0)| e^{(rate+2 gamma) t0}
    max_iter: int = 40
    fd_increment: float = 1e-3
    threads: int = 1
    budget: float = 1e8
    probes: int = 4                 # bisection points per round; results do not depend on threads

    def __post_init__(self):
        if not (self.newton_tol > 0 and self.fd_increment > 0 and self.budget > 1
                and self.probes >= 1 and self.threads >= 1):
            raise ValueError("shooting tolerances must be positive")
        if self.max_iter < 1 or self.threads < 1:
            raise ValueError("max_iter and threads must be >= 1")


@dataclass(frozen=True, eq=False)
class ShootingProblem:
    """Data of one backward shooting problem.

    ``j`` is the 0-based index of the perturbed soliton (None for the base
    problem, where phi_base is the sum of solitons R and every soliton is
    shot).  ``schedule`` lists multiple-shooting node times.
    """

    family: SolitonFamily
    p: float
    j: int | None
    A_j: float
    t0: float
    Sn: float
    phi_base: Trajectory
    scales: InteractionScales
    modes: ModeBank
    cfg: IntegratorConfig
    schedule: tuple[float, ...] | None = None
    options: ShootingOptions = field(default_factory=ShootingOptions)

    def __post_init__(self):
        if not self.t0 < self.Sn:
            raise ValueError(f"need t0 < Sn, got t0={self.t0}, Sn={self.Sn}")
        if self.j is not None and not 0 <= self.j < self.family.N:
            raise ValueError(f"soliton index {self.j} out of range")
        if self.j is None and self.A_j != 0.0:
            raise ValueError("the base problem has no amplitude term")
        ts = self.phi_base.times
        if ts.min() > self.t0 + 1e-9 or ts.max() < self.Sn - 1e-9:
            raise ValueError("phi_base does not cover [t0, Sn]")
        n = (self.Sn - self.t0) / (self.cfg.dt * self.cfg.stride)
        if abs(n - round(n)) > 1e-6:
            raise ValueError("Sn - t0 must be a multiple of dt * stride (aligned snapshots)")
        if self.schedule is not None:
            object.__setattr__(self, "schedule", _normalize_schedule(self))

    @property
    def base(self) -> bool:
        return self.j is None

    @property
    def K(self) -> tuple[int, ...]:
        if self.base:
            return tuple(range(self.family.N))
        c = self.family.c
        return tuple(k for k in range(self.family.N) if c[k] > c[self.j])

    @property
    def J(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.family.N) if k not in self.K)

    @property
    def k0(self) -> int:
        return len(self.K)

    @property
    def e_j(self) -> float:
        return 0.0 if self.base else float(self.modes.rates[self.j])

    @property
    def rate(self) -> float:
        """Tube rate: e_j, or sigma0^{3/2} for the base problem."""
        return self.scales.sigma0 ** 1.5 if self.base else self.e_j

    @property
    def theta_margin(self) -> float | None:
        if not self.K:
            return None
        e_min = float(np.min(self.modes.rates[list(self.K)]))
        return 2.0 * (e_min - self.rate - 2.0 * self.scales.gamma)

    def z_radius(self, t):
        return np.exp(-(self.rate + self.scales.gamma) * np.asarray(t))

    def alpha_radius(self, t):
        return np.exp(-(self.rate + 2.0 * self.scales.gamma) * np.asarray(t))


def _normalize_schedule(prob: ShootingProblem) -> tuple[float, ...]:
    h = prob.cfg.dt * prob.cfg.stride
    nodes = {prob.t0, prob.Sn}
    for s in prob.schedule:
        if prob.t0 < s < prob.Sn:
            n = (prob.Sn - s) / h
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"schedule node {s} is not on the snapshot lattice")
            nodes.add(prob.Sn - round(n) * h)
    return tuple(sorted(nodes))


def uniform_schedule(t0: float, Sn: float, width: float) -> tuple[float, ...]:
    """Nodes Sn, Sn - width, ... down to t0."""
    n = max(1, int(np.ceil((Sn - t0) / width - 1e-9)))
    return tuple(sorted({t0} | {Sn - i * width for i in range(n)}))


@dataclass
class ShootingResult:
    a: NDArray[np.float64]
    b: NDArray[np.float64]
    trajectory: Trajectory
    exit_time: float
    residual_series: NDArray[np.float64]      # ||z(t)||_{H^1} at trajectory.times
    alpha_series: ProjectionSeries
    theta_margin: float | None
    method: str = ""
    iterations: int = 0
    node_jumps: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    anchor: float = float("nan")
    certified: bool = False

    def summary(self) -> dict:
        return {
            "a": [float(x) for x in self.a],
            "b": [float(x) for x in self.b],
            "exit_time": float(self.exit_time),
            "theta_margin": self.theta_margin,
            "method": self.method,
            "iterations": int(self.iterations),
            "max_node_jump": float(np.max(self.node_jumps)) if self.node_jumps.size else 0.0,
            "anchor": float(self.anchor),
            "certified": bool(self.certified),
        }


# ---------------------------------------------------------------------------
# final data

def _phi(prob: ShootingProblem, t: float) -> NDArray[np.complex128]:
    return prob.phi_base.at(t).values


def _z(prob: ShootingProblem, u: NDArray, t: float) -> NDArray[np.complex128]:
    return perturbation(u, _phi(prob, t), t, prob.modes, prob.j, prob.A_j)


def _alpha_K(prob: ShootingProblem, z: NDArray, t: float) -> NDArray[np.float64]:
    return prob.modes.alpha(z, t, prob.K)[1]


def _combo(prob: ShootingProblem, coef, t: float) -> NDArray[np.complex128]:
    out = np.zeros(prob.modes.grid.points, dtype=complex)
    for c, k in zip(coef, prob.K):
        out += c * prob.modes.plus(k, t)
    return out


def final_data(prob: ShootingProblem, b) -> Field:
    """phi(Sn) + A_j e^{-e_j Sn} Y_j^+(Sn) + sum_K b_k Y_k^+(Sn)."""
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.size != prob.k0:
        raise ValueError(f"expected {prob.k0} final-data coefficients, got {b.size}")
    Sn = prob.Sn
    u = _phi(prob, Sn).copy()
    if not prob.base and prob.A_j != 0.0:
        u = u + prob.A_j * np.exp(-prob.e_j * Sn) * prob.modes.plus(prob.j, Sn)
    if b.size:
        u = u + _combo(prob, b, Sn)
    return Field(prob.modes.grid, u)


def modulation_matrix(prob: ShootingProblem, t: float | None = None) -> NDArray[np.float64]:
    """Phi[k][l] = alpha_k^-(Y_l^+) at time t (default Sn), k, l in K."""
    t = prob.Sn if t is None else t
    Phi = prob.modes.gram_minus(t, prob.K)
    if Phi.size and np.linalg.norm(Phi - np.eye(prob.k0), 2) >= 0.5:
        raise ValueError(f"modulation matrix is ill-conditioned at t={t} (||Phi - I|| >= 1/2); "
                         "increase Sn")
    return Phi


def invert_final_data(prob: ShootingProblem, a) -> NDArray[np.float64]:
    """b with alpha_K^-(Sn) = a for the final datum; checks ||b|| <= 2||a||."""
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size != prob.k0:
        raise ValueError(f"expected {prob.k0} targets, got {a.size}")
    if a.size == 0:
        return a.copy()
    b = np.linalg.solve(modulation_matrix(prob), a)
    if np.linalg.norm(b) > 2.0 * np.linalg.norm(a) + 1e-300:
        raise ValueError("final-data inversion violates ||b|| <= 2 ||a||")
    u = final_data(prob, b).values
    got = _alpha_K(prob, _z(prob, u, prob.Sn), prob.Sn)
    if np.max(np.abs(got - a)) > 1e-9:
        raise ValueError(f"measured alpha^-(Sn) misses the target by {np.max(np.abs(got - a)):.2e}")
    return b


# ---------------------------------------------------------------------------
# trajectories and exit times

def _integrate(prob: ShootingProblem, u: NDArray, t_from: float, t_to: float,
               monitor=None) -> Trajectory:
    return evolve(Field(prob.modes.grid, u), t_from, t_to, prob.p, prob.cfg, monitor=monitor)


def _violates(prob: ShootingProblem, u: NDArray, t: float) -> tuple[bool, NDArray]:
    z = _z(prob, u, t)
    am = _alpha_K(prob, z, t)
    zn = h1_norm_array(z, prob.modes.grid)
    bad = zn * np.exp((prob.rate + prob.scales.gamma) * t) > 1.0 + 1e-9
    if am.size:
        bad = bad or np.linalg.norm(am) * np.exp((prob.rate + 2 * prob.scales.gamma) * t) > 1.0 + 1e-9
    return bool(bad), am


def exit_time(prob: ShootingProblem, a) -> tuple[float, Trajectory]:
    """Integrate backward from final_data(b(a)); T is the earliest time of [T, Sn] on
    which both ball conditions hold (t0 if they never fail)."""
    b = invert_final_data(prob, a)
    u0 = final_data(prob, b).values
    state = {"T": prob.Sn}

    def monitor(t, u):
        bad, _ = _violates(prob, u, t)
        if bad:
            return True
        state["T"] = t
        return False

    traj = _integrate(prob, u0, prob.Sn, prob.t0, monitor)
    T = state["T"]
    if abs(T - prob.t0) < 1e-9:
        T = prob.t0
    return float(T), traj


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# result assembly

def _finalize(prob: ShootingProblem, traj: Trajectory, a, b, method: str, iters: int,
              jumps=None) -> ShootingResult:
    traj = traj.ascending()
    zs = [_z(prob, u.values, t) for t, u in zip(traj.times, traj.snapshots)]
    grid = prob.modes.grid
    res = np.array([h1_norm_array(z, grid) for z in zs])
    alpha = projection_series(traj.times, zs, prob.modes)
    # exit time: scan backward from Sn for the first violated ball
    T = prob.t0
    K = list(prob.K)
    for i in range(traj.times.size - 1, -1, -1):
        t = traj.times[i]
        zb = res[i] * np.exp((prob.rate + prob.scales.gamma) * t) > 1.0 + 1e-9
        ab = K and np.linalg.norm(alpha.alpha_minus[K, i]) * np.exp(
            (prob.rate + 2 * prob.scales.gamma) * t) > 1.0 + 1e-9
        if zb or ab:
            T = float(traj.times[min(i + 1, traj.times.size - 1)])
            break
    certified = bool(np.all(res <= prob.z_radius(traj.times)))
    return ShootingResult(np.asarray(a, float), np.asarray(b, float), traj, T, res, alpha,
                          prob.theta_margin, method, iters,
                          np.asarray(jumps if jumps is not None else [], float), prob.Sn,
                          certified)


# ---------------------------------------------------------------------------
# solvers

def solve_shooting(prob: ShootingProblem) -> ShootingResult:
    """Find final data whose backward trajectory stays in the tube down to t0.

    The representative selected is alpha_K^-(t0) = 0.  Raises
    ConditioningError when the window is too long for a single shot and no
    schedule is given, ShootingError when the certificate
    ||z(t)||_{H^1} <= e^{-(rate+gamma) t} fails.
    """
    if prob.k0 == 0:
        traj = _integrate(prob, final_data(prob, []).values, prob.Sn, prob.t0)
        result = _finalize(prob, traj, [], [], "direct", 0)
    elif prob.schedule is not None and len(prob.schedule) > 2:
        result = _multiple_shooting(prob)
    else:
        e_max = float(np.max(prob.modes.rates[list(prob.K)]))
        cap = conditioning_cap(e_max, prob.options.budget)
        if prob.Sn - prob.t0 > cap + 1e-12:
            raise ConditioningError(
                f"window Sn - t0 = {prob.Sn - prob.t0:.3g} exceeds the conditioning cap "
                f"{cap:.3g} = log({prob.options.budget:.0e})/e_max; supply an Sn schedule "
                "(continuation nodes) to shoot over it")
        result = _bisection(prob) if prob.k0 == 1 else _newton(prob)
    if not result.certified:
        worst = float(np.max(result.residual_series / prob.z_radius(result.trajectory.times)))
        raise ShootingError(f"certificate ||z|| <= e^{{-(rate+gamma)t}} fails "
                            f"(max ratio {worst:.3g}), exit time {result.exit_time:.4g}", result)
    return result


def _alpha_at_t0(prob: ShootingProblem, a) -> tuple[NDArray, Trajectory]:
    b = invert_final_data(prob, a)
    traj = _integrate(prob, final_data(prob, b).values, prob.Sn, prob.t0)
    u = traj.snapshots[-1].values
    return _alpha_K(prob, _z(prob, u, prob.t0), prob.t0), traj


def _bisection(prob: ShootingProblem) -> ShootingResult:
    """One unstable direction: bisect on the sign of alpha^- at the exit time."""
    opts = prob.options
    r = float(prob.alpha_radius(prob.Sn))
    lo, hi = -r, r
    s_lo, s_hi = -1.0, 1.0
    best = None
    scale0 = float(np.exp((prob.rate + 2 * prob.scales.gamma) * prob.t0))

    def probe(a):
        T, traj = exit_time(prob, [a])
        u = traj.snapshots[-1].values
        t = traj.times[-1]
        am = _alpha_K(prob, _z(prob, u, t), t)[0]
        return a, T, am, traj

    it = 0
    for it in range(1, opts.max_iter + 1):
        pts = [lo + (hi - lo) * (i + 1) / (opts.probes + 1) for i in range(opts.probes)]
        outs = _map(probe, pts, opts.threads)
        for a, T, am, traj in outs:
            if T <= prob.t0 and (best is None or abs(am) < abs(best[2])):
                best = (a, T, am, traj)
        xs = [lo] + [o[0] for o in outs] + [hi]
        ss = [s_lo] + [np.sign(o[2]) or 1.0 for o in outs] + [s_hi]
        for i in range(len(xs) - 1):
            if ss[i] != ss[i + 1]:
                lo, hi, s_lo, s_hi = xs[i], xs[i + 1], ss[i], ss[i + 1]
                break
        if best is not None and abs(best[2]) * scale0 <= opts.newton_tol:
            break
        if hi - lo <= 1e-15 * r:
            break
    if best is None:
        raise ShootingError("bisection found no final data with exit time t0")
    a, T, am, traj = best
    log.info("bisection: a=%.6e after %d rounds, alpha(t0)=%.3e", a, it, am)
    return _finalize(prob, traj, [a], invert_final_data(prob, [a]), "bisection", it)


def _newton(prob: ShootingProblem) -> ShootingResult:
    """Damped Newton on F(a) = alpha_K^-(t0) with a finite-difference Jacobian."""
    opts = prob.options
    k0 = prob.k0
    scale0 = float(np.exp((prob.rate + 2 * prob.scales.gamma) * prob.t0))
    a = np.zeros(k0)
    F, traj = _alpha_at_t0(prob, a)
    it = 0
    for it in range(1, opts.max_iter + 1):
        if np.linalg.norm(F) * scale0 <= opts.newton_tol:
            break
        h = opts.fd_increment * np.linalg.norm(a) + 1e-12
        cols = _map(lambda l: _alpha_at_t0(prob, a + h * np.eye(k0)[l])[0], range(k0), opts.threads)
        Jac = np.column_stack([(c - F) / h for c in cols])
        step = -np.linalg.solve(Jac, F)
        lam = 1.0
        while True:
            Fn, tn = _alpha_at_t0(prob, a + lam * step)
            if np.linalg.norm(Fn) < np.linalg.norm(F) or lam < 1e-3:
                break
            lam *= 0.5
        if not np.linalg.norm(Fn) < np.linalg.norm(F):
            log.warning("Newton stagnated at |F|=%.3e", np.linalg.norm(F))
            break
        a, F, traj = a + lam * step, Fn, tn
    return _finalize(prob, traj, a, invert_final_data(prob, a), "newton", it)


def _kick(prob: ShootingProblem, u: NDArray, t: float, target) -> tuple[NDArray, NDArray, NDArray]:
    """Reset alpha_K^-(t) to target along Y_k^+(t); returns (u_new, alpha_before, d)."""
    am = _alpha_K(prob, _z(prob, u, t), t)
    d = np.linalg.solve(prob.modes.gram_minus(t, prob.K), target - am)
    return u + _combo(prob, d, t), am, d


def _multiple_shooting(prob: ShootingProblem) -> ShootingResult:
    """Node values beta_i = alpha_K^-(s_i) updated by a forward recursion from t0.

    A sweep integrates every segment [s_i, s_{i+1}] backward, starting from
    the node state reset to beta_{i+1}.  With G_i the sensitivity of the
    arriving alpha at s_i to beta_{i+1} (a backward growth factor, so G_i^{-1}
    is contracting), beta_{i+1} += G_i^{-1}(beta_i - alpha_arrive(s_i)),
    beta_0 = 0.  Sweeps repeat until the node jumps stop decreasing.
    """
    opts = prob.options
    nodes = prob.schedule
    m = len(nodes) - 1
    k0 = prob.k0
    beta = np.zeros((m + 1, k0))
    Gs: list[NDArray] | None = None
    history = []
    best = None

    def sweep(beta):
        starts = [None] * (m + 1)
        segs = [None] * m
        arrive = np.zeros((m, k0))
        u = final_data(prob, invert_final_data(prob, beta[m])).values
        starts[m] = u
        for i in range(m - 1, -1, -1):
            segs[i] = _integrate(prob, u, nodes[i + 1], nodes[i])
            ue = segs[i].snapshots[-1].values
            if i > 0:
                u, arrive[i], _ = _kick(prob, ue, nodes[i], beta[i])
                starts[i] = u
            else:
                arrive[0] = _alpha_K(prob, _z(prob, ue, nodes[0]), nodes[0])
        return segs, starts, arrive

    def sensitivity(args):
        i, l, starts, arrive = args
        s = nodes[i + 1]
        h = opts.fd_increment * float(prob.alpha_radius(s))
        e = np.zeros(k0)
        e[l] = h
        du = _combo(prob, np.linalg.solve(prob.modes.gram_minus(s, prob.K), e), s)
        seg = _integrate(prob, starts[i + 1] + du, s, nodes[i])
        ue = seg.snapshots[-1].values
        return (_alpha_K(prob, _z(prob, ue, nodes[i]), nodes[i]) - arrive[i]) / h

    it = 0
    for it in range(1, opts.max_iter + 1):
        segs, starts, arrive = sweep(beta)
        jumps = np.linalg.norm(beta[:m] - arrive, axis=1)
        jmax = float(np.max(jumps))
        log.info("multiple shooting sweep %d: max node jump %.3e", it, jmax)
        history.append(jmax)
        if best is None or jmax < best[0]:
            best = (jmax, segs, beta.copy(), jumps)
        if jmax == 0.0 or (len(history) > 1 and history[-1] > 0.5 * history[-2]):
            break
        if Gs is None:
            jobs = [(i, l, starts, arrive) for i in range(m) for l in range(k0)]
            cols = _map(sensitivity, jobs, opts.threads)
            Gs = [np.column_stack(cols[i * k0:(i + 1) * k0]) for i in range(m)]
        for i in range(m):
            beta[i + 1] += np.linalg.solve(Gs[i], beta[i] - arrive[i])
    jmax, segs, beta, jumps = best
    traj = _stitch(segs)
    a = beta[m]
    return _finalize(prob, traj, a, invert_final_data(prob, a), "multiple-shooting", it, jumps)


def _stitch(segs: Sequence[Trajectory]) -> Trajectory:
    """Join backward segments (segs[i] runs s_{i+1} -> s_i) into one descending trajectory;
    node snapshots keep the reset state that starts the next segment."""
    times, snaps, cs = [], [], []
    for i in range(len(segs) - 1, -1, -1):
        s = segs[i]
        keep = len(s.times) if i == 0 else len(s.times) - 1
        times.extend(s.times[:keep])
        snaps.extend(s.snapshots[:keep])
        cs.extend(s.conserved_series[:keep])
    return Trajectory(np.array(times), snaps, cs)


def reintegrate(traj: Trajectory, nodes, p: float, cfg: IntegratorConfig, threads: int = 1,
                rebase: tuple[Trajectory, Trajectory] | None = None) -> Trajectory:
    """Re-run each segment [s_i, s_{i+1}] backward from the stored state at s_{i+1} under
    ``cfg``; ascending result.  Used by the dt-refinement and stride oracles.

    With ``rebase=(phi, phi_new)`` each segment starts from phi_new + (traj - phi) at its
    node, so the perturbation carried over from the original run is unchanged.  ``nodes``
    should then include the nodes of phi_new inside the window, since phi_new jumps there.
    """
    nodes = sorted(nodes)
    # node lists snapped from different anchors differ by rounding; merge those
    nodes = [s for i, s in enumerate(nodes) if i == 0 or s - nodes[i - 1] > 1e-9]

    def start(s):
        u = traj.at(s)
        if rebase is None:
            return u
        return Field(u.grid, rebase[1].at(s).values + (u.values - rebase[0].at(s).values))

    def seg(i):
        return evolve(start(nodes[i + 1]), nodes[i + 1], nodes[i], p, cfg)

    return _stitch(_map(seg, range(len(nodes) - 1), threads)).ascending()

# ---------------------------------------------------------------------------
# base multi-soliton and the nested family

def snapshot_times(t0: float, Sn: float, cfg: IntegratorConfig) -> NDArray[np.float64]:
    h = cfg.dt * cfg.stride
    n = int(round((Sn - t0) / h))
    return np.sort(Sn - h * np.arange(n + 1))


def sum_trajectory(family: SolitonFamily, grid: Grid, times) -> Trajectory:
    """R(t) = sum of solitons sampled at the given times (ascending)."""
    times = np.sort(np.asarray(times, dtype=float))
    snaps = [soliton_sum(t, family, grid) for t in times]
    cs = [conserved_arrays(s.values, grid, family.p) for s in snaps]
    return Trajectory(times, snaps, cs)


def build_base_multisoliton(family: SolitonFamily, p: float, t0: float, Sn: float, grid: Grid,
                            cfg: IntegratorConfig, spec: LinearizedSpectrum,
                            schedule=None, options: ShootingOptions | None = None,
                            modes: ModeBank | None = None) -> ShootingResult:
    """Shoot all unstable directions of R; returns the result whose trajectory is phi."""
    if p != family.p:
        raise ValueError("exponent does not match the family")
    modes = modes or ModeBank(spec, family, grid)
    scales = interaction_scales(family, spec)
    R = sum_trajectory(family, grid, snapshot_times(t0, Sn, cfg))
    prob = ShootingProblem(family, p, None, 0.0, t0, Sn, R, scales, modes, cfg,
                           tuple(schedule) if schedule is not None else None,
                           options or ShootingOptions())
    return solve_shooting(prob)


def stage_order(c) -> list[int]:
    """sigma: ascending c, ties by original index (stable sort)."""
    return [int(i) for i in np.argsort(np.asarray(c, dtype=float), kind="stable")]


def anchor_time(A: float, e_j: float, t0: float, Sn: float, cfg: IntegratorConfig,
                ceiling: float | None = None, floor: float = ANCHOR_FLOOR) -> float:
    """Largest lattice time S <= Sn with |A| e^{-e_j S} >= floor.

    Noise in the base trajectory near S enters the e^{-e_j t} direction and
    shifts the realized amplitude by about noise/floor; anchoring later
    than this buys nothing and costs amplitude accuracy.
    """
    S = Sn if A == 0.0 else min(Sn, np.log(abs(A) / floor) / e_j)
    if ceiling is not None:
        S = min(S, ceiling)
    h = cfg.dt * cfg.stride
    n = int(np.ceil((Sn - S) / h - 1e-9))
    S = Sn - n * h
    if S <= t0 + 1e-12:
        raise ValueError(f"amplitude {A} is below representability on the whole window")
    return float(S)


def restrict(traj: Trajectory, t_hi: float) -> Trajectory:
    """Snapshots with t <= t_hi, ascending."""
    tr = traj.ascending()
    keep = tr.times <= t_hi + 1e-9
    idx = np.nonzero(keep)[0]
    return Trajectory(tr.times[idx], [tr.snapshots[i] for i in idx],
                      [tr.conserved_series[i] for i in idx] if tr.conserved_series else [])


@dataclass
class StageResult:
    stage: int            # position in the sigma order (0-based)
    soliton: int          # 0-based soliton index sigma(stage)
    A: float
    anchor: float
    result: ShootingResult | None   # None when A = 0 (phi_base returned unchanged)
    trajectory: Trajectory
    problem: ShootingProblem | None = None


def build_family(family: SolitonFamily, p: float, amplitudes, t0: float, Sn: float, grid: Grid,
                 cfg: IntegratorConfig, spec: LinearizedSpectrum, schedule=None,
                 options: ShootingOptions | None = None, base: ShootingResult | None = None,
                 modes: ModeBank | None = None) -> list[StageResult]:
    """Nested solutions phi_{A_sigma(1)}, ..., phi_{A_sigma(1..N)} built stage by stage."""
    A = np.asarray(amplitudes, dtype=float)
    if A.size != family.N:
        raise ValueError(f"expected {family.N} amplitudes, got {A.size}")
    modes = modes or ModeBank(spec, family, grid)
    scales = interaction_scales(family, spec)
    options = options or ShootingOptions()
    if base is None:
        base = build_base_multisoliton(family, p, t0, Sn, grid, cfg, spec, schedule, options, modes)
    phi = base.trajectory
    ceiling = Sn
    out = []
    for stage, j in enumerate(stage_order(family.c)):
        try:
            if A[j] == 0.0:
                out.append(StageResult(stage, j, 0.0, ceiling, None, phi))
                continue
            S = anchor_time(A[j], modes.rates[j], t0, Sn, cfg, ceiling)
            sched = None
            if schedule is not None:
                sched = tuple(s for s in schedule if s < S - 0.25) + (S,)
            prob = ShootingProblem(family, p, j, float(A[j]), t0, S, restrict(phi, S), scales,
                                   modes, cfg, sched, options)
            res = solve_shooting(prob)
        except Exception as exc:   # noqa: BLE001 - re-raised with the stage index
            raise StageError(stage, exc) from exc
        out.append(StageResult(stage, j, float(A[j]), S, res, res.trajectory, prob))
        phi = res.trajectory
        ceiling = S
    return out


def recover_amplitude(u_traj: Trajectory, phi_traj: Trajectory, j: int, modes: ModeBank,
                      window: tuple[float, float], max_residual: float = 0.05
                      ) -> tuple[float, float, float]:
    """Fit s(t) = Im int conj(u - phi) Y_j^-(t) = A e^{-rate t} on the window.

    Returns (A, rate, rms log residual).
    """
    ts, ss = [], []
    for t, u in zip(u_traj.times, u_traj.snapshots):
        if window[0] - 1e-9 <= t <= window[1] + 1e-9:
            d = u.values - phi_traj.at(t).values
            ss.append(np.imag(np.vdot(d, modes.minus(j, t))) * modes.grid.dx)
            ts.append(t)
    ss = np.array(ss)
    if ss.size < 3:
        raise ValueError("fewer than three samples in the recovery window")
    if np.all(ss == 0.0):
        return 0.0, float("nan"), 0.0
    sign = np.sign(np.median(ss))
    if np.any(np.sign(ss) != sign):
        raise ValueError("projection changes sign inside the window")
    rate, amp, resid = fit_rate(ts, ss)
    if resid > max_residual:
        raise ValueError(f"fit residual {resid:.3g} too large; perturbation not in leading order")
    return float(sign * amp), rate, resid
