import numpy as np
import pytest

from nlsmsol.grid import Field, Grid, deriv_array, h1_norm_array, inner_imag
from nlsmsol.linspec import (ModeBank, assemble_operators, coercivity_check, decay_rate,
                             dense_eigenvalue, eigen_residual, remove_projections, scaled_mode,
                             shooting_eigenvalue)
from nlsmsol.solitons import make_family, profile


def test_null_spaces_and_symmetry(rng):
    g = Grid(80.0, 2048)
    Lp, Lm = assemble_operators(7, 1.0, g)
    Q = profile(7, 1.0, g.x)
    Qx = deriv_array(Q, g, 1).real
    assert np.max(np.abs(Lm(Q))) < 1e-9
    assert np.max(np.abs(Lp(Qx))) < 1e-8
    f = np.exp(-g.x ** 2) * rng.standard_normal(g.points)
    h = np.exp(-0.5 * g.x ** 2) * rng.standard_normal(g.points)
    a, b = np.dot(Lp(f), h), np.dot(f, Lp(h))
    assert abs(a - b) < 1e-11 * max(abs(a), 1.0)


def test_eigenpair(spec7):
    assert spec7.e0 > 0
    assert eigen_residual(spec7) < 1e-8
    assert abs(-2 * np.sum(spec7.Y1 * spec7.Y2) * spec7.grid.dx - 1) < 1e-10
    assert np.sum(spec7.Y1 * spec7.Y2) < 0
    assert spec7.Y1[spec7.grid.points // 2] > 0


def test_minus_mode_relation(spec7):
    # Y- = conj(Y+) solves L Y = -e0 Y: L+Y1 = -e0(-Y2), L-(-Y2) = -e0 Y1
    Lp, Lm = assemble_operators(7, 1.0, spec7.grid)
    dx = spec7.grid.dx
    r = (np.sqrt(np.sum((Lp(spec7.Y1) + spec7.e0 * -spec7.Y2) ** 2) * dx)
         + np.sqrt(np.sum((Lm(-spec7.Y2) - spec7.e0 * spec7.Y1) ** 2) * dx))
    assert r < 1e-8


def test_three_methods_agree(spec7):
    e_dense, _ = dense_eigenvalue(7)
    e_shoot = shooting_eigenvalue(7)
    assert abs(e_dense - spec7.e0) < 1e-6 * spec7.e0
    assert abs(e_shoot - spec7.e0) < 1e-6 * spec7.e0


def test_scaled_mode_identity_and_rescaling(spec7):
    m1 = scaled_mode(spec7, 1.0, spec7.grid)
    assert m1.e_c == spec7.e0
    assert np.array_equal(m1.Yc_plus.values, spec7.Y1 + 1j * spec7.Y2)
    g = Grid(30.0, 1024)
    m4 = scaled_mode(spec7, 4.0, g)
    xs = 2.0 * g.x
    inside = np.abs(xs) < 0.5 * spec7.grid.length
    from nlsmsol.grid import trig_interpolate
    ref = 4 ** 0.25 * trig_interpolate(spec7.Y1 + 1j * spec7.Y2, spec7.grid, xs[inside])
    assert np.max(np.abs(m4.Yc_plus.values[inside] - ref)) < 1e-12


def test_linear_eigenvalue_scaling(spec7, scaled_eigs):
    # growth rate of the rescaled mode scales like c (measured); c^{3/2} does not fit
    for c, sp in scaled_eigs.items():
        assert abs(sp.e0 - c * spec7.e0) < 1e-6 * c * spec7.e0
        m = scaled_mode(spec7, c, sp.grid)
        assert abs(m.e_c - sp.e0) < 1e-6 * sp.e0
        assert abs(sp.e0 / (c ** 1.5 * spec7.e0) - 1) > 0.25


def test_scaled_mode_solves_scaled_problem(spec7):
    g = Grid(40.0, 2048)
    m = scaled_mode(spec7, 2.0, g)
    Lp, Lm = assemble_operators(7, 2.0, g)
    Y1, Y2 = m.Yc_plus.values.real, m.Yc_plus.values.imag
    r = np.max(np.abs(Lp(Y1) - m.e_c * Y2)) + np.max(np.abs(Lm(Y2) + m.e_c * Y1))
    assert r < 1e-7


def test_decay_rates(spec7):
    g = Grid(60.0, 2048)
    x = g.x
    f = Field(g, np.exp(-2 * np.sqrt(x ** 2 + 0.01)))
    assert abs(decay_rate(f) - 2) < 0.04
    assert abs(decay_rate(Field(g, profile(7, 1.0, x))) - 1) < 0.02
    assert spec7.eta0 > 0
    with pytest.raises(ValueError):
        decay_rate(g.zeros())


def test_decay_rate_refinement(spec7):
    from nlsmsol.linspec import compute_eigenmode
    fine = compute_eigenmode(7, Grid(60.0, 4096), tol=1e-7)
    assert abs(fine.eta0 - spec7.eta0) < 0.02 * spec7.eta0


def test_coercivity(spec7, rng):
    g = spec7.grid
    Q = Field(g, profile(7, 1.0, g.x))
    _, proj = coercivity_check(Q, spec7)
    assert proj[0] < 1e-20 and proj[1] < 1e-20
    quad, _ = coercivity_check(Q * 1j, spec7)
    assert abs(quad) < 1e-8
    worst = np.inf
    x = g.x
    for _ in range(200):
        w = np.zeros(g.points, dtype=complex)
        for _ in range(4):
            s = rng.uniform(0.3, 2.0)
            w += (rng.standard_normal() + 1j * rng.standard_normal()) * np.exp(-((x - rng.uniform(-3, 3)) / s) ** 2)
        v = remove_projections(Field(g, w), spec7)
        quad, proj = coercivity_check(v, spec7)
        assert np.max(proj) < 1e-20
        worst = min(worst, quad / h1_norm_array(v.values, g) ** 2)
    assert worst >= 0.01


def test_mode_bank_projections(spec7):
    g = Grid(100.0, 2048)
    fam = make_family(7, [dict(c=1.0, v=-1.0, x0=-5.0), dict(c=2.0, v=1.0, x0=5.0)])
    mb = ModeBank(spec7, fam, g)
    t = 3.0
    for k in range(2):
        a, b = 0.7, -0.4
        z = a * mb.plus(k, t) + b * mb.minus(k, t)
        ap, am = mb.alpha(z, t, [k])
        # alpha^- = a, alpha^+ = -b through the Gram relations
        G = np.array([[inner_imag(Field(g, mb.plus(k, t)), Field(g, mb.minus(k, t))),
                       inner_imag(Field(g, mb.minus(k, t)), Field(g, mb.minus(k, t)))],
                      [inner_imag(Field(g, mb.plus(k, t)), Field(g, mb.plus(k, t))),
                       inner_imag(Field(g, mb.minus(k, t)), Field(g, mb.plus(k, t)))]])
        sol = np.linalg.solve(G, [am[0], ap[0]])
        assert np.allclose(sol, [a, b], atol=1e-8)
        assert abs(am[0] - a) < 1e-8 and abs(ap[0] + b) < 1e-8
    Phi = mb.gram_minus(t, [0, 1])
    assert np.allclose(np.diag(Phi), 1.0, atol=1e-9)
