import numpy as np
import pytest

from nlsmsol import construct as C
from nlsmsol import diagnostics as D
from nlsmsol.evolve import IntegratorConfig
from nlsmsol.grid import Field, Grid, h1_norm_array
from nlsmsol.linspec import ModeBank
from nlsmsol.solitons import make_family, profile, soliton_sum

G = Grid(100.0, 2048)
FAM = make_family(7, [dict(c=1.0, v=-1.0, x0=-5.0), dict(c=2.0, v=1.0, x0=5.0)])
ONE = make_family(7, [dict(c=1.5, v=0.7, x0=1.0)])


@pytest.fixture(scope="module")
def modes(spec7):
    return ModeBank(spec7, FAM, G)


@pytest.fixture(scope="module")
def prob(spec7, modes):
    cfg = IntegratorConfig(dt=1e-3, scheme="fourth-order", stride=50)
    R = C.sum_trajectory(FAM, G, C.snapshot_times(3.0, 4.0, cfg))
    return C.ShootingProblem(FAM, 7, 0, 1.0, 3.0, 4.0, R, C.interaction_scales(FAM, spec7),
                             modes, cfg)


# rate fits ------------------------------------------------------------------

def test_fit_rate_examples():
    t = np.linspace(0, 3, 31)
    r, a, res = D.fit_rate(t, 3 * np.exp(-2 * t))
    assert abs(r - 2) < 1e-12 and abs(a - 3) < 1e-12 and res < 1e-12
    r, _, _ = D.fit_rate(np.linspace(0, 20, 400), np.exp(-np.linspace(0, 20, 400)) * (1 + 0.01 * np.sin(np.linspace(0, 20, 400))))
    assert abs(r - 1) < 0.01
    r, _, _ = D.fit_rate(t, np.full_like(t, 5.0))
    assert abs(r) < 1e-12


# cutoffs --------------------------------------------------------------------

def test_bump_constant_and_center():
    assert abs(D.bump_constant() - D.bump_constant(epsabs=1e-14)) < 1e-12
    assert abs(D.bump_psi(0.0) - 0.5) < 1e-15
    assert D.bump_psi(-1.0) == 0.0 and D.bump_psi(1.0) == 1.0
    y = np.linspace(-0.99, 0.99, 41)
    assert np.all(np.diff(D.bump_psi(y)) > 0)


@pytest.mark.parametrize("t", [1.0, 3.7, 20.0])
def test_partition_and_abel(t):
    cut = D.cutoffs(t, FAM, G)
    assert np.max(np.abs(cut.phi.sum(axis=0) - 1)) < 1e-14
    h1, h2 = D.h_from_psi(cut, FAM)
    assert np.max(np.abs(h1 - cut.h1)) < 1e-14
    assert np.max(np.abs(h2 - cut.h2)) < 1e-14
    # centering on the midline
    m = cut.m[0]
    assert abs(D.bump_psi(0.0 * m) - 0.5) < 1e-15


def test_cutoffs_reject_nonpositive_time():
    with pytest.raises(ValueError):
        D.cutoffs(0.0, FAM, G)


def test_cutoff_derivatives_against_differences():
    t, h = 2.5, 1e-5
    cut = D.cutoffs(t, FAM, G)
    dt = (D.cutoffs(t + h, FAM, G).psi - D.cutoffs(t - h, FAM, G).psi) / (2 * h)
    assert np.max(np.abs(dt - cut.psi_t)) < 1e-8
    y = (G.x - cut.m[0]) / np.sqrt(t)
    dx = (D.bump_psi(y + h / np.sqrt(t)) - D.bump_psi(y - h / np.sqrt(t))) / (2 * h)
    assert np.max(np.abs(dx - cut.psi_x[1])) < 1e-8


def test_cutoff_derivative_bound_scales_like_inverse_sqrt_t():
    def C(t):
        cut = D.cutoffs(t, FAM, G)
        s = max(np.max(np.abs(cut.phi_x[k])) + np.max(np.abs(cut.phi_xx[k])) + np.max(np.abs(cut.phi_t[k]))
                for k in range(FAM.N))
        return s * np.sqrt(t)
    # C(t) -> ||psi'|| (|b| + 1/2 ...) as t grows; stable within 25% under doubling
    for t in (4.0, 8.0):
        assert abs(C(2 * t) / C(t) - 1) < 0.25


def test_cutoff_bounds_report():
    r1 = D.cutoff_bounds_report(2.0, ONE, G, 1.0, 1e-6)
    assert r1["i"] == 0.0 and r1["ii"] == 0.0
    w = 0.5      # sqrt(sigma0)/2: see the decisions ledger for the factor 2
    a = D.cutoff_bounds_report(3.0, FAM, G, 1.0, 1e-6, weight=w)
    b = D.cutoff_bounds_report(6.0, FAM, G, 1.0, 1e-6, weight=w)
    for key in ("i", "ii", "iv_h1", "iv_h2"):
        assert b[key] < a[key]
    assert np.isfinite(b["iii"]) and np.isfinite(b["iv_derivs"])


# projections ---------------------------------------------------------------

def test_projections_of_modes(modes):
    t = 3.0
    zero = np.zeros(G.points, dtype=complex)
    ap, am = modes.alpha(zero, t)
    assert np.all(ap == 0) and np.all(am == 0)
    for k in range(2):
        ap, am = modes.alpha(modes.plus(k, t), t, [k])
        assert abs(am[0] - 1) < 1e-9 and abs(ap[0]) < 1e-12


def test_projection_series_from_trajectories(prob, modes):
    R = prob.phi_base
    s = D.projections(R, R, prob)
    # u = phi: z = -A e^{-e_j t} Y_j^+ so alpha_j^- = -A e^{-e_j t}
    assert np.allclose(s.alpha_minus[0], -np.exp(-modes.rates[0] * R.times), rtol=1e-9, atol=0)


def test_modulation_residual_exact_decay(prob, modes):
    t = np.linspace(3.0, 4.0, 81)
    e = modes.rates
    ser = D.ProjectionSeries(t, np.exp(e[:, None] * (t - 4.0)), np.exp(-e[:, None] * (t - 3.0)))
    rep = D.modulation_residual(ser, prob, np.full(t.size, 1e-3))
    # interior points use the fourth-order stencil
    rel = np.max(rep.residual_minus[:, 2:-2] / (e[:, None] * ser.alpha_minus[:, 2:-2]))
    assert rel < 1e-5
    rel = np.max(rep.residual_plus[:, 2:-2] / (e[:, None] * ser.alpha_plus[:, 2:-2]))
    assert rel < 1e-5
    # halving alpha halves the residual (linear terms)
    ser2 = D.ProjectionSeries(t, 0.5 * ser.alpha_plus, 0.5 * ser.alpha_minus)
    rep2 = D.modulation_residual(ser2, prob, np.full(t.size, 1e-3))
    assert np.allclose(rep2.residual_plus, 0.5 * rep.residual_plus, rtol=1e-12, atol=1e-300)


# H and the quadratic forms -------------------------------------------------

def _test_field(t, m, scale=1.0):
    lam = m.lam(t, G.x)
    return scale * np.exp(-lam ** 2) * (1 + 0.4j + 0.3 * np.sin(2 * lam)) * np.exp(1j * m.theta(t, G.x))


def test_H_zero_and_taylor_limit():
    t = 3.0
    cut = D.cutoffs(t, FAM, G)
    R = soliton_sum(t, FAM, G)
    zero = G.zeros()
    assert D.weinstein_H(zero, R, zero, cut, 7) == 0.0
    w = Field(G, _test_field(t, FAM.members[1]) + _test_field(t, FAM.members[0]))
    Q = D.quadratic_form(w, R, cut, 7)
    ratios = [D.weinstein_H(w * eps, R, zero, cut, 7) / eps ** 2 for eps in (1e-3, 1e-4)]
    assert abs(ratios[0] / ratios[1] - 1) < 0.01
    assert abs(ratios[1] / Q - 1) < 0.01


def test_quadratic_form_properties():
    t = 3.0
    cut = D.cutoffs(t, FAM, G)
    R = soliton_sum(t, FAM, G)
    assert D.quadratic_form(G.zeros(), R, cut, 7) == 0.0
    w = Field(G, _test_field(t, FAM.members[0]))
    q = D.quadratic_form(w, R, cut, 7)
    assert abs(D.quadratic_form(w * 2.5, R, cut, 7) - 6.25 * q) < 1e-12 * abs(q)


@pytest.mark.parametrize("k", [0, 1])
def test_localized_form_equals_frame_form(k):
    t = 4.0
    m = FAM.members[k]
    w = Field(G, _test_field(t, m))
    Rk = soliton_sum(t, make_family(7, [m]), G)
    a = D.localized_form(w, Rk, m.c, m.v, 7)
    b = D.frame_form(w, m, t, 7)
    assert abs(a - b) < 1e-8 * abs(b)


def test_tilde_decomposition():
    t = 6.0
    R0 = soliton_sum(t, make_family(7, [FAM.members[0]]), G)
    dec = D.tilde_decomposition(R0 * 1j, t, FAM)
    assert abs(dec.beta[0] + 1) < 1e-10
    assert np.max(np.abs(D.orthogonality_defects(dec.z_tilde, t, FAM))) < 1e-8
    # norm equivalence on a few localized fields
    for k, s in ((0, 1.0), (1, 0.3)):
        z = Field(G, _test_field(t, FAM.members[k], s) + 0.2 * R0.values)
        d = D.tilde_decomposition(z, t, FAM)
        lhs = h1_norm_array(d.z_tilde.values, G) + np.sum(np.abs(d.beta) + np.abs(d.gamma_par))
        ratio = lhs / h1_norm_array(z.values, G)
        assert 0.2 <= ratio <= 5


def test_form_gap_vanishes_without_projections():
    t = 3.0
    m = ONE.members[0]
    z = D.tilde_decomposition(Field(G, _test_field(t, m)), t, ONE).z_tilde
    R = soliton_sum(t, ONE, G)
    gap, dec = D.form_comparison(z, R, t, ONE, 7)
    assert np.max(np.abs(dec.beta)) < 1e-12 and np.max(np.abs(dec.gamma_par)) < 1e-12
    assert abs(gap) < 1e-10


def test_coercivity_constant():
    assert D.coercivity_constant([1.0], [2.0], [0.0]) == 2.0
    k = D.coercivity_constant([0.5], [1.0], [0.25])
    assert abs(1.0 / k - k * 0.25 - 0.5) < 1e-14


# sources --------------------------------------------------------------------

def test_pow_remainder_matches_direct_difference():
    a = np.array([1.0, 0.5, 2.0, 1e-3])
    d = np.array([0.3, -0.2, 1.5, 5e-3])
    for q in (4, 3, 2.5, 3.5):
        direct = (a + d) ** q - a ** q - q * a ** (q - 1) * d
        assert np.allclose(D._pow_remainder(a, d, q), direct, rtol=1e-12, atol=1e-15)
    # no cancellation at tiny increments
    r = D._pow_remainder(np.array([1.0]), np.array([1e-9]), 3.5)
    q = 3.5
    series = q * (q - 1) / 2 * 1e-18 + q * (q - 1) * (q - 2) / 6 * 1e-27
    assert abs(r[0] - series) < 1e-30


def test_omega_zero_amplitude(prob, spec7, modes):
    p0 = C.ShootingProblem(FAM, 7, 0, 0.0, 3.0, 4.0, prob.phi_base, prob.scales, modes, prob.cfg)
    rep = D.omega_source(3.5, prob.phi_base.at(3.5), p0)
    assert rep.omega_h1 == 0.0


def test_omega_forms_agree(prob):
    rep = D.omega_source(3.5, prob.phi_base.at(3.5), prob)
    assert rep.form_gap < 1e-10
    assert rep.eigen_residual < 1e-6


def test_transport_residual():
    t = 2.0
    cut = D.cutoffs(t, ONE, G)
    assert D.transport_residual(soliton_sum(t, ONE, G), cut, 7) < 1e-10
    vals = [D.transport_residual(soliton_sum(s, FAM, G), D.cutoffs(s, FAM, G), 7) for s in (3.0, 6.0)]
    assert vals[1] < vals[0]


def test_dHdt_zero_trajectory(prob):
    p0 = C.ShootingProblem(FAM, 7, None, 0.0, 3.0, 4.0, prob.phi_base, prob.scales, prob.modes,
                           prob.cfg)
    en = D.dHdt_check(prob.phi_base, p0, stride=4)
    assert np.all(en.H == 0.0) and np.all(en.dHdt == 0.0)
