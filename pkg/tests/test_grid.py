import numpy as np
import pytest
from scipy import integrate

from nlsmsol.grid import (Field, Grid, GridMismatchError, inner_imag, inner_real, norm_h1,
                          norm_hminus1, norm_l2, read_field_dump, shift_array, spectral_derivative,
                          trig_interpolate, write_field_dump)


def test_grid_geometry():
    g = Grid(40.0, 1024)
    assert abs(g.dx * g.points - g.length) < 1e-12
    assert g.k.size == 1024
    assert g.x[0] == -20.0


def test_field_rejects_bad_input():
    g = Grid(10.0, 32)
    with pytest.raises(ValueError):
        Field(g, np.zeros(31))
    assert not Field(g, np.full(32, np.nan)).is_finite()
    with pytest.raises(GridMismatchError):
        Field(g, np.zeros(32)) + Field(Grid(10.0, 64), np.zeros(64))


def test_derivative_zero_and_single_mode():
    g = Grid(20.0, 128)
    assert np.all(spectral_derivative(g.zeros()).values == 0)
    xi = 2 * np.pi / g.length
    f = Field(g, np.exp(1j * xi * g.x))
    d = spectral_derivative(f, 1)
    assert np.max(np.abs(d.values - 1j * xi * f.values)) < 1e-12


def test_gaussian_second_derivative():
    g = Grid(40.0, 1024)
    x = g.x
    d2 = spectral_derivative(Field(g, np.exp(-x ** 2)), 2).values
    assert np.max(np.abs(d2 - (4 * x ** 2 - 2) * np.exp(-x ** 2))) < 1e-10


def test_inner_products(rng):
    g = Grid(60.0, 2048)
    f = Field(g, rng.standard_normal(g.points) + 1j * rng.standard_normal(g.points))
    assert inner_real(Field(g, f.real), Field(g, f.real)) >= 0
    assert abs(inner_real(f, f * 1j)) < 1e-14 * norm_l2(f) ** 2
    s = Field(g, 1 / np.cosh(g.x))
    assert abs(inner_real(s, s) - 2.0) < 1e-10
    assert abs(inner_imag(f, f)) < 1e-12 * norm_l2(f) ** 2
    r = Field(g, np.exp(-g.x ** 2))
    assert abs(inner_imag(r, r * 1j) - inner_real(r, r)) < 1e-14


def test_inner_imag_of_mode_is_minus_one(spec7):
    Y = spec7.Yplus
    assert abs(inner_imag(Y.conj(), Y) + 1.0) < 1e-10


def test_h1_norm():
    g = Grid(40.0, 1024)
    assert norm_h1(g.zeros()) == 0
    c = 0.7 - 0.2j
    assert abs(norm_h1(Field(g, np.full(g.points, c))) - abs(c) * np.sqrt(g.length)) < 1e-12
    q, _ = integrate.quad(lambda x: np.exp(-2 * x * x) * (1 + 4 * x * x), -np.inf, np.inf,
                          epsabs=1e-14)
    assert abs(norm_h1(Field(g, np.exp(-g.x ** 2))) - np.sqrt(q)) < 1e-10


def test_hminus1_norm(rng):
    g = Grid(20.0, 256)
    assert norm_hminus1(g.zeros()) == 0
    xi = 2 * np.pi * 3 / g.length
    f = Field(g, np.exp(1j * xi * g.x))
    assert abs(norm_hminus1(f) - np.sqrt(g.length) / np.sqrt(1 + xi ** 2)) < 1e-12
    for _ in range(100):
        h = Field(g, rng.standard_normal(g.points) + 1j * rng.standard_normal(g.points))
        assert norm_hminus1(h) <= norm_l2(h) * (1 + 1e-14)


def test_shift_and_interpolate():
    g = Grid(40.0, 512)
    f = np.exp(-g.x ** 2)
    assert np.max(np.abs(shift_array(f, g, 1.3) - np.exp(-(g.x - 1.3) ** 2))) < 1e-12
    xs = np.linspace(-3, 3, 17)
    assert np.max(np.abs(trig_interpolate(f, g, xs) - np.exp(-xs ** 2))) < 1e-12


def test_dump_round_trip(tmp_path, rng):
    g = Grid(12.5, 64)
    f = Field(g, rng.standard_normal(64) + 1j * rng.standard_normal(64))
    write_field_dump(tmp_path / "f", f, 0.125)
    h, t = read_field_dump(tmp_path / "f")
    assert t == 0.125
    assert h.grid == g
    assert np.array_equal(h.values, f.values)
