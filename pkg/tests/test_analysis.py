import numpy as np
import pytest

from neckwave.analysis import (StationaryPhaseError, backward_pairing_census, ball_mass, bump,
                               cl_norm, density_consistency, nodal_identity_check, equidistribution,
                               nodal_extract, nodal_scaling, oscillatory_decay,
                               random_plateau_centers, window_area)
from neckwave.wkb import FLAT, WaveField, class_density, flat_plane_wave


def _flat_field(h, direction=0.3, step_factor=10, extent=(0.0, 1.0, 0.0, 1.0), real=False):
    x = np.arange(extent[0], extent[1] + 1e-12, h / step_factor)
    y = np.arange(extent[2], extent[3] + 1e-12, h / step_factor)
    u = flat_plane_wave(x, y, h, direction)
    return WaveField(h, x, y, np.real(u) + 0j if real else u, [0])


def test_plane_wave_norms():
    fld = _flat_field(0.05)
    assert cl_norm(FLAT, fld, 0) == pytest.approx(1.0, abs=1e-12)
    # centred differences lose (k dx)^2 / 6 with k dx = 0.1
    assert cl_norm(FLAT, fld, 1) * fld.h == pytest.approx(1.0, rel=0.01)
    assert cl_norm(FLAT, fld, 2) * fld.h**2 <= 1.0 + 1e-9
    with pytest.raises(ValueError):
        cl_norm(FLAT, fld, 3)


def test_ball_mass_calibration():
    h = 0.02
    x = np.arange(0.0, 1.0 + 1e-12, h / 10)
    const = WaveField(h, x, x, np.ones((len(x), len(x)), complex), [0])
    rep = ball_mass(FLAT, const, (0.5, 0.5), [10, 15, 20])
    np.testing.assert_allclose(rep.ratios, 1.0, atol=1e-3)
    wave = _flat_field(h)
    rep = ball_mass(FLAT, wave, (0.5, 0.5), [10, 20], use_real_part=True)
    np.testing.assert_allclose(rep.ratios, 0.5, atol=0.1)
    with pytest.raises(ValueError):
        ball_mass(FLAT, wave, (0.5, 0.5), [5])


def test_ball_leaving_grid_is_skipped():
    fld = _flat_field(0.02)
    rep = ball_mass(FLAT, fld, (0.3, 0.5), [10, 30])
    assert rep.skipped == [30.0]
    assert len(rep.ratios) == 1


def test_ball_mass_on_curved_chart(model):
    # metric area of a small ball is pi rho^2 to second order
    h = 0.01
    r = np.arange(-0.6, 0.6 + 1e-12, h / 10)
    th = np.arange(-0.5, 0.5 + 1e-12, h / 10)
    fld = WaveField(h, r, th, np.ones((len(r), len(th)), complex), [0])
    rep = ball_mass(model, fld, (0.2, 0.0), [10, 20])
    np.testing.assert_allclose(rep.ratios, 1.0, atol=5e-3)


def test_equidistribution_band(model, spec, chart, fields):
    centers = random_plateau_centers(spec, chart, 20, seed=0)
    for real in (True, False):
        rep = equidistribution(model, fields, centers, 10.0, real)
        assert rep.c1 > 0
        assert rep.band < 10


def test_backward_pairing_census(model, sheets):
    r = np.linspace(-0.3, 0.3, 61)
    th = np.linspace(-0.2, 0.2, 41)
    rep = backward_pairing_census(model, sheets, r, th, tol=1e-3)
    frac = dict(zip(rep.pairs, rep.fractions))
    # all classes enter from the same side, so no pair has opposite gradients
    for m in range(-3, 4):
        assert frac[(m, m)] == 0.0
    assert frac[(0, 1)] == 0.0
    wide = backward_pairing_census(model, sheets, r, th, tol=1e-2)
    assert np.all(wide.fractions >= rep.fractions)


def test_nodal_flat_calibration():
    # zero lines of cos(x/h) are spaced pi h apart
    win = (0.1, 0.9, 0.1, 0.9)
    area = window_area(FLAT, win)
    for h in (0.02, 0.01):
        fld = _flat_field(h, direction=0.4)
        rep = nodal_extract(FLAT, fld, win)
        assert rep.length * h / area == pytest.approx(1 / np.pi, rel=0.02)


def test_nodal_refinement_stable():
    win = (0.1, 0.9, 0.1, 0.9)
    a = nodal_extract(FLAT, _flat_field(0.02, 0.4, step_factor=10), win).length
    b = nodal_extract(FLAT, _flat_field(0.02, 0.4, step_factor=20), win).length
    assert abs(a - b) / b < 0.01


def test_nodal_constant_field_is_empty():
    x = np.linspace(0, 1, 101)
    fld = WaveField(0.05, x, x, np.ones((101, 101), complex), [0])
    rep = nodal_extract(FLAT, fld)
    assert rep.length == 0.0 and rep.segments == []


def test_nodal_spread(model, fields):
    reps = [nodal_extract(model, f, (-0.3, 0.3, -0.2, 0.2)) for f in fields]
    vals, spread = nodal_scaling(reps)
    assert np.all(vals > 0)
    assert spread < 1.25


def test_nodal_identity_zero_test_function():
    fld = _flat_field(0.05)
    res = nodal_identity_check(FLAT, fld, np.zeros(fld.values.shape))
    assert res.lhs == 0.0 and res.rhs == 0.0 and res.ratio == 1.0


def test_nodal_identity_flat_calibration():
    fld = _flat_field(0.02, direction=0.4)
    tf = bump(FLAT, fld.r, fld.theta, (0.5, 0.5), 0.3)
    assert nodal_identity_check(FLAT, fld, tf).ratio == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ValueError, match="edges"):
        nodal_identity_check(FLAT, fld, bump(FLAT, fld.r, fld.theta, (0.05, 0.5), 0.3))


def test_nodal_identity_on_assembled_field(model, fields):
    fld = [f for f in fields if f.h == 0.02][0]
    specs = [((0.0, 0.0), 0.15), ((0.2, 0.1), 0.12), ((-0.25, -0.1), 0.2)]
    for c, rad in specs:
        res = nodal_identity_check(model, fld, bump(model, fld.r, fld.theta, c, rad))
        assert res.ratio == pytest.approx(1.0, abs=0.05)


def _gaussian_setup(phase):
    x = np.linspace(-1, 1, 801)
    X, Y = np.meshgrid(x, x, indexing="ij")
    a = np.exp(-(X**2 + Y**2) / (2 * 0.1**2))
    dA = (x[1] - x[0]) ** 2
    phi, grad = phase(X, Y)
    return a, phi, grad, dA


def test_gaussian_decay():
    a, phi, grad, dA = _gaussian_setup(lambda X, Y: (X, np.ones_like(X)))
    rep = oscillatory_decay(a, phi, grad, [0.1, 0.05, 0.02], dA)
    assert rep.slope <= -3
    assert not rep.stationary
    rep = oscillatory_decay(a, phi, grad, [0.01], dA)
    assert rep.values[0] <= 1e-6


def test_stationary_phase_is_flagged():
    a, phi, grad, dA = _gaussian_setup(lambda X, Y: (0 * X, 0 * X))
    with pytest.raises(StationaryPhaseError):
        oscillatory_decay(a, phi, grad, [0.1, 0.05], dA)
    rep = oscillatory_decay(a, phi, grad, [0.1, 0.05], dA, allow_stationary=True)
    assert rep.stationary
    assert rep.slope == pytest.approx(0.0, abs=1e-9)


def test_density_consistency(model, sheets, fields):
    dens = [class_density(sheets, f.r, f.theta, f.classes) for f in fields]
    assert min(d.min() for d in dens) > 0
    rep = density_consistency(model, fields, dens, (-0.3, 0.3, -0.15, 0.15))
    assert np.all(rep.errors <= rep.constant * np.sqrt(rep.h) + 1e-15)
    # the averaging error shrinks at least like sqrt(h)
    assert rep.slope >= 0.5
    assert rep.constant < 0.1
