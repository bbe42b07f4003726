import numpy as np
import pytest

from neckwave.sheets import Chart, SheetResolver, resolve_sheets

# frozen from the first resolution of classes -3..3 on the default chart
GOLDEN_CENTER_A = {0: 0.814, 1: 0.0819, 2: 3.54e-3, 3: 1.53e-4}


def _center(sheet):
    i = int(np.argmin(np.abs(sheet.r)))
    j = int(np.argmin(np.abs(sheet.theta)))
    return i, j


def test_chart_cutoff(spec):
    ch = Chart()
    assert ch.chi(spec, 0.0, 0.0) == 1.0
    assert ch.chi(spec, 0.3, 0.15) == 1.0
    assert ch.chi(spec, 0.8, 0.0) == 0.0
    assert ch.chi(spec, 0.0, 0.65) == 0.0
    r = np.linspace(-0.9, 0.9, 181)
    vals = ch.chi(spec, r[:, None], np.linspace(-0.7, 0.7, 141)[None, :])
    assert vals.min() >= 0.0 and vals.max() <= 1.0
    # symmetric about the neck and about theta_in
    np.testing.assert_allclose(vals, vals[::-1, ::-1], atol=1e-14)


def test_rows_avoid_trapped_orbit(model, spec):
    res = SheetResolver(model, spec)
    assert np.min(np.abs(res.rows)) > 0.005
    assert res.rows[0] == -0.9 and res.rows[-1] == 0.9


def test_sheet_classes_and_grid(sheets):
    assert [s.m for s in sheets] == [-3, -2, -1, 0, 1, 2, 3]
    for s in sheets:
        assert s.phi.shape == (len(s.r), len(s.theta))
        assert np.all(s.a > 0)


def test_eikonal_at_nodes(model, sheets):
    for s in sheets:
        assert np.max(np.abs(s.xi_norm(model) - 1.0)) < 1e-8


def test_center_amplitudes_golden(sheets):
    by_m = {s.m: s for s in sheets}
    for m, a in GOLDEN_CENTER_A.items():
        for sgn in (1, -1):
            s = by_m[sgn * m]
            i, j = _center(s)
            assert s.a[i, j] == pytest.approx(a, rel=0.02)


def test_mirror_symmetry(sheets):
    # theta -> -theta maps class m to class -m
    by_m = {s.m: s for s in sheets}
    for m in (1, 2, 3):
        a, b = by_m[m], by_m[-m]
        np.testing.assert_allclose(a.theta, -b.theta[::-1], atol=1e-12)
        np.testing.assert_allclose(a.a, b.a[:, ::-1], rtol=1e-5)
        np.testing.assert_allclose(a.p_theta, -b.p_theta[:, ::-1], atol=1e-7)


def test_phase_gradient_matches_differences(model, sheets):
    # trapezoid rule on the nodal gradient reproduces phase increments
    for s in sheets:
        dt = np.diff(s.theta)[None, :]
        err_t = np.diff(s.phi, axis=1) - 0.5 * (s.p_theta[:, 1:] + s.p_theta[:, :-1]) * dt
        dr = np.diff(s.r)[:, None]
        err_r = np.diff(s.phi, axis=0) - 0.5 * (s.p_r[1:] + s.p_r[:-1]) * dr
        assert np.abs(err_t).max() < 1e-4
        assert np.abs(err_r).max() < 1e-4


def test_successive_class_amplitude_ratio(sheets):
    by_m = {s.m: s for s in sheets}
    for k in (1, 2):
        ratio = by_m[k + 1].a.max() / by_m[k].a.max()
        assert 0.02 <= ratio <= 0.10


def test_resolver_statistics(model, spec):
    sheets, res = resolve_sheets(model, spec, [0, 1])
    assert res.rounds >= 1
    assert res.n_rays > 100
    assert res.n_records > res.n_rays
    assert [s.m for s in sheets] == [0, 1]
