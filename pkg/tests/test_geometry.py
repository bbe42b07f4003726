import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from neckwave.geometry import (BasePoint, ConvexityViolation, GeometryError, b_derivatives,
                               boundary_defining, build_model, check_convexity_hypothesis,
                               curvature, geometry_table)

# frozen after the first high-order quadrature of the default profile
GOLDEN_C = 0.3633941281601274
GOLDEN_EPS0 = 0.20626145004679988


def test_normalization_at_neck(model):
    f, fp, fpp = model.profile(np.array([0.0]))
    assert f[0] == pytest.approx(1.0, abs=1e-14)
    assert fp[0] == pytest.approx(0.0, abs=1e-14)
    assert curvature(model, 0.0) == pytest.approx(-1.0, abs=1e-12)
    assert model.curvature_floor == pytest.approx(1.0, abs=1e-12)


def test_end_offset_golden_and_quadrature(model):
    assert model.end_offset == pytest.approx(GOLDEN_C, abs=1e-13)
    # f(4) = 1 + int_0^4 (4 - x) f''(x) dx, an independent quadrature of f''
    val, _ = quad(lambda x: (4.0 - x) * float(model.d2f(x)), 0.0, 4.0, epsabs=1e-12, epsrel=1e-12, limit=200)
    assert 1.0 + val - 4.0 == pytest.approx(GOLDEN_C, abs=1e-10)
    assert float(model.df(4.0)) == pytest.approx(1.0, abs=1e-12)


def test_eps0_default_is_flat_region(model):
    assert model.eps0 == pytest.approx(GOLDEN_EPS0, abs=1e-14)
    assert model.eps0 == pytest.approx(0.9 / (4.0 + GOLDEN_C), rel=1e-13)
    # {b < eps0} lies in the affine part of the ends
    assert 1.0 / model.eps0 - model.end_offset > model.r2


def test_flat_end_curvature_zero(model):
    assert curvature(model, 10.0) == 0.0
    assert curvature(model, -7.5) == 0.0


def test_curvature_against_finite_differences(model):
    h = 1e-4
    f = model.f(np.array([1.0 - h, 1.0, 1.0 + h]))
    fd = -(f[0] - 2 * f[1] + f[2]) / h**2 / f[1]
    K = curvature(model, 1.0)
    assert -1.0 < K < 0.0
    assert K == pytest.approx(fd, abs=1e-8)


def test_curvature_second_difference_grid(model):
    step = 1e-3
    r = np.arange(-6.0, 6.0, step)
    f = model.f(r)
    K_fd = -(f[2:] - 2 * f[1:-1] + f[:-2]) / step**2 / f[1:-1]
    assert np.max(np.abs(K_fd - curvature(model, r[1:-1]))) < 1e-6


def test_boundary_defining(model):
    assert boundary_defining(model, BasePoint.from_lift(0.0, 0.0)) == pytest.approx(1.0)
    assert boundary_defining(model, 4.0) == pytest.approx(1.0 / (4.0 + GOLDEN_C), rel=1e-13)
    r = np.linspace(0.0, 200.0, 2001)
    b = boundary_defining(model, r)
    assert np.all(np.diff(b) < 0)
    assert b[-1] < 0.01


@given(st.floats(-50.0, 50.0))
@settings(max_examples=200, deadline=None)
def test_profile_invariants(r):
    m = build_model()
    f, fp, fpp = m.profile(np.array([r]))
    assert f[0] >= 1.0 - 1e-14
    assert fpp[0] >= 0.0
    assert m.f(-r) == pytest.approx(f[0], rel=1e-14)
    if abs(r) >= m.r2:
        assert f[0] >= abs(r) + m.end_offset - 1e-12
        assert fpp[0] == 0.0


def test_injectivity_radius(model):
    assert model.injectivity_radius == pytest.approx(np.pi)


def test_base_point_reduces_angle():
    p = BasePoint.from_lift(0.3, 7.0)
    assert p.theta == pytest.approx(7.0 - 2 * np.pi)
    assert p.theta_lift == 7.0


def test_convexity_angular_direction_at_r5(model):
    f = float(model.f(5.0))
    b, bdot, bddot = b_derivatives(model, np.array([5.0, 0.0, 0.0, f]))
    assert bdot == 0.0
    fp = float(model.df(5.0))
    # closed form -f' r'' / f^2 with r'' = f' p_theta^2 / f^3
    assert bddot == pytest.approx(-fp * (fp * f**2 / f**3) / f**2, abs=1e-12)
    assert bddot < 0


def test_convexity_radial_direction_skipped(model):
    _, bdot, _ = b_derivatives(model, np.array([5.0, 0.0, 1.0, 0.0]))
    assert abs(bdot) > 1e-3


def test_convexity_sweep_passes(model):
    rep = check_convexity_hypothesis(model, samples=10000, seed=1)
    assert rep.passed
    assert rep.n_checked >= 5000
    assert rep.fd_mismatch < 1e-6


def test_convexity_fails_loudly_for_large_eps0():
    # b <= eps0 now reaches the neck where f' = 0 and b'' vanishes
    m = build_model(eps0=1.0)
    with pytest.raises(ConvexityViolation):
        check_convexity_hypothesis(m, samples=2000, seed=0)


def test_rejects_bad_bumps():
    with pytest.raises(GeometryError):
        build_model(bump=lambda x: np.exp(-np.asarray(x)))  # not even
    with pytest.raises(GeometryError):
        build_model(bump=lambda x: np.cos(np.asarray(x)))  # changes sign
    with pytest.raises(GeometryError):
        build_model(r2=1.0)  # truncation jump too large


def test_geometry_table_columns(model):
    tab = geometry_table(model, r_max=5.0, step=0.5)
    assert list(tab) == ["r", "f", "f'", "f''", "K", "b"]
    assert len(tab["r"]) == 21
