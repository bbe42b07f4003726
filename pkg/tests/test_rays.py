import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neckwave.dynamics import energy
from neckwave.geometry import build_model
from neckwave.rays import (IncomingWaveSpec, chart_to_polar, entry_sigma, impact_parameters,
                           lagrangian_jacobian, phase_hessian, polar_to_chart, ray_states,
                           symplectic_pairing, winding_class, wrap)

MODEL = build_model()


def test_spec_defaults():
    spec = IncomingWaveSpec()
    assert spec.theta_in == 0.0
    np.testing.assert_allclose(spec.xi, [-1.0, 0.0], atol=1e-15)
    with pytest.raises(ValueError):
        IncomingWaveSpec(end="left")


def test_winding_class_windows(spec):
    th = np.array([-np.pi + 1e-9, 0.0, np.pi - 1e-9, np.pi + 1e-9, 3 * np.pi + 1e-9, -np.pi - 1e-9])
    np.testing.assert_array_equal(winding_class(spec, th), [0, 0, 0, 1, 2, -1])


@given(st.floats(-30.0, 30.0), st.floats(-30.0, 30.0))
@settings(max_examples=100, deadline=None)
def test_chart_round_trip(u, v):
    m_ = MODEL
    if np.hypot(u, v) < m_.r2 + m_.end_offset:
        return
    spec = IncomingWaveSpec()
    r, th = chart_to_polar(m_, spec, u, v)
    assert abs(th - spec.theta_in) <= np.pi + 1e-12
    uu, vv = polar_to_chart(m_, spec, r, th)
    assert uu == pytest.approx(u, abs=1e-12) and vv == pytest.approx(v, abs=1e-12)


def _plane_samples(model, spec, n=50, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-8, 8, n)
    sigma = entry_sigma(12.0, s) - rng.uniform(0.1, 5.0, n)
    return s, sigma, ray_states(model, spec, s, sigma)


@pytest.mark.parametrize("end,direction", [("plus", np.pi), ("minus", np.pi), ("plus", 0.7)])
def test_plane_wave_rays(model, end, direction):
    spec = IncomingWaveSpec(end=end, direction=direction)
    s, sigma, (y, V, phi) = _plane_samples(model, spec)
    np.testing.assert_allclose(2 * energy(model, y), 1.0, atol=1e-13)
    np.testing.assert_array_equal(phi, sigma)
    # angular momentum equals the impact parameter
    np.testing.assert_allclose(y[:, 3], s, atol=1e-12)
    # a family of parallel lines has unit base Jacobian
    np.testing.assert_allclose(np.abs(lagrangian_jacobian(model, y, V)), 1.0, atol=1e-12)
    np.testing.assert_allclose(symplectic_pairing(model, y, V), 0.0, atol=1e-12)


def test_plane_wave_phase_hessian(model, spec):
    _, _, (y, V, _) = _plane_samples(model, spec)
    H = phase_hessian(model, y, V)
    rho = y[:, 0] + model.end_offset
    d = y[:, 1] - spec.direction
    # phi = rho cos(theta - alpha) in polar coordinates of the end
    np.testing.assert_allclose(H[:, 0, 0], 0.0, atol=1e-10)
    np.testing.assert_allclose(H[:, 0, 1], -np.sin(d), atol=1e-10)
    np.testing.assert_allclose(H[:, 1, 1], -rho * np.cos(d), atol=1e-9)


def test_ray_states_reject_curved_region(model, spec):
    with pytest.raises(ValueError):
        ray_states(model, spec, 0.0, -1.0)


def test_impact_parameters_cluster_at_one():
    q = np.arange(0.05, 30.0, 0.1)
    s = impact_parameters(q, 10.0)
    T = s[: 2 * len(q)]
    R = s[2 * len(q):]
    assert np.all(np.abs(T) < 1.0)
    assert np.all((np.abs(R) > 1.0) & (np.abs(R) <= 10.0))
    assert np.min(1.0 - np.abs(T)) == pytest.approx(np.exp(-q[-1]))


def test_wrap_range():
    x = wrap(np.linspace(-20, 20, 1001))
    assert np.all(x >= -np.pi) and np.all(x < np.pi)
