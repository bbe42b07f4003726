"""Incoming plane-wave rays in the Euclidean chart of one end.

An end is isometric to the exterior of a disc of radius c; its chart is
(u, v) = (|r| + c)(cos theta, sin theta).  A plane wave travelling in the
direction xi = (cos alpha, sin alpha) is parametrized by the impact
parameter s and the position sigma along xi:

    x = sigma xi + s xi_perp,   xi_perp = (sin alpha, -cos alpha),

with phase phi = <x, xi> = sigma and angular momentum p_theta = s.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import TWO_PI


@dataclass(frozen=True)
class IncomingWaveSpec:
    """Plane wave entering through one end.

    Attributes:
        end: "plus" (r > 0) or "minus" (r < 0).
        direction: angle alpha of the propagation direction in the end chart.
        cutoff_radius: chart radius outside which the incoming state is
            defined; defaults to the boundary of the interaction region.
    """

    end: str = "plus"
    direction: float = np.pi
    cutoff_radius: Optional[float] = None

    def __post_init__(self):
        if self.end not in ("plus", "minus"):
            raise ValueError("end must be 'plus' or 'minus'")

    @property
    def sign(self):
        return 1.0 if self.end == "plus" else -1.0

    @property
    def xi(self):
        return np.array([np.cos(self.direction), np.sin(self.direction)])

    @property
    def xi_perp(self):
        return np.array([np.sin(self.direction), -np.cos(self.direction)])

    @property
    def theta_in(self):
        """Angle of the side the wave comes from, reduced to (-pi, pi]."""
        t = np.mod(self.direction + np.pi + np.pi, TWO_PI) - np.pi
        return float(np.pi if t == -np.pi else t)

    def cutoff(self, model):
        return 2.0 / model.eps0 if self.cutoff_radius is None else float(self.cutoff_radius)


def wrap(angle):
    """Reduce to [-pi, pi)."""
    return np.mod(np.asarray(angle) + np.pi, TWO_PI) - np.pi


def winding_class(spec, theta_lift):
    """Deck index m of lifted angles, with the fundamental domain centred on theta_in."""
    return np.floor((np.asarray(theta_lift) - spec.theta_in + np.pi) / TWO_PI).astype(int)


def chart_to_polar(model, spec, u, v):
    """End-chart coordinates to (r, theta_lift) with theta near theta_in."""
    rho = np.hypot(u, v)
    theta = spec.theta_in + wrap(np.arctan2(v, u) - spec.theta_in)
    return spec.sign * (rho - model.end_offset), theta


def polar_to_chart(model, spec, r, theta):
    rho = spec.sign * np.asarray(r) + model.end_offset
    return rho * np.cos(theta), rho * np.sin(theta)


def ray_states(model, spec, s, sigma):
    """States, tangents d/ds at fixed phase, and phases of plane-wave rays.

    Valid where the point lies in the flat part of the chosen end.
    Returns (y, V, phi) with y, V of shape (..., 4).
    """
    s, sigma = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(sigma, dtype=float))
    xi, xp = spec.xi, spec.xi_perp
    u = sigma * xi[0] + s * xp[0]
    v = sigma * xi[1] + s * xp[1]
    rho = np.hypot(u, v)
    if np.any(rho < model.r2 + model.end_offset - 1e-12):
        raise ValueError("ray point lies inside the curved region")
    er = np.stack([u, v], axis=-1) / rho[..., None]
    et = np.stack([-er[..., 1], er[..., 0]], axis=-1)
    p_rho = er @ xi
    xi_t = et @ xi
    r, theta = chart_to_polar(model, spec, u, v)
    d_rho = er @ xp
    d_theta = (et @ xp) / rho
    d_p_rho = xi_t * d_theta
    d_p_theta = d_rho * xi_t - rho * p_rho * d_theta
    sg = spec.sign
    y = np.stack([r, theta, sg * p_rho, rho * xi_t], axis=-1)
    V = np.stack([sg * d_rho, d_theta, sg * d_p_rho, d_p_theta], axis=-1)
    return y, V, sigma.copy()


def entry_sigma(radius, s):
    """Position along xi where the ray with impact parameter s meets a circle."""
    s = np.asarray(s, dtype=float)
    return -np.sqrt(np.maximum(radius * radius - s * s, 0.0))


def lagrangian_jacobian(model, y, V):
    """Signed base Jacobian f (dr * theta_dot - dtheta * r_dot) of the ray family."""
    f = model.f(y[..., 0])
    theta_dot = y[..., 3] / f**2
    return f * (V[..., 0] * theta_dot - V[..., 1] * y[..., 2])


def flow_vector(model, y):
    f, fp, _ = model.profile(y[..., 0])
    return np.stack([y[..., 2], y[..., 3] / f**2, y[..., 3] ** 2 * fp / f**3,
                     np.zeros_like(f)], axis=-1)


def phase_hessian(model, y, V):
    """Hessian of the phase in (r, theta) from two tangent vectors of the sheet.

    Uses the ray tangent V and the flow vector X, both tangent to the
    Lagrangian: H [dx_V, dx_X] = [dp_V, dp_X].
    """
    X = flow_vector(model, y)
    Q = np.stack([np.stack([V[..., 0], X[..., 0]], -1), np.stack([V[..., 1], X[..., 1]], -1)], -2)
    P = np.stack([np.stack([V[..., 2], X[..., 2]], -1), np.stack([V[..., 3], X[..., 3]], -1)], -2)
    H = P @ np.linalg.inv(Q)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def symplectic_pairing(model, y, V):
    """omega(V, X); vanishes on a Lagrangian sheet."""
    X = flow_vector(model, y)
    return (V[..., 0] * X[..., 2] - V[..., 2] * X[..., 0]
            + V[..., 1] * X[..., 3] - V[..., 3] * X[..., 1])


def impact_parameters(q, s_max, families=("T+", "T-", "R+", "R-")):
    """Impact parameters clustered at |s| = 1, where rays wind around the neck.

    Transmitted families use s = +-(1 - e^{-q}); reflected families use
    s = +-(1 + (s_max - 1) e^{-q}).
    """
    q = np.asarray(q, dtype=float)
    out = []
    for fam in families:
        sgn = 1.0 if fam.endswith("+") else -1.0
        if fam.startswith("T"):
            out.append(sgn * (1.0 - np.exp(-q)))
        else:
            out.append(sgn * (1.0 + (s_max - 1.0) * np.exp(-q)))
    return np.concatenate(out)
