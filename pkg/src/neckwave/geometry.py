"""Warped-product surface with a negatively curved neck and two flat ends.

The metric is ds^2 = dr^2 + f(r)^2 dtheta^2.  The profile f is built by
integrating a nonnegative even bump twice; beyond |r| = r2 the profile is
exactly affine with unit slope, so each end is isometric to the exterior
of a Euclidean disc of radius c = f(r2) - r2.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import optimize, special

TWO_PI = 2.0 * np.pi


class GeometryError(ValueError):
    """Raised when a profile specification cannot produce a valid model."""


class ConvexityViolation(RuntimeError):
    """Raised when the boundary-defining function fails the convexity test."""


def gaussian_bump(x):
    """Default curvature bump, exp(-pi x^2 / 4); its integral over x > 0 is 1."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.25 * np.pi * x * x)


@dataclass(frozen=True)
class BasePoint:
    """Point of the surface; ``theta`` is reduced, ``theta_lift`` is not."""

    r: float
    theta: float
    theta_lift: float

    @classmethod
    def from_lift(cls, r, theta_lift):
        return cls(float(r), float(np.mod(theta_lift, TWO_PI)), float(theta_lift))

    def coords(self):
        return np.array([self.r, self.theta_lift])


class _GaussianProfile:
    """Closed-form profile for f'' = A (g(r/w) - g2) / (1 - g2) on |r| <= r2.

    Subtracting the value g2 at the truncation radius makes f'' continuous,
    and the width w is tuned so that f'(r2) = 1 exactly.
    """

    def __init__(self, amplitude, r2):
        self.amplitude = float(amplitude)
        self.r2 = float(r2)
        if self.amplitude == 0.0:
            self.width = np.inf
            self.g2 = 0.0
            self.f_r2 = 1.0
            return

        def slope_at_r2(w):
            return self._fprime_scalar(self.r2, w) - 1.0

        # f'(r2) grows with w, from ~0 at tiny widths to 2 A r2 / 3 for wide bumps.
        if 2.0 * self.amplitude * self.r2 / 3.0 <= 1.0:
            raise GeometryError(
                "amplitude %g too small to bend the ends to unit slope by r2=%g"
                % (self.amplitude, self.r2))
        lo, hi = 1e-3 / self.amplitude, 1e3 * self.r2
        self.width = optimize.brentq(slope_at_r2, lo, hi, xtol=1e-15, rtol=1e-15,
                                     maxiter=500)
        self.g2 = float(np.exp(-0.25 * np.pi * (self.r2 / self.width) ** 2))
        self.f_r2 = float(self._f_inner(np.array([self.r2]))[0])

    def _fprime_scalar(self, r, w):
        k = np.sqrt(np.pi) / (2.0 * w)
        g2 = np.exp(-(k * self.r2) ** 2)
        return self.amplitude * (w * special.erf(k * r) - g2 * r) / (1.0 - g2)

    def _f_inner(self, r):
        w, g2, A = self.width, self.g2, self.amplitude
        k = np.sqrt(np.pi) / (2.0 * w)
        x = np.abs(r)
        erf_int = x * special.erf(k * x) + (np.exp(-(k * x) ** 2) - 1.0) / (k * np.sqrt(np.pi))
        return 1.0 + A * (w * erf_int - 0.5 * g2 * x * x) / (1.0 - g2)

    @property
    def truncation_jump(self):
        """Size of f'' at r2 had the bump been cut without the shift."""
        return self.amplitude * self.g2

    def scalar(self, r):
        """(f, f', f'') at one point with plain floats, for single-trajectory loops."""
        if self.amplitude == 0.0:
            return 1.0, 0.0, 0.0
        x = abs(r)
        sgn = 1.0 if r > 0 else (-1.0 if r < 0 else 0.0)
        if x > self.r2:
            return self.f_r2 + (x - self.r2), sgn, 0.0
        w, g2 = self.width, self.g2
        scale = self.amplitude / (1.0 - g2)
        k = math.sqrt(math.pi) / (2.0 * w)
        gauss = math.exp(-(k * x) ** 2)
        erf = math.erf(k * x)
        erf_int = x * erf + (gauss - 1.0) / (k * math.sqrt(math.pi))
        return (1.0 + scale * (w * erf_int - 0.5 * g2 * x * x),
                sgn * scale * (w * erf - g2 * x), scale * (gauss - g2))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.amplitude == 0.0:
            one = np.ones_like(r)
            return one, np.zeros_like(r), np.zeros_like(r)
        w, g2 = self.width, self.g2
        k = math.sqrt(math.pi) / (2.0 * w)
        k_root_pi = k * math.sqrt(math.pi)
        scale = self.amplitude / (1.0 - g2)
        x = np.abs(r)
        xi = np.minimum(x, self.r2)
        kx = k * xi
        gauss = np.exp(-(kx * kx))
        erf = special.erf(kx)
        f = 1.0 + scale * (w * (xi * erf + (gauss - 1.0) / k_root_pi) - 0.5 * g2 * xi * xi)
        fp = np.sign(r) * (scale * (w * erf - g2 * xi))
        fpp = scale * (gauss - g2)
        outer = x > self.r2
        if outer.any():
            f = np.where(outer, self.f_r2 + (x - self.r2), f)
            fp = np.where(outer, np.sign(r), fp)
            fpp = np.where(outer, 0.0, fpp)
        return f, fp, fpp


class _QuadratureProfile:
    """Profile for an arbitrary bump, integrated by panel Gauss-Legendre rules."""

    def __init__(self, bump, amplitude, r2, panel=0.02, order=10):
        self.bump = bump
        self.amplitude = float(amplitude)
        self.r2 = float(r2)
        self.nodes, self.weights = np.polynomial.legendre.leggauss(order)
        self.edges = np.linspace(0.0, self.r2, int(np.ceil(self.r2 / panel)) + 1)
        if 2.0 * self.amplitude * self.r2 / 3.0 <= 1.0:
            raise GeometryError(
                "amplitude %g too small to bend the ends to unit slope by r2=%g"
                % (self.amplitude, self.r2))

        def slope_at_r2(w):
            self._set_width(w)
            return self._tables()[0][-1] - 1.0

        # bracket: a narrow bump gives a small slope, a wide one a large one
        lo, hi = 1e-3 / self.amplitude, 1e3 * self.r2
        w = optimize.brentq(slope_at_r2, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
        self._set_width(w)
        self.fp_table, self.f_table = self._tables()
        self.f_r2 = float(self.f_table[-1])

    def _set_width(self, w):
        self.width = float(w)
        self.g2 = float(self.bump(np.array([self.r2 / w]))[0])

    @property
    def truncation_jump(self):
        return self.amplitude * self.g2

    def _fpp(self, x):
        g = self.bump(x / self.width)
        return self.amplitude * (g - self.g2) / (1.0 - self.g2)

    def _panel_integrals(self, a, b):
        # integrals of f'' and (b - t) f'' over [a, b], vectorized over panels
        half = 0.5 * (b - a)
        t = 0.5 * (a + b)[..., None] + half[..., None] * self.nodes
        vals = self._fpp(t) * self.weights
        i0 = half * vals.sum(axis=-1)
        i1 = half * (vals * (b[..., None] - t)).sum(axis=-1)
        return i0, i1

    def _tables(self):
        a, b = self.edges[:-1], self.edges[1:]
        i0, i1 = self._panel_integrals(a, b)
        fp = np.concatenate([[0.0], np.cumsum(i0)])
        f = np.empty_like(fp)
        f[0] = 1.0
        for j in range(len(i0)):
            f[j + 1] = f[j] + fp[j] * (b[j] - a[j]) + i1[j]
        return fp, f

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        x = np.abs(r)
        inner = x <= self.r2
        xi = np.where(inner, x, self.r2)
        j = np.clip(np.searchsorted(self.edges, xi, side="right") - 1, 0, len(self.edges) - 2)
        a = self.edges[j]
        i0, i1 = self._panel_integrals(a, xi)
        fp_in = self.fp_table[j] + i0
        f_in = self.f_table[j] + self.fp_table[j] * (xi - a) + i1
        fpp_in = self._fpp(xi)
        f = np.where(inner, f_in, self.f_r2 + (x - self.r2))
        fp = np.sign(r) * np.where(inner, fp_in, 1.0)
        fpp = np.where(inner, fpp_in, 0.0)
        return f, fp, fpp


@dataclass(frozen=True)
class SurfaceModel:
    """Surface of revolution dr^2 + f(r)^2 dtheta^2 with flat ends.

    Attributes:
        r2: radius beyond which f is affine.
        end_offset: c in f(r) = |r| + c on the ends.
        curvature_floor: b0 = sup f''/f.
        injectivity_radius: global lower bound pi * f(0).
        eps0: threshold on b = 1/f separating the region near infinity.
        amplitude: f''(0).
    """

    r2: float
    end_offset: float
    curvature_floor: float
    injectivity_radius: float
    eps0: float
    amplitude: float
    bump_name: str
    _profile: Callable = field(repr=False, compare=False)

    def profile(self, r):
        """Return (f, f', f'') at r (vectorized)."""
        return self._profile(r)

    def profile_scalar(self, r):
        """(f, f', f'') at one float r, returned as floats."""
        fast = getattr(self._profile, "scalar", None)
        if fast is not None:
            return fast(float(r))
        f, fp, fpp = self._profile(np.array([float(r)]))
        return float(f[0]), float(fp[0]), float(fpp[0])

    def f(self, r):
        return self._profile(r)[0]

    def df(self, r):
        return self._profile(r)[1]

    def d2f(self, r):
        return self._profile(r)[2]

    @property
    def is_degenerate(self):
        """True for the flat cylinder (no curvature anywhere)."""
        return self.amplitude == 0.0

    @property
    def interaction_radius(self):
        """|r| bounding X0 = {f <= 2/eps0}."""
        return 2.0 / self.eps0 - self.end_offset

    @property
    def escape_radius(self):
        """|r| at which b = eps0."""
        return 1.0 / self.eps0 - self.end_offset


def build_model(bump: Union[str, Callable] = "gaussian", r2: float = 4.0,
                amplitude: float = 1.0, eps0: Optional[float] = None,
                max_jump: float = 1e-5) -> SurfaceModel:
    """Construct the neck surface.

    Args:
        bump: "gaussian" or a callable x -> bump(x) that is smooth, even,
            nonnegative and equal to 1 at 0.
        r2: radius beyond which the profile is affine.
        amplitude: value of f''(0); 1 gives curvature -1 on the neck.
        eps0: cut on b = 1/f. Defaults to 0.9 / f(r2).
        max_jump: reject r2 if the raw bump at r2 exceeds this.
    """
    r2 = float(r2)
    if r2 <= 0:
        raise GeometryError("r2 must be positive")
    if amplitude < 0:
        raise GeometryError("amplitude must be nonnegative")
    if isinstance(bump, str):
        if bump != "gaussian":
            raise GeometryError("unknown bump %r" % bump)
        name = bump
        prof = _GaussianProfile(amplitude, r2)
    else:
        name = getattr(bump, "__name__", "custom")
        _validate_bump(bump, r2)
        if amplitude == 0.0:
            prof = _GaussianProfile(0.0, r2)
        else:
            prof = _QuadratureProfile(bump, amplitude, r2)
    if amplitude > 0 and prof.truncation_jump > max_jump:
        raise GeometryError(
            "bump not negligible at r2=%g: jump %.3e exceeds %.1e"
            % (r2, prof.truncation_jump, max_jump))

    if amplitude == 0.0:
        c = 1.0 - r2
        f_r2 = 1.0
    else:
        f_r2 = prof.f_r2
        c = f_r2 - r2
    if eps0 is None:
        eps0 = 0.9 / f_r2
    grid = np.linspace(0.0, r2, 4001)
    f, _, fpp = prof(grid)
    b0 = float(np.max(fpp / f))
    return SurfaceModel(r2=r2, end_offset=float(c), curvature_floor=b0,
                        injectivity_radius=float(np.pi * prof(np.array([0.0]))[0][0]),
                        eps0=float(eps0), amplitude=float(amplitude), bump_name=name,
                        _profile=prof)


def _validate_bump(bump, r2):
    x = np.linspace(0.0, 3.0 * r2, 3001)
    vals = np.asarray(bump(x), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise GeometryError("bump produced non-finite values")
    if np.any(vals < -1e-14):
        raise GeometryError("bump must be nonnegative")
    if not np.allclose(np.asarray(bump(-x), dtype=float), vals, rtol=1e-12, atol=1e-14):
        raise GeometryError("bump must be even")
    if abs(vals[0] - 1.0) > 1e-12:
        raise GeometryError("bump must equal 1 at the origin")


def curvature(model: SurfaceModel, r):
    """Gaussian curvature K = -f''/f."""
    f, _, fpp = model.profile(r)
    return -fpp / f


def boundary_defining(model: SurfaceModel, x):
    """b = 1/f(r); accepts a BasePoint or an array of radii."""
    r = x.r if isinstance(x, BasePoint) else x
    return 1.0 / model.f(r)


def b_derivatives(model: SurfaceModel, states):
    """Values of b, db/dt and d^2b/dt^2 along the unit-speed flow.

    ``states`` has trailing axis (r, theta, p_r, p_theta).
    """
    states = np.asarray(states, dtype=float)
    r, pr, pth = states[..., 0], states[..., 2], states[..., 3]
    f, fp, fpp = model.profile(r)
    b = 1.0 / f
    bdot = -fp * pr / f**2
    prdot = pth**2 * fp / f**3
    bddot = -fpp * pr**2 / f**2 - fp * prdot / f**2 + 2.0 * fp**2 * pr**2 / f**3
    return b, bdot, bddot


@dataclass
class ConvexityReport:
    passed: bool
    worst_margin: float
    n_checked: int
    n_skipped: int
    fd_mismatch: float


def _region_radius(model):
    """Smallest |r| with b(r) <= eps0, i.e. f(r) >= 1/eps0."""
    target = 1.0 / model.eps0
    if model.is_degenerate or target <= float(model.f(0.0)):
        return 0.0
    if target >= float(model.f(model.r2)):
        return target - model.end_offset
    return optimize.brentq(lambda r: float(model.f(r)) - target, 0.0, model.r2, xtol=1e-14)


def check_convexity_hypothesis(model: SurfaceModel, samples: int = 10000, seed: int = 0,
                               bdot_tol: float = 1e-8, raise_on_fail: bool = True):
    """Check that b'' < 0 wherever b <= eps0 and b' vanishes.

    Half of the samples are taken with purely angular momentum, where b' = 0
    exactly, and the neck circle is always included when it lies in the
    region; the other half are random directions, most of which are skipped.
    The analytic second derivative is cross-checked against a centered
    difference of b along the integrated flow.
    """
    from .dynamics import flow_states

    if samples < 100:
        raise ValueError("need at least 100 samples")
    rng = np.random.default_rng(seed)
    r_min = _region_radius(model)
    if model.is_degenerate and model.eps0 < 1.0:
        # f = 1 everywhere, so the region b <= eps0 is empty and the condition is vacuous
        return ConvexityReport(True, np.inf, 0, samples, 0.0)
    if r_min == 0.0:
        r_abs = rng.uniform(0.0, 20.0, samples)
    else:
        r_abs = r_min + rng.exponential(5.0, samples)
    r = r_abs * rng.choice([-1.0, 1.0], samples)
    if r_min == 0.0:
        # the neck circle is a critical set of b and must be among the checked points
        r[0] = 0.0
    theta = rng.uniform(0.0, TWO_PI, samples)
    psi = rng.uniform(0.0, TWO_PI, samples)
    angular = np.arange(samples) < samples // 2
    angular[0] = True
    psi[angular] = rng.choice([0.5 * np.pi, 1.5 * np.pi], angular.sum())
    f = model.f(r)
    pr = np.where(angular, 0.0, np.cos(psi))
    pth = f * np.sin(psi)
    states = np.stack([r, theta, pr, pth], axis=-1)
    b, bdot, bddot = b_derivatives(model, states)
    use = (b <= model.eps0) & (np.abs(bdot) < bdot_tol)
    n_checked = int(use.sum())
    fd_mismatch = 0.0
    if n_checked:
        dt = 1e-3
        fwd = flow_states(model, states[use], dt, dt_max=dt / 4)
        bwd = flow_states(model, states[use], -dt, dt_max=dt / 4)
        fd = (1.0 / model.f(fwd[:, 0]) - 2.0 * b[use] + 1.0 / model.f(bwd[:, 0])) / dt**2
        fd_mismatch = float(np.max(np.abs(fd - bddot[use])))
        worst = float(np.max(bddot[use]))
    else:
        worst = -np.inf
    passed = n_checked > 0 and worst < 0.0
    report = ConvexityReport(passed, -worst, n_checked, samples - n_checked, fd_mismatch)
    if raise_on_fail and not passed:
        raise ConvexityViolation(
            "b'' >= 0 found at a critical point of b (worst value %.3e over %d samples);"
            " eps0=%g is too large" % (worst, n_checked, model.eps0))
    return report


def geometry_table(model: SurfaceModel, r_max: float = 10.0, step: float = 0.05):
    """Columns r, f, f', f'', K, b on a symmetric grid."""
    n = int(round(r_max / step))
    r = step * np.arange(-n, n + 1)
    f, fp, fpp = model.profile(r)
    return {"r": r, "f": f, "f'": fp, "f''": fpp, "K": -fpp / f, "b": 1.0 / f}
