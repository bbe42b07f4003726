"""Unit-speed geodesic flow on the unit cosphere bundle of the neck surface.

Phase points are (r, theta, p_r, p_theta) with H = (p_r^2 + p_theta^2/f^2)/2
equal to 1/2.  The flow is integrated with the splitting in
``symplectic.py``; tangent frames come from the exact Jacobians of the
substeps.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import TWO_PI, SurfaceModel, b_derivatives
from .symplectic import conservation_step, integrate, integrate_single, step_size_for

# time reversal (r, theta, p_r, p_theta) -> (r, theta, -p_r, -p_theta)
REVERSAL = np.diag([1.0, 1.0, -1.0, -1.0])


class IntegrationError(RuntimeError):
    pass


class NonHyperbolicError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhasePoint:
    r: float
    theta: float
    p_r: float
    p_theta: float

    def array(self):
        return np.array([self.r, self.theta, self.p_r, self.p_theta])

    @classmethod
    def from_array(cls, y):
        y = np.asarray(y, dtype=float)
        return cls(float(y[0]), float(y[1]), float(y[2]), float(y[3]))

    def reversed(self):
        return PhasePoint(self.r, self.theta, -self.p_r, -self.p_theta)


@dataclass
class TangentFrame:
    base: PhasePoint
    M: np.ndarray

    @property
    def det(self):
        return float(np.linalg.det(self.M))

    def transverse_block(self):
        """The (r, p_r) block of M."""
        return self.M[np.ix_([0, 2], [0, 2])]


@dataclass(frozen=True)
class EscapeClass:
    tag: str
    escape_time: Optional[float] = None
    tie: bool = False


def energy(model, y):
    y = np.asarray(y, dtype=float)
    f = model.f(y[..., 0])
    return 0.5 * (y[..., 2] ** 2 + (y[..., 3] / f) ** 2)


def unit_covector(model, r, theta, psi):
    """On-shell states with momentum direction angle psi (0 = outward radial)."""
    r, theta, psi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (r, theta, psi)))
    f = model.f(r)
    return np.stack([r, theta, np.cos(psi), f * np.sin(psi)], axis=-1)


def direction_angle(model, y):
    """Angle psi of the unit momentum in the orthonormal frame (d_r, d_theta/f)."""
    y = np.asarray(y, dtype=float)
    f = model.f(y[..., 0])
    return np.arctan2(y[..., 3] / f, y[..., 2])


def _check_states(model, y, tol=1e-10):
    H = energy(model, y)
    if not np.all(np.abs(H - 0.5) <= tol):
        raise ValueError("phase point off the unit shell: |2H - 1| = %.3e"
                         % float(np.max(np.abs(2 * H - 1))))


def _nsteps(t, dt_max):
    tmax = float(np.max(np.abs(t))) if np.size(t) else 0.0
    return int(np.ceil(tmax / dt_max - 1e-12)) if tmax > 0 else 0


def flow_states(model, y, t, dt_max=None, tol=1e-12, V=None, order=6):
    """Flow an ensemble of states by times ``t`` (scalar or per-trajectory).

    Returns a new state array, and the propagated tangent array if ``V`` is
    given.  All trajectories take the same number of equal substeps.
    """
    if dt_max is None:
        dt_max = step_size_for(tol, order)
    if dt_max < 1e-7:
        raise IntegrationError("step size %.2e underflows" % dt_max)
    y = np.array(y, dtype=float, copy=True)
    t = np.asarray(t, dtype=float)
    n = _nsteps(t, dt_max)
    Vc = None if V is None else np.array(V, dtype=float, copy=True)
    if n:
        integrate(model, y, t / n, n, Vc, order=order)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite state after integration")
    return y if V is None else (y, Vc)


def flow(model: SurfaceModel, rho: PhasePoint, t: float, tol: float = 1e-12) -> PhasePoint:
    """Geodesic flow at unit speed."""
    if not (1e-14 <= tol <= 1e-3):
        raise IntegrationError("tolerance %g outside the supported range" % tol)
    y = rho.array()
    _check_states(model, y)
    return PhasePoint.from_array(flow_states(model, y, t, tol=tol))


def trajectory(model, rho: PhasePoint, T: float, tol: float = 1e-12, n_out: int = 200):
    """Sampled trajectory with energy and Clairaut drift columns.

    The step is chosen for conservation of H and p_theta to ``tol``; the
    output holds n_out + 1 equally spaced samples including both ends.
    """
    if not (1e-14 <= tol <= 1e-3):
        raise IntegrationError("tolerance %g outside the supported range" % tol)
    dt_max = conservation_step(tol)
    per = max(1, int(np.ceil(abs(T) / n_out / dt_max)))
    n = per * n_out
    dt = T / n
    y = rho.array()
    _check_states(model, y)
    out = [y.copy()]

    def grab(k, yy):
        if (k + 1) % per == 0:
            out.append(yy)

    integrate_single(model, y, dt, n, callback=grab)
    Y = np.array(out)
    times = dt * per * np.arange(len(Y))
    H = energy(model, Y)
    return {"t": times, "states": Y, "H": H, "p_theta_drift": Y[:, 3] - Y[0, 3]}


def tangent_flow(model, rho: PhasePoint, t: float, tol: float = 1e-12) -> TangentFrame:
    """Flow map differential in (r, theta, p_r, p_theta) coordinates."""
    y = rho.array()
    _check_states(model, y)
    yt, M = flow_states(model, y, t, tol=tol, V=np.eye(4))
    return TangentFrame(PhasePoint.from_array(yt), M)


def classify_states(model, y):
    """Vectorized DE_plus / DE_minus / Interaction tags (as strings)."""
    b, bdot, _ = b_derivatives(model, y)
    near = b < model.eps0
    tags = np.where(near & (bdot <= 0.0), "DE_plus",
                    np.where(near & (bdot > 0.0), "DE_minus", "Interaction"))
    tie = near & (bdot == 0.0)
    return tags, tie


def escape_times(model, y, T_max=200.0, dt=0.05, chunk=5.0, return_states=False):
    """First time b drops below eps0, or nan if not before T_max.

    With ``return_states`` the states reached at T_max (or at the last
    chunk boundary after escape) are returned as well.
    """
    y = np.array(y, dtype=float, copy=True).reshape(-1, 4)
    out = np.full(len(y), np.nan)
    b_prev = 1.0 / model.f(y[:, 0])
    out[b_prev < model.eps0] = 0.0
    alive = np.flatnonzero(np.isnan(out))
    t = 0.0
    nchunk = max(1, int(round(chunk / dt)))
    while alive.size and t < T_max - 1e-12:
        ya = y[alive]
        bp = 1.0 / model.f(ya[:, 0])
        hit = np.full(len(alive), np.nan)
        steps = min(nchunk, int(np.ceil((T_max - t) / dt - 1e-9)))

        def watch(k, yy, VV, bp=bp, hit=hit):
            b = 1.0 / model.f(yy[:, 0])
            new = np.isnan(hit) & (b < model.eps0)
            if np.any(new):
                # linear interpolation of the crossing inside the step
                frac = (bp[new] - model.eps0) / (bp[new] - b[new])
                hit[new] = t + (k + frac) * dt
            bp[:] = b

        integrate(model, ya, dt, steps, callback=watch)
        y[alive] = ya
        out[alive] = hit
        t += steps * dt
        alive = alive[np.isnan(hit)]
    return (out, y) if return_states else out


def classify(model, rho: PhasePoint, T_max: float = 200.0) -> EscapeClass:
    y = rho.array()
    tags, tie = classify_states(model, y)
    tag = str(tags)
    if tag != "Interaction":
        return EscapeClass(tag, None, bool(tie))
    et = escape_times(model, y[None], T_max=T_max)[0]
    return EscapeClass(tag, None if np.isnan(et) else float(et), False)


def neck_point(model, theta=0.0, sign=1.0):
    return PhasePoint(0.0, float(theta), 0.0, float(sign) * float(model.f(0.0)))


def neck_period(model, rho_on_K: PhasePoint):
    f0 = float(model.f(0.0))
    return TWO_PI * f0 * f0 / abs(rho_on_K.p_theta)


def _require_on_neck(rho):
    if abs(rho.r) > 1e-10 or abs(rho.p_r) > 1e-10:
        raise ValueError("point is not on the neck orbit")


@dataclass
class NeckSplitting:
    period: float
    eigenvalues: np.ndarray
    lyapunov: float
    unstable: np.ndarray
    stable: np.ndarray
    angle_deg: float


def period_map(model, rho_on_K: PhasePoint, tol=1e-13):
    _require_on_neck(rho_on_K)
    return tangent_flow(model, rho_on_K, neck_period(model, rho_on_K), tol=tol)


def unstable_direction(model, rho_on_K: PhasePoint, T_converge: float = 40.0, tol=1e-10):
    """Unit vector spanning the expanding direction of the period map.

    The vector lives in the (r, p_r) plane, embedded in 4 components.
    """
    frame = period_map(model, rho_on_K, tol)
    B = frame.transverse_block()
    ev = np.linalg.eigvals(B)
    mags = np.sort(np.abs(ev))
    if mags[0] == 0 or mags[1] / mags[0] < 10.0:
        raise NonHyperbolicError(
            "trapped set not hyperbolic: period-map eigenvalue ratio %.3g" %
            (mags[1] / max(mags[0], 1e-300)))
    v = np.array([1.0, 0.37])
    iters = max(3, int(np.ceil(T_converge / neck_period(model, rho_on_K))))
    for _ in range(iters):
        w = B @ v
        w /= np.linalg.norm(w)
        if np.dot(w, v) < 0:
            w = -w
        done = np.linalg.norm(w - v) < 1e-15
        v = w
        if done:
            break
    if v[0] < 0:
        v = -v
    return np.array([v[0], 0.0, v[1], 0.0])


def stable_direction(model, rho_on_K: PhasePoint, T_converge: float = 40.0):
    """Stable direction from the unstable one at the time-reversed point."""
    u = unstable_direction(model, rho_on_K.reversed(), T_converge)
    return REVERSAL @ u


def neck_splitting(model, theta=0.0, sign=1.0) -> NeckSplitting:
    rho = neck_point(model, theta, sign)
    T = neck_period(model, rho)
    B = period_map(model, rho).transverse_block()
    ev = np.sort(np.abs(np.linalg.eigvals(B)))[::-1]
    u = unstable_direction(model, rho)
    s = stable_direction(model, rho)
    cosang = abs(u[0] * s[0] + u[2] * s[2])
    return NeckSplitting(T, ev, float(np.log(ev[0]) / T), u, s,
                         float(np.degrees(np.arccos(min(1.0, cosang)))))


def sasaki_norm(model, y, v):
    """Norm of tangent vectors ``v`` at states ``y`` (trailing axis 4)."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    f, fp, _ = model.profile(y[..., 0])
    pr, pth = y[..., 2], y[..., 3]
    dr, dth, dpr, dpth = v[..., 0], v[..., 1], v[..., 2], v[..., 3]
    cov_r = dpr - fp / f * pth * dth
    cov_t = dpth + f * fp * pr * dth - fp / f * pth * dr
    return np.sqrt(dr**2 + (f * dth) ** 2 + cov_r**2 + (cov_t / f) ** 2)


def sasaki_separation(model, y1, y2):
    """Sasaki length of the coordinate difference, evaluated at the midpoint."""
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    return sasaki_norm(model, 0.5 * (y1 + y2), y2 - y1)


def geodesic_distance(model, a, b, max_iter=60, path_step=0.02):
    """Distances on the universal cover between base points (r, theta_lift).

    Solves the two-point problem by Newton shooting with the tangent flow;
    the universal cover has no conjugate points, so the solution is unique.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    n = a.shape[0]
    fa = model.f(a[:, 0])
    fm = model.f(0.5 * (a[:, 0] + b[:, 0]))
    v = np.stack([b[:, 0] - a[:, 0], fm * (b[:, 1] - a[:, 1])], axis=-1)
    res_norm = np.full(n, np.inf)
    for _ in range(max_iter):
        speed = np.hypot(v[:, 0], v[:, 1])
        nst = max(8, int(np.ceil(np.max(speed) / path_step)))
        y = np.stack([a[:, 0], a[:, 1], v[:, 0], fa * v[:, 1]], axis=-1)
        V = np.zeros((n, 4, 2))
        V[:, 2, 0] = 1.0
        V[:, 3, 1] = fa
        integrate(model, y, 1.0 / nst, nst, V)
        res = y[:, :2] - b
        res[:, 1] *= fm
        res_norm = np.hypot(res[:, 0], res[:, 1])
        if np.all(res_norm < 1e-13 * (1.0 + speed)):
            break
        Jm = V[:, :2, :]
        dv = np.linalg.solve(Jm, (y[:, :2] - b)[..., None])[..., 0]
        # damped Newton: never move further than half the current speed
        cap = 0.5 * np.maximum(speed, 0.2)
        size = np.hypot(dv[:, 0], dv[:, 1])
        dv *= np.minimum(1.0, cap / np.maximum(size, 1e-300))[:, None]
        v = v - dv
    if not np.all(res_norm < 1e-9 * (1.0 + np.hypot(v[:, 0], v[:, 1]))):
        raise IntegrationError("geodesic shooting did not converge")
    return np.hypot(v[:, 0], v[:, 1])


def _sample_trajectory(model, y, T, steps, dt_max=0.02):
    per = max(1, int(np.ceil(abs(T) / steps / dt_max)))
    dt = T / (steps * per)
    y = np.array(y, dtype=float, copy=True)
    out = [y.copy()]

    def grab(k, yy, VV):
        if (k + 1) % per == 0:
            out.append(yy.copy())

    integrate(model, y, dt, steps * per, callback=grab)
    return np.array(out)


@dataclass
class ConvexityOfDistance:
    applicable: bool
    passed: bool
    min_second_difference: float
    tolerance: float
    max_distance: float
    distances: np.ndarray


def geodesic_pair_convexity(model, rho1: PhasePoint, rho2: PhasePoint, T: float,
                            steps: int = 200) -> ConvexityOfDistance:
    """Test convexity of t -> d^2(flow_t rho1, flow_t rho2) on the universal cover."""
    Y = _sample_trajectory(model, np.stack([rho1.array(), rho2.array()]), T, steps)
    d = geodesic_distance(model, Y[:, 0, [0, 1]], Y[:, 1, [0, 1]])
    if np.max(d) >= model.injectivity_radius:
        return ConvexityOfDistance(False, True, np.nan, np.nan, float(np.max(d)), d)
    d2 = d * d
    second = d2[2:] - 2.0 * d2[1:-1] + d2[:-2]
    tol = 1e-6 * float(np.max(d2))
    m = float(np.min(second)) if second.size else 0.0
    return ConvexityOfDistance(True, m >= -tol, m, tol, float(np.max(d)), d)


def _project_to_shell_tangent(model, y, v):
    """Remove the energy-changing part of v by adjusting the p_r component."""
    f, fp, _ = model.profile(y[..., 0])
    pr, pth = y[..., 2], y[..., 3]
    dH = pr * v[..., 2] + pth / f**2 * v[..., 3] - pth**2 * fp / f**3 * v[..., 0]
    # gradient of H, used as the normal of the shell
    grad = np.stack([-pth**2 * fp / f**3, np.zeros_like(pr), pr, pth / f**2], axis=-1)
    return v - (dH / np.sum(grad * grad, axis=-1))[..., None] * grad


@dataclass
class ExpansionConstants:
    mu: float
    lam: float
    flat_exponent: float
    n_pairs: int


def expansion_constants(model, samples: int = 1000, T: float = 10.0, seed: int = 0,
                        separation: float = 1e-5) -> ExpansionConstants:
    """Fit the worst pair-separation growth rate in X0 and the stable contraction rate.

    Growth is measured on genuine pairs at initial Sasaki separation
    ``separation`` while both members remain inside the interaction region.
    """
    rng = np.random.default_rng(seed)
    R = model.interaction_radius
    r = rng.uniform(-R, R, samples)
    y = unit_covector(model, r, rng.uniform(0, TWO_PI, samples), rng.uniform(0, TWO_PI, samples))
    v = _project_to_shell_tangent(model, y, rng.normal(size=(samples, 4)))
    v *= (separation / sasaki_norm(model, y, v))[:, None]
    y2 = y + v
    # restore the exact shell for the partner by rescaling its momentum
    y2[:, 2:] /= np.sqrt(2.0 * energy(model, y2))[:, None]
    steps = int(round(T / 0.5))
    Y = _sample_trajectory(model, np.concatenate([y, y2]), T, steps)
    A, B = Y[:, :samples], Y[:, samples:]
    d = sasaki_separation(model, A, B)
    t = np.linspace(0.0, T, steps + 1)
    inside = np.logical_and.accumulate(
        (np.abs(A[..., 0]) <= R) & (np.abs(B[..., 0]) <= R), axis=0)
    rate = np.where(inside & (t[:, None] >= 1.0), np.log(d / d[0]) / t[:, None].clip(1e-12), -np.inf)
    mu = float(np.max(rate))

    lam = stable_contraction_rate(model, T)

    # flat-end pairs: parallel-ish rays with small angular offsets
    yf = unit_covector(model, np.full(8, 3.0 * R), np.zeros(8), rng.uniform(-0.5, 0.5, 8))
    vf = _project_to_shell_tangent(model, yf, rng.normal(size=(8, 4)))
    Tf = 100.0
    _, Vt = flow_states(model, yf, Tf, dt_max=0.1, V=vf[..., None])
    yt = flow_states(model, yf, Tf, dt_max=0.1)
    growth = sasaki_norm(model, yt, Vt[..., 0]) / sasaki_norm(model, yf, vf)
    flat = float(np.max(np.log(growth)) / Tf)
    return ExpansionConstants(mu, lam, flat, samples)


def stable_contraction_rate(model, T: float = 10.0, offset: float = 1e-4):
    """Decay rate of the distance to the neck orbit along its stable manifold."""
    f0 = float(model.f(0.0))
    r0 = offset
    f = float(model.f(r0))
    # separatrix of the level p_theta = f(0): p_r^2 = 1 - f(0)^2/f^2, moving inward
    pr0 = -np.sqrt(max(0.0, 1.0 - (f0 / f) ** 2))
    y = np.array([[r0, 0.0, pr0, f0]])
    steps = 40
    Y = _sample_trajectory(model, y, T, steps, dt_max=0.01)[:, 0]
    dist = np.hypot(Y[:, 0], Y[:, 2])
    t = np.linspace(0.0, T, steps + 1)
    slope = np.polyfit(t, np.log(dist), 1)[0]
    return float(-slope)


@dataclass
class TrappedSweep:
    n_samples: int
    n_trapped: int
    max_distance_to_neck: float
    escape_times: np.ndarray


def trapped_sweep(model, samples: int = 10000, T_max: float = 200.0, seed: int = 0,
                  extra_states=None) -> TrappedSweep:
    """Sample S*X0, flow forward, and locate the never-escaping points."""
    rng = np.random.default_rng(seed)
    R = model.interaction_radius
    y = unit_covector(model, rng.uniform(-R, R, samples), rng.uniform(0, TWO_PI, samples),
                      rng.uniform(0, TWO_PI, samples))
    if extra_states is not None:
        y = np.concatenate([y, np.atleast_2d(extra_states)])
    et, final = escape_times(model, y, T_max=T_max, return_states=True)
    stuck = np.isnan(et)
    f0 = float(model.f(0.0))
    if np.any(stuck):
        ys = final[stuck]
        dist = np.sqrt(ys[:, 0] ** 2 + ys[:, 2] ** 2 + (np.abs(ys[:, 3]) - f0) ** 2)
        dmax = float(np.max(dist))
    else:
        dmax = 0.0
    return TrappedSweep(len(y), int(stuck.sum()), dmax, et)
