"""Winding-class sheets of the propagated plane wave over a base chart.

Rays of the incoming family are traced from the boundary of the curved
region.  Every crossing of a row r = r_k of the chart grid is located
exactly (cubic root guess, then Newton on an exact integrator substep)
and recorded with its lifted angle, phase, momentum, base Jacobian and
phase Hessian.  On each row, the crossings falling in the window
theta_in + 2 pi m + [-w, w] are the restriction of the class-m sheet to the
row; they are sorted by angle and interpolated with cubic Hermite splines
whose slopes are the exact phase derivatives.  Rows with gaps larger than
the resolution budget trigger new rays between the offending neighbours.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .geometry import TWO_PI
from .rays import (entry_sigma, impact_parameters, lagrangian_jacobian, phase_hessian,
                   ray_states)
from .symplectic import integrate


class SheetResolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Chart:
    """Base rectangle around the neck: r in [r_lo, r_hi], |theta - theta_in| <= half_width.

    The cutoff chi equals 1 on |r| <= plateau_r, |theta - theta_in| <= plateau_theta
    and vanishes outside ``support`` times the chart.
    """

    r_lo: float = -0.9
    r_hi: float = 0.9
    half_width: float = 0.7
    plateau_r: float = 0.3
    plateau_theta: float = 0.15
    support: float = 0.85

    def theta_bounds(self, spec):
        return spec.theta_in - self.half_width, spec.theta_in + self.half_width

    def as_tuple(self):
        return (self.r_lo, self.r_hi, self.half_width)

    def chi(self, spec, r, theta):
        """Smooth cutoff, products of C-infinity steps in r and theta."""
        rc = 0.5 * (self.r_lo + self.r_hi)
        hr = 0.5 * (self.r_hi - self.r_lo) * self.support
        ht = self.half_width * self.support
        return (_plateau(np.abs(np.asarray(r) - rc), self.plateau_r, hr)
                * _plateau(np.abs(np.asarray(theta) - spec.theta_in), self.plateau_theta, ht))


def _smooth_step(x):
    x = np.clip(x, 0.0, 1.0)
    a = np.where(x > 0, np.exp(-1.0 / np.maximum(x, 1e-300)), 0.0)
    b = np.where(x < 1, np.exp(-1.0 / np.maximum(1.0 - x, 1e-300)), 0.0)
    return a / (a + b)


def _plateau(d, inner, outer):
    return 1.0 - _smooth_step((d - inner) / (outer - inner))


@dataclass
class ClassSheet:
    """Phase, gradient and amplitude of one winding class on the chart node grid."""

    m: int
    n_tilde: int
    r: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    p_r: np.ndarray
    p_theta: np.ndarray
    phi_rt: np.ndarray
    a: np.ndarray

    @property
    def J(self):
        return self.a ** -2.0

    def xi_norm(self, model):
        f = model.f(self.r)[:, None]
        return np.sqrt(self.p_r**2 + (self.p_theta / f) ** 2)


@dataclass
class _Records:
    s: list = field(default_factory=list)
    row: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    p_r: list = field(default_factory=list)
    p_theta: list = field(default_factory=list)
    D: list = field(default_factory=list)
    H: list = field(default_factory=list)

    def extend(self, **kw):
        for k, v in kw.items():
            getattr(self, k).append(v)

    def arrays(self):
        return {k: np.concatenate(getattr(self, k)) for k in
                ("s", "row", "theta", "phi", "p_r", "p_theta", "D", "H")}


def _hermite_root(r0, r1, v0, v1, target, dt):
    """Root in [0, dt] of the cubic Hermite interpolant of r(t)."""
    span = r1 - r0
    t = np.clip(np.where(span != 0, (target - r0) / np.where(span != 0, span, 1.0), 0.5), 0.0, 1.0)
    for _ in range(8):
        t2, t3 = t * t, t * t * t
        val = ((2 * t3 - 3 * t2 + 1) * r0 + (t3 - 2 * t2 + t) * dt * v0
               + (-2 * t3 + 3 * t2) * r1 + (t3 - t2) * dt * v1 - target)
        der = ((6 * t2 - 6 * t) * r0 + (3 * t2 - 4 * t + 1) * dt * v0
               + (-6 * t2 + 6 * t) * r1 + (3 * t2 - 2 * t) * dt * v1)
        t = np.clip(t - val / np.where(np.abs(der) > 1e-14, der, 1e-14), 0.0, 1.0)
    return t * dt


def trace_crossings(model, spec, s, rows, theta_stop, t_max, dt=0.025, out=None):
    """Trace rays with impact parameters ``s`` and record every row crossing."""
    s = np.asarray(s, dtype=float)
    rec = _Records() if out is None else out
    if len(s) == 0:
        return rec
    R2 = float(model.f(model.r2))
    y, V, phi0 = ray_states(model, spec, s, entry_sigma(R2, s))
    V = V[..., None]
    idx = np.arange(len(s))
    r_lo, step = rows[0], rows[1] - rows[0]
    n_rows = len(rows)
    margin = 2 * step
    t = 0.0
    while len(idx) and t < t_max:
        y_old, V_old = y.copy(), V.copy()
        integrate(model, y, dt, 1, V)
        k_old = (y_old[:, 0] - r_lo) / step
        k_new = (y[:, 0] - r_lo) / step
        lo = np.floor(np.minimum(k_old, k_new)).astype(np.int64)
        hi = np.floor(np.maximum(k_old, k_new)).astype(np.int64)
        lo = np.maximum(lo, -1)
        hi = np.minimum(hi, n_rows - 1)
        cnt = np.maximum(hi - lo, 0)
        if cnt.any():
            who = np.repeat(np.arange(len(idx)), cnt)
            first = np.repeat(lo + 1, cnt)
            within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            krow = first + within
            target = rows[krow]
            tau = _hermite_root(y_old[who, 0], y[who, 0], y_old[who, 2], y[who, 2], target, dt)
            for _ in range(3):
                ye, Ve = y_old[who].copy(), V_old[who].copy()
                integrate(model, ye, tau, 1, Ve)
                err = ye[:, 0] - target
                pr = ye[:, 2]
                ok = np.abs(pr) > 1e-6
                tau = np.where(ok, tau - err / np.where(ok, pr, 1.0), tau)
            ye, Ve = y_old[who].copy(), V_old[who].copy()
            integrate(model, ye, tau, 1, Ve)
            Ve = Ve[..., 0]
            rec.extend(s=s[idx[who]], row=krow, theta=ye[:, 1], phi=phi0[idx[who]] + t + tau,
                       p_r=ye[:, 2], p_theta=ye[:, 3], D=lagrangian_jacobian(model, ye, Ve),
                       H=phase_hessian(model, ye, Ve))
        t += dt
        away = ((y[:, 0] > rows[-1] + margin) & (y[:, 2] > 0)) | \
               ((y[:, 0] < rows[0] - margin) & (y[:, 2] < 0))
        past = np.sign(s[idx]) * (y[:, 1] - spec.theta_in) > theta_stop
        live = ~(away | past)
        if not live.all():
            y, V, idx = y[live], V[live], idx[live]
    return rec


class SheetResolver:
    """Adaptive ray tracing of the winding-class sheets over a chart."""

    def __init__(self, model, spec, chart=Chart(), node_step=0.02, gap=0.02, dt=0.025,
                 q_step=0.05, max_rounds=14):
        self.model, self.spec, self.chart = model, spec, chart
        n_rows = int(round((chart.r_hi - chart.r_lo) / node_step)) + 1
        self.rows = np.linspace(chart.r_lo, chart.r_hi, n_rows)
        # a row on the trapped orbit would need rays within e^{-2t} of its stable
        # manifold, beyond double precision for deep windings
        if np.min(np.abs(self.rows)) < 0.25 * node_step:
            self.rows = np.linspace(chart.r_lo, chart.r_hi, n_rows + 1)
        th_a, th_b = chart.theta_bounds(spec)
        n_cols = int(round((th_b - th_a) / node_step)) + 1
        self.cols = np.linspace(th_a, th_b, n_cols)
        self.gap, self.dt, self.q_step, self.max_rounds = gap, dt, q_step, max_rounds
        self.f_rows = model.f(self.rows)
        self.s_max = float(np.max(self.f_rows)) * (1.0 + 1e-9)

    def _windows(self, m):
        th_a, th_b = self.chart.theta_bounds(self.spec)
        return th_a + TWO_PI * m, th_b + TWO_PI * m

    def resolve(self, classes, n_tilde=None):
        classes = sorted(set(int(m) for m in classes))
        M = max(abs(m) for m in classes)
        theta_stop = TWO_PI * M + self.chart.half_width + 1.0
        t_max = TWO_PI * (M + 2) + 20.0
        q_max = min(30.0, TWO_PI * (M + 1) + 6.0)
        s = np.unique(impact_parameters(np.arange(0.5 * self.q_step, q_max, self.q_step), self.s_max))
        s = s[np.abs(s) < self.s_max]
        rec = _Records()
        traced = s
        self.rounds = 0
        while True:
            trace_crossings(self.model, self.spec, s, self.rows, theta_stop, t_max, self.dt, rec)
            data = rec.arrays()
            order = np.lexsort((data["theta"], data["row"]))
            data = {k: v[order] for k, v in data.items()}
            new_s, missing = self._refinements(data, classes)
            self.rounds += 1
            new_s = np.setdiff1d(np.unique(new_s), traced)
            if len(new_s) == 0:
                break
            if self.rounds >= self.max_rounds:
                raise SheetResolutionError(
                    "sheet gaps persist after %d refinement rounds (%d rays pending)"
                    % (self.rounds, len(new_s)))
            traced = np.union1d(traced, new_s)
            s = new_s
        if missing:
            raise SheetResolutionError("class windows not bracketed by rays: %s" % missing[:5])
        self.n_rays = len(traced)
        self.n_records = len(data["s"])
        n_tilde = n_tilde or {}
        return [self._build(data, m, n_tilde.get(m, -1)) for m in classes]

    def _row_slices(self, data):
        bounds = np.searchsorted(data["row"], np.arange(len(self.rows) + 1))
        return [slice(bounds[k], bounds[k + 1]) for k in range(len(self.rows))]

    def _refinements(self, data, classes):
        new, missing = [], []
        for k, sl in enumerate(self._row_slices(data)):
            T = data["theta"][sl]
            for m in classes:
                lo, hi = self._windows(m)
                i0 = np.searchsorted(T, lo, side="right") - 1
                i1 = np.searchsorted(T, hi, side="left")
                if i0 < 0 or i1 >= len(T):
                    missing.append((k, m))
                    continue
                seg = slice(sl.start + i0, sl.start + i1 + 1)
                th = data["theta"][seg]
                big = np.flatnonzero(np.diff(th) * self.f_rows[k] > self.gap)
                if len(big) == 0:
                    continue
                sa, sb = data["s"][seg][big], data["s"][seg][big + 1]
                pa, pb = np.sign(data["p_r"][seg][big]), np.sign(data["p_r"][seg][big + 1])
                mid = 0.5 * (sa + sb)
                # neighbours on opposite passes straddle the turning rays of this row
                far = np.where(np.abs(sa) > np.abs(sb), sa, sb)
                graze = np.sign(far) * self.f_rows[k] * (1.0 - 1e-12)
                new.append(np.where(pa == pb, mid, 0.5 * (far + graze)))
        return (np.concatenate(new) if new else np.zeros(0)), missing

    def _build(self, data, m, n_tilde):
        nr, nc = len(self.rows), len(self.cols)
        out = {k: np.empty((nr, nc)) for k in ("phi", "p_r", "p_theta", "phi_rt", "a")}
        lo, hi = self._windows(m)
        for k, sl in enumerate(self._row_slices(data)):
            T = data["theta"][sl]
            i0 = np.searchsorted(T, lo, side="right") - 1
            i1 = np.searchsorted(T, hi, side="left")
            seg = slice(sl.start + i0, sl.start + i1 + 1)
            th = data["theta"][seg]
            keep = np.concatenate([[True], np.diff(th) > 1e-12])
            th = th[keep]
            phi = data["phi"][seg][keep]
            pr = data["p_r"][seg][keep]
            pt = data["p_theta"][seg][keep]
            H = data["H"][seg][keep]
            a = np.abs(data["D"][seg][keep]) ** -0.5
            _check_row_consistency(th, phi, pt, H[:, 1, 1], self.f_rows[k], m, k)
            x = self.cols + TWO_PI * m
            out["phi"][k] = CubicHermiteSpline(th, phi, pt)(x)
            out["p_theta"][k] = CubicHermiteSpline(th, pt, H[:, 1, 1])(x)
            spl = CubicHermiteSpline(th, pr, H[:, 0, 1])
            out["p_r"][k] = spl(x)
            out["phi_rt"][k] = spl(x, 1)
            out["a"][k] = np.exp(CubicSpline(th, np.log(a))(x))
        return ClassSheet(m, n_tilde, self.rows.copy(), self.cols.copy(), **out)


def _check_row_consistency(th, phi, pt, ptt, f, m, k, tol=1e-7):
    """Phase increments must match the integral of p_theta (exact for cubics).

    Two sheets interleaved on one row would break this identity at O(1).
    """
    d = np.diff(th)
    pred = 0.5 * (pt[:-1] + pt[1:]) * d - (ptt[1:] - ptt[:-1]) * d * d / 12.0
    err = np.abs(np.diff(phi) - pred)
    if np.any(err > tol + 1e-3 * (f * d) ** 4):
        i = int(np.argmax(err))
        raise SheetResolutionError(
            "caustic violation: class %d row %d phase increment mismatch %.2e" % (m, k, err[i]))


def resolve_sheets(model, spec, classes, chart=Chart(), n_tilde=None, **kw):
    """ClassSheets for the given winding classes on the chart node grid."""
    res = SheetResolver(model, spec, chart, **kw)
    sheets = res.resolve(classes, n_tilde)
    return sheets, res
