"""Amplitude transport and assembly of the distorted plane wave on a grid.

Each winding-class sheet carries its phase, phase gradient, mixed second
derivative and amplitude at the nodes of a chart grid.  The phase is
carried to the field grid by bicubic Hermite interpolation (exact nodal
values and gradients), the amplitude by a bicubic spline of its logarithm.
The field is the class sum

    E_h(x) = sum_m a_m(x) exp(i phi_m(x) / h).

Laplace-Beltrami on the chart uses ds^2 = dr^2 + f(r)^2 dtheta^2:

    Lap u = u_rr + (f'/f) u_r + u_thth / f^2.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .geometry import TWO_PI


class ResolutionError(ValueError):
    pass


class DegenerateJacobianError(RuntimeError):
    pass


@dataclass
class WaveField:
    """Complex samples of E_h on a rectangular (r, theta) grid."""

    h: float
    r: np.ndarray
    theta: np.ndarray
    values: np.ndarray
    classes: list
    c0_shift: float = 0.0
    truncation: dict = field(default_factory=dict)
    class_norms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values not finite")

    @property
    def dr(self):
        return float(self.r[1] - self.r[0])

    @property
    def dtheta(self):
        return float(self.theta[1] - self.theta[0])

    def mesh(self):
        return np.meshgrid(self.r, self.theta, indexing="ij")


def metric_spacing(model, r, theta):
    """Largest grid step in arclength: max(dr, f_max dtheta)."""
    dr = float(np.max(np.diff(r)))
    dth = float(np.max(np.diff(theta)))
    return max(dr, float(np.max(model.f(np.asarray(r)))) * dth)


def check_resolution(model, r, theta, h, cells_per_h=10):
    step = metric_spacing(model, r, theta)
    if step > h / cells_per_h * (1 + 1e-9):
        raise ResolutionError("grid step %.3g exceeds h/%d = %.3g; oscillation unresolved"
                              % (step, cells_per_h, h / cells_per_h))


def uniform_grid(model, bounds, h, cells_per_h=10):
    """Grid over bounds = (r_lo, r_hi, th_lo, th_hi) meeting the resolution rule."""
    r_lo, r_hi, t_lo, t_hi = bounds
    step = h / cells_per_h
    f_max = float(np.max(model.f(np.array([r_lo, r_hi, 0.5 * (r_lo + r_hi)]))))
    nr = int(np.ceil((r_hi - r_lo) / step)) + 1
    nt = int(np.ceil(f_max * (t_hi - t_lo) / step)) + 1
    return np.linspace(r_lo, r_hi, nr), np.linspace(t_lo, t_hi, nt)


def _hermite_weights(nodes, x):
    """Cubic Hermite basis matrices for values (W0) and slopes (W1) and their derivatives."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.min() < nodes[0] - 1e-12 or x.max() > nodes[-1] + 1e-12:
        raise ValueError("evaluation points outside the node range")
    k = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, len(nodes) - 2)
    d = nodes[k + 1] - nodes[k]
    t = (x - nodes[k]) / d
    t2, t3 = t * t, t * t * t
    basis = {
        0: ((2 * t3 - 3 * t2 + 1), (t3 - 2 * t2 + t) * d, (-2 * t3 + 3 * t2), (t3 - t2) * d),
        1: ((6 * t2 - 6 * t) / d, (3 * t2 - 4 * t + 1), (-6 * t2 + 6 * t) / d, (3 * t2 - 2 * t)),
        2: ((12 * t - 6) / d**2, (6 * t - 4) / d, (-12 * t + 6) / d**2, (6 * t - 2) / d),
    }
    rows = np.arange(len(x))
    out = {}
    for der, (h00, h10, h01, h11) in basis.items():
        W0 = np.zeros((len(x), len(nodes)))
        W1 = np.zeros((len(x), len(nodes)))
        np.add.at(W0, (rows, k), h00)
        np.add.at(W0, (rows, k + 1), h01)
        np.add.at(W1, (rows, k), h10)
        np.add.at(W1, (rows, k + 1), h11)
        out[der] = (W0, W1)
    return out


class SheetInterpolant:
    """Phase and amplitude of one class sheet at arbitrary grid points."""

    def __init__(self, sheet):
        self.sheet = sheet
        self.m = sheet.m
        self.theta_nodes = sheet.theta
        self._log_a = RectBivariateSpline(sheet.r, sheet.theta, np.log(sheet.a), kx=3, ky=3)

    def phase(self, r, theta, dr=0, dt=0):
        """Bicubic Hermite phase (or a derivative up to order 2 per variable) on the r x theta grid."""
        s = self.sheet
        Wr = _hermite_weights(s.r, r)[dr]
        Wt = _hermite_weights(s.theta, theta)[dt]
        return (Wr[0] @ s.phi @ Wt[0].T + Wr[1] @ s.p_r @ Wt[0].T
                + Wr[0] @ s.p_theta @ Wt[1].T + Wr[1] @ s.phi_rt @ Wt[1].T)

    def amplitude(self, r, theta, dr=0, dt=0):
        if dr == 0 and dt == 0:
            return np.exp(self._log_a(r, theta))
        a = np.exp(self._log_a(r, theta))
        lr = self._log_a(r, theta, dx=1)
        lt = self._log_a(r, theta, dy=1)
        if (dr, dt) == (1, 0):
            return a * lr
        if (dr, dt) == (0, 1):
            return a * lt
        if (dr, dt) == (2, 0):
            return a * (self._log_a(r, theta, dx=2) + lr * lr)
        if (dr, dt) == (0, 2):
            return a * (self._log_a(r, theta, dy=2) + lt * lt)
        raise ValueError("unsupported derivative order")


def transport_amplitude(branch):
    """Set a = J^{-1/2} on a propagated branch (incoming amplitude 1, forward Jacobian J)."""
    J = np.abs(np.asarray(branch.J, dtype=float))
    if np.any(J < 1e-12):
        raise DegenerateJacobianError("base Jacobian %.2e below 1e-12" % J.min())
    branch.a = J ** -0.5
    return branch


def transport_residual(model, sheet, step=1e-3, window=None):
    """max |2 <dphi, da>_g + (Lap_g phi) a| / max a on a fine grid of the sheet chart.

    Derivatives are centred second-order differences of the interpolated
    phase and amplitude.
    """
    itp = SheetInterpolant(sheet)
    r_lo, r_hi, t_lo, t_hi = window or (sheet.r[0], sheet.r[-1], sheet.theta[0], sheet.theta[-1])
    r = np.arange(r_lo, r_hi + 0.5 * step, step)
    r = r[r <= sheet.r[-1]]
    th = np.arange(t_lo, t_hi + 0.5 * step, step)
    th = th[th <= sheet.theta[-1]]
    phi = itp.phase(r, th)
    a = itp.amplitude(r, th)
    f, fp, _ = model.profile(r)
    f = f[1:-1, None]
    fp = fp[1:-1, None]
    c = (slice(1, -1), slice(1, -1))
    phi_r = (phi[2:, 1:-1] - phi[:-2, 1:-1]) / (2 * step)
    phi_t = (phi[1:-1, 2:] - phi[1:-1, :-2]) / (2 * step)
    phi_rr = (phi[2:, 1:-1] - 2 * phi[c] + phi[:-2, 1:-1]) / step**2
    phi_tt = (phi[1:-1, 2:] - 2 * phi[c] + phi[1:-1, :-2]) / step**2
    a_r = (a[2:, 1:-1] - a[:-2, 1:-1]) / (2 * step)
    a_t = (a[1:-1, 2:] - a[1:-1, :-2]) / (2 * step)
    lap = phi_rr + fp / f * phi_r + phi_tt / f**2
    res = 2 * (phi_r * a_r + phi_t * a_t / f**2) + lap * a[c]
    return float(np.max(np.abs(res)) / np.max(np.abs(a)))


def eikonal_defect(model, sheet, r, theta):
    """max ||grad phi|_g - 1| of the interpolated phase on a grid."""
    itp = SheetInterpolant(sheet)
    pr = itp.phase(r, theta, dr=1)
    pt = itp.phase(r, theta, dt=1)
    f = model.f(np.asarray(r))[:, None]
    return float(np.max(np.abs(np.sqrt(pr**2 + (pt / f) ** 2) - 1.0)))


@dataclass
class Truncation:
    n_max: int
    classes: list
    discarded_bound: float
    rate: float


def truncation_for(h, class_n_tilde, class_sup, rate, n_extra=200):
    """Smallest word-length cut whose discarded class mass is below h^2.

    Measured class masses are summed exactly; classes beyond the measured
    ones are bounded by a geometric tail continuing the last measured mass
    at the fitted per-step rate.
    """
    if np.isnan(rate):
        raise ValueError("class mass decay rate needs at least two word lengths with classes;"
                         " increase propagation.N")
    if not rate < 0:
        raise ValueError("class mass does not decay (rate %.3g)" % rate)
    n_vals = np.array(sorted(set(class_n_tilde.values())), dtype=float)
    by_n = np.array([sum(class_sup[m] for m, n in class_n_tilde.items() if n == k) for k in n_vals])
    tail = by_n[-1] * np.exp(rate) / (1.0 - np.exp(rate))
    for j, cut in enumerate(n_vals):
        bound = float(np.sum(by_n[j + 1:]) + tail)
        if bound <= h * h:
            keep = sorted(m for m, n in class_n_tilde.items() if n <= cut)
            return Truncation(int(cut), keep, bound, float(rate))
    raise ValueError("measured classes do not reach the h^2 tail bound for h=%g" % h)


def assemble(model, sheets, h, r, theta, classes=None, truncation=None, cells_per_h=10,
             c0_shift=0.0):
    """Sum of a_m exp(i phi_m / h) over the given class sheets on the grid r x theta."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    check_resolution(model, r, theta, h, cells_per_h)
    by_m = {s.m: s for s in sheets}
    if classes is None:
        classes = truncation.classes if truncation is not None else sorted(by_m)
    missing = [m for m in classes if m not in by_m]
    if missing:
        raise ValueError("no sheet for classes %s" % missing)
    values = np.zeros((len(r), len(theta)), dtype=complex)
    norms = {}
    # fixed summation order keeps the result bitwise reproducible
    for m in sorted(classes):
        itp = SheetInterpolant(by_m[m])
        a = itp.amplitude(r, theta)
        phi = itp.phase(r, theta)
        values += a * np.exp(1j * phi / h)
        norms[m] = float(np.max(a))
    info = {}
    if truncation is not None:
        info = {"n_max": truncation.n_max, "discarded_bound": truncation.discarded_bound,
                "rate": truncation.rate}
    return WaveField(float(h), r, theta, values, sorted(classes), c0_shift, info, norms)


def laplacian(model, r, theta, u, order=4):
    """Laplace-Beltrami of grid samples u on the interior (margin order//2 cells)."""
    dr = r[1] - r[0]
    dt = theta[1] - theta[0]
    if order == 2:
        g = 1
        u_rr = (u[2:, 1:-1] - 2 * u[1:-1, 1:-1] + u[:-2, 1:-1]) / dr**2
        u_tt = (u[1:-1, 2:] - 2 * u[1:-1, 1:-1] + u[1:-1, :-2]) / dt**2
        u_r = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * dr)
    elif order == 4:
        g = 2
        c = u[2:-2, 2:-2]
        u_rr = (-u[4:, 2:-2] + 16 * u[3:-1, 2:-2] - 30 * c + 16 * u[1:-3, 2:-2] - u[:-4, 2:-2]) / (12 * dr**2)
        u_tt = (-u[2:-2, 4:] + 16 * u[2:-2, 3:-1] - 30 * c + 16 * u[2:-2, 1:-3] - u[2:-2, :-4]) / (12 * dt**2)
        u_r = (-u[4:, 2:-2] + 8 * u[3:-1, 2:-2] - 8 * u[1:-3, 2:-2] + u[:-4, 2:-2]) / (12 * dr)
    else:
        raise ValueError("order must be 2 or 4")
    f, fp, _ = model.profile(r[g:-g])
    return u_rr + (fp / f)[:, None] * u_r + u_tt / (f**2)[:, None]


def helmholtz_residual(model, fld: WaveField, margin=5, order=4):
    """||(-h^2 Lap - c0 h^2 - 1) E||_inf / ||E||_inf over the interior."""
    if min(len(fld.r), len(fld.theta)) <= 2 * margin:
        raise ValueError("grid too small for the interior margin")
    g = order // 2
    lap = laplacian(model, fld.r, fld.theta, fld.values, order)
    u = fld.values[g:-g, g:-g]
    res = -fld.h**2 * lap - fld.c0_shift * fld.h**2 * u - u
    k = margin - g
    sl = (slice(k, res.shape[0] - k), slice(k, res.shape[1] - k))
    return float(np.max(np.abs(res[sl])) / np.max(np.abs(fld.values)))


@dataclass
class ResidualReport:
    h: np.ndarray
    residual: np.ndarray
    slope: float
    refinement_change: float = np.nan


def residual_scaling(model, fields, refined=None, margin=5, order=4):
    """Log-log slope of the Helmholtz residual across fields at different h.

    ``refined`` optionally holds the field with the smallest h assembled on a
    finer grid, giving the relative change under refinement.
    """
    hs = np.array([f.h for f in fields])
    res = np.array([helmholtz_residual(model, f, margin, order) for f in fields])
    slope = float(np.polyfit(np.log(hs), np.log(res), 1)[0])
    change = np.nan
    if refined is not None:
        base = res[np.argmin(np.abs(hs - refined.h))]
        change = abs(helmholtz_residual(model, refined, margin, order) / base - 1.0)
    return ResidualReport(hs, res, slope, float(change))


def flat_plane_wave(r, theta, h, direction, offset=0.0):
    """exp(i <x, xi> / h) on a Cartesian (u, v) grid, used as an exact flat solution."""
    U, Vv = np.meshgrid(r, theta, indexing="ij")
    phase = U * np.cos(direction) + Vv * np.sin(direction) + offset
    return np.exp(1j * phase / h)


class _FlatModel:
    """Unit warping (f = 1): the Laplacian is the Euclidean one in (r, theta)."""

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        return np.ones_like(r), np.zeros_like(r), np.zeros_like(r)

    def f(self, r):
        return np.ones_like(np.asarray(r, dtype=float))


FLAT = _FlatModel()


def class_density(sheets, r, theta, classes=None):
    """sum_m a_m^2 on the grid, the position density of the class sum."""
    out = np.zeros((len(r), len(theta)))
    for s in sheets:
        if classes is None or s.m in classes:
            out += SheetInterpolant(s).amplitude(r, theta) ** 2
    return out


__all__ = ["WaveField", "ResolutionError", "DegenerateJacobianError", "SheetInterpolant",
           "transport_amplitude", "transport_residual", "eikonal_defect", "Truncation",
           "truncation_for", "assemble", "laplacian", "helmholtz_residual", "residual_scaling",
           "ResidualReport", "flat_plane_wave", "check_resolution", "uniform_grid",
           "metric_spacing", "FLAT", "class_density"]
