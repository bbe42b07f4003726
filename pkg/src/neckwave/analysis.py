"""Verification suite on assembled fields: sup norms, ball masses, nodal
lengths, the nodal integral identity and oscillatory-integral decay.

Distances on the chart use the local metric ellipse

    d^2 = (r - r0)^2 + f(rbar)^2 (theta - theta0)^2,   rbar = (r + r0) / 2,

which is second-order accurate in the radius.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from skimage import measure

from .wkb import SheetInterpolant, WaveField, laplacian


class StationaryPhaseError(ValueError):
    pass


def _window_slices(fld, window):
    if window is None:
        return slice(None), slice(None)
    r_lo, r_hi, t_lo, t_hi = window
    i = np.flatnonzero((fld.r >= r_lo - 1e-12) & (fld.r <= r_hi + 1e-12))
    j = np.flatnonzero((fld.theta >= t_lo - 1e-12) & (fld.theta <= t_hi + 1e-12))
    if len(i) < 2 or len(j) < 2:
        raise ValueError("window does not meet the grid")
    return slice(i[0], i[-1] + 1), slice(j[0], j[-1] + 1)


# ---------------------------------------------------------------- sup norms

def cl_norm(model, fld: WaveField, ell, weight=None, window=None):
    """Sup over the grid of the order-ell metric derivatives of weight * E.

    Order 1 is |grad u|_g; order 2 is the largest of |u_rr|, |u_rt|/f, |u_tt|/f^2.
    Derivatives are second-order centred differences.
    """
    u = fld.values if weight is None else fld.values * weight
    si, sj = _window_slices(fld, window)
    if ell == 0:
        return float(np.max(np.abs(u[si, sj])))
    dr, dt = fld.dr, fld.dtheta
    u_r = np.gradient(u, dr, axis=0, edge_order=2)
    u_t = np.gradient(u, dt, axis=1, edge_order=2)
    f = model.f(fld.r)[:, None]
    if ell == 1:
        g = np.sqrt(np.abs(u_r) ** 2 + np.abs(u_t / f) ** 2)
        return float(np.max(g[si, sj][2:-2, 2:-2]))
    if ell == 2:
        u_rr = np.gradient(u_r, dr, axis=0, edge_order=2)
        u_rt = np.gradient(u_r, dt, axis=1, edge_order=2)
        u_tt = np.gradient(u_t, dt, axis=1, edge_order=2)
        g = np.maximum(np.maximum(np.abs(u_rr), np.abs(u_rt / f)), np.abs(u_tt / f**2))
        return float(np.max(g[si, sj][3:-3, 3:-3]))
    raise ValueError("ell must be 0, 1 or 2")


@dataclass
class SupnormTable:
    ell: int
    h: np.ndarray
    normalized: np.ndarray
    spread: float


def supnorm_scan(model, fields, ell, weights=None, window=None):
    """h^ell * ||weight E_h||_{C^ell} per field and the max/min spread."""
    hs = np.array([f.h for f in fields])
    vals = []
    for k, fld in enumerate(fields):
        w = None if weights is None else weights[k]
        vals.append(cl_norm(model, fld, ell, w, window) * fld.h**ell)
    vals = np.array(vals)
    return SupnormTable(int(ell), hs, vals, float(vals.max() / vals.min()))


# ---------------------------------------------------------------- ball masses

@dataclass
class BallMassReport:
    center: tuple
    radii: np.ndarray
    masses: np.ndarray
    ratios: np.ndarray
    skipped: list = field(default_factory=list)


def metric_distance(model, r, theta, center):
    r0, t0 = center
    R, T = np.meshgrid(r, theta, indexing="ij")
    fm = model.f(0.5 * (R + r0))
    return np.sqrt((R - r0) ** 2 + (fm * (T - t0)) ** 2)


def ball_mass(model, fld: WaveField, center, c_list, use_real_part=False, c_min=10.0):
    """Integral of |E|^2 (or |Re E|^2) over metric balls of radius c h.

    Boundary cells are weighted by their linearized covered fraction, so the
    quadrature error is second order in the grid step.
    """
    c_list = np.asarray(c_list, dtype=float)
    if np.any(c_list < c_min):
        raise ValueError("ball radius below %g h" % c_min)
    dr, dt = fld.dr, fld.dtheta
    cell = np.sqrt(dr * dr + (model.f(center[0]) * dt) ** 2) / np.sqrt(2.0)
    radii, masses, skipped = [], [], []
    for c in c_list:
        rad = c * fld.h
        # local box around the ball; f >= 1 bounds its angular extent
        reach = rad + 2 * cell
        i0 = max(np.searchsorted(fld.r, center[0] - reach) - 1, 0)
        i1 = min(np.searchsorted(fld.r, center[0] + reach) + 1, len(fld.r))
        j0 = max(np.searchsorted(fld.theta, center[1] - reach) - 1, 0)
        j1 = min(np.searchsorted(fld.theta, center[1] + reach) + 1, len(fld.theta))
        u = fld.values[i0:i1, j0:j1]
        dens = np.real(u) ** 2 if use_real_part else np.abs(u) ** 2
        d = metric_distance(model, fld.r[i0:i1], fld.theta[j0:j1], center)
        area = model.f(fld.r[i0:i1])[:, None] * dr * dt
        w = np.clip(0.5 + (rad - d) / cell, 0.0, 1.0)
        edge = (i0 < 2 and w[:2].any()) or (i1 > len(fld.r) - 2 and w[-2:].any()) or \
            (j0 < 2 and w[:, :2].any()) or (j1 > len(fld.theta) - 2 and w[:, -2:].any())
        if edge:
            skipped.append(float(c))
            continue
        masses.append(float(np.sum(w * dens * area)))
        radii.append(rad)
    radii = np.array(radii)
    masses = np.array(masses)
    return BallMassReport(tuple(center), radii, masses, masses / (np.pi * radii**2), skipped)


def random_plateau_centers(spec, chart, n, seed):
    """Uniform centers in the region where the chart cutoff equals 1."""
    rng = np.random.default_rng(seed)
    rc = 0.5 * (chart.r_lo + chart.r_hi)
    r = rc + rng.uniform(-chart.plateau_r, chart.plateau_r, n)
    t = spec.theta_in + rng.uniform(-chart.plateau_theta, chart.plateau_theta, n)
    return np.column_stack([r, t])


@dataclass
class EquidistributionReport:
    h: np.ndarray
    ratios: np.ndarray
    c1: float
    c2: float

    @property
    def band(self):
        return self.c2 / self.c1


def equidistribution(model, fields, centers, c=10.0, use_real_part=True):
    """Ball-mass ratios at radius c h for every center and field."""
    out = []
    for fld in fields:
        row = []
        for x in centers:
            rep = ball_mass(model, fld, tuple(x), [c], use_real_part)
            if rep.skipped:
                raise ValueError("ball around %s leaves the grid at h=%g" % (tuple(x), fld.h))
            row.append(rep.ratios[0])
        out.append(row)
    out = np.array(out)
    return EquidistributionReport(np.array([f.h for f in fields]), out,
                                  float(out.min()), float(out.max()))


# ---------------------------------------------------------------- backward pairing

@dataclass
class PairingCensus:
    pairs: list
    fractions: np.ndarray
    components: np.ndarray
    tol: float


def backward_pairing_census(model, sheets, r, theta, tol=1e-3):
    """For each class pair, the part of the grid where grad phi_m = -grad phi_m' within tol.

    Returns the area fraction and the number of connected pieces per pair.
    """
    grads = {}
    for s in sheets:
        itp = SheetInterpolant(s)
        grads[s.m] = (itp.phase(r, theta, dr=1), itp.phase(r, theta, dt=1))
    f = model.f(np.asarray(r))[:, None]
    area = np.broadcast_to(f, (len(r), len(theta)))
    pairs, frac, comp = [], [], []
    ms = sorted(grads)
    for i, m in enumerate(ms):
        for mp in ms[i:]:
            gr = grads[m][0] + grads[mp][0]
            gt = grads[m][1] + grads[mp][1]
            mask = np.sqrt(gr**2 + (gt / f) ** 2) < tol
            pairs.append((m, mp))
            frac.append(float(np.sum(area * mask) / np.sum(area)))
            comp.append(int(measure.label(mask, connectivity=2).max()))
    return PairingCensus(pairs, np.array(frac), np.array(comp), float(tol))


# ---------------------------------------------------------------- nodal sets

@dataclass
class NodalReport:
    h: float
    segments: list
    length: float
    window: tuple
    closed: int = 0
    open_on_boundary: int = 0


def _index_to_coords(axis, idx):
    return np.interp(idx, np.arange(len(axis)), axis)


def nodal_extract(model, fld: WaveField, window=None, part="real"):
    """Marching-squares zero set of Re E (or Im E) and its metric length in the window."""
    si, sj = _window_slices(fld, window)
    r = fld.r[si]
    th = fld.theta[sj]
    g = np.real(fld.values[si, sj]) if part == "real" else np.imag(fld.values[si, sj])
    segs = []
    length = 0.0
    closed = open_b = 0
    for c in measure.find_contours(g, 0.0):
        pr = _index_to_coords(r, c[:, 0])
        pt = _index_to_coords(th, c[:, 1])
        fm = model.f(0.5 * (pr[1:] + pr[:-1]))
        length += float(np.sum(np.hypot(np.diff(pr), fm * np.diff(pt))))
        segs.append(np.column_stack([pr, pt]))
        if np.allclose(c[0], c[-1]):
            closed += 1
        else:
            open_b += 1
    win = window or (fld.r[0], fld.r[-1], fld.theta[0], fld.theta[-1])
    return NodalReport(fld.h, segs, length, tuple(win), closed, open_b)


def nodal_scaling(reports):
    """h * length per report and the max/min spread."""
    v = np.array([rep.h * rep.length for rep in reports])
    return v, float(v.max() / v.min())


def window_area(model, window, n=2001):
    r_lo, r_hi, t_lo, t_hi = window
    r = np.linspace(r_lo, r_hi, n)
    return float(np.trapezoid(model.f(r), r) * (t_hi - t_lo))


# ---------------------------------------------------------------- nodal identity

def bump(model, r, theta, center, radius):
    """C-infinity bump exp(1 - 1/(1 - d^2/R^2)) on the metric ball of radius R."""
    d = metric_distance(model, r, theta, center) / radius
    out = np.zeros_like(d)
    inside = d < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - d[inside] ** 2))
    return out


@dataclass
class NodalIdentityResult:
    lhs: float
    rhs: float

    @property
    def ratio(self):
        return self.lhs / self.rhs if self.rhs != 0 else (1.0 if self.lhs == 0 else np.inf)


def nodal_identity_check(model, fld: WaveField, test, margin=4):
    """Both sides of int ((h^2 Lap + 1) f)|g| = 2 h^2 int_{g=0} f |grad g| ds, g = Re E.

    ``test`` holds samples of f on the field grid, vanishing near the edges.
    """
    h = fld.h
    g = np.real(fld.values)
    test = np.asarray(test, dtype=float)
    if not np.any(test):
        return NodalIdentityResult(0.0, 0.0)
    if np.max(np.abs(test[:margin])) + np.max(np.abs(test[-margin:])) + \
            np.max(np.abs(test[:, :margin])) + np.max(np.abs(test[:, -margin:])) > 0:
        raise ValueError("test function must vanish near the grid edges")
    lap = np.zeros_like(test)
    lap[2:-2, 2:-2] = laplacian(model, fld.r, fld.theta, test, order=4)
    area = model.f(fld.r)[:, None] * fld.dr * fld.dtheta
    lhs = float(np.sum((h * h * lap + test) * np.abs(g) * area))
    spl = RectBivariateSpline(fld.r, fld.theta, g, kx=3, ky=3)
    fspl = RectBivariateSpline(fld.r, fld.theta, test, kx=3, ky=3)
    rhs = 0.0
    for c in measure.find_contours(g, 0.0):
        pr = _index_to_coords(fld.r, c[:, 0])
        pt = _index_to_coords(fld.theta, c[:, 1])
        mr = 0.5 * (pr[1:] + pr[:-1])
        mt = 0.5 * (pt[1:] + pt[:-1])
        fm = model.f(mr)
        ds = np.hypot(np.diff(pr), fm * np.diff(pt))
        gr = spl.ev(mr, mt, dx=1)
        gt = spl.ev(mr, mt, dy=1)
        rhs += float(np.sum(fspl.ev(mr, mt) * np.hypot(gr, gt / fm) * ds))
    return NodalIdentityResult(lhs, 2.0 * h * h * rhs)


# ---------------------------------------------------------------- oscillatory integrals

@dataclass
class DecayReport:
    h: np.ndarray
    values: np.ndarray
    slope: float
    constant: float
    stationary: bool = False


def oscillatory_integral(a, phi, h, dA):
    return complex(np.sum(a * np.exp(1j * phi / h)) * dA)


def oscillatory_decay(a, phi, grad_norm, h_list, dA, min_grad=1e-2, allow_stationary=False):
    """|int a exp(i phi/h)| over h_list and the fitted slope of log|I| against log(1/h).

    ``grad_norm`` holds |grad phi| on the grid; a stationary point on the
    support of a is a precondition breach unless ``allow_stationary``.
    """
    supp = np.abs(a) > 1e-12 * np.max(np.abs(a))
    stationary = bool(np.min(grad_norm[supp]) < min_grad)
    if stationary and not allow_stationary:
        raise StationaryPhaseError("phase is stationary on the support of the amplitude")
    hs = np.asarray(h_list, dtype=float)
    vals = np.array([abs(oscillatory_integral(a, phi, h, dA)) for h in hs])
    logs = np.log(np.maximum(vals, 1e-300))
    slope = float(np.polyfit(np.log(1.0 / hs), logs, 1)[0]) if len(hs) > 1 else np.nan
    const = float(np.max(vals / hs**3))
    return DecayReport(hs, vals, slope, const, stationary)


# ---------------------------------------------------------------- position density

def local_average(values, r, theta, model, width):
    """Gaussian average over metric radius ``width`` (separable, f frozen at each row)."""
    from scipy.ndimage import gaussian_filter1d
    dr = r[1] - r[0]
    dt = theta[1] - theta[0]
    out = gaussian_filter1d(values, width / dr, axis=0, mode="nearest")
    rows = np.empty_like(out)
    for i, fr in enumerate(model.f(r)):
        rows[i] = gaussian_filter1d(out[i], width / (fr * dt), mode="nearest")
    return rows


@dataclass
class DensityReport:
    h: np.ndarray
    errors: np.ndarray
    constant: float
    slope: float


def density_consistency(model, fields, densities, window, width_factor=0.5):
    """max |<|E_h|^2>_L - sum a^2| on the window with L = width_factor sqrt(h).

    Returns errors per h, the fitted constant C in err <= C h^{1/2} and the
    log-log slope.
    """
    errs = []
    for fld, dens in zip(fields, densities):
        L = width_factor * np.sqrt(fld.h)
        avg = local_average(np.abs(fld.values) ** 2, fld.r, fld.theta, model, L)
        si, sj = _window_slices(fld, window)
        errs.append(float(np.max(np.abs(avg - dens)[si, sj])))
    errs = np.array(errs)
    hs = np.array([f.h for f in fields])
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    return DensityReport(hs, errs, float(np.max(errs / np.sqrt(hs))), slope)


__all__ = ["StationaryPhaseError", "cl_norm", "supnorm_scan", "SupnormTable", "BallMassReport",
           "ball_mass", "metric_distance", "random_plateau_centers", "equidistribution",
           "EquidistributionReport", "backward_pairing_census", "PairingCensus", "NodalReport",
           "nodal_extract", "nodal_scaling", "window_area", "bump", "NodalIdentityResult", "nodal_identity_check",
           "DecayReport", "oscillatory_integral", "oscillatory_decay", "local_average",
           "DensityReport", "density_consistency"]
