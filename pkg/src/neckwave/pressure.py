"""Unstable Jacobian and topological pressure of the trapped set.

Separated sets are built by greedy packing of a finite sample cloud of the
trapped set, using a Bowen distance sampled at unit times.  The distance on
S*X is the chordal distance of the embedding

    (r, theta, p_r, p_theta) -> (r, f cos theta, f sin theta, p_r, p_theta / f),

which is a genuine metric; pressure does not depend on the metric chosen.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import (NonHyperbolicError, PhasePoint, neck_period, sasaki_norm,
                       unstable_direction)
from .geometry import TWO_PI
from .symplectic import integrate


@dataclass
class PressureEstimate:
    s: float
    eps: float
    t_list: np.ndarray
    logZ: np.ndarray
    P: float
    residual: float
    n_separated: np.ndarray = field(default=None)


def embed(model, y):
    y = np.asarray(y, dtype=float)
    f = model.f(y[..., 0])
    return np.stack([y[..., 0], f * np.cos(y[..., 1]), f * np.sin(y[..., 1]),
                     y[..., 2], y[..., 3] / f], axis=-1)


def closed_orbits(model, r_max=None, n=20001):
    """Radii of closed geodesics (critical points of f) and their hyperbolicity."""
    r_max = model.r2 if r_max is None else r_max
    r = np.linspace(-r_max, r_max, n)
    fp = model.df(r)
    idx = np.flatnonzero((fp[:-1] <= 0) & (fp[1:] > 0) | (fp[:-1] < 0) & (fp[1:] >= 0))
    out = []
    for i in idx:
        a, b = r[i], r[i + 1]
        for _ in range(80):
            c = 0.5 * (a + b)
            if model.df(c) * model.df(a) > 0:
                a = c
            else:
                b = c
        out.append(0.5 * (a + b))
    return np.array(sorted(set(np.round(out, 14))))


def trapped_set_cloud(model, spacing):
    """Points of the trapped set at arclength spacing along each orbit.

    On this surface the trapped set is the closed geodesic at each strict
    minimum of f, traversed in both orientations.
    """
    pts = []
    # a flat cylinder has a closed geodesic through every radius; keep one
    radii = np.array([0.0]) if model.is_degenerate else closed_orbits(model)
    for rc in radii:
        f0 = float(model.f(rc))
        n = int(np.ceil(TWO_PI * f0 / spacing))
        th = TWO_PI * np.arange(n) / n
        for sgn in (1.0, -1.0):
            pts.append(np.stack([np.full(n, rc), th, np.zeros(n), np.full(n, sgn * f0)], axis=-1))
    if not pts:
        raise ValueError("empty trapped set")
    return np.concatenate(pts)


def unstable_jacobian(model, rho_on_K: PhasePoint, t: float, dt: float = 0.02):
    """log of the area expansion of span{unstable, flow} under the time-t flow."""
    lam = unstable_jacobians(model, rho_on_K.array()[None], np.array([t]), dt=dt)
    return float(lam[0, 0])


def unstable_jacobians(model, cloud, t_list, dt=0.02, directions=None):
    """lambda_t^+ for every cloud point and every t in ``t_list``.

    The unstable vector is renormalized at every unit time and the log
    growth of the area it spans with the flow direction is accumulated.
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    t_list = np.asarray(t_list, dtype=float)
    if directions is None:
        # the splitting is invariant under rotations, so one period map per
        # (r, p_r, p_theta) class suffices
        keys, inv = np.unique(np.round(cloud[:, [0, 2, 3]], 12), axis=0, return_inverse=True)
        reps = [unstable_direction(model, PhasePoint(k[0], 0.0, k[1], k[2])) for k in keys]
        directions = np.array(reps)[np.ravel(inv)]
    y = cloud.copy()
    V = np.array(directions, dtype=float)[..., None].copy()
    out = np.zeros((len(cloud), len(t_list)))
    log_area = np.zeros(len(cloud))
    area0 = _area_with_flow(model, y, V[..., 0])
    t_now = 0.0
    order = np.argsort(t_list)
    for j in order:
        remaining = t_list[j] - t_now
        while remaining > 1e-12:
            h = min(1.0, remaining)
            n = max(1, int(np.ceil(h / dt - 1e-12)))
            integrate(model, y, h / n, n, V)
            area = _area_with_flow(model, y, V[..., 0])
            log_area += np.log(area / area0)
            V /= sasaki_norm(model, y, V[..., 0])[:, None, None]
            area0 = _area_with_flow(model, y, V[..., 0])
            remaining -= h
            t_now += h
        out[:, j] = log_area
    return out


def _area_with_flow(model, y, v):
    """Sasaki area of the parallelogram spanned by v and the flow vector."""
    f, fp, _ = model.profile(y[..., 0])
    X = np.stack([y[..., 2], y[..., 3] / f**2, y[..., 3] ** 2 * fp / f**3,
                  np.zeros_like(f)], axis=-1)
    a = sasaki_norm(model, y, v) ** 2
    b = sasaki_norm(model, y, X) ** 2
    ab = 0.25 * (sasaki_norm(model, y, v + X) ** 2 - sasaki_norm(model, y, v - X) ** 2)
    return np.sqrt(np.maximum(a * b - ab * ab, 0.0))


def bowen_separated_set(model, cloud, eps, t_max, seed=0, dt=0.05):
    """Greedy maximal (eps, t)-separated subsets for every integer t <= t_max.

    Returns a list whose entry k holds the indices of a separated subset at
    time k.  Since Bowen distances only grow with t, candidate conflicts are
    restricted to pairs closer than eps at time 0, found with a KD-tree.
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    n_t = int(np.floor(t_max)) + 1
    traj = np.empty((n_t,) + cloud.shape)
    y = cloud.copy()
    traj[0] = y
    per = max(1, int(np.ceil(1.0 / dt)))
    for k in range(1, n_t):
        integrate(model, y, 1.0 / per, per)
        traj[k] = y
    emb = embed(model, traj)
    tree = cKDTree(emb[0])
    pairs = tree.query_pairs(eps, output_type="ndarray")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cloud))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    if len(pairs):
        gaps = np.linalg.norm(emb[:, pairs[:, 0]] - emb[:, pairs[:, 1]], axis=-1)
        bowen = np.maximum.accumulate(gaps, axis=0)
    else:
        bowen = np.zeros((n_t, 0))
    chosen = []
    for k in range(n_t):
        close = pairs[bowen[k] < eps] if len(pairs) else pairs
        nbrs = [[] for _ in range(len(cloud))]
        for i, j in close:
            nbrs[i].append(j)
            nbrs[j].append(i)
        taken = np.zeros(len(cloud), dtype=bool)
        sel = []
        for i in order:
            if not any(taken[j] for j in nbrs[i]):
                taken[i] = True
                sel.append(i)
        chosen.append(np.sort(np.array(sel, dtype=int)))
    return chosen


def _fit_top_half(t, logZ):
    t = np.asarray(t, dtype=float)
    half = max(2, len(t) - len(t) // 2)
    tt, zz = t[-half:], logZ[-half:]
    coef = np.polyfit(tt, zz, 1)
    res = zz - np.polyval(coef, tt)
    span = max(tt[-1] - tt[0], 1e-12)
    return float(coef[0]), float(np.max(np.abs(res)) / span)


def pressure_curve(model, s_list, eps, t_list, cloud=None, seed=0):
    """PressureEstimates for several s sharing one packing and one Jacobian run."""
    if not (1e-3 <= eps <= 1e-1):
        raise ValueError("eps must lie in [1e-3, 1e-1]")
    t_list = np.asarray(t_list, dtype=float)
    if np.any(np.diff(t_list) <= 0):
        raise ValueError("t_list must be increasing")
    if cloud is None:
        cloud = trapped_set_cloud(model, eps / 4.0)
    if len(cloud) == 0:
        raise ValueError("empty trapped set")
    lam = unstable_jacobians(model, cloud, t_list)
    sets = bowen_separated_set(model, cloud, eps, float(np.max(t_list)), seed=seed)
    out = []
    for s in s_list:
        logZ = np.empty(len(t_list))
        counts = np.empty(len(t_list), dtype=int)
        for j, t in enumerate(t_list):
            idx = sets[int(np.floor(t))]
            w = -s * lam[idx, j]
            wmax = np.max(w)
            logZ[j] = wmax + np.log(np.sum(np.exp(w - wmax)))
            counts[j] = len(idx)
        P, res = _fit_top_half(t_list, logZ)
        out.append(PressureEstimate(float(s), float(eps), t_list, logZ, P, res, counts))
    return out


def pressure(model, s, eps, t_list, cloud=None, seed=0) -> PressureEstimate:
    return pressure_curve(model, [s], eps, t_list, cloud=cloud, seed=seed)[0]


def supermultiplicativity_constant(est: PressureEstimate):
    """Smallest C with logZ(t1+t2) <= logZ(t1) + logZ(t2) + log C on the sampled times."""
    t = est.t_list
    lookup = {round(float(x), 9): z for x, z in zip(t, est.logZ)}
    worst = -np.inf
    for i, a in enumerate(t):
        for b in t[i:]:
            key = round(float(a + b), 9)
            if key in lookup:
                worst = max(worst, lookup[key] - lookup[round(float(a), 9)] - lookup[round(float(b), 9)])
    return float(np.exp(worst)) if np.isfinite(worst) else np.nan


@dataclass
class GateResult:
    passed: bool
    margin: float
    estimate: PressureEstimate


def hypothesis_gate(model, eps=0.03, t_list=None, seed=0) -> GateResult:
    """Check P(1/2) < 0 with the fit residual added as a safety margin."""
    if t_list is None:
        t_list = np.arange(5.0, 61.0, 5.0)
    try:
        est = pressure(model, 0.5, eps, t_list, seed=seed)
    except NonHyperbolicError as err:
        raise NonHyperbolicError("pressure gate: %s" % err) from err
    passed = est.P + est.residual < -0.1
    return GateResult(bool(passed), abs(est.P), est)


__all__ = ["PressureEstimate", "GateResult", "unstable_jacobian", "unstable_jacobians",
           "pressure", "pressure_curve", "hypothesis_gate", "trapped_set_cloud",
           "closed_orbits", "bowen_separated_set", "supermultiplicativity_constant",
           "neck_period"]
