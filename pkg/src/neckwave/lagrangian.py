"""Incoming Lagrangian, phase-space cover and word/winding-class propagation.

The incoming plane wave is sampled as a slab of rays just outside the
interaction region.  Every unit time the samples are flowed, labelled by the
cover set containing them (the letter) and by the deck index of their lifted
angle (the winding class), and regrouped into branches.  A branch at step n
is the set of samples sharing a letter and a class; its word is the
lexicographically smallest parent word followed by the letter.

Every sample carries the tangent d/ds of its ray family (s the impact
parameter, phase held fixed), so the base Jacobian, the phase Hessian and
the symplectic pairing with the flow are exact functions of the sample.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .dynamics import (IntegrationError, energy, geodesic_distance, neck_point,
                       sasaki_norm, stable_direction, unstable_direction)
from .geometry import TWO_PI
from .rays import (IncomingWaveSpec, entry_sigma, flow_vector, impact_parameters,
                   lagrangian_jacobian,
                   phase_hessian, polar_to_chart, ray_states, symplectic_pairing,
                   winding_class)
from .symplectic import integrate


class CausticViolation(RuntimeError):
    pass


class HypothesisViolation(RuntimeError):
    pass


class BranchBudgetExceeded(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# branch types


@dataclass(frozen=True)
class Word:
    letters: tuple

    @property
    def n(self):
        return len(self.letters)

    @property
    def tau(self):
        """Last index i >= 1 with letter 0 (0 when there is none)."""
        idx = [i for i, b in enumerate(self.letters) if b == 0 and i >= 1]
        return idx[-1] if idx else 0

    def __str__(self):
        return ".".join(str(b) for b in self.letters)


@dataclass
class LagrangianBranch:
    """Samples of one sheet: states (r, theta_lift, p_r, p_theta), tangents d/ds, phases."""

    m: int
    word: Word
    n: int
    states: np.ndarray
    tangents: np.ndarray
    phi: np.ndarray
    J: np.ndarray
    a: np.ndarray
    maslov: float = 0.0

    @property
    def chart(self):
        r, th = self.states[:, 0], self.states[:, 1]
        return (float(r.min()), float(r.max()), float(th.min()), float(th.max()))

    @property
    def xi(self):
        return self.states[:, 2:]

    def rows(self):
        """Sample table with columns x_r, x_theta, xi_r, xi_theta, phi, a, J."""
        return np.column_stack([self.states, self.phi, self.a, self.J])


# ----------------------------------------------------------------------------
# incoming plane wave


@dataclass
class IncomingChecks:
    forward_error: float
    backward_error: float
    expansion_ratio_max: float
    expansion_ratio_min: float
    n_pairs: int
    eikonal_error: float


def _straight_line_error(model, spec, y0, y1, t):
    """Deviation of flowed states from straight-line motion in the end chart."""
    u0, v0 = polar_to_chart(model, spec, y0[:, 0], y0[:, 1])
    u1, v1 = polar_to_chart(model, spec, y1[:, 0], y1[:, 1])
    rho = spec.sign * y1[:, 0] + model.end_offset
    c, s = np.cos(y1[:, 1]), np.sin(y1[:, 1])
    p_rho = spec.sign * y1[:, 2]
    xi_u = p_rho * c - y1[:, 3] / rho * s
    xi_v = p_rho * s + y1[:, 3] / rho * c
    xi = spec.xi
    pos = np.hypot(u1 - (u0 + t * xi[0]), v1 - (v0 + t * xi[1]))
    mom = np.hypot(xi_u - xi[0], xi_v - xi[1])
    return float(max(pos.max(initial=0.0), mom.max(initial=0.0)))


def _time_to_circle(sigma, s, radius, forward=True):
    """Time until the straight ray reaches the circle; inf when it misses."""
    disc = radius * radius - s * s
    root = np.sqrt(np.maximum(disc, 0.0))
    if forward:
        t = np.where(disc > 0, -root - sigma, np.inf)
        return np.where(t > 0, t, np.inf)
    t = np.where(disc > 0, sigma - root, np.inf)
    return np.where(t > 0, t, np.inf)


def incoming_lagrangian(model, spec: IncomingWaveSpec = IncomingWaveSpec(), n_s: int = 81,
                        n_sigma: int = 25, n_pairs: int = 1000, seed: int = 0,
                        tol: float = 1e-9, check: bool = True) -> LagrangianBranch:
    """The m = 0 incoming branch {(x, xi): |x| >= cutoff, <x, xi> < 0}.

    With ``check`` the hypotheses on the incoming state are verified:
    forward flow of incoming samples and backward flow of outgoing samples
    of the plane wave remain on it while in the flat end, and backward flow
    does not expand distances between incoming samples.
    """
    R0 = spec.cutoff(model)
    R2 = float(model.f(model.r2))
    if R0 < R2:
        raise ValueError("cutoff radius inside the curved region")
    far = R0 + 5.0
    s = np.linspace(-far, far, n_s)
    frac = np.linspace(0.0, 1.0, n_sigma)
    S, F = np.meshgrid(s, frac, indexing="ij")
    lo = entry_sigma(R0, S)
    sig = lo - F * (far - np.abs(lo) + 1e-9) - 1e-9
    y, V, phi = ray_states(model, spec, S.ravel(), sig.ravel())
    J = np.abs(lagrangian_jacobian(model, y, V))
    branch = LagrangianBranch(0, Word((0,)), 0, y, V, phi, J, J ** -0.5)
    if not check:
        return branch

    eik = float(np.max(np.abs(2.0 * energy(model, y) - 1.0)))
    # forward flow of incoming samples until they reach the curved region
    t_f = np.minimum(_time_to_circle(sig.ravel(), S.ravel(), R2), 10.0)
    yf = y.copy()
    integrate(model, yf, t_f / 200.0, 200)
    err_f = _straight_line_error(model, spec, y, yf, t_f)
    # backward flow of outgoing samples (mirror image sigma -> -sigma)
    y_out, _, _ = ray_states(model, spec, S.ravel(), -sig.ravel())
    t_b = np.minimum(_time_to_circle(-sig.ravel(), S.ravel(), R2, forward=False), 10.0)
    yb = y_out.copy()
    integrate(model, yb, -t_b / 200.0, 200)
    err_b = _straight_line_error(model, spec, y_out, yb, -t_b)
    if err_f > tol or err_b > tol or eik > tol:
        raise HypothesisViolation(
            "incoming state not invariant in the end: forward %.2e, backward %.2e, eikonal %.2e"
            % (err_f, err_b, eik))

    # non-expansion in the past on nearby pairs
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(y), n_pairs)
    u, v = polar_to_chart(model, spec, y[:, 0], y[:, 1])
    tree = cKDTree(np.column_stack([u, v]))
    _, nb = tree.query(np.column_stack([u[i], v[i]]), k=6)
    j = nb[np.arange(n_pairs), rng.integers(1, 6, n_pairs)]
    d0 = geodesic_distance(model, y[i, :2], y[j, :2])
    ypast = np.concatenate([y[i], y[j]])
    integrate(model, ypast, -0.05, 100)
    d1 = geodesic_distance(model, ypast[:n_pairs, :2], ypast[n_pairs:, :2])
    ratio = d1 / d0
    if np.any(ratio > 1.0 + 1e-6):
        raise HypothesisViolation("backward flow expands incoming distances: ratio %.8f"
                                  % float(ratio.max()))
    branch.checks = IncomingChecks(err_f, err_b, float(ratio.max()), float(ratio.min()),
                                   n_pairs, eik)
    return branch


# ----------------------------------------------------------------------------
# phase-space cover


@dataclass(frozen=True)
class CoverSet:
    id: int
    kind: str
    region: dict


@dataclass
class ContractionReport:
    threshold: float
    worst_distance: float
    pairs: int
    retries: int
    diameter: float


@dataclass
class Cover:
    """Finite cover of S*X: V0, a tube of boxes around the neck orbit, and a box grid.

    V0 (id 0) is {b < eps0/2}.  Near-trapped boxes cover |r| < gamma,
    |p_r| < gamma, split by orientation and angle.  Interaction boxes tile
    the rest of {b >= eps0/2} in (r, theta, psi), psi the momentum angle.
    """

    gamma_uns: float
    r_limit: float
    box: float
    r_edges: np.ndarray
    n_theta: np.ndarray
    n_psi: int
    n_tube: int
    contraction: Optional[ContractionReport] = None

    @property
    def first_interaction_id(self):
        return 1 + 2 * self.n_tube

    @property
    def offsets(self):
        per = self.n_theta * self.n_psi
        return np.concatenate([[0], np.cumsum(per)[:-1]])

    def __len__(self):
        return self.first_interaction_id + int(np.sum(self.n_theta) * self.n_psi)

    def kind_of(self, ids):
        ids = np.asarray(ids)
        return np.where(ids == 0, "infinity",
                        np.where(ids < self.first_interaction_id, "near_trapped", "interaction"))

    def letters(self, model, y):
        y = np.asarray(y, dtype=float)
        r, th, pr, pth = y[..., 0], np.mod(y[..., 1], TWO_PI), y[..., 2], y[..., 3]
        ids = np.zeros(r.shape, dtype=np.int64)
        inside = np.abs(r) <= self.r_limit
        tube = inside & (np.abs(r) < self.gamma_uns) & (np.abs(pr) < self.gamma_uns)
        k = np.minimum((th * self.n_tube / TWO_PI).astype(np.int64), self.n_tube - 1)
        ids[tube] = (1 + np.where(pth > 0, 0, self.n_tube) + k)[tube]
        rest = inside & ~tube
        nb = len(self.n_theta)
        i = np.clip(np.searchsorted(self.r_edges, r, side="right") - 1, 0, nb - 1)
        nth = self.n_theta[i]
        kt = np.minimum((th * nth / TWO_PI).astype(np.int64), nth - 1)
        f = model.f(r)
        psi = np.mod(np.arctan2(pth / f, pr), TWO_PI)
        kp = np.minimum((psi * self.n_psi / TWO_PI).astype(np.int64), self.n_psi - 1)
        box_id = self.first_interaction_id + self.offsets[i] + kt * self.n_psi + kp
        ids[rest] = box_id[rest]
        return ids

    def sets(self):
        out = [CoverSet(0, "infinity", {"abs_r": (self.r_limit, np.inf)})]
        g = self.gamma_uns
        for o, sgn in enumerate((1, -1)):
            for k in range(self.n_tube):
                out.append(CoverSet(1 + o * self.n_tube + k, "near_trapped",
                                    {"r": (-g, g), "p_r": (-g, g), "orientation": sgn,
                                     "theta": (TWO_PI * k / self.n_tube,
                                               TWO_PI * (k + 1) / self.n_tube)}))
        base = self.first_interaction_id
        for i, off in enumerate(self.offsets):
            for kt in range(self.n_theta[i]):
                for kp in range(self.n_psi):
                    out.append(CoverSet(
                        int(base + off + kt * self.n_psi + kp), "interaction",
                        {"r": (self.r_edges[i], self.r_edges[i + 1]),
                         "theta": (TWO_PI * kt / self.n_theta[i], TWO_PI * (kt + 1) / self.n_theta[i]),
                         "psi": (TWO_PI * kp / self.n_psi, TWO_PI * (kp + 1) / self.n_psi)}))
        return out


def _layout(model, gamma_uns, box):
    R = model.interaction_radius
    nr = int(np.ceil(2 * R / box))
    edges = np.linspace(-R, R, nr + 1)
    fmax = np.maximum(model.f(edges[:-1]), model.f(edges[1:]))
    n_theta = np.ceil(TWO_PI * fmax / box).astype(np.int64)
    n_psi = int(np.ceil(TWO_PI / box))
    n_tube = int(np.ceil(TWO_PI * float(model.f(0.0)) / box))
    return Cover(gamma_uns, R, box, edges, n_theta, n_psi, n_tube)


def _path_length_bound(model, a, b, n=16):
    """Length of the straight coordinate path in (r, theta_lift): an upper bound on d_X."""
    x, w = np.polynomial.legendre.leggauss(n)
    tt = 0.5 * (x + 1.0)
    dr = b[:, 0] - a[:, 0]
    dth = b[:, 1] - a[:, 1]
    r = a[:, 0][:, None] + tt[None] * dr[:, None]
    f = model.f(r)
    return 0.5 * np.sum(w[None] * np.sqrt(dr[:, None] ** 2 + (f * dth[:, None]) ** 2), axis=1)


def _box_pairs(model, cover, pairs, rng):
    """Random pairs inside one representative box per rotation class."""
    A, B = [], []
    g = cover.gamma_uns
    for sgn in (1.0, -1.0):
        w = TWO_PI / cover.n_tube
        pts = []
        for _ in range(2):
            r = rng.uniform(-g, g, pairs)
            pr = rng.uniform(-g, g, pairs)
            f = model.f(r)
            pth = sgn * f * np.sqrt(np.maximum(1.0 - pr * pr, 0.0))
            pts.append(np.stack([r, rng.uniform(0, w, pairs), pr, pth], axis=-1))
        A.append(pts[0])
        B.append(pts[1])
    for i in range(len(cover.n_theta)):
        lo, hi = cover.r_edges[i], cover.r_edges[i + 1]
        wt = TWO_PI / cover.n_theta[i]
        wp = TWO_PI / cover.n_psi
        for kp in range(cover.n_psi):
            pts = []
            for _ in range(2):
                r = rng.uniform(lo, hi, pairs)
                th = rng.uniform(0, wt, pairs)
                psi = rng.uniform(kp * wp, (kp + 1) * wp, pairs)
                f = model.f(r)
                pts.append(np.stack([r, th, np.cos(psi), f * np.sin(psi)], axis=-1))
            A.append(pts[0])
            B.append(pts[1])
    return np.concatenate(A), np.concatenate(B)


def build_cover(model, gamma_uns: float = 0.05, box: float = 0.5, pairs: int = 1000,
                mu: Optional[float] = None, seed: int = 0, max_retries: int = 5) -> Cover:
    """Cover of S*X whose boxes satisfy d_X(Phi^1 x, Phi^1 y) < e^{-mu} r_i.

    The check uses ``pairs`` random pairs per box.  The flow commutes with
    rotations, so one box per (r-bin, psi-bin) stands for all its rotated
    copies.  Failing boxes shrink the grid by 20% and the check is repeated.
    """
    if not (0.0 < gamma_uns <= 0.2):
        raise ValueError("gamma_uns must lie in (0, 0.2]")
    mu = np.sqrt(model.curvature_floor) if mu is None else mu
    threshold = float(np.exp(-mu) * model.injectivity_radius)
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries + 1):
        cover = _layout(model, gamma_uns, box)
        A, B = _box_pairs(model, cover, pairs, rng)
        y = np.concatenate([A, B])
        integrate(model, y, 0.05, 20)
        n = len(A)
        d = _path_length_bound(model, y[:n], y[n:])
        bad = d >= threshold
        if np.any(bad):
            # refine the bound by shooting where the straight path is too long
            d[bad] = geodesic_distance(model, y[:n][bad, :2], y[n:][bad, :2])
        worst = float(d.max())
        if worst < threshold:
            cover.contraction = ContractionReport(threshold, worst, n, attempt,
                                                  float(np.sqrt(3.0) * box))
            return cover
        box *= 0.8
    raise HypothesisViolation("cover contraction check failed after %d retries: "
                              "distance %.3f >= %.3f" % (max_retries, worst, threshold))


# ----------------------------------------------------------------------------
# propagation


@dataclass
class StepRecord:
    """Samples and branch table after n unit-time steps."""

    n: int
    y: np.ndarray
    V: np.ndarray
    phi: np.ndarray
    ray: np.ndarray
    offset: np.ndarray
    branch: np.ndarray
    # branch table, in lexicographic order of words
    parent: np.ndarray
    letter: np.ndarray
    m: np.ndarray
    merged: np.ndarray
    tau: np.ndarray
    last_zero: np.ndarray

    @property
    def a(self):
        return np.abs(self.D) ** -0.5

    D: np.ndarray = None


@dataclass
class PropagationDiagnostics:
    c_det: float = np.inf
    det_sign: float = 0.0
    graph_failures: int = 0
    graph_defect_max: float = 0.0
    eikonal_max: float = 0.0
    curl_max: float = 0.0
    fiber_phase_max: float = 0.0
    hessian_max: list = field(default_factory=list)
    cone_slope: list = field(default_factory=list)
    cone_age: list = field(default_factory=list)
    tube_first_age: int = -1
    transversality_min_deg: float = 90.0
    n_uns: int = 0
    n_escaped: int = 0
    n_pruned: int = 0
    nonexpansion_worst: float = 0.0
    nonexpansion_pairs: int = 0


def _default_rays(model, spec, q_step, q_max):
    R0 = spec.cutoff(model)
    q = np.arange(0.5 * q_step, q_max, q_step)
    s = impact_parameters(q, R0)
    s = s[np.abs(s) < R0]
    return np.unique(s)


def _slab(model, spec, s, n_offsets):
    R0 = spec.cutoff(model)
    off = (np.arange(n_offsets) + 0.5) / n_offsets
    S, O = np.meshgrid(s, off, indexing="ij")
    sigma = entry_sigma(R0, S) - O
    y, V, phi = ray_states(model, spec, S.ravel(), sigma.ravel())
    ray = np.repeat(np.arange(len(s)), n_offsets)
    offset = np.tile(np.arange(n_offsets), len(s))
    return y, V, phi, ray, offset


def _transverse_tangent(model, y, V):
    """(r, p_r) part of the sheet tangent after removing its component along the flow."""
    X = flow_vector(model, y)
    c = V[:, 1] / X[:, 1]
    return V[:, 0] - c * X[:, 0], V[:, 2] - c * X[:, 2]


def _graph_defects(model, y, H, key, radius, k=6):
    """Taylor mismatch of xi between each sample and its nearest same-branch neighbours."""
    f = model.f(y[:, 0])
    pts = np.column_stack([y[:, 0], y[:, 1], key.astype(float) * 1e3])
    tree = cKDTree(pts)
    k = min(k, len(y))
    if k < 2:
        return np.zeros(0), np.zeros(0)
    dist, nb = tree.query(pts, k=k, distance_upper_bound=radius)
    i = np.repeat(np.arange(len(y)), k - 1)
    j = nb[:, 1:].ravel()
    ok = np.isfinite(dist[:, 1:].ravel()) & (j > i)
    i, j = i[ok], j[ok]
    dx = y[j, :2] - y[i, :2]
    Hm = 0.5 * (H[i] + H[j])
    pred = np.einsum("nab,nb->na", Hm, dx)
    e = np.linalg.norm(y[j, 2:] - y[i, 2:] - pred, axis=1)
    d = np.hypot(dx[:, 0], 0.5 * (f[i] + f[j]) * dx[:, 1])
    return e, d


@dataclass
class Inventory:
    model: object
    spec: IncomingWaveSpec
    cover: Cover
    steps: list
    rays: np.ndarray
    n_offsets: int
    amp_floor: float
    chart: tuple
    diagnostics: PropagationDiagnostics
    class_first_step: dict
    class_sup_amplitude: dict

    @property
    def N(self):
        return len(self.steps) - 1

    def word(self, n, b):
        letters = []
        while n >= 0:
            st = self.steps[n]
            letters.append(int(st.letter[b]))
            b = int(st.parent[b])
            n -= 1
        return Word(tuple(reversed(letters)))

    def n_branches(self):
        return int(sum(len(st.letter) for st in self.steps))

    def classes(self):
        """Winding classes over the chart, sorted by (n_tilde, m)."""
        return sorted(self.class_first_step, key=lambda m: (self.class_first_step[m], m))

    def branch(self, n, b):
        st = self.steps[n]
        sel = st.branch == b
        D = np.abs(st.D[sel])
        return LagrangianBranch(int(st.m[b]), self.word(n, b), n, st.y[sel], st.V[sel],
                                st.phi[sel], D, D ** -0.5)

    def manifest(self):
        """Rows (class id, m, n_tilde, word, r_min, r_max, th_min, th_max, sup a) per branch."""
        rows = []
        for st in self.steps:
            for b in range(len(st.letter)):
                sel = st.branch == b
                ys = st.y[sel]
                a = np.abs(st.D[sel]) ** -0.5
                m = int(st.m[b])
                rows.append((m, m, self.class_first_step.get(m, -1), str(self.word(st.n, b)),
                             float(ys[:, 0].min()), float(ys[:, 0].max()),
                             float(ys[:, 1].min()), float(ys[:, 1].max()), float(a.max())))
        return rows

    def class_masses(self):
        """(n_tilde, summed sup amplitude) per distinct n_tilde."""
        by_n = {}
        for m, n in self.class_first_step.items():
            by_n[n] = by_n.get(n, 0.0) + self.class_sup_amplitude[m]
        keys = sorted(by_n)
        return np.array(keys, dtype=float), np.array([by_n[k] for k in keys])

    def mass_decay_rate(self):
        """Fitted log-rate of class mass per unit word length."""
        n, mass = self.class_masses()
        if len(n) < 2:
            return np.nan
        return float(np.polyfit(n, np.log(mass), 1)[0])

    def coverage(self, x, M, n_max=None, edge=0.35):
        """Winding classes |m| <= M whose samples surround the base point x."""
        r0, th0 = float(x[0]), float(x[1])
        n_max = self.N if n_max is None else n_max
        found = []
        for m in range(-M, M + 1):
            pts = []
            for st in self.steps[:n_max + 1]:
                mm = winding_class(self.spec, st.y[:, 1])
                sel = mm == m
                if np.any(sel):
                    pts.append(st.y[sel, :2])
            if not pts:
                continue
            P = np.concatenate(pts)
            shift = self.spec.theta_in + TWO_PI * m
            th = P[:, 1] - shift
            th0c = np.mod(th0 - self.spec.theta_in + np.pi, TWO_PI) - np.pi
            f0 = float(self.model.f(r0))
            Q = np.column_stack([P[:, 0] - r0, f0 * (th - th0c)])
            near = np.hypot(Q[:, 0], Q[:, 1]) < 3 * edge
            if near.sum() < 3:
                continue
            Q = Q[near]
            try:
                tri = Delaunay(Q)
            except Exception:
                continue
            k = int(tri.find_simplex(np.zeros(2)))
            if k < 0:
                continue
            v = Q[tri.simplices[k]]
            if np.all(np.hypot(*(v - v[[1, 2, 0]]).T) <= edge):
                found.append(m)
        return found


def _chart_mask(spec, y, chart):
    r_lo, r_hi, half = chart
    dth = np.mod(y[:, 1] - spec.theta_in + np.pi, TWO_PI) - np.pi
    return (y[:, 0] >= r_lo) & (y[:, 0] <= r_hi) & (np.abs(dth) <= half)


def propagate_step(model, branch: LagrangianBranch, cover: Cover, spec=IncomingWaveSpec(),
                   dt: float = 0.02):
    """Flow a branch for unit time and split it by cover set and winding class."""
    y = branch.states.copy()
    V = branch.tangents[..., None].copy()
    n = int(round(1.0 / dt))
    integrate(model, y, 1.0 / n, n, V)
    V = V[..., 0]
    phi = branch.phi + 1.0
    D = lagrangian_jacobian(model, y, V)
    if np.any(np.abs(D) < 1e-12):
        raise CausticViolation("base Jacobian vanishes")
    letters = cover.letters(model, y)
    m = winding_class(spec, y[:, 1])
    out = []
    for key in sorted(set(zip(letters.tolist(), m.tolist()))):
        sel = (letters == key[0]) & (m == key[1])
        J = np.abs(D[sel])
        out.append(LagrangianBranch(key[1], Word(branch.word.letters + (key[0],)), branch.n + 1,
                                    y[sel], V[sel], phi[sel], J, branch.a[sel] * np.sqrt(branch.J[sel] / J)))
    H = phase_hessian(model, y, V)
    e, d = _graph_defects(model, y, H, letters * 4096 + m, 0.02)
    if len(e) and np.any(e > 1e-8 + 10.0 * d**2):
        raise CausticViolation("caustic violation: two samples of one branch disagree on xi")
    return out


def propagate_all(model, spec: IncomingWaveSpec = IncomingWaveSpec(), N: int = 40,
                  amp_floor: float = 1e-6, cover: Optional[Cover] = None,
                  q_step: float = 0.1, q_max: float = 30.0, n_offsets: int = 4,
                  chart=(-0.9, 0.9, 0.7), branch_budget: int = 1_000_000,
                  dt: float = 0.02, gamma_uns: float = 0.05, prune: bool = True,
                  nonexpansion_pairs: int = 100, seed: int = 0) -> Inventory:
    """Breadth-first propagation of the incoming slab for N unit steps.

    ``chart`` = (r_lo, r_hi, half_width) is the base region (angles relative
    to theta_in) over which class first-arrival steps n_tilde and sup
    amplitudes are recorded.
    """
    if not (0 <= N <= 60):
        raise ValueError("N must lie in [0, 60]")
    if amp_floor <= 0:
        raise ValueError("amp_floor must be positive")
    if cover is None:
        cover = build_cover(model, gamma_uns, pairs=200, seed=seed)
    s = _default_rays(model, spec, q_step, q_max)
    y, V, phi, ray, off = _slab(model, spec, s, n_offsets)
    diag = PropagationDiagnostics()
    D = lagrangian_jacobian(model, y, V)
    diag.det_sign = float(np.sign(D[0]))
    letters = cover.letters(model, y)
    if np.any(letters != 0):
        raise ValueError("incoming slab must start outside the interaction region")
    m = winding_class(spec, y[:, 1])
    zero = np.zeros(1, dtype=np.int64)
    steps = [StepRecord(0, y.copy(), V.copy(), phi.copy(), ray, off, np.zeros(len(y), dtype=np.int64),
                        zero - 1, zero, zero, np.ones(1, dtype=np.int64), zero, zero, D=D.copy())]
    first, sup_a = {}, {}
    _record_classes(spec, steps[0], chart, first, sup_a)
    rho_neck = neck_point(model)
    s_neck = stable_direction(model, rho_neck)
    stable = np.array([s_neck[0], s_neck[2]])
    stable /= np.linalg.norm(stable)
    u_neck = unstable_direction(model, rho_neck)
    unstable = np.array([u_neck[0], u_neck[2]])
    unstable /= np.linalg.norm(unstable)
    stable_perp = np.array([-unstable[1], unstable[0]])
    n_sub = int(round(1.0 / dt))
    total = 1
    prev_branch = steps[0].branch
    prev_last0 = np.zeros(1, dtype=np.int64)
    for n in range(1, N + 1):
        Vt = V[..., None]
        integrate(model, y, 1.0 / n_sub, n_sub, Vt)
        V = Vt[..., 0]
        phi = phi + 1.0
        if not np.all(np.isfinite(y)):
            raise IntegrationError("non-finite state during propagation")
        D = lagrangian_jacobian(model, y, V)
        letters = cover.letters(model, y)
        m = winding_class(spec, y[:, 1])
        keep = np.ones(len(y), dtype=bool)
        if prune:
            escaped = (letters == 0) & (y[:, 0] * y[:, 2] > 0)
            faint = np.abs(D) ** -0.5 < amp_floor
            diag.n_escaped += int(escaped.sum())
            diag.n_pruned += int((faint & ~escaped).sum())
            keep = ~(escaped | faint)
        y, V, phi, D = y[keep], V[keep], phi[keep], D[keep]
        ray, off, letters, m = ray[keep], off[keep], letters[keep], m[keep]
        parent_branch = prev_branch[keep]
        if len(y) == 0:
            break
        _check_sheet(model, y, V, D, diag)
        key = letters * 4096 + (m + 2048)
        ukeys, inv = np.unique(key, return_inverse=True)
        inv = inv.ravel()
        rep = np.full(len(ukeys), np.iinfo(np.int64).max)
        np.minimum.at(rep, inv, parent_branch)
        ul = ukeys // 4096
        um = ukeys % 4096 - 2048
        order = np.lexsort((um, ul, rep))
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        branch = rank[inv]
        parents = rep[order]
        nb = len(order)
        merged = np.array([len(np.unique(parent_branch[branch == b])) for b in range(nb)])
        tau = prev_last0[parents]
        last0 = np.where(ul[order] == 0, n, tau)
        total += nb
        if total > branch_budget:
            raise BranchBudgetExceeded(
                "branch budget %d exceeded at step %d: %d branches this step, %d samples"
                % (branch_budget, n, nb, len(y)))
        H = phase_hessian(model, y, V)
        diag.hessian_max.append(float(np.max(np.abs(H))))
        e, d = _graph_defects(model, y, H, branch, 0.02)
        if len(e):
            bad = e > 1e-8 + 10.0 * d**2
            diag.graph_failures += int(bad.sum())
            far = d > 1e-3
            if np.any(far):
                diag.graph_defect_max = max(diag.graph_defect_max, float(np.max(e[far] / d[far] ** 2)))
        tube = (letters >= 1) & (letters < cover.first_interaction_id)
        if np.any(tube):
            w_r, w_p = _transverse_tangent(model, y[tube], V[tube])
            along = w_r * unstable[0] + w_p * unstable[1]
            across = w_r * stable_perp[0] + w_p * stable_perp[1]
            diag.cone_slope.extend(np.abs(across / along).tolist())
            diag.cone_age.extend((n - tau[branch[tube]]).tolist())
            cosang = np.abs(w_r * stable[0] + w_p * stable[1]) / np.hypot(w_r, w_p)
            diag.transversality_min_deg = min(diag.transversality_min_deg,
                                              float(np.degrees(np.arccos(np.clip(cosang, 0, 1))).min()))
        st = StepRecord(n, y.copy(), V.copy(), phi.copy(), ray.copy(), off.copy(), branch,
                        parents, ul[order], um[order], merged, tau, last0, D=D.copy())
        steps.append(st)
        _record_classes(spec, st, chart, first, sup_a)
        prev_branch = branch
        prev_last0 = last0
    inv_ = Inventory(model, spec, cover, steps, s, n_offsets, amp_floor, chart, diag, first, sup_a)
    _cone_threshold(inv_, cover.gamma_uns)
    if nonexpansion_pairs:
        _nonexpansion(inv_, nonexpansion_pairs, seed)
    return inv_


def _check_sheet(model, y, V, D, diag):
    sign = np.sign(D)
    if np.any(sign != diag.det_sign):
        raise CausticViolation("caustic violation: base Jacobian changes sign")
    diag.c_det = min(diag.c_det, float(np.min(np.abs(D))))
    diag.eikonal_max = max(diag.eikonal_max, float(np.max(np.abs(2.0 * energy(model, y) - 1.0))))
    # the flow vector has unit Sasaki norm on the shell
    om = symplectic_pairing(model, y, V) / sasaki_norm(model, y, V)
    diag.curl_max = max(diag.curl_max, float(np.max(np.abs(om))))
    fib = (y[:, 2] * V[:, 0] + y[:, 3] * V[:, 1]) / sasaki_norm(model, y, V)
    diag.fiber_phase_max = max(diag.fiber_phase_max, float(np.max(np.abs(fib))))


def _record_classes(spec, st, chart, first, sup_a):
    inside = _chart_mask(spec, st.y, chart)
    if not np.any(inside):
        return
    mm = winding_class(spec, st.y[inside, 1])
    a = np.abs(st.D[inside]) ** -0.5
    for m in np.unique(mm):
        sup = float(a[mm == m].max())
        m = int(m)
        first.setdefault(m, st.n)
        sup_a[m] = max(sup_a.get(m, 0.0), sup)


def _cone_threshold(inv, gamma):
    """Smallest N such that every tube sample with n - tau >= N lies in the cone."""
    diag = inv.diagnostics
    if not diag.cone_slope:
        diag.n_uns = 0
        return
    slope = np.array(diag.cone_slope)
    age = np.array(diag.cone_age)
    bad = slope > gamma
    diag.tube_first_age = int(age.min())
    diag.n_uns = int(age[bad].max() + 1) if np.any(bad) else 0


def _nonexpansion(inv, n_pairs, seed):
    """Check that distances between sample pairs do not grow backward in time.

    Pairs are adjacent rays at equal slab offset, taken at several end steps
    where they are still close; their distance history is computed by
    geodesic shooting on the universal cover.
    """
    rng = np.random.default_rng(seed)
    model = inv.model
    first = inv.steps[0]
    pos0 = {(int(a), int(b)): k for k, (a, b) in enumerate(zip(first.ray, first.offset))}
    ends = list(range(5, inv.N + 1, 5)) or [inv.N]
    per = max(1, n_pairs // len(ends))
    worst, count = 0.0, 0
    for n_end in ends:
        last = inv.steps[n_end]
        order = np.lexsort((last.ray, last.offset))
        same = last.offset[order[1:]] == last.offset[order[:-1]]
        cand = np.column_stack([order[:-1], order[1:]])[same]
        if len(cand) == 0:
            continue
        d_end = _path_length_bound(model, last.y[cand[:, 0], :2], last.y[cand[:, 1], :2])
        k0 = np.array([pos0[(int(last.ray[i]), int(last.offset[i]))]
                       for i in cand.ravel()]).reshape(-1, 2)
        d_start = _path_length_bound(model, first.y[k0[:, 0], :2], first.y[k0[:, 1], :2])
        # shooting resolves distances to ~1e-13, so keep pairs well above that
        cand = cand[(d_end < 1.5) & (d_start > 1e-4)]
        if len(cand) == 0:
            continue
        pick = cand[rng.choice(len(cand), min(per, len(cand)), replace=False)]
        keys = [((int(last.ray[i]), int(last.offset[i])), (int(last.ray[j]), int(last.offset[j])))
                for i, j in pick]
        hist = []
        for st in inv.steps[:n_end + 1]:
            lookup = {(int(a), int(b)): k for k, (a, b) in enumerate(zip(st.ray, st.offset))}
            ia = np.array([lookup[ka] for ka, _ in keys])
            ib = np.array([lookup[kb] for _, kb in keys])
            hist.append(_pair_distance(model, st.y[ia, :2], st.y[ib, :2]))
        hist = np.array(hist)
        growth_back = (hist[:-1] - 1e-12) / hist[1:]
        worst = max(worst, float(np.max(growth_back)))
        count += len(pick)
    inv.diagnostics.nonexpansion_worst = worst
    inv.diagnostics.nonexpansion_pairs = count


def _pair_distance(model, a, b):
    try:
        return geodesic_distance(model, a, b)
    except IntegrationError:
        return _path_length_bound(model, a, b)


def branch_completeness(model, spec: IncomingWaveSpec, x, M: int, inventory: Optional[Inventory] = None,
                        N: int = 40, n_max: Optional[int] = None) -> int:
    """Number of winding classes |m| <= M covering x."""
    if inventory is None:
        inventory = propagate_all(model, spec, N=N, prune=False)
    return len(inventory.coverage(x, M, n_max=n_max))


@dataclass
class SeparationReport:
    """Pairwise minima over the chart nodes of |grad phi_m - grad phi_m'|_g."""

    classes: list
    n_tilde: np.ndarray
    matrix: np.ndarray
    exponent: float
    C1: float
    rate: float

    def distinct_positive(self):
        off = ~np.eye(len(self.classes), dtype=bool)
        return bool(np.all(self.matrix[off] > 0))


def gradient_separation(model, sheets, n_tilde=None):
    """Gradient separation between winding-class sheets on their common node grid.

    The exponent is fitted to the lower envelope (smallest separation at each
    value of max(n_tilde, n_tilde')); C1 is the constant of the bound
    sep >= C1 exp(-rate * max n_tilde) with rate = sqrt(b0).
    """
    classes = [s.m for s in sheets]
    nt = np.array([(n_tilde or {}).get(s.m, s.n_tilde) for s in sheets], dtype=float)
    f = model.f(sheets[0].r)[:, None]
    k = len(sheets)
    mat = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d = np.sqrt((sheets[i].p_r - sheets[j].p_r) ** 2
                        + ((sheets[i].p_theta - sheets[j].p_theta) / f) ** 2)
            mat[i, j] = mat[j, i] = float(d.min())
    iu = np.triu_indices(k, 1)
    top = np.maximum(nt[:, None], nt[None, :])[iu]
    sep = mat[iu]
    levels = np.unique(top)
    env = np.array([sep[top == v].min() for v in levels])
    exponent = float(-np.polyfit(levels, np.log(env), 1)[0]) if len(levels) > 1 else np.nan
    rate = float(np.sqrt(model.curvature_floor))
    C1 = float(np.min(sep * np.exp(rate * top)))
    return SeparationReport(classes, nt, mat, exponent, C1, rate)


__all__ = ["CausticViolation", "HypothesisViolation", "BranchBudgetExceeded", "Word",
           "LagrangianBranch", "IncomingWaveSpec", "CoverSet", "Cover", "build_cover",
           "incoming_lagrangian", "propagate_step", "propagate_all", "Inventory",
           "branch_completeness", "gradient_separation", "SeparationReport"]
