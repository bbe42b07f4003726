"""Staged experiment runner: geometry, dynamics, pressure, propagation,
assembly and verification, each writing CSV dumps into an output directory.

Stages share a Context that caches the model, the inventory, the class
sheets and the assembled fields.  Each stage can also start from the dumps
of an earlier run (sheets.csv and classes.csv for the assembly and
verification stages).
"""

import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import analysis as an
from .config import ExperimentConfig
from .csvio import read_columns, write_columns, write_rows
from .dynamics import NonHyperbolicError, PhasePoint, neck_point, neck_splitting, trajectory
from .geometry import GeometryError, build_model, check_convexity_hypothesis, geometry_table
from .lagrangian import gradient_separation, propagate_all
from .pressure import pressure_curve, trapped_set_cloud
from .rays import IncomingWaveSpec
from .sheets import Chart, ClassSheet, resolve_sheets
from .wkb import (SheetInterpolant, assemble, class_density, residual_scaling, truncation_for,
                  uniform_grid)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A module failure, tagged with the stage that raised it."""

    def __init__(self, stage, err):
        super().__init__("[%s] %s" % (stage, err))
        self.stage = stage


@dataclass
class CheckRow:
    h: float
    metric: str
    value: float
    bound: str
    passed: bool

    def row(self):
        return (self.h, self.metric, self.value, self.bound, self.passed)


CHECK_HEADER = ("h", "metric", "value", "bound", "pass")


@dataclass
class Context:
    config: ExperimentConfig
    out: Path
    threads: int = 1
    constants: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------ shared objects
    @property
    def model(self):
        if "model" not in self._cache:
            g = self.config.geometry
            try:
                self._cache["model"] = build_model(g.bump, g.r2, g.amplitude, g.eps0)
            except GeometryError as err:
                raise StageError("geometry", "%s (bump=%s, r2=%g, amplitude=%g)"
                                 % (err, g.bump, g.r2, g.amplitude)) from err
        return self._cache["model"]

    @property
    def spec(self):
        w = self.config.wave
        return IncomingWaveSpec(end=w.end, direction=w.direction)

    @property
    def chart(self):
        r_lo, r_hi, t_lo, t_hi = self.config.grid.bounds
        return Chart(r_lo=r_lo, r_hi=r_hi, half_width=max(abs(t_lo), abs(t_hi)))

    def grid_bounds(self, window=None):
        r_lo, r_hi, t_lo, t_hi = window or self.config.grid.bounds
        th = self.spec.theta_in
        return (r_lo, r_hi, th + t_lo, th + t_hi)

    def _n_workers(self, n):
        return max(1, min(self.threads, n))


def stage_geometry(ctx: Context, step=0.05, r_max=10.0):
    model = ctx.model
    write_columns(ctx.out / "geometry.csv", geometry_table(model, r_max, step))
    rep = check_convexity_hypothesis(model, samples=10000, seed=ctx.config.seed)
    ctx.constants.update(c=model.end_offset, b0=model.curvature_floor, eps0=model.eps0)
    return [CheckRow(np.nan, "convexity_worst_margin", rep.worst_margin, "> 0", bool(rep.passed))]


def stage_dynamics(ctx: Context, T=1000.0):
    model = ctx.model
    rows = []
    rho = PhasePoint(1.0, 0.0, -0.6, 0.8 * float(model.f(1.0)))
    tr = trajectory(model, rho, T)
    dH = float(np.max(np.abs(tr["H"] - 0.5)))
    dp = float(np.max(np.abs(tr["p_theta_drift"])))
    rows.append(CheckRow(np.nan, "energy_drift", dH, "<= 1e-9", dH <= 1e-9))
    rows.append(CheckRow(np.nan, "clairaut_drift", dp, "<= 1e-9", dp <= 1e-9))
    if not model.is_degenerate:
        sp = neck_splitting(model)
        ctx.constants.update(lyapunov=sp.lyapunov, period=sp.period)
        rows.append(CheckRow(np.nan, "neck_lyapunov", sp.lyapunov, "reported", True))
    return rows


def stage_pressure(ctx: Context):
    model = ctx.model
    pc = ctx.config.pressure
    t_list = np.arange(5.0, pc.t_max + 1e-9, 5.0)
    try:
        if model.is_degenerate:
            raise NonHyperbolicError("trapped set not hyperbolic: flat neck (f'' = 0)")
        neck_splitting(model)
        cloud = trapped_set_cloud(model, pc.eps / 4.0)
        ests = pressure_curve(model, [0.0, 0.5, 1.0], pc.eps, t_list, cloud=cloud,
                              seed=ctx.config.seed)
    except NonHyperbolicError as err:
        raise StageError("pressure", "pressure gate: %s" % err) from err
    write_columns(ctx.out / "pressure.csv",
                  {"t": t_list, **{"logZ_s%g" % e.s: e.logZ for e in ests}})
    half = ests[1]
    gate = half.P + half.residual < -0.1
    ctx.constants.update(P_half=half.P, P_zero=ests[0].P, P_one=ests[2].P,
                         P_half_residual=half.residual)
    rows = [CheckRow(np.nan, "P(%g)" % e.s, e.P, "fit residual %.2e" % e.residual, True)
            for e in ests]
    rows.append(CheckRow(np.nan, "pressure_gate", half.P + half.residual, "< -0.1", bool(gate)))
    if not gate:
        raise StageError("pressure", "pressure gate failed: P(1/2) = %.3f" % half.P)
    return rows


def stage_propagate(ctx: Context):
    model, spec = ctx.model, ctx.spec
    pc = ctx.config.propagation
    ch = ctx.chart
    inv = propagate_all(model, spec, N=pc.N, amp_floor=pc.amp_floor, gamma_uns=pc.gamma_uns,
                        branch_budget=pc.branch_budget, chart=ch.as_tuple(),
                        seed=ctx.config.seed)
    ctx._cache["inventory"] = inv
    write_rows(ctx.out / "manifest_branches.csv",
               ("class_id", "m", "n_tilde", "word", "r_min", "r_max", "theta_min",
                "theta_max", "sup_a"), inv.manifest())
    rate = inv.mass_decay_rate()
    d = inv.diagnostics
    ctx.constants.update(c_det=d.c_det, n_uns=d.n_uns, mass_rate=rate,
                         n_branches=inv.n_branches())
    h_min = min(ctx.config.wave.h_list)
    trunc = truncation_for(h_min, inv.class_first_step, inv.class_sup_amplitude, rate)
    sheets, _ = resolve_sheets(model, spec, trunc.classes, chart=ch,
                               n_tilde={m: inv.class_first_step[m] for m in trunc.classes})
    ctx._cache["sheets"] = sheets
    _dump_sheets(ctx.out, sheets)
    write_columns(ctx.out / "classes.csv", {
        "m": sorted(inv.class_first_step),
        "n_tilde": [inv.class_first_step[m] for m in sorted(inv.class_first_step)],
        "sup_a": [inv.class_sup_amplitude[m] for m in sorted(inv.class_first_step)],
    })
    sep = gradient_separation(model, sheets)
    ctx.constants.update(C1=sep.C1, separation_exponent=sep.exponent)
    return [
        CheckRow(np.nan, "c_det", d.c_det, "> 0", d.c_det > 0),
        CheckRow(np.nan, "graph_failures", d.graph_failures, "== 0", d.graph_failures == 0),
        CheckRow(np.nan, "n_uns", d.n_uns, "<= 10", d.n_uns <= 10),
        CheckRow(np.nan, "mass_decay_rate", rate, "<= -0.4", rate <= -0.4),
        CheckRow(np.nan, "separation_exponent", sep.exponent, "<= sqrt(b0)",
                 sep.exponent <= sep.rate and sep.distinct_positive()),
    ]


def _dump_sheets(out, sheets):
    cols = {k: [] for k in ("m", "n_tilde", "r", "theta", "phi", "p_r", "p_theta", "phi_rt", "a")}
    for s in sheets:
        R, T = np.meshgrid(s.r, s.theta, indexing="ij")
        n = R.size
        cols["m"].append(np.full(n, s.m))
        cols["n_tilde"].append(np.full(n, s.n_tilde))
        cols["r"].append(R.ravel())
        cols["theta"].append(T.ravel())
        for k in ("phi", "p_r", "p_theta", "phi_rt", "a"):
            cols[k].append(getattr(s, k).ravel())
    write_columns(out / "sheets.csv", {k: np.concatenate(v) for k, v in cols.items()})


def load_sheets(path):
    d = read_columns(path)
    out = []
    for m in np.unique(d["m"]):
        sel = d["m"] == m
        r = np.unique(d["r"][sel])
        th = np.unique(d["theta"][sel])
        shape = (len(r), len(th))
        fields = {k: d[k][sel].reshape(shape) for k in ("phi", "p_r", "p_theta", "phi_rt", "a")}
        out.append(ClassSheet(int(m), int(d["n_tilde"][sel][0]), r, th, **fields))
    return out


def _classes_table(ctx):
    if "inventory" in ctx._cache:
        inv = ctx._cache["inventory"]
        return inv.class_first_step, inv.class_sup_amplitude, inv.mass_decay_rate()
    d = read_columns(ctx.out / "classes.csv")
    nt = {int(m): int(n) for m, n in zip(d["m"], d["n_tilde"])}
    sup = {int(m): float(a) for m, a in zip(d["m"], d["sup_a"])}
    keys = sorted(set(nt.values()))
    mass = [sum(sup[m] for m in nt if nt[m] == k) for k in keys]
    rate = float(np.polyfit(keys, np.log(mass), 1)[0])
    return nt, sup, rate


def sheets_of(ctx: Context):
    if "sheets" not in ctx._cache:
        path = ctx.out / "sheets.csv"
        if path.exists():
            ctx._cache["sheets"] = load_sheets(path)
        else:
            stage_propagate(ctx)
    return ctx._cache["sheets"]


def field_for(ctx: Context, h, window=None, cells_per_h=None):
    key = ("field", float(h), tuple(window or ()), cells_per_h)
    if key not in ctx._cache:
        sheets = sheets_of(ctx)
        nt, sup, rate = _classes_table(ctx)
        trunc = truncation_for(h, nt, sup, rate)
        R, T = uniform_grid(ctx.model, ctx.grid_bounds(window), h,
                            cells_per_h or ctx.config.grid.cells_per_h)
        ctx._cache[key] = assemble(ctx.model, sheets, h, R, T, truncation=trunc)
    return ctx._cache[key]


def stage_assemble(ctx: Context, h_list=None, dump=True):
    h_list = h_list or ctx.config.wave.h_list
    with ThreadPoolExecutor(ctx._n_workers(len(h_list))) as ex:
        fields = list(ex.map(lambda h: field_for(ctx, h), h_list))
    rows = []
    for fld in fields:
        if dump:
            R, T = fld.mesh()
            write_columns(ctx.out / ("field_h%g.csv" % fld.h),
                          {"x_r": R, "x_theta": T, "Re": fld.values.real, "Im": fld.values.imag})
        write_rows(ctx.out / ("field_h%g_manifest.csv" % fld.h), ("key", "value"), [
            ("h", fld.h), ("classes", " ".join(str(m) for m in fld.classes)),
            ("truncation_n", fld.truncation.get("n_max")),
            ("discarded_mass_bound", fld.truncation.get("discarded_bound")),
            ("nr", len(fld.r)), ("ntheta", len(fld.theta))])
        rows.append(CheckRow(fld.h, "sup_abs_E", float(np.max(np.abs(fld.values))), "finite", True))
    return rows


# ---------------------------------------------------------------- verification

def _chi(ctx, fld):
    R, T = fld.mesh()
    return ctx.chart.chi(ctx.spec, R, T)


def verify_residual(ctx: Context):
    v = ctx.config.verify
    r_lo, r_hi, t_lo, t_hi = ctx.config.grid.bounds
    win = (0.5 * r_lo, 0.5 * r_hi, 0.5 * t_lo, 0.5 * t_hi)
    hs = ctx.config.wave.h_list
    fields = [field_for(ctx, h, win) for h in hs]
    fine = field_for(ctx, min(hs), win, 2 * ctx.config.grid.cells_per_h)
    rep = residual_scaling(ctx.model, fields, fine)
    lo, hi = v.residual_slope
    rows = [CheckRow(h, "residual", r, "reported", True) for h, r in zip(rep.h, rep.residual)]
    rows.append(CheckRow(np.nan, "residual_slope", rep.slope, "[%g, %g]" % (lo, hi),
                         lo <= rep.slope <= hi))
    rows.append(CheckRow(min(hs), "refinement_change", rep.refinement_change,
                         "< %g" % v.refinement_tol, rep.refinement_change < v.refinement_tol))
    return rows


def verify_supnorm(ctx: Context):
    v = ctx.config.verify
    fields = [field_for(ctx, h) for h in ctx.config.wave.h_list]
    weights = [_chi(ctx, f) for f in fields]
    rows = []
    for ell, bound in ((0, v.sup_spread), (1, v.cl_spread), (2, v.cl_spread)):
        tab = an.supnorm_scan(ctx.model, fields, ell, weights)
        rows += [CheckRow(h, "C%d_norm_times_h%d" % (ell, ell), x, "reported", True)
                 for h, x in zip(tab.h, tab.normalized)]
        rows.append(CheckRow(np.nan, "C%d_spread" % ell, tab.spread, "< %g" % bound,
                             tab.spread < bound))
    return rows


def verify_equidist(ctx: Context):
    v = ctx.config.verify
    fields = [field_for(ctx, h) for h in ctx.config.wave.h_list]
    centers = an.random_plateau_centers(ctx.spec, ctx.chart, v.centers, ctx.config.seed)
    rows = []
    for real, name in ((True, "re"), (False, "abs")):
        rep = an.equidistribution(ctx.model, fields, centers, v.ball_factor, real)
        ctx.constants.update({"C1_%s" % name: rep.c1, "C2_%s" % name: rep.c2})
        rows.append(CheckRow(np.nan, "ball_band_%s" % name, rep.band, "< %g" % v.band,
                             rep.band < v.band))
    return rows


def verify_nodal(ctx: Context):
    v = ctx.config.verify
    fields = [field_for(ctx, h) for h in ctx.config.wave.h_list]
    win = ctx.grid_bounds(v.nodal_window)
    reps = [an.nodal_extract(ctx.model, f, win) for f in fields]
    vals, spread = an.nodal_scaling(reps)
    rows = [CheckRow(r.h, "h_times_length", x, "reported", True) for r, x in zip(reps, vals)]
    rows.append(CheckRow(np.nan, "nodal_spread", spread, "< %g" % v.nodal_spread,
                         spread < v.nodal_spread))
    return rows


def identity_test_functions(ctx, fld):
    th = ctx.spec.theta_in
    specs = [((0.0, th), 0.15), ((0.2, th + 0.1), 0.12), ((-0.25, th - 0.1), 0.2)]
    return [an.bump(ctx.model, fld.r, fld.theta, c, rad) for c, rad in specs]


def verify_nodal_identity(ctx: Context):
    v = ctx.config.verify
    fld = field_for(ctx, v.identity_h)
    rows = []
    for k, tf in enumerate(identity_test_functions(ctx, fld)):
        res = an.nodal_identity_check(ctx.model, fld, tf)
        rows.append(CheckRow(fld.h, "identity_ratio_%d" % k, res.ratio, "1 +- %g" % v.identity_tol,
                             abs(res.ratio - 1) <= v.identity_tol))
    return rows


def verify_phase_decay(ctx: Context):
    v = ctx.config.verify
    sheets = sheets_of(ctx)
    s0 = [s for s in sheets if s.m == 0][0]
    itp = SheetInterpolant(s0)
    hs = ctx.config.wave.h_list
    R, T = uniform_grid(ctx.model, ctx.grid_bounds(), min(hs))
    th = ctx.spec.theta_in
    a = an.bump(ctx.model, R, T, (0.0, th), 0.4)
    phi = itp.phase(R, T)
    f = ctx.model.f(R)[:, None]
    grad = np.sqrt(itp.phase(R, T, dr=1) ** 2 + (itp.phase(R, T, dt=1) / f) ** 2)
    dA = f * (R[1] - R[0]) * (T[1] - T[0])
    rep = an.oscillatory_decay(a * dA, phi, grad, hs, 1.0)
    rows = [CheckRow(h, "abs_I", x, "reported", True) for h, x in zip(rep.h, rep.values)]
    rows.append(CheckRow(np.nan, "decay_slope", rep.slope, "<= %g" % v.decay_slope,
                         rep.slope <= v.decay_slope))
    return rows


def verify_density(ctx: Context):
    fields = [field_for(ctx, h) for h in ctx.config.wave.h_list]
    sheets = sheets_of(ctx)
    dens = [class_density(sheets, f.r, f.theta, f.classes) for f in fields]
    ch = ctx.chart
    win = ctx.grid_bounds((-ch.plateau_r, ch.plateau_r, -ch.plateau_theta, ch.plateau_theta))
    rep = an.density_consistency(ctx.model, fields, dens, win)
    ctx.constants.update(density_constant=rep.constant)
    return [CheckRow(h, "density_error", e, "<= C sqrt(h)", True) for h, e in zip(rep.h, rep.errors)]


VERIFIERS = {"residual": verify_residual, "supnorm": verify_supnorm, "equidist": verify_equidist,
             "nodal": verify_nodal, "nodal-identity": verify_nodal_identity, "phase-decay": verify_phase_decay}


def run_check(ctx: Context, name):
    t0 = time.perf_counter()
    try:
        rows = VERIFIERS[name](ctx)
        log.info("check %s done in %.1f s", name, time.perf_counter() - t0)
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err
    write_rows(ctx.out / ("verify_%s.csv" % name), CHECK_HEADER, [r.row() for r in rows])
    return rows


def run_stage(name, fn, ctx):
    t0 = time.perf_counter()
    try:
        rows = fn(ctx)
        log.info("stage %s done in %.1f s", name, time.perf_counter() - t0)
        return rows
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err


def run(config: ExperimentConfig, out=None, threads=1, dump_fields=False):
    """Full pipeline. Returns (exit status, context)."""
    ctx = Context(config, out or config.output, threads)
    np.random.seed(config.seed)
    rows = []
    stages = [("geometry", stage_geometry), ("dynamics", stage_dynamics),
              ("pressure", stage_pressure), ("propagate", stage_propagate)]
    for name, fn in stages:
        rows += [(name,) + r.row() for r in run_stage(name, fn, ctx)]
    rows += [("assemble",) + r.row()
             for r in run_stage("assemble", lambda c: stage_assemble(c, dump=dump_fields), ctx)]
    for name in config.verify.enabled:
        rows += [(name,) + r.row() for r in run_check(ctx, name)]
    write_rows(ctx.out / "checks.csv", ("stage",) + CHECK_HEADER, rows)
    failed = [r for r in rows if not r[-1]]
    write_manifest(ctx, failed)
    return (1 if failed else 0), ctx


def write_manifest(ctx, failed=()):
    info = {
        "config_sha256": ctx.config.digest(),
        "config": ctx.config.to_dict(),
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "constants": {k: (float(v) if np.isscalar(v) else v) for k, v in sorted(ctx.constants.items())},
        "failed_checks": [list(map(str, r)) for r in failed],
    }
    with open(ctx.out / "manifest.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
    return info
