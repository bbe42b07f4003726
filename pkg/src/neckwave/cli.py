"""Command-line entry point.

    neckwave [--config PATH] [--out DIR] [--threads N] [--seed S] <command> ...

Commands: geometry-report, flow, pressure, propagate, assemble,
verify {supnorm,equidist,nodal,nodal-identity,phase-decay,residual}, run.
"""

import argparse
import dataclasses
import logging
import sys

import numpy as np

from . import pipeline as pl
from .config import CHECKS, ConfigError, default_config, load_config
from .csvio import write_columns, write_rows
from .dynamics import IntegrationError, PhasePoint, trajectory
from .pressure import pressure
from .wkb import assemble, truncation_for


def _parse_grid(text):
    try:
        parts = [p.split(":") for p in text.split(",")]
        (r0, r1, nr), (t0, t1, nt) = parts
        return (np.linspace(float(r0), float(r1), int(nr)),
                np.linspace(float(t0), float(t1), int(nt)))
    except ValueError as err:
        raise argparse.ArgumentTypeError("grid must read rmin:rmax:nr,tmin:tmax:nt") from err


def _floats(text, n):
    vals = [float(x) for x in text.split(",")]
    if len(vals) != n:
        raise argparse.ArgumentTypeError("expected %d comma-separated numbers" % n)
    return vals


def build_parser():
    p = argparse.ArgumentParser(prog="neckwave", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML experiment config (default: shipped config)")
    p.add_argument("--out", help="output directory (default: config output)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("geometry-report", help="profile table r, f, f', f'', K, b")
    g.add_argument("--step", type=float, default=0.05)
    g.add_argument("--rmax", type=float, default=10.0)

    f = sub.add_parser("flow", help="sampled geodesic with conservation columns")
    f.add_argument("--initial", required=True, type=lambda s: _floats(s, 4),
                   help="r,theta,p_r,p_theta")
    f.add_argument("--time", type=float, required=True)
    f.add_argument("--tol", type=float, default=1e-12)
    f.add_argument("--samples", type=int, default=200)

    pr = sub.add_parser("pressure", help="log Z_t and the fitted pressure at one s")
    pr.add_argument("--s", type=float, default=0.5)
    pr.add_argument("--eps", type=float, default=None)
    pr.add_argument("--tmax", type=float, default=None)

    pg = sub.add_parser("propagate", help="branch inventory and class sheets")
    pg.add_argument("--direction", type=float)
    pg.add_argument("--steps", type=int)
    pg.add_argument("--amp-floor", type=float)

    a = sub.add_parser("assemble", help="field on a grid for one h")
    a.add_argument("--h", type=float, required=True)
    a.add_argument("--grid", type=_parse_grid,
                   help="rmin:rmax:nr,tmin:tmax:nt with absolute angles (default: config bounds)")
    a.add_argument("--direction", type=float)

    v = sub.add_parser("verify", help="one verification check")
    v.add_argument("check", choices=CHECKS)

    sub.add_parser("run", help="full pipeline")
    return p


def _config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    direction = getattr(args, "direction", None)
    if direction is not None:
        cfg.wave = dataclasses.replace(cfg.wave, direction=direction)
    if getattr(args, "steps", None) is not None:
        cfg.propagation = dataclasses.replace(cfg.propagation, N=args.steps)
    if getattr(args, "amp_floor", None) is not None:
        cfg.propagation = dataclasses.replace(cfg.propagation, amp_floor=args.amp_floor)
    return cfg.validate()


def _print_rows(rows):
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        print("%-6s h=%-6s %-28s %-14.6g %s" % (status, r.h, r.metric, r.value, r.bound))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
    except (ConfigError, OSError, TypeError) as err:
        print("config error: %s" % err, file=sys.stderr)
        return 2
    ctx = pl.Context(cfg, args.out or cfg.output, args.threads)
    try:
        return _dispatch(args, ctx)
    except pl.StageError as err:
        print("error: %s" % err, file=sys.stderr)
        return 1
    except IntegrationError as err:
        print("error: [dynamics] %s" % err, file=sys.stderr)
        return 1


def _dispatch(args, ctx):
    cmd = args.command
    if cmd == "geometry-report":
        rows = pl.run_stage("geometry", lambda c: pl.stage_geometry(c, args.step, args.rmax), ctx)
        _print_rows(rows)
        return 0 if all(r.passed for r in rows) else 1
    if cmd == "flow":
        rho = PhasePoint(*args.initial)
        try:
            tr = trajectory(ctx.model, rho, args.time, tol=args.tol,
                            n_out=max(1, args.samples - 1))
        except ValueError as err:
            raise pl.StageError("dynamics", "%s (initial=%s)" % (err, args.initial)) from err
        Y = tr["states"]
        write_columns(ctx.out / "flow.csv", {"t": tr["t"], "r": Y[:, 0], "theta": Y[:, 1],
                                             "p_r": Y[:, 2], "p_theta": Y[:, 3], "H": tr["H"],
                                             "p_theta_drift": tr["p_theta_drift"]})
        print("max |H - 1/2| = %.3e, max |p_theta drift| = %.3e"
              % (np.max(np.abs(tr["H"] - 0.5)), np.max(np.abs(tr["p_theta_drift"]))))
        return 0
    if cmd == "pressure":
        pc = ctx.config.pressure
        eps = args.eps or pc.eps
        tmax = args.tmax or pc.t_max
        t_list = np.arange(5.0, tmax + 1e-9, 5.0)
        try:
            est = pressure(ctx.model, args.s, eps, t_list, seed=ctx.config.seed)
        except Exception as err:
            raise pl.StageError("pressure", "pressure gate: %s" % err) from err
        write_columns(ctx.out / ("pressure_s%g.csv" % args.s), {"t": est.t_list, "logZ": est.logZ})
        gate = est.P + est.residual < -0.1
        write_rows(ctx.out / ("pressure_s%g_summary.csv" % args.s), ("s", "P", "residual", "gate"),
                   [(est.s, est.P, est.residual, gate)])
        print("s=%g P=%.6f residual=%.2e gate=%s" % (est.s, est.P, est.residual, gate))
        return 0
    if cmd == "propagate":
        _print_rows(pl.run_stage("propagate", pl.stage_propagate, ctx))
        pl.write_manifest(ctx)
        return 0
    if cmd == "assemble":
        if args.grid is None:
            rows = pl.run_stage("assemble", lambda c: pl.stage_assemble(c, [args.h]), ctx)
            _print_rows(rows)
            return 0
        r, theta = args.grid
        sheets = pl.sheets_of(ctx)
        nt, sup, rate = pl._classes_table(ctx)
        trunc = truncation_for(args.h, nt, sup, rate)
        fld = assemble(ctx.model, sheets, args.h, r, theta, truncation=trunc,
                       cells_per_h=ctx.config.grid.cells_per_h)
        R, T = fld.mesh()
        write_columns(ctx.out / ("field_h%g.csv" % fld.h),
                      {"x_r": R, "x_theta": T, "Re": fld.values.real, "Im": fld.values.imag})
        write_rows(ctx.out / ("field_h%g_manifest.csv" % fld.h), ("key", "value"), [
            ("h", fld.h), ("classes", " ".join(str(m) for m in fld.classes)),
            ("truncation_n", trunc.n_max), ("discarded_mass_bound", trunc.discarded_bound)])
        print("h=%g classes=%s truncation n<=%d discarded bound %.2e"
              % (fld.h, fld.classes, trunc.n_max, trunc.discarded_bound))
        return 0
    if cmd == "verify":
        rows = pl.run_check(ctx, args.check)
        _print_rows(rows)
        return 0 if all(r.passed for r in rows) else 1
    if cmd == "run":
        status, ctx = pl.run(ctx.config, ctx.out, ctx.threads)
        print("run finished with status %d; outputs in %s" % (status, ctx.out))
        return status
    raise AssertionError(cmd)


if __name__ == "__main__":
    sys.exit(main())
