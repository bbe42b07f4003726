"""End-to-end acceptance checks, one test per criterion.

Pipeline-backed criteria read the outputs of one full run of the shipped
config; the rest are computed directly. Every test records a PASS/FAIL line
that is printed in the terminal summary.
"""

import json

import numpy as np
import pytest

from neckwave.analysis import bump, nodal_identity_check, nodal_extract, window_area
from neckwave.config import default_config
from neckwave.csvio import read_rows
from neckwave.dynamics import (PhasePoint, neck_splitting, tangent_flow, trajectory,
                               unit_covector)
from neckwave.pipeline import run
from neckwave.pressure import pressure_curve
from neckwave.wkb import FLAT, WaveField, flat_plane_wave

J4 = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [-1, 0, 0, 0], [0, -1, 0, 0]], dtype=float)


@pytest.fixture(scope="module")
def checks(pipeline_output):
    status, out = pipeline_output
    rows = read_rows(out / "checks.csv")
    by_metric = {}
    for r in rows:
        by_metric.setdefault(r["metric"], []).append(r)
    return status, by_metric


@pytest.fixture(scope="module")
def constants(pipeline_output):
    _, out = pipeline_output
    return json.loads((out / "manifest.json").read_text())["constants"]


def _value(checks, metric):
    return float(checks[1][metric][0]["value"])


def _passed(checks, metric):
    return all(r["pass"] == "1" for r in checks[1][metric])


def _record(report, n, label, passed, detail):
    report.append("%s criterion %d: %s (%s)" % ("PASS" if passed else "FAIL", n, label, detail))
    assert passed, detail


def test_criterion_01_conservation(model, acceptance_report):
    rng = np.random.default_rng(0)
    dH = dp = 0.0
    for _ in range(4):
        r, psi = rng.uniform(-3, 3), rng.uniform(0, 2 * np.pi)
        rho = PhasePoint.from_array(unit_covector(model, r, 0.0, psi))
        tr = trajectory(model, rho, 1000.0, n_out=200)
        dH = max(dH, float(np.max(np.abs(tr["H"] - 0.5))))
        dp = max(dp, float(np.max(np.abs(tr["p_theta_drift"]))))
    sym = 0.0
    for _ in range(4):
        r, psi, t = rng.uniform(-3, 3), rng.uniform(0, 2 * np.pi), rng.uniform(1, 10)
        M = tangent_flow(model, PhasePoint.from_array(unit_covector(model, r, 0.0, psi)), t).M
        sym = max(sym, float(np.max(np.abs(M.T @ J4 @ M - J4)) / max(1.0, np.max(np.abs(M)) ** 2)))
    ok = dH <= 1e-9 and dp <= 1e-9 and sym <= 1e-8
    _record(acceptance_report, 1, "conservation",
            ok, "H drift %.1e, p_theta drift %.1e, symplectic defect %.1e" % (dH, dp, sym))


def test_criterion_02_hyperbolicity(model, acceptance_report):
    sp = neck_splitting(model)
    target = np.exp(2 * np.pi)
    ev_err = max(abs(sp.eigenvalues[0] / target - 1), abs(sp.eigenvalues[1] * target - 1))
    ok = abs(sp.lyapunov - 1) <= 1e-3 and ev_err <= 1e-3
    _record(acceptance_report, 2, "neck hyperbolicity", ok,
            "lambda %.6f, eigenvalue rel. error %.1e" % (sp.lyapunov, ev_err))


def test_criterion_03_pressure(model, checks, acceptance_report):
    P = {s: _value(checks, "P(%g)" % s) for s in (0, 0.5, 1)}
    t_list = np.arange(5.0, 61.0, 5.0)
    by_eps = {}
    for eps in default_config().pressure.eps_list:
        by_eps[eps] = np.array([e.P for e in pressure_curve(model, [0.0, 0.5, 1.0], eps, t_list)])
    spread = float(np.max(np.ptp(np.array(list(by_eps.values())), axis=0)))
    ok = (abs(P[0.5] + 0.5) <= 0.05 and abs(P[0]) <= 0.05 and abs(P[1] + 1) <= 0.1
          and spread <= 0.05)
    _record(acceptance_report, 3, "pressure gate", ok,
            "P(0) %.3f, P(1/2) %.3f, P(1) %.3f, eps spread %.1e" % (P[0], P[0.5], P[1], spread))


def test_criterion_04_caustic_free(checks, acceptance_report):
    c_det = _value(checks, "c_det")
    fails = _value(checks, "graph_failures")
    n_uns = _value(checks, "n_uns")
    ok = c_det > 0 and fails == 0 and n_uns <= 10
    _record(acceptance_report, 4, "caustic-free propagation", ok,
            "c_det %.3g, graph failures %d, N_uns %d" % (c_det, fails, n_uns))


def test_criterion_05_gradient_separation(checks, constants, acceptance_report):
    expo = _value(checks, "separation_exponent")
    ok = _passed(checks, "separation_exponent") and expo <= 1.0 and constants["C1"] > 0
    _record(acceptance_report, 5, "phase-gradient separation", ok,
            "exponent %.3f, C1 %.3g" % (expo, constants["C1"]))


def test_criterion_06_symbol_decay(checks, acceptance_report):
    rate = _value(checks, "mass_decay_rate")
    _record(acceptance_report, 6, "class mass decay", rate <= -0.4, "log-rate %.3f" % rate)


def test_criterion_07_residual(checks, acceptance_report):
    slope = _value(checks, "residual_slope")
    change = _value(checks, "refinement_change")
    ok = 1.7 <= slope <= 2.3 and change < 0.10
    _record(acceptance_report, 7, "eigen-equation residual", ok,
            "slope %.3f, refinement change %.3f" % (slope, change))


def test_criterion_08_uniform_bound(checks, acceptance_report):
    s0, s1, s2 = (_value(checks, "C%d_spread" % k) for k in range(3))
    ok = s0 < 2 and s1 < 3 and s2 < 3
    _record(acceptance_report, 8, "uniform sup bound", ok,
            "spreads C0 %.3f, C1 %.3f, C2 %.3f" % (s0, s1, s2))


def test_criterion_09_equidistribution(checks, acceptance_report):
    re, ab = _value(checks, "ball_band_re"), _value(checks, "ball_band_abs")
    ok = re < 10 and ab < 10
    _record(acceptance_report, 9, "small-scale equidistribution", ok,
            "bands Re %.3f, abs %.3f" % (re, ab))


def _flat_wave(h, direction=0.4):
    x = np.arange(0.0, 1.0 + 1e-12, h / 10)
    return WaveField(h, x, x, flat_plane_wave(x, x, h, direction), [0])


def test_criterion_10_nodal_length(checks, acceptance_report):
    spread = _value(checks, "nodal_spread")
    win = (0.1, 0.9, 0.1, 0.9)
    area = window_area(FLAT, win)
    calib = [nodal_extract(FLAT, _flat_wave(h), win).length * h * np.pi / area
             for h in (0.02, 0.01)]
    cal_err = max(abs(c - 1) for c in calib)
    ok = spread < 1.25 and cal_err <= 0.02
    _record(acceptance_report, 10, "nodal length", ok,
            "spread %.3f, flat calibration error %.4f" % (spread, cal_err))


def test_criterion_11_nodal_identity(checks, acceptance_report):
    ratios = [float(r["value"]) for r in
              sum((checks[1]["identity_ratio_%d" % k] for k in range(3)), [])]
    fld = _flat_wave(0.02)
    calib = nodal_identity_check(FLAT, fld, bump(FLAT, fld.r, fld.theta, (0.5, 0.5), 0.3)).ratio
    ok = all(abs(x - 1) <= 0.05 for x in ratios) and abs(calib - 1) <= 0.02
    _record(acceptance_report, 11, "nodal integral identity", ok,
            "ratios %s, cos calibration %.4f" % (", ".join("%.4f" % x for x in ratios), calib))


def test_criterion_12_phase_decay(checks, acceptance_report):
    slope = _value(checks, "decay_slope")
    _record(acceptance_report, 12, "non-stationary phase decay", slope <= -3,
            "slope %.2f" % slope)


def test_criterion_13_branch_completeness(inventory, acceptance_report):
    found = inventory.coverage((0.0, 0.0), 3)
    _record(acceptance_report, 13, "branch completeness", len(found) >= 7,
            "classes %s at N = %d" % (found, inventory.N))


def test_criterion_14_determinism(pipeline_output, tmp_path, acceptance_report):
    status, out = pipeline_output
    status2, _ = run(default_config(), tmp_path)
    names = sorted(p.name for p in out.iterdir() if p.is_file())
    differ = [n for n in names if (out / n).read_bytes() != (tmp_path / n).read_bytes()]
    ok = status == status2 == 0 and not differ and len(names) > 10
    _record(acceptance_report, 14, "determinism", ok,
            "%d files compared, %d differ, exit %d/%d" % (len(names), len(differ), status, status2))
