import numpy as np
import pytest

from neckwave.config import default_config
from neckwave.geometry import build_model
from neckwave.lagrangian import propagate_all
from neckwave.pipeline import run
from neckwave.rays import IncomingWaveSpec
from neckwave.sheets import Chart, resolve_sheets
from neckwave.wkb import assemble, truncation_for, uniform_grid

H_LIST = (0.05, 0.02, 0.01)


@pytest.fixture(scope="session")
def model():
    return build_model()


@pytest.fixture(scope="session")
def spec():
    return IncomingWaveSpec()


@pytest.fixture(scope="session")
def chart():
    return Chart()


@pytest.fixture(scope="session")
def inventory(model, spec):
    return propagate_all(model, spec, N=40)


@pytest.fixture(scope="session")
def truncations(inventory):
    rate = inventory.mass_decay_rate()
    return {h: truncation_for(h, inventory.class_first_step, inventory.class_sup_amplitude, rate)
            for h in H_LIST}


@pytest.fixture(scope="session")
def sheets(model, spec, chart, inventory, truncations):
    classes = truncations[min(H_LIST)].classes
    nt = {m: inventory.class_first_step[m] for m in classes}
    out, _ = resolve_sheets(model, spec, classes, chart=chart, n_tilde=nt)
    return out


@pytest.fixture(scope="session")
def chart_bounds(spec, chart):
    th = spec.theta_in
    return (chart.r_lo, chart.r_hi, th - chart.half_width, th + chart.half_width)


@pytest.fixture(scope="session")
def fields(model, sheets, truncations, chart_bounds):
    out = []
    for h in H_LIST:
        R, T = uniform_grid(model, chart_bounds, h)
        out.append(assemble(model, sheets, h, R, T, truncation=truncations[h]))
    return out


@pytest.fixture(scope="session")
def chi_weights(fields, spec, chart):
    out = []
    for f in fields:
        R, T = f.mesh()
        out.append(chart.chi(spec, R, T))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def pipeline_output(tmp_path_factory):
    """Output directory of one full run of the shipped config, with its exit status."""
    out = tmp_path_factory.mktemp("run_a")
    status, _ = run(default_config(), out)
    return status, out


@pytest.fixture(scope="session")
def acceptance_report(request):
    return request.config._acceptance_lines


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
