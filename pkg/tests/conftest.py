import dataclasses

import numpy as np
import pytest

from fbsde_newton import DerivativeBounds, FbsdeProblem, case_noise, get_case, oracle_solution

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, text = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[number] = (report.passed, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, text, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number}: {text}"
        terminalreporter.write_line(f"{line} | {detail}" if detail else line)


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to an acceptance criterion."""
    return lambda text: record_property("detail", text)


def zeros(shape):
    """Zero coefficient of per-path ``shape``; the state is ``x`` (first or second argument)."""
    return lambda *args: np.zeros((args[0 if len(args) == 1 else 1].shape[0],) + shape)


def scalar_problem(drift=None, drift_jac=None, diffusion=None, diffusion_jac=None,
                   driver=None, driver_jac_y=None, terminal=None, terminal_jac=None,
                   bounds=DerivativeBounds(0.0, 0.0, 0.0, 0.0), x0=0.0, horizon=1.0,
                   name="custom"):
    """A d = m = k = 1 problem; unspecified coefficients are identically zero."""
    return FbsdeProblem(
        d=1, m=1, k=1, x0=np.array([x0]), horizon=horizon,
        drift=drift or zeros((1,)),
        diffusion=diffusion or zeros((1, 1)),
        driver=driver or zeros((1,)),
        terminal=terminal or zeros((1,)),
        drift_jac=drift_jac or zeros((1, 1)),
        diffusion_jac=diffusion_jac or zeros((1, 1, 1)),
        driver_jac_x=zeros((1, 1)),
        driver_jac_y=driver_jac_y or zeros((1, 1)),
        driver_jac_z=zeros((1, 1, 1)),
        terminal_jac=terminal_jac or zeros((1, 1)),
        bounds=bounds, name=name,
    )


def with_coefficients(problem, **changes):
    return dataclasses.replace(problem, **changes)


@pytest.fixture(scope="session")
def nl_setup():
    """P-NL at the acceptance resolution together with its fine-grid reference."""
    case = get_case("P-NL")
    grid = case.problem.grid(100)
    noise = case_noise(case, 42, 100, 5000)
    return case, grid, noise, oracle_solution(case, grid, noise)


@pytest.fixture(scope="session")
def sde_setup():
    case = get_case("P-SDE")
    grid = case.problem.grid(100)
    noise = case_noise(case, 42, 100, 5000)
    return case, grid, noise, oracle_solution(case, grid, noise)


def analytic_setup(case_id, steps=100, paths=10_000, seed=42):
    case = get_case(case_id)
    grid = case.problem.grid(steps)
    noise = case_noise(case, seed, steps, paths)
    return case, grid, noise, oracle_solution(case, grid, noise)
