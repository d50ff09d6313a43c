import numpy as np
import pytest

from strom.pde_fom import fom_solve, make_problem_1d
from strom.pod import snapshots_from_trajectories
from strom.uq_mc import distribution_1d, sample_parameters


@pytest.fixture(scope="session")
def desk_ivp():
    """Desk-scale 1D problem: N_s = 63, N_t = 100."""
    return make_problem_1d(63, 0.01, 1.0)


@pytest.fixture(scope="session")
def dist1d():
    return distribution_1d()


@pytest.fixture(scope="session")
def desk_training(desk_ivp, dist1d):
    mus = sample_parameters(dist1d, 20, 0)
    return [fom_solve(desk_ivp, mu) for mu in mus]


@pytest.fixture(scope="session")
def desk_snapshots(desk_training):
    return (snapshots_from_trajectories(desk_training, "spatial"),
            snapshots_from_trajectories(desk_training, "spacetime"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        num = int(name.split("_")[2])
        detail = next((ln.split(None, 3)[-1] for ln in report.capstdout.splitlines()
                       if ln.startswith("criterion")), "")
        if report.outcome == "skipped":
            status = "SKIP"
        else:
            status = "PASS" if report.outcome == "passed" else "FAIL"
        if status == "FAIL" and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:200]
        _CRITERIA[num] = f"criterion {num:2d}: {status}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[num])
