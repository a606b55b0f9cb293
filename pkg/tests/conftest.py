import numpy as np
import pytest

from lorasmc.model import LowRankRNN, PiecewiseLinearSpec
from lorasmc.observations import ObservationHead


def random_model(rng, N=8, R=2, D=1, obs="gaussian", n_obs=None, n_inputs=0, a=0.9,
                 sigma_z=0.05, sigma_y=0.1, scale=1.0):
    n_obs = N if n_obs is None else n_obs
    M = rng.uniform(-1, 1, (N, R)) * scale
    Nt = rng.uniform(-1, 1, (N, R)) / N * scale
    if D == 1:
        act = PiecewiseLinearSpec.relu(rng.uniform(-1, 1, N))
    else:
        act = PiecewiseLinearSpec(rng.choice([-1.0, 1.0], (N, D)) * rng.uniform(0.5, 1.5, (N, D)),
                                  np.sort(rng.uniform(-1, 1, (N, D)), axis=1))
    if obs == "gaussian":
        head = ObservationHead.gaussian(n_obs, sigma_y)
    else:
        head = ObservationHead.poisson(n_obs, gain=1.0, bias=0.5)
    H = rng.uniform(-1, 1, (N, n_inputs)) if n_inputs else None
    S = sigma_z * np.eye(R)
    return LowRankRNN(M, Nt, a, act, S, np.zeros(R), np.eye(R), head, 1.0, H)


def scalar_net():
    """dz/dt = -z + 2 relu(z - 1): fixed points at 0 and 2 (tau = 10)."""
    return LowRankRNN(np.array([[1.0]]), np.array([[0.2]]), 0.9, PiecewiseLinearSpec.relu([1.0]),
                      np.array([[0.01]]), np.zeros(1), np.eye(1), ObservationHead.gaussian(1, 0.01))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run:
# number -> [passed (None until run), detail strings]
ACCEPTANCE = {}


def note(n, text):
    ACCEPTANCE.setdefault(n, [None, []])[1].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        entry = ACCEPTANCE.setdefault(mark.args[0], [None, []])
        entry[0] = rep.passed if entry[0] is None else (entry[0] and rep.passed)
        if rep.failed:
            crash = getattr(rep.longrepr, "reprcrash", None)
            entry[1].append(f"{item.name} failed: {crash.message.splitlines()[0] if crash else rep.when}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {n}: {status}  " + "; ".join(detail))
