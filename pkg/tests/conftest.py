import numpy as np
import pytest

from dingo import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per importable kernel backend."""
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_symmetric(rng, n, rank=None, spread=1.0):
    """Random symmetric matrix with ``rank`` nonzero eigenvalues of either sign."""
    rank = n if rank is None else rank
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.zeros(n)
    eig[:rank] = rng.choice([-1.0, 1.0], rank) * np.geomspace(1.0, spread, rank)
    S = (Q * eig) @ Q.T
    return 0.5 * (S + S.T)


# --- acceptance reporting ---------------------------------------------------

_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n = mark.args[0]
    ok = call.excinfo is None
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(n)
    if prev is not None:
        ok = ok and prev[0]
        detail = "; ".join(x for x in (prev[1], detail) if x)
    _CRITERIA[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
