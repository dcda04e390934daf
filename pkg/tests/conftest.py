import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpadapter.exact_gp import TimeSeries
from gpadapter.kernel import GpParams

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("default")


def central_diff(fn, x, h=1e-6):
    """Central finite-difference Jacobian of ``fn`` at the flat vector ``x``.

    Returns an array of shape ``(x.size,) + fn(x).shape``.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_series(rng, n, T=1.0, label=None):
    t = np.sort(rng.uniform(0.0, T, n))
    v = np.sin(2 * np.pi * t / T) + 0.3 * rng.standard_normal(n)
    return TimeSeries(t, v, label)


def random_params(rng, T=1.0):
    """Hyperparameters with a length scale of 5-20% of the window."""
    length = T * rng.uniform(0.05, 0.2)
    return GpParams.from_natural(rng.uniform(0.5, 2.0), 1.0 / (2 * length * length), rng.uniform(0.05, 0.3))


def random_spd(rng, d, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), d))
    return (q * lam) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_REPORT_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Collects one (criterion, passed, detail) line per acceptance check."""
    lines = request.config.stash.setdefault(_REPORT_KEY, [])
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
