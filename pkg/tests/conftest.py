import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bayesdid.data import DiDSample

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# (criterion number, title, passed, detail) rows filled in by test_acceptance
ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo runs that take minutes")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")


def make_sample(rng, n=40, p=2, shift=1.0):
    """Small sample with a smooth control trend and roughly balanced arms."""
    x = rng.normal(size=(n, p))
    d = (rng.random(n) < 0.4).astype(int)
    d[:2] = [1, 0]
    d[2] = 0
    dy = 1.0 + np.sin(x[:, 0]) + shift * d + 0.3 * rng.normal(size=n)
    return DiDSample(dy=dy, d=d, x=x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_sample(rng):
    return make_sample(rng)
