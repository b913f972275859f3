import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sphere_bank(radius=0.5, center=(0.0, 0.0, 0.0), mode="binary"):
    from qcsg.assembly import PrimitiveBank

    c = np.asarray(center, dtype=np.float64)
    row = [1.0, 1.0, 1.0, *(-2 * c), c @ c - radius ** 2]
    return PrimitiveBank(np.array([row]), np.ones((1, 1)), np.ones(1), mode)


def cube_bank(half=0.5, slope=3.0, center=(0.0, 0.0, 0.0)):
    """One convex made of six flat quadrics (planes) bounding an axis-aligned cube."""
    from qcsg.assembly import PrimitiveBank

    c = np.asarray(center, dtype=np.float64)
    rows = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            r = np.zeros(7)
            r[3 + axis] = sign * slope
            r[6] = -slope * (half + sign * c[axis])
            rows.append(r)
    return PrimitiveBank(np.array(rows), np.ones((6, 1)), np.ones(1), "binary")


_ACCEPTANCE = {}


def record_acceptance(n, passed, detail):
    _ACCEPTANCE[n] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
