import numpy as np
import pytest

from intsdr.data import make_dataset


def cox_de_boor(knots, degree, j, u):
    """Textbook recursive B-spline, right-continuous, closed at the last knot."""
    t = knots
    if degree == 0:
        if t[j] <= u < t[j + 1]:
            return 1.0
        if u == t[-1] and t[j] < t[j + 1] == t[-1]:
            return 1.0
        return 0.0
    out = 0.0
    if t[j + degree] > t[j]:
        out += (u - t[j]) / (t[j + degree] - t[j]) * cox_de_boor(t, degree - 1, j, u)
    if t[j + degree + 1] > t[j + 1]:
        out += (t[j + degree + 1] - u) / (t[j + degree + 1] - t[j + 1]) * cox_de_boor(t, degree - 1, j + 1, u)
    return out


def oracle_basis(spec, u):
    return np.array([cox_de_boor(spec.knots, spec.degree, j, float(u)) for j in range(spec.d)])


def angle_deg(b, b0):
    b, b0 = np.ravel(b), np.ravel(b0)
    c = abs(b @ b0) / (np.linalg.norm(b) * np.linalg.norm(b0))
    return float(np.degrees(np.arccos(min(1.0, c))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_discrete(rng):
    n, p = 120, 3
    X = rng.standard_normal((n, p))
    A = np.tile([1, 2, 3], n // 3)
    Y = X[:, 0] * (A - 2) + 0.1 * rng.standard_normal(n)
    return make_dataset(X, A, Y)


ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Print and keep one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
