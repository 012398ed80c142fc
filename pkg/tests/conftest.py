import warnings

import numpy as np
import pytest

from gingr.geometry import TriangleMesh

_ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    """Store and print one PASS/FAIL line for an acceptance criterion."""
    line = f"acceptance {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_rank_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="requested rank", category=RuntimeWarning)
        yield


def grid_mesh(nx, ny, spacing=1.0, jitter=0.0, seed=0):
    """Planar triangulated grid in the z=0 plane (optionally jittered in z)."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    pts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    if jitter:
        pts[:, 2] = jitter * np.random.default_rng(seed).standard_normal(len(pts))
    tri = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = i * ny + j, (i + 1) * ny + j, (i + 1) * ny + j + 1, i * ny + j + 1
            tri += [(a, b, c), (a, c, d)]
    return TriangleMesh(pts, np.array(tri))


def tetrahedron():
    pts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    tri = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(pts, tri)
