import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skelfield.fields import Skeleton
from skelfield.geometry import Mesh
from skelfield.synth import box_mesh

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def icosphere(radius: float = 0.4, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Closed, outward-wound triangulated sphere."""
    t = (1 + 5 ** 0.5) / 2
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
             [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
             [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
             [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return Mesh(np.array(verts) * radius + np.asarray(center), np.array(faces))


@pytest.fixture(scope="session")
def sphere() -> Mesh:
    return icosphere()


@pytest.fixture(scope="session")
def cube() -> Mesh:
    return box_mesh([-0.25] * 3, [0.25] * 3, edge_length=0.25)


def chain(points) -> Skeleton:
    pts = np.asarray(points, dtype=np.float64)
    return Skeleton.from_parents(pts, [None] + list(range(len(pts) - 1)))


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
