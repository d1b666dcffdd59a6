import numpy as np
import pytest

from licp.core3d import PointCloud, TriangleMesh


def unit_square_mesh(z=0.0):
    """Unit square in the x-y plane (two triangles), centered at origin."""
    v = np.array([
        [-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z], [-0.5, 0.5, z],
    ])
    t = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(v, t)


def box_mesh(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0)):
    c = np.asarray(center, dtype=float)
    h = np.asarray(size, dtype=float) / 2.0
    corners = np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ]) * h + c
    faces = [
        (0, 2, 1), (0, 3, 2),   # bottom
        (4, 5, 6), (4, 6, 7),   # top
        (0, 1, 5), (0, 5, 4),   # -y
        (2, 3, 7), (2, 7, 6),   # +y
        (0, 4, 7), (0, 7, 3),   # -x
        (1, 2, 6), (1, 6, 5),   # +x
    ]
    return TriangleMesh(corners, np.array(faces))


def random_rotation(rng):
    from licp.core3d import project_to_rotation
    return project_to_rotation(rng.normal(size=(3, 3)))


def random_cloud(rng, n=100, scale=1.0):
    return PointCloud(rng.normal(size=(n, 3)) * scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
