import numpy as np
import pytest
import torch

from meshprior.geometry import TriangleMesh

torch.set_num_threads(2)


def icosahedron() -> TriangleMesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return TriangleMesh(v, f)


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron with vertices pushed onto the sphere."""
    from meshprior.remesh import subdivide_midpoint

    mesh = icosahedron()
    for _ in range(subdivisions):
        mesh = subdivide_midpoint(mesh)
        v = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        mesh = TriangleMesh(v, mesh.faces)
    return TriangleMesh(mesh.vertices * radius, mesh.faces)


def tetrahedron() -> TriangleMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)
    return TriangleMesh(v, f)


def cube() -> TriangleMesh:
    v = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (z=0, normal -z)
            [4, 5, 6], [4, 6, 7],  # top
            [0, 1, 5], [0, 5, 4],  # y=0
            [2, 3, 7], [2, 7, 6],  # y=1
            [1, 2, 6], [1, 6, 5],  # x=1
            [3, 0, 4], [3, 4, 7],  # x=0
        ],
        dtype=np.int64,
    )
    return TriangleMesh(v, f)


def torus(major: float = 1.0, minor: float = 0.35, n_major: int = 24, n_minor: int = 12) -> TriangleMesh:
    iu, iv = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    theta = 2 * np.pi * iu / n_major
    phi = 2 * np.pi * iv / n_minor
    x = (major + minor * np.cos(phi)) * np.cos(theta)
    y = (major + minor * np.cos(phi)) * np.sin(theta)
    z = minor * np.sin(phi)
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def vid(i, j):
        return (i % n_major) * n_minor + (j % n_minor)

    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


@pytest.fixture
def ico():
    return icosahedron()


@pytest.fixture
def tetra():
    return tetrahedron()


@pytest.fixture
def box():
    return cube()
