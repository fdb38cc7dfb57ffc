import numpy as np
import pytest

from meshprior.errors import TopologyError
from meshprior.geometry import TriangleMesh, build_edge_topology
from meshprior.remesh import decimate_quadric, remesh_to_resolution, subdivide_midpoint

from conftest import icosphere
from oracles import hausdorff_sampled


def assert_watertight_sphere_topology(mesh):
    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 2
    topo = build_edge_topology(mesh)
    assert topo.num_edges == 3 * mesh.num_faces // 2


class TestSubdivide:
    def test_icosahedron_to_42(self, ico):
        out = remesh_to_resolution(ico, 42)
        assert out.num_vertices == 42  # V + E = 12 + 30
        assert_watertight_sphere_topology(out)

    def test_counts_formula(self, ico):
        out = subdivide_midpoint(ico)
        assert out.num_vertices == 12 + 30
        assert out.num_faces == 4 * 20

    def test_already_at_target(self):
        mesh = icosphere(1)  # 42 vertices
        out = remesh_to_resolution(mesh, 42)
        assert out.num_vertices == 42

    def test_surface_unchanged(self, ico):
        out = subdivide_midpoint(ico)
        assert hausdorff_sampled(ico, out, n=2000) < 1e-9


class TestDecimate:
    def test_sphere_642_to_162(self):
        mesh = icosphere(3)  # 642 vertices
        out = remesh_to_resolution(mesh, 162)
        assert 146 <= out.num_vertices <= 178
        assert_watertight_sphere_topology(out)

    def test_hausdorff_bound(self):
        mesh = icosphere(3)
        out = remesh_to_resolution(mesh, 162)
        assert hausdorff_sampled(mesh, out) <= 2.0 * mesh.mean_edge_length()

    def test_heavy_reduction_stays_manifold(self):
        mesh = icosphere(3)
        out = decimate_quadric(mesh, 30)
        assert out.num_vertices <= 33
        assert_watertight_sphere_topology(out)
        out.validate()

    def test_non_watertight_rejected(self):
        mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
        with pytest.raises(TopologyError):
            remesh_to_resolution(mesh, 10)


class TestRoundTrips:
    def test_up_then_down_within_tolerance(self):
        mesh = icosphere(1)  # 42
        out = remesh_to_resolution(mesh, 500)
        assert abs(out.num_vertices - 500) <= 50
        assert_watertight_sphere_topology(out)

    def test_watertightness_preserved_both_ways(self):
        mesh = icosphere(2)  # 162
        for target in (642, 80):
            out = remesh_to_resolution(mesh, target)
            assert_watertight_sphere_topology(out)
