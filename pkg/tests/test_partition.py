import numpy as np
import pytest

from meshprior.errors import CoverageError
from meshprior.partition import merge_partitions, partition_mesh
from meshprior.remesh import subdivide_midpoint

from conftest import icosphere


def big_sphere(min_faces):
    mesh = icosphere(2)
    while mesh.num_faces < min_faces:
        mesh = subdivide_midpoint(mesh)
    return mesh


class TestPartition:
    def test_small_mesh_single_part(self):
        mesh = big_sphere(4000)
        part = partition_mesh(mesh, 6000)
        assert len(part) == 1
        np.testing.assert_array_equal(part.parts[0].vertex_map, np.arange(mesh.num_vertices))
        assert (part.overlap_counts == 1).all()

    def test_large_sphere_coverage(self):
        mesh = big_sphere(20_000)
        part = partition_mesh(mesh, 6000)
        assert len(part) >= 4
        covered = np.zeros(mesh.num_faces, dtype=bool)
        for p in part.parts:
            assert p.mesh.num_faces <= 6000
            covered[p.face_map] = True
        assert covered.all()

    def test_overlap_band_counts(self):
        mesh = big_sphere(20_000)
        part = partition_mesh(mesh, 6000)
        # Vertices on part borders must belong to at least two parts.
        in_parts = [np.zeros(mesh.num_vertices, dtype=bool) for _ in part.parts]
        for mask, p in zip(in_parts, part.parts):
            mask[p.vertex_map] = True
        border = np.zeros(mesh.num_vertices, dtype=bool)
        for i, p in enumerate(part.parts):
            # Border vertices of the part: belong to a parent face outside the part.
            outside = np.ones(mesh.num_faces, dtype=bool)
            outside[p.face_map] = False
            border_v = np.unique(mesh.faces[outside])
            inside_v = np.zeros(mesh.num_vertices, dtype=bool)
            inside_v[p.vertex_map] = True
            border |= inside_v & np.isin(np.arange(mesh.num_vertices), border_v)
        assert (part.overlap_counts[border] >= 2).all()

    def test_max_faces_validation(self):
        with pytest.raises(ValueError):
            partition_mesh(icosphere(1), 50)


class TestMerge:
    def test_identity_single_part(self):
        mesh = icosphere(1)
        part = partition_mesh(mesh, 6000)
        merged = merge_partitions(part, [mesh.vertices])
        np.testing.assert_array_equal(merged, mesh.vertices)

    def test_two_part_mean(self):
        mesh = big_sphere(20_000)
        part = partition_mesh(mesh, 6000)
        # Feed each part constant offsets; each parent vertex must get the mean.
        offsets = [np.full((len(p.vertex_map), 3), float(i)) for i, p in enumerate(part.parts)]
        merged = merge_partitions(part, offsets)
        expected = np.zeros((mesh.num_vertices, 3))
        counts = np.zeros(mesh.num_vertices)
        for i, p in enumerate(part.parts):
            expected[p.vertex_map] += float(i)
            counts[p.vertex_map] += 1
        expected /= counts[:, None]
        np.testing.assert_allclose(merged, expected, atol=1e-12)

    def test_unmodified_roundtrip(self):
        mesh = big_sphere(20_000)
        part = partition_mesh(mesh, 6000)
        merged = merge_partitions(part, [p.mesh.vertices for p in part.parts])
        np.testing.assert_allclose(merged, mesh.vertices, atol=1e-12)

    def test_random_three_part_overlap_oracle(self):
        mesh = big_sphere(20_000)
        part = partition_mesh(mesh, 6000)
        rng = np.random.default_rng(0)
        arrays = [rng.normal(size=(len(p.vertex_map), 3)) for p in part.parts]
        merged = merge_partitions(part, arrays)
        # Direct per-vertex averaging oracle.
        for v in rng.choice(mesh.num_vertices, 50, replace=False):
            vals = []
            for arr, p in zip(arrays, part.parts):
                hits = np.nonzero(p.vertex_map == v)[0]
                if len(hits):
                    vals.append(arr[hits[0]])
            np.testing.assert_allclose(merged[v], np.mean(vals, axis=0), atol=1e-12)

    def test_shape_mismatch_rejected(self):
        mesh = icosphere(1)
        part = partition_mesh(mesh, 6000)
        with pytest.raises(ValueError):
            merge_partitions(part, [np.zeros((3, 3))])

    def test_missing_coverage_error(self):
        mesh = icosphere(1)
        part = partition_mesh(mesh, 6000)
        no_parts = type(part)(parent=part.parent, parts=[], overlap_counts=part.overlap_counts * 0)
        with pytest.raises(CoverageError):
            merge_partitions(no_parts, [])
