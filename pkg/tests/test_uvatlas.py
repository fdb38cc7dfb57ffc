import numpy as np
import pytest

from meshprior.errors import AtlasQualityError, UVValidationError
from meshprior.geometry import PointCloud, TriangleMesh, sample_surface
from meshprior.uvatlas import (
    ChannelKind,
    DenseUVMap,
    bake_texture,
    charts_from_corner_uv,
    generate_atlas,
    import_atlas,
    rasterization_multiplicity,
    sparse_samples_image,
    splat_points_to_uv,
    update_vertices_from_map,
    uv_to_pixel,
)

from conftest import cube, icosphere, torus


@pytest.fixture(scope="module")
def sphere_atlas():
    mesh = icosphere(3)
    return mesh, generate_atlas(mesh, resolution=256)


def check_atlas_invariants(mesh, atlas):
    # All UVs in range, faces assigned to charts.
    assert atlas.corner_uv.min() >= 0.0 and atlas.corner_uv.max() <= 1.0
    assert (atlas.chart_id >= 0).all()
    # Continuity: same-chart adjacent faces agree on shared-corner UVs.
    labels = charts_from_corner_uv(mesh, atlas.corner_uv)
    # charts_from_corner_uv merges faces exactly when UVs agree; it must not
    # split any declared chart.
    for c in range(atlas.num_charts):
        members = np.nonzero(atlas.chart_id == c)[0]
        assert len(set(labels[members])) == 1
    # Injectivity.
    mult = rasterization_multiplicity(atlas.corner_uv, atlas.resolution)
    assert mult.max() <= 1
    # Gutters: chart bounding boxes pairwise separated by >= 2 pixels.
    res = atlas.resolution
    boxes = []
    for c in range(atlas.num_charts):
        px = atlas.corner_uv[atlas.chart_id == c].reshape(-1, 2) * res
        boxes.append((px.min(axis=0), px.max(axis=0)))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            lo_i, hi_i = boxes[i]
            lo_j, hi_j = boxes[j]
            gap = max(
                lo_j[0] - hi_i[0], lo_i[0] - hi_j[0], lo_j[1] - hi_i[1], lo_i[1] - hi_j[1]
            )
            assert gap >= 2.0 - 1e-6, f"charts {i},{j} gap {gap:.2f}px"


class TestGenerateAtlas:
    def test_cube_six_charts(self):
        mesh = cube()
        atlas = generate_atlas(mesh, resolution=128)
        assert atlas.num_charts <= 6
        mult = rasterization_multiplicity(atlas.corner_uv, 128)
        assert mult.max() == 1  # all 12 faces rasterize with multiplicity 1
        check_atlas_invariants(mesh, atlas)

    def test_sphere(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        check_atlas_invariants(mesh, atlas)

    def test_torus(self):
        mesh = torus()
        atlas = generate_atlas(mesh, resolution=256)
        check_atlas_invariants(mesh, atlas)

    def test_single_triangle_isometric(self):
        mesh = TriangleMesh(
            np.array([[0, 0, 0], [1, 0, 0], [0.2, 0.9, 0.3]]),
            np.array([[0, 1, 2]]),
        )
        # Flattening a lone triangle must be a similarity: edge-length ratios 1.
        from meshprior.uvatlas import _lscm_chart

        verts, uv = _lscm_chart(mesh, np.array([0]))
        e3 = [np.linalg.norm(mesh.vertices[b] - mesh.vertices[a]) for a, b in ((0, 1), (1, 2), (2, 0))]
        e2 = [np.linalg.norm(uv[b] - uv[a]) for a, b in ((0, 1), (1, 2), (2, 0))]
        ratios = np.array(e2) / np.array(e3)
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-6)

    def test_distortion_bounded_on_sphere(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        assert len(atlas.distortion_outliers) == 0


class TestImportAtlas:
    def test_roundtrip_equals(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        back = import_atlas(mesh, atlas.corner_uv, resolution=atlas.resolution)
        np.testing.assert_allclose(back.corner_uv, atlas.corner_uv, atol=1e-6)
        # Chart partition must match (up to labeling).
        for c in range(atlas.num_charts):
            members = np.nonzero(atlas.chart_id == c)[0]
            assert len(set(back.chart_id[members])) == 1

    def test_out_of_range_uv_rejected(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        bad = atlas.corner_uv.copy()
        bad[0, 0] = (1.2, 0.5)
        with pytest.raises(UVValidationError, match="out of"):
            import_atlas(mesh, bad, resolution=atlas.resolution)

    def test_overlap_rejected(self):
        # Two faces mapped onto the same UV triangle.
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.5]])
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        mesh = TriangleMesh(verts, faces)
        uv_tri = np.array([[0.1, 0.1], [0.6, 0.1], [0.1, 0.6]])
        corner_uv = np.stack([uv_tri, uv_tri])
        with pytest.raises(UVValidationError, match="injectivity"):
            import_atlas(mesh, corner_uv, resolution=64)


class TestSplat:
    def test_point_at_vertex(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        # Pick a vertex that lives in a single chart (interior) so its site
        # survives the footprint test.
        checked = 0
        for v in range(mesh.num_vertices):
            entries = [(c, uv) for (vv, c), uv in atlas.vertex_uv.items() if vv == v]
            if len(entries) != 1:
                continue
            cloud = PointCloud(np.tile(mesh.vertices[v], (4, 1)))
            try:
                s = splat_points_to_uv(mesh, atlas, cloud, ChannelKind.XYZ)
            except AtlasQualityError:
                continue
            expected = uv_to_pixel(entries[0][1], atlas.resolution)
            assert np.abs(s.sites[0] - expected).max() < 1e-6
            np.testing.assert_allclose(s.values[0], mesh.vertices[v], atol=1e-12)
            checked += 1
            if checked >= 3:
                break
        assert checked >= 1

    def test_point_at_face_centroid(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        f = 100
        tri = mesh.vertices[mesh.faces[f]]
        centroid = tri.mean(axis=0)
        cloud = PointCloud(np.tile(centroid, (4, 1)) * 1.0)
        s = splat_points_to_uv(mesh, atlas, cloud, ChannelKind.XYZ)
        # The centroid projects to the face (sphere is convex: outward scaling keeps it over f).
        uv_c = atlas.corner_uv[f].mean(axis=0)
        expected = uv_to_pixel(uv_c, atlas.resolution)
        assert np.abs(s.sites[0] - expected).max() < 1e-6

    def test_sphere_retention(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        cloud = PointCloud(sample_surface(mesh, 25_000, seed=0).positions)
        s = splat_points_to_uv(mesh, atlas, cloud, ChannelKind.XYZ)
        assert len(s) >= 0.95 * 25_000

    def test_rgb_requires_colors(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        cloud = PointCloud(sample_surface(mesh, 100, seed=0).positions)
        with pytest.raises(ValueError):
            splat_points_to_uv(mesh, atlas, cloud, ChannelKind.RGB)

    def test_atlas_quality_error(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        # An atlas with a tiny valid region drops almost everything.
        import dataclasses

        tiny = dataclasses.replace(atlas, valid_mask=np.zeros_like(atlas.valid_mask))
        cloud = PointCloud(sample_surface(mesh, 500, seed=1).positions)
        with pytest.raises(AtlasQualityError):
            splat_points_to_uv(mesh, tiny, cloud, ChannelKind.XYZ)


class TestUpdateVertices:
    def _self_map(self, mesh, atlas):
        H = atlas.resolution
        pos = np.zeros((H, H, 3))
        inside = atlas.face_id_map >= 0
        fid = atlas.face_id_map[inside]
        bary = atlas.bary_map[inside].astype(np.float64)
        pos[inside] = np.einsum("kc,kcd->kd", bary, mesh.vertices[mesh.faces[fid]])
        return DenseUVMap(pos, ChannelKind.XYZ)

    def test_self_rasterization_near_identity(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        stats = {}
        out = update_vertices_from_map(mesh, atlas, self._self_map(mesh, atlas), stats=stats)
        moved = np.linalg.norm(out.vertices - mesh.vertices, axis=1)
        # Bilinear error bounded by the pixel's geometric footprint.
        pixel_world = np.sqrt(mesh.area() / atlas.valid_mask.sum())
        assert moved.max() <= pixel_world
        assert stats["fallback_vertices"] < mesh.num_vertices

    def test_constant_map(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        c = np.array([0.3, -0.2, 0.9])
        dm = DenseUVMap(np.tile(c, (atlas.resolution, atlas.resolution, 1)), ChannelKind.XYZ)
        stats = {}
        out = update_vertices_from_map(mesh, atlas, dm, stats=stats)
        updated = np.linalg.norm(out.vertices - c, axis=1) < 1e-9
        assert updated.sum() == mesh.num_vertices - stats["fallback_vertices"]

    def test_seam_vertex_mean(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        # Find a seam vertex (entries in >= 2 charts) whose entries are all usable.
        from collections import defaultdict

        by_vertex = defaultdict(list)
        for (v, c), uv in atlas.vertex_uv.items():
            by_vertex[v].append((c, uv))
        dm_values = np.random.default_rng(0).random((atlas.resolution, atlas.resolution, 3))
        dm = DenseUVMap(dm_values, ChannelKind.XYZ)
        out = update_vertices_from_map(mesh, atlas, dm)
        from meshprior.uvatlas import _masked_bilinear

        checked = 0
        for v, entries in by_vertex.items():
            if len(entries) < 2:
                continue
            sites = uv_to_pixel(np.array([uv for _, uv in entries]), atlas.resolution)
            charts = np.array([c for c, _ in entries])
            vals, ok = _masked_bilinear(dm.values, sites, charts, atlas)
            if not ok.all():
                continue
            np.testing.assert_allclose(out.vertices[v], vals.mean(axis=0), atol=1e-9)
            checked += 1
            if checked > 5:
                break
        assert checked > 0

    def test_wrong_channel_rejected(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        dm = DenseUVMap(np.zeros((atlas.resolution, atlas.resolution, 3)), ChannelKind.RGB)
        with pytest.raises(ValueError):
            update_vertices_from_map(mesh, atlas, dm)


class TestBakeTexture:
    def test_constant_half_map(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        dm = DenseUVMap(np.full((atlas.resolution, atlas.resolution, 3), 0.5), ChannelKind.RGB)
        img = bake_texture(atlas, dm)
        assert img.dtype == np.uint8
        assert (img[atlas.valid_mask] == 128).all()

    def test_gutter_dilation(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        values = np.zeros((atlas.resolution, atlas.resolution, 3))
        values[atlas.valid_mask] = (1.0, 0.0, 0.0)
        img = bake_texture(atlas, DenseUVMap(values, ChannelKind.RGB))
        # Invalid pixels adjacent to the red region become red.
        import scipy.ndimage as ndi

        ring = ndi.binary_dilation(atlas.valid_mask) & ~atlas.valid_mask
        assert (img[ring] == (255, 0, 0)).all()

    def test_quantization_bound(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        rng = np.random.default_rng(1)
        values = rng.random((atlas.resolution, atlas.resolution, 3))
        img = bake_texture(atlas, DenseUVMap(values, ChannelKind.RGB))
        back = img.astype(np.float64) / 255.0
        err = np.abs(back - np.clip(values, 0, 1))[atlas.valid_mask]
        assert err.max() <= 0.5 / 255.0 + 1e-12


class TestSparseImage:
    def test_dots_painted(self, sphere_atlas):
        mesh, atlas = sphere_atlas
        cloud = PointCloud(sample_surface(mesh, 200, seed=2).positions)
        s = splat_points_to_uv(mesh, atlas, cloud, ChannelKind.XYZ)
        img = sparse_samples_image(s)
        assert img.shape == (atlas.resolution, atlas.resolution, 3)
        assert (img > 0).any()
