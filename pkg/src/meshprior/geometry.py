"""Point clouds, triangle meshes, edge topology and geometric queries.

All arrays are numpy float64/int64. Meshes are immutable once constructed;
operations return new objects. Internal tolerances assume the normalized
frame produced by :func:`PointCloud.normalized` (centroid at the origin,
longest bounding-box dimension scaled to 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import DegenerateInputError, TopologyError

__all__ = [
    "ScaleFrame",
    "PointCloud",
    "TriangleMesh",
    "SurfacePoint",
    "SurfaceSamples",
    "EdgeTopology",
    "convex_hull",
    "build_edge_topology",
    "sample_surface",
    "project_point_to_mesh",
    "project_points_to_mesh",
    "SurfaceProximity",
    "closest_point_on_triangles",
    "count_self_intersections",
]


@dataclass(frozen=True)
class ScaleFrame:
    """Similarity transform mapping world coordinates to the normalized frame."""

    center: np.ndarray  # (3,)
    scale: float  # world units per normalized unit

    @classmethod
    def from_points(cls, points: np.ndarray) -> "ScaleFrame":
        points = np.asarray(points, dtype=np.float64)
        center = points.mean(axis=0)
        extent = points.max(axis=0) - points.min(axis=0)
        scale = float(extent.max())
        if scale <= 0.0:
            raise DegenerateInputError("point set has zero extent")
        return cls(center=center, scale=scale)

    def to_normalized(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


@dataclass(frozen=True)
class PointCloud:
    """Input positions with optional per-point RGB in [0, 1]."""

    positions: np.ndarray  # (N, 3)
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]

    def __post_init__(self):
        positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {positions.shape}")
        if positions.shape[0] < 4:
            raise ValueError("a point cloud needs at least 4 points")
        if not np.isfinite(positions).all():
            raise ValueError("positions contain non-finite values")
        object.__setattr__(self, "positions", positions)
        if self.colors is not None:
            colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if colors.shape != positions.shape:
                raise ValueError("colors must match positions shape")
            if not np.isfinite(colors).all() or colors.min() < 0.0 or colors.max() > 1.0:
                raise ValueError("colors must be finite and in [0, 1]")
            object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def normalized(self) -> tuple["PointCloud", ScaleFrame]:
        """Translate the centroid to the origin and scale the longest bbox axis to 1."""
        frame = ScaleFrame.from_points(self.positions)
        return PointCloud(frame.to_normalized(self.positions), self.colors), frame


@dataclass(frozen=True)
class TriangleMesh:
    """Vertex positions and triangular faces (vertex indices)."""

    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ValueError("face indices out of range")
        if len(faces) and (
            (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        ).any():
            raise ValueError("a face repeats a vertex")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        """Same connectivity, new vertex positions."""
        return TriangleMesh(vertices, self.faces)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        cross = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles()
        cross = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return cross / np.maximum(norm, 1e-300)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed volume (positive for outward-oriented watertight meshes)."""
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def edges_unique(self) -> np.ndarray:
        """(E, 2) sorted unique vertex pairs."""
        raw = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(raw, axis=0)

    def mean_edge_length(self) -> float:
        e = self.edges_unique()
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def euler_characteristic(self) -> int:
        return self.num_vertices - len(self.edges_unique()) + self.num_faces

    def is_watertight(self) -> bool:
        """Closed 2-manifold: every undirected edge used by exactly two faces."""
        raw = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(raw, axis=0, return_counts=True)
        return bool((counts == 2).all())

    def validate(self, min_face_area: float = 1e-12) -> None:
        """Check the full invariants; raises ValueError on violation."""
        if not np.isfinite(self.vertices).all():
            raise ValueError("vertices contain non-finite values")
        areas = self.face_areas()
        if len(areas) and areas.min() <= min_face_area:
            raise ValueError(f"face area below {min_face_area}: min={areas.min():.3e}")
        referenced = np.zeros(self.num_vertices, dtype=bool)
        referenced[self.faces.reshape(-1)] = True
        if not referenced.all():
            raise ValueError(f"{int((~referenced).sum())} vertices not referenced by any face")


@dataclass(frozen=True)
class SurfacePoint:
    """A point on a mesh surface: face, barycentric weights and position."""

    face_id: int
    barycentric: np.ndarray  # (3,) nonnegative, sums to 1
    position: np.ndarray  # (3,)

    def __post_init__(self):
        bary = np.asarray(self.barycentric, dtype=np.float64)
        if bary.shape != (3,) or bary.min() < -1e-9 or abs(bary.sum() - 1.0) > 1e-6:
            raise ValueError(f"invalid barycentric coordinates {bary}")
        object.__setattr__(self, "barycentric", bary)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))


class SurfaceSamples:
    """A batch of surface points stored as arrays; acts as a sequence of SurfacePoint.

    Keeping 500K samples as columnar arrays instead of a list of objects is
    what makes the evaluation protocol affordable.
    """

    def __init__(self, face_ids: np.ndarray, barycentric: np.ndarray, positions: np.ndarray):
        self.face_ids = np.asarray(face_ids, dtype=np.int64)
        self.barycentric = np.asarray(barycentric, dtype=np.float64)
        self.positions = np.asarray(positions, dtype=np.float64)
        if not (len(self.face_ids) == len(self.barycentric) == len(self.positions)):
            raise ValueError("mismatched sample array lengths")

    def __len__(self) -> int:
        return len(self.face_ids)

    def __getitem__(self, i: int) -> SurfacePoint:
        return SurfacePoint(int(self.face_ids[i]), self.barycentric[i], self.positions[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class EdgeTopology:
    """Edge list with face incidence and the 4-neighborhood used by edge convolutions.

    ``neighbors[e] = (a, b, c, d)`` where ``a, c`` are the two other edges of
    the first incident face and ``b, d`` of the second; missing entries
    (boundary) are -1. ``one_ring[v]`` lists the vertices adjacent to ``v``.
    """

    edges: np.ndarray  # (E, 2) vertex ids, sorted per row
    edge_faces: np.ndarray  # (E, 2) face ids, -1 where absent
    neighbors: np.ndarray  # (E, 4) edge ids, -1 where absent
    one_ring: list  # per-vertex int arrays
    face_edges: np.ndarray  # (F, 3) edge id of (v0,v1), (v1,v2), (v2,v0)
    num_vertices: int = field(default=0)

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]


def convex_hull(cloud: PointCloud) -> TriangleMesh:
    """Convex hull as a watertight, outward-oriented triangle mesh.

    Raises DegenerateInputError for coplanar/collinear input.
    """
    points = cloud.positions
    try:
        hull = ConvexHull(points)
    except QhullError as exc:
        raise DegenerateInputError(f"convex hull failed (degenerate input?): {exc}") from exc
    # Reindex to hull vertices only.
    used = hull.vertices
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = points[used]
    faces = remap[hull.simplices]
    # Orient each face so its geometric normal agrees with Qhull's outward plane normal.
    tri = vertices[faces]
    geom_normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", geom_normal, hull.equations[:, :3]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    mesh = TriangleMesh(vertices, faces)
    if not mesh.is_watertight():
        raise DegenerateInputError("hull is not watertight (degenerate input)")
    return mesh


def build_edge_topology(mesh: TriangleMesh) -> EdgeTopology:
    """Build the unique-edge graph with 4-neighborhoods and vertex one-rings.

    Raises TopologyError if any edge has more than two incident faces.
    """
    faces = mesh.faces
    F = len(faces)
    half = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)  # (3F, 2)
    edges, inverse, counts = np.unique(half, axis=0, return_inverse=True, return_counts=True)
    if counts.max(initial=0) > 2:
        bad = edges[counts > 2]
        raise TopologyError(f"non-manifold edges (more than 2 incident faces): {bad[:5].tolist()}")
    E = len(edges)
    face_edges = inverse.reshape(F, 3)

    # Face incidence in first-seen order.
    edge_faces = np.full((E, 2), -1, dtype=np.int64)
    slot = np.zeros(E, dtype=np.int64)
    face_of_half = np.repeat(np.arange(F), 3)
    order = np.argsort(inverse, kind="stable")
    for h in order:
        e = inverse[h]
        edge_faces[e, slot[e]] = face_of_half[h]
        slot[e] += 1

    # For edge e in face f with local slot k (edge k joins corner k and k+1),
    # the two other edges in cyclic order are slots k+1 and k+2.
    neighbors = np.full((E, 4), -1, dtype=np.int64)
    for which, col_pair in ((0, (0, 2)), (1, (1, 3))):
        fids = edge_faces[:, which]
        valid = fids >= 0
        fe = face_edges[fids[valid]]  # (n, 3)
        eids = np.nonzero(valid)[0]
        k = np.argmax(fe == eids[:, None], axis=1)
        neighbors[eids, col_pair[0]] = fe[np.arange(len(eids)), (k + 1) % 3]
        neighbors[eids, col_pair[1]] = fe[np.arange(len(eids)), (k + 2) % 3]

    ring: list[list[int]] = [[] for _ in range(mesh.num_vertices)]
    for a, b in edges:
        ring[a].append(b)
        ring[b].append(a)
    one_ring = [np.array(sorted(r), dtype=np.int64) for r in ring]

    return EdgeTopology(
        edges=edges,
        edge_faces=edge_faces,
        neighbors=neighbors,
        one_ring=one_ring,
        face_edges=face_edges,
        num_vertices=mesh.num_vertices,
    )


def sample_surface(mesh: TriangleMesh, k: int, seed: int) -> SurfaceSamples:
    """Draw k area-uniform surface samples, deterministic per seed."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    prob = areas / areas.sum()
    face_ids = rng.choice(len(prob), size=k, p=prob)
    u = rng.random(k)
    v = rng.random(k)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    tri = mesh.vertices[mesh.faces[face_ids]]
    positions = np.einsum("kc,kcd->kd", bary, tri)
    return SurfaceSamples(face_ids, bary, positions)


def closest_point_on_triangles(triangles: np.ndarray, queries: np.ndarray):
    """Closest point on each triangle to each paired query point.

    triangles: (n, 3, 3); queries: (n, 3). Returns (points (n,3), bary (n,3)).
    Region-by-region projection after Ericson's "Real-Time Collision Detection".
    """
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    ab = b - a
    ac = c - a
    ap = queries - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = queries - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = queries - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    n = len(queries)
    bary = np.zeros((n, 3))
    remain = np.ones(n, dtype=bool)

    def settle(mask, w0, w1, w2):
        m = mask & remain
        bary[m, 0] = w0 if np.isscalar(w0) else w0[m]
        bary[m, 1] = w1 if np.isscalar(w1) else w1[m]
        bary[m, 2] = w2 if np.isscalar(w2) else w2[m]
        remain[m] = False

    settle((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)  # vertex A
    settle((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)  # vertex B
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v_ab, v_ab, 0.0)  # edge AB
    settle((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)  # vertex C
    vb = d5 * d2 - d1 * d6
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ac = d2 / (d2 - d6)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w_ac, 0.0, w_ac)  # edge AC
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - w_bc, w_bc)  # edge BC
    # Interior.
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
    settle(np.ones(n, dtype=bool), 1.0 - v - w, v, w)

    points = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    return points, bary


class SurfaceProximity:
    """Exact nearest-point queries against a mesh, pruned by a centroid KD-tree.

    A query first probes the k nearest face centroids for an upper bound; any
    face that could still beat that bound must have its centroid within
    bound + max circumradius, so a second vectorized pass over that shortlist
    (or a brute-force fallback for stragglers) keeps the result exact.
    """

    def __init__(self, mesh: TriangleMesh, leaf_candidates: int = 16):
        self.mesh = mesh
        tri = mesh.triangles()
        self._centroids = tri.mean(axis=1)
        self._radius = np.linalg.norm(tri - self._centroids[:, None, :], axis=2).max(axis=1)
        self._max_radius = float(self._radius.max(initial=0.0))
        self._tree = cKDTree(self._centroids)
        self._k = min(leaf_candidates, mesh.num_faces)

    def query(self, points: np.ndarray):
        """Project points onto the mesh. Returns (SurfaceSamples, distances)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        tri = self.mesh.triangles()

        cdist, cand = self._tree.query(points, k=self._k, workers=-1)
        if self._k == 1:
            cdist = cdist[:, None]
            cand = cand[:, None]
        flat_pts = np.repeat(points, self._k, axis=0)
        flat_tri = tri[cand.reshape(-1)]
        proj, bary = closest_point_on_triangles(flat_tri, flat_pts)
        d = np.linalg.norm(proj - flat_pts, axis=1).reshape(n, self._k)
        best = np.argmin(d, axis=1)
        rows = np.arange(n)
        best_d = d[rows, best]
        best_face = cand[rows, best]
        best_bary = bary.reshape(n, self._k, 3)[rows, best]
        best_point = proj.reshape(n, self._k, 3)[rows, best]

        # A face outside the candidate set has distance >= kth centroid distance
        # minus the largest circumradius; only queries violating that need rework.
        if self._k < self.mesh.num_faces:
            unsure = best_d > cdist[:, -1] - self._max_radius
            if unsure.any():
                idx = np.nonzero(unsure)[0]
                for i in idx:
                    faces = self._tree.query_ball_point(points[i], best_d[i] + self._max_radius + 1e-12)
                    faces = np.asarray(faces, dtype=np.int64)
                    if len(faces) == 0:
                        continue
                    p, by = closest_point_on_triangles(tri[faces], np.repeat(points[i][None], len(faces), axis=0))
                    dd = np.linalg.norm(p - points[i][None], axis=1)
                    j = int(np.argmin(dd))
                    if dd[j] < best_d[i]:
                        best_d[i] = dd[j]
                        best_face[i] = faces[j]
                        best_bary[i] = by[j]
                        best_point[i] = p[j]

        return SurfaceSamples(best_face, best_bary, best_point), best_d


def project_points_to_mesh(mesh: TriangleMesh, points: np.ndarray):
    """Exact projection of many points onto a mesh: (SurfaceSamples, distances)."""
    return SurfaceProximity(mesh).query(points)


def project_point_to_mesh(mesh: TriangleMesh, q: np.ndarray) -> SurfacePoint:
    """Globally nearest surface point to q (exact point-to-triangle projection)."""
    samples, _ = project_points_to_mesh(mesh, np.asarray(q, dtype=np.float64)[None, :])
    return samples[0]


def _segments_cross_triangles(seg_a, seg_b, tri, eps=1e-12):
    """Möller–Trumbore segment/triangle intersection test for paired arrays."""
    d = seg_b - seg_a
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = seg_a - tri[:, 0]
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    inside = (u > eps) & (v > eps) & (u + v < 1.0 - eps)
    spans = (t > eps) & (t < 1.0 - eps)
    return ok & inside & spans


def count_self_intersections(mesh: TriangleMesh) -> int:
    """Number of non-adjacent face pairs whose triangles intersect.

    Candidate pairs come from centroid proximity; coplanar-overlap cases are
    not detected (measure zero for optimized meshes).
    """
    tri = mesh.triangles()
    centroids = tri.mean(axis=1)
    radius = np.linalg.norm(tri - centroids[:, None, :], axis=2).max(axis=1)
    tree = cKDTree(centroids)
    pairs = tree.query_pairs(2.0 * float(radius.max(initial=0.0)), output_type="ndarray")
    if len(pairs) == 0:
        return 0
    # Drop face pairs sharing a vertex.
    fa = mesh.faces[pairs[:, 0]]
    fb = mesh.faces[pairs[:, 1]]
    shared = (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))
    pairs = pairs[~shared]
    if len(pairs) == 0:
        return 0
    # Bounding-sphere cull.
    d = np.linalg.norm(centroids[pairs[:, 0]] - centroids[pairs[:, 1]], axis=1)
    pairs = pairs[d <= radius[pairs[:, 0]] + radius[pairs[:, 1]]]
    if len(pairs) == 0:
        return 0

    ta = tri[pairs[:, 0]]
    tb = tri[pairs[:, 1]]
    hit = np.zeros(len(pairs), dtype=bool)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        hit |= _segments_cross_triangles(ta[:, i], ta[:, j], tb)
        hit |= _segments_cross_triangles(tb[:, i], tb[:, j], ta)
    return int(hit.sum())
