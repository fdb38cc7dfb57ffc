"""UV atlas construction and the bridges between 3D geometry and 2D maps.

A mesh is segmented into near-developable charts by normal-clustered region
growth, each chart is flattened by a free-boundary least-squares conformal
map, and chart boxes are skyline-packed into the image square with 2-pixel
gutters. Point values are splatted to sub-pixel UV sites; dense maps are read
back to vertices through bilinear interpolation; textures are baked with
nearest-valid gutter dilation.

Conventions: uv in [0, 1]^2 with v running down the image rows; a site's
pixel coordinates are (row, col) = (v*H - 0.5, u*W - 0.5) so integer
coordinates land on pixel centers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from .errors import AtlasQualityError, MeshPriorError, UVValidationError
from .geometry import TriangleMesh, project_points_to_mesh

__all__ = [
    "ChannelKind",
    "UVAtlas",
    "SparseUVSamples",
    "DenseUVMap",
    "generate_atlas",
    "import_atlas",
    "splat_points_to_uv",
    "update_vertices_from_map",
    "bake_texture",
    "sparse_samples_image",
]

log = logging.getLogger(__name__)

GUTTER_PIXELS = 2  # minimum gap between chart bounding boxes
DISTORTION_LIMIT = 10.0


class ChannelKind(str, Enum):
    XYZ = "xyz"
    RGB = "rgb"


@dataclass(frozen=True)
class UVAtlas:
    corner_uv: np.ndarray  # (F, 3, 2) in [0, 1]
    chart_id: np.ndarray  # (F,)
    vertex_uv: dict  # (vertex, chart) -> (2,) uv
    valid_mask: np.ndarray  # (H, W) bool
    resolution: int
    face_id_map: np.ndarray  # (H, W) int32, -1 outside
    bary_map: np.ndarray  # (H, W, 3) float32
    distortion_outliers: tuple = ()

    @property
    def num_charts(self) -> int:
        return int(self.chart_id.max()) + 1 if len(self.chart_id) else 0

    def chart_map(self) -> np.ndarray:
        """(H, W) chart id per pixel, -1 outside the valid region."""
        cm = np.full(self.face_id_map.shape, -1, dtype=np.int32)
        inside = self.face_id_map >= 0
        cm[inside] = self.chart_id[self.face_id_map[inside]]
        return cm


@dataclass(frozen=True)
class SparseUVSamples:
    sites: np.ndarray  # (S, 2) sub-pixel (row, col)
    values: np.ndarray  # (S, 3)
    channel_kind: ChannelKind
    resolution: int = 0
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.sites)


@dataclass(frozen=True)
class DenseUVMap:
    values: np.ndarray  # (H, W, 3)
    channel_kind: ChannelKind

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 3:
            raise ValueError(f"dense map must be (H, W, 3), got {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("dense map contains non-finite values")
        object.__setattr__(self, "values", values)


# ---------------------------------------------------------------------------
# Chart segmentation


def _face_adjacency_pairs(mesh: TriangleMesh) -> np.ndarray:
    """(K, 2) pairs of faces sharing an edge."""
    raw = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    order = np.lexsort((raw[:, 1], raw[:, 0]))
    fids = np.repeat(np.arange(mesh.num_faces), 3)[order]
    raw = raw[order]
    same = (raw[1:] == raw[:-1]).all(axis=1)
    return np.stack([fids[:-1][same], fids[1:][same]], axis=1)


def _segment_charts(mesh: TriangleMesh, angle_deg: float = 50.0) -> list:
    """Greedy region growth: a face joins while its normal stays within the
    angle threshold of the chart's running (area-weighted) mean normal."""
    normals = mesh.face_normals()
    areas = mesh.face_areas()
    pairs = _face_adjacency_pairs(mesh)
    adj: list[list[int]] = [[] for _ in range(mesh.num_faces)]
    for a, b in pairs:
        adj[a].append(b)
        adj[b].append(a)
    cos_thresh = np.cos(np.deg2rad(angle_deg))
    assigned = np.full(mesh.num_faces, -1, dtype=np.int64)
    charts = []
    for seed in range(mesh.num_faces):
        if assigned[seed] >= 0:
            continue
        cid = len(charts)
        members = [seed]
        assigned[seed] = cid
        mean = normals[seed] * areas[seed]
        frontier = list(adj[seed])
        while frontier:
            nxt = []
            unit = mean / max(np.linalg.norm(mean), 1e-300)
            for f in sorted(set(frontier)):
                if assigned[f] >= 0:
                    continue
                if normals[f] @ unit >= cos_thresh:
                    assigned[f] = cid
                    members.append(f)
                    mean = mean + normals[f] * areas[f]
                    nxt.extend(adj[f])
            frontier = nxt
        charts.append(np.array(sorted(members), dtype=np.int64))
    return charts


def _split_chart(mesh: TriangleMesh, members: np.ndarray) -> list:
    """Bisect a chart by BFS hop distance from two far-apart seed faces."""
    member_set = {int(f): i for i, f in enumerate(members)}
    pairs = _face_adjacency_pairs(mesh)
    adj: dict[int, list] = {int(f): [] for f in members}
    for a, b in pairs:
        if int(a) in member_set and int(b) in member_set:
            adj[int(a)].append(int(b))
            adj[int(b)].append(int(a))

    def bfs(src):
        d = {src: 0}
        frontier = [src]
        while frontier:
            nxt = []
            for f in frontier:
                for g in adj[f]:
                    if g not in d:
                        d[g] = d[f] + 1
                        nxt.append(g)
            frontier = nxt
        return d

    s0 = int(members[0])
    d0 = bfs(s0)
    s1 = max(d0, key=lambda f: (d0[f], f))
    d1 = bfs(s1)
    s2 = max(d1, key=lambda f: (d1[f], f))
    d2 = bfs(s2)
    side_a, side_b = [], []
    for f in members:
        f = int(f)
        da = d1.get(f, np.inf)
        db = d2.get(f, np.inf)
        (side_a if da <= db else side_b).append(f)
    if not side_a or not side_b:
        half = len(members) // 2
        side_a, side_b = members[:half].tolist(), members[half:].tolist()
    out = []
    # A side may be disconnected after bisection; keep components separate.
    for side in (side_a, side_b):
        side_set = set(side)
        remaining = sorted(side_set)
        while remaining:
            comp = {remaining[0]}
            frontier = [remaining[0]]
            while frontier:
                nxt = []
                for f in frontier:
                    for g in adj[f]:
                        if g in side_set and g not in comp:
                            comp.add(g)
                            nxt.append(g)
                frontier = nxt
            out.append(np.array(sorted(comp), dtype=np.int64))
            remaining = [f for f in remaining if f not in comp]
    return out


def _chart_euler(mesh: TriangleMesh, members: np.ndarray) -> int:
    faces = mesh.faces[members]
    verts = np.unique(faces)
    edges = np.unique(np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0)
    return len(verts) - len(edges) + len(faces)


# ---------------------------------------------------------------------------
# LSCM flattening


def _lscm_chart(mesh: TriangleMesh, members: np.ndarray):
    """Free-boundary least-squares conformal map of one chart.

    Returns (local_vertices, uv (n,2)) or None if the solve fails or flips
    triangles.
    """
    faces = mesh.faces[members]
    verts = np.unique(faces)
    n = len(verts)
    if n < 3:
        return None
    local = np.full(mesh.num_vertices, -1, dtype=np.int64)
    local[verts] = np.arange(n)
    lf = local[faces]

    p = mesh.vertices[faces]  # (T, 3, 3)
    e1 = p[:, 1] - p[:, 0]
    x1 = np.linalg.norm(e1, axis=1)
    ok = x1 > 1e-300
    ex = e1 / np.maximum(x1, 1e-300)[:, None]
    e2 = p[:, 2] - p[:, 0]
    x2 = np.einsum("ij,ij->i", e2, ex)
    y2 = np.linalg.norm(e2 - x2[:, None] * ex, axis=1)
    area = np.maximum(0.5 * x1 * y2, 1e-30)
    scale = 1.0 / np.sqrt(area)
    # Complex gradient weights of the conformal energy per corner.
    w0 = ((x2 - x1) + 1j * y2) * scale
    w1 = (-x2 - 1j * y2) * scale
    w2 = (x1 + 0j) * scale

    # Pin the two most distant vertices (3D) to (0,0) and (1,0).
    vpos = mesh.vertices[verts]
    a = int(np.argmax(np.linalg.norm(vpos - vpos.mean(axis=0), axis=1)))
    b = int(np.argmax(np.linalg.norm(vpos - vpos[a], axis=1)))
    if a == b:
        return None
    pinned = np.zeros(n, dtype=bool)
    pinned[[a, b]] = True
    n_free = n - pinned.sum()
    free_index = np.cumsum(~pinned) - 1
    pin_index = np.cumsum(pinned) - 1
    pin_uv = np.array([[0.0, 0.0], [1.0, 0.0]])
    if a > b:
        pin_uv = pin_uv[::-1]

    T = len(faces)
    rows, cols, vals = [], [], []
    rhs = np.zeros(2 * T)

    def add(r, vertex_local, wc):
        if pinned[vertex_local]:
            u, v = pin_uv[pin_index[vertex_local]]
            rhs[r] -= wc.real * u - wc.imag * v
            rhs[r + T] -= wc.imag * u + wc.real * v
        else:
            j = free_index[vertex_local]
            rows.extend((r, r, r + T, r + T))
            cols.extend((j, j + n_free, j, j + n_free))
            vals.extend((wc.real, -wc.imag, wc.imag, wc.real))

    for t in range(T):
        for k, w in ((0, w0[t]), (1, w1[t]), (2, w2[t])):
            add(t, lf[t, k], w)

    A = coo_matrix((vals, (rows, cols)), shape=(2 * T, 2 * n_free)).tocsr()
    AtA = (A.T @ A).tocsc()
    try:
        x = spsolve(AtA, A.T @ rhs)
    except Exception:
        return None
    if not np.all(np.isfinite(x)):
        return None
    uv = np.zeros((n, 2))
    uv[~pinned, 0] = x[:n_free]
    uv[~pinned, 1] = x[n_free:]
    uv[pinned] = pin_uv[pin_index[pinned]]

    # Reject fold-overs: all UV triangles must share one orientation.
    q = uv[lf]
    d1 = q[:, 1] - q[:, 0]
    d2 = q[:, 2] - q[:, 0]
    signed = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if signed.min() <= 0 and signed.max() >= 0:
        return None
    if signed.max() < 0:
        uv[:, 1] = -uv[:, 1]
        q = uv[lf]
        signed = -signed
    # Uniform texel density: scale so UV area matches 3D area.
    uv_area = float(signed.sum() / 2.0)
    if uv_area <= 1e-300:
        return None
    uv *= np.sqrt(float(area.sum()) / uv_area)
    return verts, uv


def _chart_distortion(mesh, members, verts, uv):
    """Per-face singular-value ratio of the 3D->UV map."""
    local = np.full(mesh.num_vertices, -1, dtype=np.int64)
    local[verts] = np.arange(len(verts))
    lf = local[mesh.faces[members]]
    p = mesh.vertices[mesh.faces[members]]
    e1 = p[:, 1] - p[:, 0]
    x1 = np.linalg.norm(e1, axis=1)
    ex = e1 / np.maximum(x1, 1e-300)[:, None]
    e2 = p[:, 2] - p[:, 0]
    x2 = np.einsum("ij,ij->i", e2, ex)
    y2 = np.maximum(np.linalg.norm(e2 - x2[:, None] * ex, axis=1), 1e-300)
    q = uv[lf]
    du = np.stack([q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]], axis=2)  # (T, 2, 2)
    src = np.zeros_like(du)
    src[:, 0, 0] = x1
    src[:, 0, 1] = x2
    src[:, 1, 1] = y2
    J = du @ np.linalg.inv(src)
    s = np.linalg.svd(J, compute_uv=False)
    return s[:, 0] / np.maximum(s[:, 1], 1e-300)


# ---------------------------------------------------------------------------
# Packing and rasterization


def _skyline_pack(sizes: list, width: int):
    """Skyline bottom-left packing of integer (w, h) rects into a strip.

    Returns (positions, used_height) or None if some rect exceeds the width.
    """
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][1], -sizes[i][0], i))
    skyline = [(0, 0, width)]  # (x, y, length)
    positions = [None] * len(sizes)

    def find_slot(w):
        best = None
        for i, (x, y, length) in enumerate(skyline):
            if w <= length:
                if best is None or y < best[1] or (y == best[1] and x < best[0]):
                    best = (x, y, i)
            else:
                # Span multiple segments: feasible height is their max.
                span = 0
                yy = y
                j = i
                while j < len(skyline) and span < w:
                    yy = max(yy, skyline[j][1])
                    span += skyline[j][2]
                    j += 1
                if span >= w and (best is None or yy < best[1] or (yy == best[1] and x < best[0])):
                    best = (x, yy, i)
        return best

    for i in order:
        w, h = sizes[i]
        if w > width:
            return None
        slot = find_slot(w)
        x, y, seg = slot
        positions[i] = (x, y)
        # Rebuild the skyline across [x, x+w).
        new_skyline = []
        for sx, sy, sl in skyline:
            if sx + sl <= x or sx >= x + w:
                new_skyline.append((sx, sy, sl))
                continue
            if sx < x:
                new_skyline.append((sx, sy, x - sx))
            if sx + sl > x + w:
                new_skyline.append((x + w, sy, sx + sl - (x + w)))
        new_skyline.append((x, y + h, w))
        skyline = sorted(new_skyline)
        # Merge adjacent segments at equal height.
        merged = []
        for seg2 in skyline:
            if merged and merged[-1][1] == seg2[1] and merged[-1][0] + merged[-1][2] == seg2[0]:
                merged[-1] = (merged[-1][0], merged[-1][1], merged[-1][2] + seg2[2])
            else:
                merged.append(list(seg2))
        skyline = [tuple(s) for s in merged]
    used_height = max(y + sizes[i][1] for i, (x, y) in enumerate(positions))
    return positions, used_height


def _pack_charts(chart_uvs: list, resolution: int):
    """Scale chart UVs jointly and pack their boxes with gutters.

    Returns per-chart (offset, scale) mapping local uv to continuous pixel
    coordinates measured in the [0, resolution] square.
    """
    margin = GUTTER_PIXELS
    pad = 1  # per side; two touching boxes keep a >= 2 px gap
    avail = resolution - 2 * margin
    boxes = []
    for verts, uv in chart_uvs:
        lo = uv.min(axis=0)
        hi = uv.max(axis=0)
        boxes.append((lo, np.maximum(hi - lo, 1e-12)))

    def try_scale(alpha):
        sizes = [
            (int(np.ceil(alpha * wh[0])) + 2 * pad, int(np.ceil(alpha * wh[1])) + 2 * pad)
            for _, wh in boxes
        ]
        packed = _skyline_pack(sizes, avail)
        if packed is None:
            return None
        positions, used = packed
        if used > avail:
            return None
        return positions

    total_area = sum(float(wh[0] * wh[1]) for _, wh in boxes)
    hi = avail / max(max(float(wh.max()) for _, wh in boxes), 1e-12)
    hi = min(hi, np.sqrt(avail * avail / max(total_area, 1e-12)))
    best = None
    result = try_scale(hi)
    if result is not None:
        best = (hi, result)
    else:
        lo_a, hi_a = 0.0, hi
        for _ in range(40):
            mid = 0.5 * (lo_a + hi_a)
            result = try_scale(mid)
            if result is not None:
                best = (mid, result)
                lo_a = mid
            else:
                hi_a = mid
            if best is not None and (hi_a - lo_a) < 1e-3 * hi:
                break
    if best is None:
        raise MeshPriorError("chart packing failed: resolution too small for chart count")
    alpha, positions = best
    placements = []
    for (lo, _), (px, py) in zip(boxes, positions):
        offset = np.array([margin + px + pad, margin + py + pad], dtype=np.float64)
        placements.append((offset, alpha, lo))
    return placements


def _rasterize(corner_px: np.ndarray, resolution: int):
    """Rasterize UV triangles given corner pixel coords (F, 3, 2) as (col, row).

    Returns (face_id_map, bary_map, multiplicity). Pixels claimed by several
    triangles go to the most interior claim; multiplicity counts strictly
    interior claims only, so a count above 1 means genuine overlap.
    """
    H = W = resolution
    face_id = np.full((H, W), -1, dtype=np.int32)
    best_quality = np.full((H, W), -np.inf, dtype=np.float64)
    bary_map = np.zeros((H, W, 3), dtype=np.float32)
    multiplicity = np.zeros((H, W), dtype=np.int32)
    eps = 1e-8
    for f in range(len(corner_px)):
        tri = corner_px[f]  # (3, 2) as (col, row)
        c_lo = max(int(np.floor(tri[:, 0].min())), 0)
        c_hi = min(int(np.ceil(tri[:, 0].max())) + 1, W)
        r_lo = max(int(np.floor(tri[:, 1].min())), 0)
        r_hi = min(int(np.ceil(tri[:, 1].max())) + 1, H)
        if c_lo >= c_hi or r_lo >= r_hi:
            continue
        cols, rows = np.meshgrid(np.arange(c_lo, c_hi), np.arange(r_lo, r_hi))
        px = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
        m = np.array([tri[1] - tri[0], tri[2] - tri[0]]).T  # 2x2
        det = np.linalg.det(m)
        if abs(det) < 1e-14:
            continue
        inv = np.linalg.inv(m)
        uvw = (px - tri[0]) @ inv.T
        bary = np.column_stack([1.0 - uvw[:, 0] - uvw[:, 1], uvw[:, 0], uvw[:, 1]])
        quality = bary.min(axis=1)
        covered = quality >= -eps
        if not covered.any():
            continue
        rr = rows.ravel()[covered]
        cc = cols.ravel()[covered]
        q = quality[covered]
        multiplicity[rr[q > eps], cc[q > eps]] += 1
        better = q > best_quality[rr, cc]
        rr, cc, q = rr[better], cc[better], q[better]
        best_quality[rr, cc] = q
        face_id[rr, cc] = f
        bary_map[rr, cc] = bary[covered][better].astype(np.float32)
    return face_id, bary_map, multiplicity


def uv_to_pixel(uv: np.ndarray, resolution: int) -> np.ndarray:
    """(…, 2) uv -> (…, 2) sub-pixel (row, col)."""
    uv = np.asarray(uv, dtype=np.float64)
    out = np.empty_like(uv)
    out[..., 0] = uv[..., 1] * resolution - 0.5
    out[..., 1] = uv[..., 0] * resolution - 0.5
    return out


def generate_atlas(
    mesh: TriangleMesh,
    resolution: int = 1024,
    angle_deg: float = 50.0,
    max_split_depth: int = 8,
) -> UVAtlas:
    """Build a UV atlas: segment, flatten, pack, rasterize, validate.

    Charts failing disk topology, the conformal solve or injectivity are
    split into smaller charts and retried; a hard failure raises.
    """
    if not mesh.is_watertight():
        raise MeshPriorError("generate_atlas expects a watertight mesh")
    pending = [(members, 0) for members in _segment_charts(mesh, angle_deg)]
    flattened = []  # (members, verts, uv)
    while pending:
        members, depth = pending.pop()
        result = None
        if len(members) == 0:
            continue
        if _chart_euler(mesh, members) == 1:
            result = _lscm_chart(mesh, members)
            if result is not None:
                ratio = _chart_distortion(mesh, members, result[0], result[1])
                if len(members) > 1 and float(np.median(ratio)) > DISTORTION_LIMIT:
                    result = None  # grossly distorted: split further
        if result is None:
            if depth >= max_split_depth or len(members) == 1:
                raise MeshPriorError("atlas generation failed: chart cannot be flattened")
            pending.extend((part, depth + 1) for part in _split_chart(mesh, members))
            continue
        flattened.append((members, result[0], result[1]))

    placements = _pack_charts([(v, uv) for _, v, uv in flattened], resolution)

    corner_uv = np.zeros((mesh.num_faces, 3, 2))
    chart_id = np.full(mesh.num_faces, -1, dtype=np.int64)
    vertex_uv = {}
    outliers = []
    for cid, ((members, verts, uv), (offset, alpha, lo)) in enumerate(zip(flattened, placements)):
        px = offset[None, :] + alpha * (uv - lo[None, :])  # (n, 2) as (col, row)
        uv01 = px / resolution
        local = np.full(mesh.num_vertices, -1, dtype=np.int64)
        local[verts] = np.arange(len(verts))
        chart_id[members] = cid
        corner_uv[members] = uv01[local[mesh.faces[members]]]
        for v in verts:
            vertex_uv[(int(v), cid)] = uv01[local[v]].copy()
        ratio = _chart_distortion(mesh, members, verts, uv)
        for f_local, r in zip(members, ratio):
            if r > DISTORTION_LIMIT:
                outliers.append(int(f_local))

    corner_px = np.empty_like(corner_uv)
    corner_px[..., 0] = corner_uv[..., 0] * resolution - 0.5  # col
    corner_px[..., 1] = corner_uv[..., 1] * resolution - 0.5  # row
    face_id_map, bary_map, multiplicity = _rasterize(corner_px, resolution)
    if (multiplicity > 1).any():
        raise MeshPriorError("atlas rasterization produced overlapping charts")
    if outliers:
        log.warning("%d faces exceed the conformal distortion limit", len(outliers))

    return UVAtlas(
        corner_uv=corner_uv,
        chart_id=chart_id,
        vertex_uv=vertex_uv,
        valid_mask=face_id_map >= 0,
        resolution=resolution,
        face_id_map=face_id_map,
        bary_map=bary_map,
        distortion_outliers=tuple(outliers),
    )


# ---------------------------------------------------------------------------
# Import / validation


def rasterization_multiplicity(corner_uv: np.ndarray, resolution: int) -> np.ndarray:
    """Recount strictly-interior rasterization claims (injectivity check)."""
    corner_px = np.empty_like(corner_uv)
    corner_px[..., 0] = corner_uv[..., 0] * resolution - 0.5
    corner_px[..., 1] = corner_uv[..., 1] * resolution - 0.5
    _, _, multiplicity = _rasterize(corner_px, resolution)
    return multiplicity


def charts_from_corner_uv(mesh: TriangleMesh, corner_uv: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Chart labels by UV continuity: adjacent faces join when their shared
    corners carry equal UVs."""
    parent = np.arange(mesh.num_faces)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    pairs = _face_adjacency_pairs(mesh)
    for a, b in pairs:
        fa, fb = mesh.faces[a], mesh.faces[b]
        shared = np.intersect1d(fa, fb)
        match = True
        for v in shared:
            ua = corner_uv[a][fa == v][0]
            ub = corner_uv[b][fb == v][0]
            if np.abs(ua - ub).max() > tol:
                match = False
                break
        if match and len(shared) == 2:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(f) for f in range(mesh.num_faces)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def import_atlas(mesh: TriangleMesh, corner_uv: np.ndarray, resolution: int = 1024) -> UVAtlas:
    """Validate externally supplied per-corner UVs and build an atlas.

    Raises UVValidationError listing every violated invariant.
    """
    corner_uv = np.asarray(corner_uv, dtype=np.float64)
    violations = []
    if corner_uv.shape != (mesh.num_faces, 3, 2):
        raise UVValidationError([f"corner_uv shape {corner_uv.shape} != (F, 3, 2)"])
    if corner_uv.min() < -1e-9 or corner_uv.max() > 1.0 + 1e-9:
        violations.append(
            f"uv out of [0,1]: range [{corner_uv.min():.4f}, {corner_uv.max():.4f}]"
        )
    chart_id = charts_from_corner_uv(mesh, corner_uv)

    # Per-(vertex, chart) consistency.
    vertex_uv = {}
    for f in range(mesh.num_faces):
        for k in range(3):
            key = (int(mesh.faces[f, k]), int(chart_id[f]))
            uv = corner_uv[f, k]
            if key in vertex_uv:
                if np.abs(vertex_uv[key] - uv).max() > 1e-6:
                    violations.append(f"vertex {key[0]} has inconsistent uv within chart {key[1]}")
            else:
                vertex_uv[key] = uv.copy()

    if violations:
        raise UVValidationError(sorted(set(violations)))

    corner_px = np.empty_like(corner_uv)
    corner_px[..., 0] = corner_uv[..., 0] * resolution - 0.5
    corner_px[..., 1] = corner_uv[..., 1] * resolution - 0.5
    face_id_map, bary_map, multiplicity = _rasterize(corner_px, resolution)
    if (multiplicity > 1).any():
        n = int((multiplicity > 1).sum())
        raise UVValidationError([f"injectivity violated: {n} pixels covered more than once"])

    # Gutter check between chart boxes in pixels.
    n_charts = int(chart_id.max()) + 1
    boxes = []
    for c in range(n_charts):
        pts = corner_px[chart_id == c].reshape(-1, 2)
        boxes.append((pts.min(axis=0), pts.max(axis=0)))
    for i in range(n_charts):
        for j in range(i + 1, n_charts):
            lo_i, hi_i = boxes[i]
            lo_j, hi_j = boxes[j]
            gap = max(
                float(lo_j[0] - hi_i[0]),
                float(lo_i[0] - hi_j[0]),
                float(lo_j[1] - hi_i[1]),
                float(lo_i[1] - hi_j[1]),
            )
            if gap < GUTTER_PIXELS - 1e-6:
                raise UVValidationError(
                    [f"charts {i} and {j} violate the {GUTTER_PIXELS}px gutter (gap {gap:.2f}px)"]
                )

    return UVAtlas(
        corner_uv=corner_uv,
        chart_id=chart_id,
        vertex_uv=vertex_uv,
        valid_mask=face_id_map >= 0,
        resolution=resolution,
        face_id_map=face_id_map,
        bary_map=bary_map,
    )


# ---------------------------------------------------------------------------
# Splatting, write-back, baking


def _footprint_valid(sites: np.ndarray, chart_of_site: np.ndarray, atlas: UVAtlas) -> np.ndarray:
    """A site is usable when all 4 bilinear-footprint pixels are valid and in
    the site's own chart."""
    H = W = atlas.resolution
    chart_map = atlas.chart_map()
    r0 = np.floor(sites[:, 0]).astype(np.int64)
    c0 = np.floor(sites[:, 1]).astype(np.int64)
    ok = (r0 >= 0) & (c0 >= 0) & (r0 + 1 <= H - 1) & (c0 + 1 <= W - 1)
    out = np.zeros(len(sites), dtype=bool)
    idx = np.nonzero(ok)[0]
    rr, cc = r0[idx], c0[idx]
    good = np.ones(len(idx), dtype=bool)
    for dr in (0, 1):
        for dc in (0, 1):
            good &= atlas.valid_mask[rr + dr, cc + dc]
            good &= chart_map[rr + dr, cc + dc] == chart_of_site[idx]
    out[idx] = good
    return out


def splat_points_to_uv(
    mesh: TriangleMesh, atlas: UVAtlas, cloud, channel_kind: ChannelKind
) -> SparseUVSamples:
    """Project each cloud point to the mesh and place its value at the
    corresponding sub-pixel UV site.

    Sites whose bilinear footprint leaves the chart are dropped and counted;
    losing more than half the points raises AtlasQualityError.
    """
    channel_kind = ChannelKind(channel_kind)
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
    if channel_kind is ChannelKind.RGB:
        colors = getattr(cloud, "colors", None)
        if colors is None:
            raise ValueError("RGB splatting needs a colored point cloud")
        values = np.asarray(colors, dtype=np.float64)
    else:
        values = np.asarray(positions, dtype=np.float64)

    samples, _ = project_points_to_mesh(mesh, positions)
    uv = np.einsum("kc,kcd->kd", samples.barycentric, atlas.corner_uv[samples.face_ids])
    sites = uv_to_pixel(uv, atlas.resolution)
    chart_of_site = atlas.chart_id[samples.face_ids]
    keep = _footprint_valid(sites, chart_of_site, atlas)
    dropped = int((~keep).sum())
    if dropped > 0.5 * len(positions):
        raise AtlasQualityError(
            f"atlas too fragmented: {dropped}/{len(positions)} points fell outside usable UV space"
        )
    return SparseUVSamples(
        sites=sites[keep],
        values=values[keep],
        channel_kind=channel_kind,
        resolution=atlas.resolution,
        dropped=dropped,
    )


def _masked_bilinear(grid: np.ndarray, sites: np.ndarray, chart_of_site: np.ndarray, atlas: UVAtlas):
    """Bilinear read restricted to valid pixels of the site's own chart.

    Weights of invalid or foreign-chart taps are dropped and the rest are
    renormalized; identical to plain bilinear at interior sites. Returns
    (values, usable mask); a site with no usable tap is flagged unusable.
    The >= 2px gutter guarantees a tap never reaches another chart's pixels,
    so the read never mixes unsupervised or cross-chart predictions.
    """
    H = W = atlas.resolution
    chart_map = atlas.chart_map()
    r = sites[:, 0]
    c = sites[:, 1]
    inb = (r >= 0) & (c >= 0) & (r <= H - 1) & (c <= W - 1)
    r0 = np.clip(np.floor(r).astype(np.int64), 0, H - 2)
    c0 = np.clip(np.floor(c).astype(np.int64), 0, W - 2)
    fr = r - r0
    fc = c - c0
    acc = np.zeros((len(sites), grid.shape[2]))
    wsum = np.zeros(len(sites))
    for dr, dc, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (1, 0, fr * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 1, fr * fc),
    ):
        ok = atlas.valid_mask[r0 + dr, c0 + dc] & (chart_map[r0 + dr, c0 + dc] == chart_of_site)
        wk = np.where(ok & inb, w, 0.0)
        acc += wk[:, None] * grid[r0 + dr, c0 + dc]
        wsum += wk
    usable = wsum > 1e-12
    values = np.zeros_like(acc)
    values[usable] = acc[usable] / wsum[usable, None]
    return values, usable


def update_vertices_from_map(
    mesh: TriangleMesh, atlas: UVAtlas, dense_map: DenseUVMap, stats: dict | None = None
) -> TriangleMesh:
    """Move each vertex to the dense XYZ map's bilinear value at its uv.

    Seam vertices average their chart duplicates; vertices with no usable
    entry keep their previous position (counted in ``stats``).
    """
    if ChannelKind(dense_map.channel_kind) is not ChannelKind.XYZ:
        raise ValueError("vertex update requires an XYZ map")
    if dense_map.values.shape[0] != atlas.resolution:
        raise ValueError("dense map resolution does not match the atlas")
    entries = sorted(atlas.vertex_uv.items())
    entry_vertex = np.array([v for (v, _), _ in entries], dtype=np.int64)
    entry_chart = np.array([c for (_, c), _ in entries], dtype=np.int64)
    entry_uv = np.array([uv for _, uv in entries], dtype=np.float64)
    sites = uv_to_pixel(entry_uv, atlas.resolution)
    values, usable = _masked_bilinear(dense_map.values, sites, entry_chart, atlas)

    acc = np.zeros((mesh.num_vertices, 3))
    cnt = np.zeros(mesh.num_vertices)
    np.add.at(acc, entry_vertex[usable], values[usable])
    np.add.at(cnt, entry_vertex[usable], 1.0)
    updated = cnt > 0
    new_vertices = mesh.vertices.copy()
    new_vertices[updated] = acc[updated] / cnt[updated, None]
    if stats is not None:
        stats["fallback_vertices"] = int((~updated).sum())
        stats["invalid_entries"] = int((~usable).sum())
    if not updated.all():
        log.info("update_vertices_from_map: %d vertices kept previous positions", int((~updated).sum()))
    return mesh.with_vertices(new_vertices)


def bake_texture(atlas: UVAtlas, dense_map: DenseUVMap) -> np.ndarray:
    """8-bit texture image: clamp and quantize valid pixels, then fill the
    invalid region by nearest-valid dilation so mip levels do not bleed."""
    if ChannelKind(dense_map.channel_kind) is not ChannelKind.RGB:
        raise ValueError("texture baking requires an RGB map")
    if dense_map.values.shape[0] != atlas.resolution:
        raise ValueError("dense map resolution does not match the atlas")
    img = np.clip(dense_map.values, 0.0, 1.0)
    img = np.rint(img * 255.0).astype(np.uint8)
    invalid = ~atlas.valid_mask
    if invalid.any() and atlas.valid_mask.any():
        _, (ir, ic) = ndimage.distance_transform_edt(invalid, return_indices=True)
        img = img[ir, ic]
    return img


def sparse_samples_image(samples: SparseUVSamples, resolution: int | None = None, dot: int = 2) -> np.ndarray:
    """Debug rendering of sparse sites as small dots (dot x dot pixels each)."""
    res = resolution or samples.resolution
    if res <= 0:
        raise ValueError("resolution unknown; pass it explicitly")
    img = np.zeros((res, res, 3), dtype=np.uint8)
    vals = samples.values
    if ChannelKind(samples.channel_kind) is ChannelKind.XYZ and len(vals):
        lo = vals.min(axis=0)
        span = np.maximum(vals.max(axis=0) - lo, 1e-12)
        vals = (vals - lo) / span
    vals = np.clip(vals, 0.0, 1.0)
    for (r, c), v in zip(np.rint(samples.sites).astype(int), vals):
        r0, c0 = max(r, 0), max(c, 0)
        img[r0 : min(r0 + dot, res), c0 : min(c0 + dot, res)] = np.rint(v * 255).astype(np.uint8)
    return img
