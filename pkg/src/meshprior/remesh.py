"""Watertight remeshing: midpoint subdivision for refinement, quadric-error
edge-collapse decimation for coarsening.

Both directions preserve closed-manifold topology. The remesher is pluggable
so an external tool can replace the built-in one.
"""

from __future__ import annotations

import heapq
from typing import Protocol

import numpy as np

from .errors import TopologyError
from .geometry import TriangleMesh

__all__ = ["Remesher", "MidpointQuadricRemesher", "subdivide_midpoint", "decimate_quadric", "remesh_to_resolution"]


def subdivide_midpoint(mesh: TriangleMesh) -> TriangleMesh:
    """One 4-to-1 subdivision: each edge gains a midpoint vertex, V' = V + E."""
    V = mesh.num_vertices
    faces = mesh.faces
    raw = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    edges, inverse = np.unique(raw, axis=0, return_inverse=True)
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])
    m = V + inverse.reshape(-1, 3)  # midpoint vertex ids per face edge (01, 12, 20)
    f = faces
    new_faces = np.concatenate(
        [
            np.stack([f[:, 0], m[:, 0], m[:, 2]], axis=1),
            np.stack([f[:, 1], m[:, 1], m[:, 0]], axis=1),
            np.stack([f[:, 2], m[:, 2], m[:, 1]], axis=1),
            np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
        ]
    )
    return TriangleMesh(vertices, new_faces)


def _vertex_quadrics(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted plane quadrics accumulated per vertex, (V, 4, 4)."""
    tri = mesh.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(n, axis=1)
    n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    d = -np.einsum("ij,ij->i", n, tri[:, 0])
    plane = np.concatenate([n, d[:, None]], axis=1)  # (F, 4)
    K = plane[:, :, None] * plane[:, None, :] * area[:, None, None]
    Q = np.zeros((mesh.num_vertices, 4, 4))
    for k in range(3):
        np.add.at(Q, mesh.faces[:, k], K)
    return Q


def _optimal_position(Q: np.ndarray, p0: np.ndarray, p1: np.ndarray):
    """Collapse target minimizing v^T Q v; falls back to best of midpoint/endpoints."""
    A = Q[:3, :3]
    b = -Q[:3, 3]
    try:
        v = np.linalg.solve(A, b)
        if np.isfinite(v).all() and np.linalg.norm(v - 0.5 * (p0 + p1)) < 4.0 * np.linalg.norm(p1 - p0) + 1e-12:
            return v
    except np.linalg.LinAlgError:
        pass
    candidates = [0.5 * (p0 + p1), p0, p1]
    costs = [float(np.r_[c, 1.0] @ Q @ np.r_[c, 1.0]) for c in candidates]
    return candidates[int(np.argmin(costs))]


def decimate_quadric(mesh: TriangleMesh, target_vertices: int) -> TriangleMesh:
    """Quadric-error edge-collapse decimation of a watertight mesh.

    Collapses stop at target_vertices or when no manifold-safe collapse
    remains. Link condition plus normal-flip rejection keep the result a
    closed manifold close to the input surface.
    """
    if target_vertices < 4:
        raise ValueError("target_vertices must be >= 4")
    V = mesh.num_vertices
    positions = mesh.vertices.copy()
    Q = _vertex_quadrics(mesh)

    faces = {i: tuple(f) for i, f in enumerate(mesh.faces.tolist())}
    vertex_faces: list[set[int]] = [set() for _ in range(V)]
    for fid, f in faces.items():
        for v in f:
            vertex_faces[v].add(fid)
    ring: list[set[int]] = [set() for _ in range(V)]
    for a, b, c in faces.values():
        ring[a].update((b, c))
        ring[b].update((a, c))
        ring[c].update((a, b))
    alive = np.ones(V, dtype=bool)
    version = np.zeros(V, dtype=np.int64)

    def edge_cost(u, v):
        pos = _optimal_position(Q[u] + Q[v], positions[u], positions[v])
        h = np.r_[pos, 1.0]
        return float(h @ (Q[u] + Q[v]) @ h), pos

    heap = []
    seen = set()
    for a, b, c in faces.values():
        for u, v in ((a, b), (b, c), (a, c)):
            key = (min(u, v), max(u, v))
            if key not in seen:
                seen.add(key)
                cost, pos = edge_cost(*key)
                heapq.heappush(heap, (cost, key[0], key[1], version[key[0]], version[key[1]], pos))

    def would_flip(u, v, pos):
        # Any surviving face around u or v must keep its orientation at the new position.
        for w in (u, v):
            for fid in vertex_faces[w]:
                f = faces[fid]
                if u in f and v in f:
                    continue  # face dies in the collapse
                p = [positions[x] if x not in (u, v) else pos for x in f]
                before = [positions[x] for x in f]
                n0 = np.cross(before[1] - before[0], before[2] - before[0])
                n1 = np.cross(p[1] - p[0], p[2] - p[0])
                if np.dot(n0, n1) <= 1e-16:
                    return True
        return False

    n_alive = V
    while n_alive > target_vertices and heap:
        cost, u, v, ver_u, ver_v, pos = heapq.heappop(heap)
        if not (alive[u] and alive[v]) or version[u] != ver_u or version[v] != ver_v:
            continue
        if v not in ring[u]:
            continue
        shared = ring[u] & ring[v]
        dying = [fid for fid in vertex_faces[u] & vertex_faces[v]]
        # Link condition for a closed manifold: exactly the two opposite vertices.
        if len(shared) != 2 or len(dying) != 2 or n_alive - 1 <= 4:
            continue
        # Duplicate-face guard: relabeled faces must not already exist around u.
        existing = {tuple(sorted(faces[fid])) for fid in vertex_faces[u]}
        conflict = False
        for fid in vertex_faces[v]:
            if fid in dying:
                continue
            relabeled = tuple(sorted(u if x == v else x for x in faces[fid]))
            if relabeled in existing:
                conflict = True
                break
        if conflict or would_flip(u, v, pos):
            continue

        # Collapse v into u at pos.
        positions[u] = pos
        Q[u] = Q[u] + Q[v]
        for fid in dying:
            for w in faces[fid]:
                vertex_faces[w].discard(fid)
            del faces[fid]
        for fid in list(vertex_faces[v]):
            f = faces[fid]
            faces[fid] = tuple(u if x == v else x for x in f)
            vertex_faces[u].add(fid)
            vertex_faces[v].discard(fid)
        ring[u].update(ring[v])
        ring[u].discard(u)
        ring[u].discard(v)
        for w in ring[v]:
            if w != u:
                ring[w].discard(v)
                ring[w].add(u)
        ring[v].clear()
        alive[v] = False
        version[u] += 1
        n_alive -= 1

        for w in sorted(ring[u]):
            key = (min(u, w), max(u, w))
            c, p = edge_cost(*key)
            heapq.heappush(heap, (c, key[0], key[1], version[key[0]], version[key[1]], p))

    remap = np.full(V, -1, dtype=np.int64)
    kept = np.nonzero(alive)[0]
    remap[kept] = np.arange(len(kept))
    new_faces = np.array([remap[list(f)] for f in faces.values()], dtype=np.int64)
    return TriangleMesh(positions[kept], new_faces)


class Remesher(Protocol):
    """Anything that can rebuild a watertight mesh near a vertex budget."""

    def remesh(self, mesh: TriangleMesh, target_vertices: int) -> TriangleMesh: ...


class MidpointQuadricRemesher:
    """Built-in remesher: subdivide up, decimate down, tolerance ±10%."""

    def __init__(self, tolerance: float = 0.10):
        self.tolerance = tolerance

    def remesh(self, mesh: TriangleMesh, target_vertices: int) -> TriangleMesh:
        lo = (1.0 - self.tolerance) * target_vertices
        hi = (1.0 + self.tolerance) * target_vertices
        out = mesh
        while out.num_vertices < lo:
            out = subdivide_midpoint(out)
        if out.num_vertices > hi:
            out = decimate_quadric(out, target_vertices)
        return out


def remesh_to_resolution(
    mesh: TriangleMesh, target_vertices: int, remesher: Remesher | None = None
) -> TriangleMesh:
    """Rebuild a watertight mesh with a vertex count within ±10% of target."""
    if target_vertices < 4:
        raise ValueError("target_vertices must be >= 4")
    if not mesh.is_watertight():
        raise TopologyError("remesh_to_resolution requires a watertight mesh")
    out = (remesher or MidpointQuadricRemesher()).remesh(mesh, target_vertices)
    if not out.is_watertight():
        raise TopologyError("remesher produced a non-watertight mesh")
    return out
