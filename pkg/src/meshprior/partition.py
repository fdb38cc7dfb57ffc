"""Mesh partitioning with overlap bands, and overlap-averaged merging.

Large meshes are cut into parts so each edge-network optimization stays under
a face budget; parts overlap by a two-face-ring band and per-vertex results
are averaged over all parts containing the vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError
from .geometry import TriangleMesh

__all__ = ["MeshPart", "MeshPartition", "partition_mesh", "merge_partitions"]


@dataclass(frozen=True)
class MeshPart:
    mesh: TriangleMesh
    vertex_map: np.ndarray  # (V_part,) parent vertex index per part vertex
    face_map: np.ndarray  # (F_part,) parent face index per part face


@dataclass(frozen=True)
class MeshPartition:
    parent: TriangleMesh
    parts: list
    overlap_counts: np.ndarray  # (V_parent,) number of parts containing each vertex

    def __len__(self) -> int:
        return len(self.parts)


def _face_adjacency(faces: np.ndarray):
    """Face ids adjacent via a shared vertex, as per-face lists."""
    V = int(faces.max()) + 1
    vert_faces: list[list[int]] = [[] for _ in range(V)]
    for fid, f in enumerate(faces):
        for v in f:
            vert_faces[v].append(fid)
    return vert_faces


def _grow_balanced_regions(faces: np.ndarray, vert_faces, n_parts: int) -> np.ndarray:
    """Multi-source BFS over vertex-adjacent faces into n balanced regions."""
    F = len(faces)
    seeds = [0]
    # Farthest-point seeding in BFS-hop distance.
    dist = np.full(F, np.iinfo(np.int64).max, dtype=np.int64)

    def bfs_from(srcs):
        d = np.full(F, -1, dtype=np.int64)
        frontier = list(srcs)
        for s in srcs:
            d[s] = 0
        while frontier:
            nxt = []
            for f in frontier:
                for v in faces[f]:
                    for g in vert_faces[v]:
                        if d[g] < 0:
                            d[g] = d[f] + 1
                            nxt.append(g)
            frontier = nxt
        return d

    for _ in range(1, n_parts):
        dist = np.minimum(dist, bfs_from(seeds[-1:]))
        seeds.append(int(np.argmax(dist)))

    label = np.full(F, -1, dtype=np.int64)
    frontiers = []
    for i, s in enumerate(seeds):
        label[s] = i
        frontiers.append([s])
    active = True
    while active:
        active = False
        for i in range(n_parts):
            nxt = []
            for f in frontiers[i]:
                for v in faces[f]:
                    for g in vert_faces[v]:
                        if label[g] < 0:
                            label[g] = i
                            nxt.append(g)
            if nxt:
                active = True
            frontiers[i] = nxt
    return label


def _dilate_faces(faces: np.ndarray, vert_faces, members: np.ndarray, rings: int) -> np.ndarray:
    selected = np.zeros(len(faces), dtype=bool)
    selected[members] = True
    for _ in range(rings):
        verts = np.unique(faces[selected])
        for v in verts:
            for g in vert_faces[v]:
                selected[g] = True
    return np.nonzero(selected)[0]


def partition_mesh(mesh: TriangleMesh, max_faces: int, overlap_rings: int = 2) -> MeshPartition:
    """Cut a mesh into overlapping parts of at most max_faces faces each.

    Regions grow from farthest-point seeds by breadth-first search, then each
    region is dilated by ``overlap_rings`` face rings to form the overlap band.
    """
    if max_faces < 100:
        raise ValueError("max_faces must be >= 100")
    F = mesh.num_faces
    if F <= max_faces:
        part = MeshPart(
            mesh=mesh,
            vertex_map=np.arange(mesh.num_vertices, dtype=np.int64),
            face_map=np.arange(F, dtype=np.int64),
        )
        return MeshPartition(mesh, [part], np.ones(mesh.num_vertices, dtype=np.int64))

    vert_faces = _face_adjacency(mesh.faces)
    n_parts = max(2, int(np.ceil(F / (0.7 * max_faces))))
    while True:
        label = _grow_balanced_regions(mesh.faces, vert_faces, n_parts)
        part_faces = [
            _dilate_faces(mesh.faces, vert_faces, np.nonzero(label == i)[0], overlap_rings)
            for i in range(n_parts)
        ]
        if max(len(p) for p in part_faces) <= max_faces:
            break
        n_parts += 1

    parts = []
    overlap_counts = np.zeros(mesh.num_vertices, dtype=np.int64)
    for fids in part_faces:
        sub_faces = mesh.faces[fids]
        verts = np.unique(sub_faces)
        remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
        remap[verts] = np.arange(len(verts))
        parts.append(
            MeshPart(
                mesh=TriangleMesh(mesh.vertices[verts], remap[sub_faces]),
                vertex_map=verts,
                face_map=np.asarray(fids, dtype=np.int64),
            )
        )
        overlap_counts[verts] += 1
    if not (overlap_counts >= 1).all():
        raise CoverageError("partitioning left vertices uncovered")
    return MeshPartition(mesh, parts, overlap_counts)


def merge_partitions(partition: MeshPartition, per_part_vertices: list) -> np.ndarray:
    """Average per-part vertex positions back onto the parent vertex array."""
    V = partition.parent.num_vertices
    acc = np.zeros((V, 3))
    count = np.zeros(V)
    for part, verts in zip(partition.parts, per_part_vertices, strict=True):
        verts = np.asarray(verts, dtype=np.float64)
        if verts.shape != (len(part.vertex_map), 3):
            raise ValueError(
                f"part vertex array shape {verts.shape} does not match part size {len(part.vertex_map)}"
            )
        np.add.at(acc, part.vertex_map, verts)
        np.add.at(count, part.vertex_map, 1.0)
    if (count == 0).any():
        raise CoverageError(f"{int((count == 0).sum())} parent vertices received no values")
    return acc / count[:, None]
