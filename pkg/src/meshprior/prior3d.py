"""Edge-graph self-prior network: deforms a mesh toward a point cloud by
predicting per-edge vertex displacements from a fixed random input.

The network convolves over the edge 4-neighborhood with symmetric slot
features, coarsens with feature-ordered manifold-safe edge collapses and
restores resolution by copying survivor features back to collapsed edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.sparse import csr_matrix
from torch import nn

from .errors import OptimizationError
from .geometry import EdgeTopology, TriangleMesh, build_edge_topology
from .losses import LossWeights, chamfer_loss, edge_length_loss

__all__ = [
    "Prior3DConfig",
    "EdgeCollapseRecord",
    "init_edge_noise",
    "mesh_conv",
    "mesh_pool",
    "mesh_unpool",
    "apply_edge_displacements",
    "MeshConv",
    "Prior3DNet",
    "optimize_3d_prior",
]

DEFAULT_CHANNEL_PLAN = ((6, 32), (32, 64), (64, 128), (128, 128), (128, 64), (64, 6))


@dataclass(frozen=True)
class Prior3DConfig:
    residual_blocks: int = 6
    convs_per_block: int = 3
    channel_plan: tuple = DEFAULT_CHANNEL_PLAN
    pool_proportions: tuple = (0.8, 0.8)
    steps: int = 2000
    learning_rate: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    samples_per_step: int | None = None  # None: point-cloud size, capped
    max_samples: int = 25000
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if len(self.channel_plan) != self.residual_blocks:
            raise ValueError("channel_plan must list one (in, out) pair per residual block")
        if len(self.pool_proportions) != 2:
            raise ValueError("two pool proportions expected")
        for p in self.pool_proportions:
            if not (0.0 < p <= 1.0):
                raise ValueError("pool proportions must be in (0, 1]")


def init_edge_noise(topology: EdgeTopology, seed: int, std: float = 1.0) -> torch.Tensor:
    """Fixed Gaussian input feature per edge, (E, 6), deterministic per seed."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(topology.num_edges, 6, generator=gen) * std


def _neighbor_index(topology: EdgeTopology) -> torch.Tensor:
    """Neighbor edge ids with self-substitution for boundary slots, (E, 4)."""
    nbr = topology.neighbors
    own = np.arange(topology.num_edges, dtype=np.int64)[:, None]
    return torch.as_tensor(np.where(nbr >= 0, nbr, own))


def mesh_conv(features, topology: EdgeTopology, kernel, bias=None) -> torch.Tensor:
    """Symmetric edge convolution.

    For edge e with neighbors (a, b, c, d) (a, c in one face; b, d in the
    other) the slot features are (e, |a-c|, a+c, |b-d|, b+d), contracted
    with a (C_out, C_in, 5) kernel. Invariant to the within-face swaps
    a<->c and b<->d by construction.
    """
    f = features if isinstance(features, torch.Tensor) else torch.as_tensor(features, dtype=torch.float64)
    k = kernel if isinstance(kernel, torch.Tensor) else torch.as_tensor(kernel, dtype=f.dtype)
    if f.ndim != 2 or k.ndim != 3 or k.shape[1] != f.shape[1] or k.shape[2] != 5:
        raise ValueError(f"shape mismatch: features {tuple(f.shape)}, kernel {tuple(k.shape)}")
    idx = _neighbor_index(topology)
    fa, fb, fc, fd = f[idx[:, 0]], f[idx[:, 1]], f[idx[:, 2]], f[idx[:, 3]]
    slots = torch.stack([f, (fa - fc).abs(), fa + fc, (fb - fd).abs(), fb + fd], dim=2)
    out = torch.einsum("ecs,ocs->eo", slots, k)
    if bias is not None:
        b = bias if isinstance(bias, torch.Tensor) else torch.as_tensor(bias, dtype=f.dtype)
        out = out + b[None, :]
    return out


class MeshConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, generator: torch.Generator, gain: float = 1.0):
        super().__init__()
        # The five symmetric slots carry ~9x the per-channel second moment of
        # the raw features; fold that into the fan so activations stay stable.
        std = gain * (2.0 / (in_channels * 9.0)) ** 0.5
        self.kernel = nn.Parameter(torch.randn(out_channels, in_channels, 5, generator=generator) * std)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, features, topology):
        return mesh_conv(features, topology, self.kernel, self.bias)


@dataclass(frozen=True)
class EdgeCollapseRecord:
    """Inverse data for one pooling step: original edge -> pooled survivor row."""

    orig_num_edges: int
    parent_new_index: np.ndarray  # (E_orig,) index into the pooled feature rows


def _faces_from_topology(topology: EdgeTopology) -> list:
    faces = []
    for fe in topology.face_edges:
        verts = sorted(set(topology.edges[fe].ravel().tolist()))
        faces.append(verts)
    return faces


def mesh_pool(features, topology: EdgeTopology, keep_fraction: float):
    """Collapse edges in ascending initial feature-norm order.

    Stops once no further collapse keeps at least ceil(keep_fraction * E)
    edges; collapses that would break manifoldness are skipped. Feature
    merging (survivor = mean of survivor, absorbed and collapsed edge) is
    applied as one sparse linear map so gradients flow.

    Returns (pooled features, pooled topology, record).
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must be in (0, 1]")
    f = features if isinstance(features, torch.Tensor) else torch.as_tensor(features, dtype=torch.float64)
    E = topology.num_edges
    if f.shape[0] != E:
        raise ValueError("feature rows must match edge count")
    target = int(np.ceil(keep_fraction * E))
    if target >= E:
        record = EdgeCollapseRecord(E, np.arange(E, dtype=np.int64))
        return f, topology, record

    norms = f.detach().to(torch.float64).norm(dim=1).numpy()
    order = np.argsort(norms, kind="stable")

    edges_cur = topology.edges.copy()
    alive_edge = np.ones(E, dtype=bool)
    edge_key = {(int(a), int(b)): i for i, (a, b) in enumerate(edges_cur)}
    faces = {i: f3 for i, f3 in enumerate(_faces_from_topology(topology))}
    edge_faces = {e: set(int(x) for x in topology.edge_faces[e] if x >= 0) for e in range(E)}
    vertex_faces: dict[int, set] = {}
    for fid, f3 in faces.items():
        for v in f3:
            vertex_faces.setdefault(v, set()).add(fid)
    ring: dict[int, set] = {}
    for a, b in edges_cur:
        ring.setdefault(int(a), set()).add(int(b))
        ring.setdefault(int(b), set()).add(int(a))
    boundary_vertex = set()
    for e in range(E):
        if len(edge_faces[e]) < 2:
            boundary_vertex.update(int(x) for x in edges_cur[e])
    n_vertices = len(ring)

    # Sequential feature averaging as a growing sparse row basis.
    rows: list[dict] = [{e: 1.0} for e in range(E)]
    parent = np.arange(E, dtype=np.int64)

    def merge_rows(survivor, absorbed, collapsed):
        combined: dict[int, float] = {}
        for src in (survivor, absorbed, collapsed):
            for k, w in rows[src].items():
                combined[k] = combined.get(k, 0.0) + w / 3.0
        rows[survivor] = combined

    alive_count = E
    for e in order:
        if alive_count - 3 < target:
            break
        if not alive_edge[e] or len(edge_faces[e]) != 2:
            continue
        u, v = int(edges_cur[e, 0]), int(edges_cur[e, 1])
        if u in boundary_vertex or v in boundary_vertex:
            continue
        shared = ring[u] & ring[v]
        if len(shared) != 2 or n_vertices - 1 <= 4:
            continue
        f1, f2 = sorted(edge_faces[e])
        w1 = next(x for x in faces[f1] if x not in (u, v))
        w2 = next(x for x in faces[f2] if x not in (u, v))
        if shared != {w1, w2}:
            continue
        # Duplicate-face guard after relabeling v -> u.
        existing = {tuple(sorted(faces[fid])) for fid in vertex_faces[u]}
        dying = {f1, f2}
        conflict = False
        for fid in vertex_faces[v]:
            if fid in dying:
                continue
            relabeled = tuple(sorted(u if x == v else x for x in faces[fid]))
            if relabeled in existing:
                conflict = True
                break
        if conflict:
            continue
        ea1 = edge_key[(min(u, w1), max(u, w1))]
        eb1 = edge_key[(min(v, w1), max(v, w1))]
        ea2 = edge_key[(min(u, w2), max(u, w2))]
        eb2 = edge_key[(min(v, w2), max(v, w2))]
        if len(edge_faces[ea1]) < 2 or len(edge_faces[ea2]) < 2:
            continue  # merged edge would sit on a boundary

        # Commit: absorb eb1 into ea1, eb2 into ea2, drop e, relabel v -> u.
        merge_rows(ea1, eb1, e)
        merge_rows(ea2, eb2, e)
        parent[eb1] = ea1
        parent[eb2] = ea2
        parent[e] = ea1
        for dead in (e, eb1, eb2):
            alive_edge[dead] = False
        del edge_key[(min(u, v), max(u, v))]
        del edge_key[(min(v, w1), max(v, w1))]
        del edge_key[(min(v, w2), max(v, w2))]
        # Surviving merged edges inherit the dead edge's other face.
        for survivor_e, dead_e, dead_f in ((ea1, eb1, f1), (ea2, eb2, f2)):
            edge_faces[survivor_e].discard(dead_f)
            other = edge_faces[dead_e] - {f1, f2}
            edge_faces[survivor_e].update(other)
            del edge_faces[dead_e]
        del edge_faces[e]
        for fid in (f1, f2):
            for x in faces[fid]:
                vertex_faces[x].discard(fid)
            del faces[fid]
        for fid in list(vertex_faces[v]):
            faces[fid] = [u if x == v else x for x in faces[fid]]
            vertex_faces[u].add(fid)
        del vertex_faces[v]
        for x in sorted(ring[v]):
            if x == u:
                continue
            old = (min(v, x), max(v, x))
            if old in edge_key:
                eid = edge_key.pop(old)
                edges_cur[eid] = (min(u, x), max(u, x))
                edge_key[(min(u, x), max(u, x))] = eid
        ring[u].update(ring[v])
        ring[u].discard(u)
        ring[u].discard(v)
        for x in ring[v]:
            if x != u:
                ring[x].discard(v)
                ring[x].add(u)
        del ring[v]
        n_vertices -= 1
        alive_count -= 3

    # Compact the surviving graph and rebuild its topology.
    alive_faces = sorted(faces)
    used_vertices = sorted({x for fid in alive_faces for x in faces[fid]})
    vmap = {v: i for i, v in enumerate(used_vertices)}
    face_array = np.array([[vmap[x] for x in faces[fid]] for fid in alive_faces], dtype=np.int64)
    pooled_topo = build_edge_topology(TriangleMesh(np.zeros((len(used_vertices), 3)), face_array))
    new_id = {}
    for i, (a, b) in enumerate(pooled_topo.edges):
        new_id[(int(a), int(b))] = i

    def root(e):
        while parent[e] != e:
            e = parent[e]
        return e

    parent_new = np.empty(E, dtype=np.int64)
    old_to_new = {}
    for e in range(E):
        if alive_edge[e]:
            a, b = int(edges_cur[e, 0]), int(edges_cur[e, 1])
            old_to_new[e] = new_id[(min(vmap[a], vmap[b]), max(vmap[a], vmap[b]))]
    for e in range(E):
        parent_new[e] = old_to_new[root(e)]

    # One sparse matmul applies every sequential average at once.
    data, ri, ci = [], [], []
    for e in range(E):
        if not alive_edge[e]:
            continue
        r = old_to_new[e]
        for k, w in rows[e].items():
            ri.append(r)
            ci.append(k)
            data.append(w)
    W = csr_matrix((data, (ri, ci)), shape=(pooled_topo.num_edges, E)).tocoo()
    W_t = torch.sparse_coo_tensor(
        torch.as_tensor(np.vstack([W.row, W.col])),
        torch.as_tensor(W.data, dtype=f.dtype),
        W.shape,
        check_invariants=False,
    )
    pooled = torch.sparse.mm(W_t, f)
    return pooled, pooled_topo, EdgeCollapseRecord(E, parent_new)


def mesh_unpool(features, record: EdgeCollapseRecord) -> torch.Tensor:
    """Restore original edge rows: collapsed edges copy their surviving parent."""
    f = features if isinstance(features, torch.Tensor) else torch.as_tensor(features, dtype=torch.float64)
    idx = record.parent_new_index
    if idx.max(initial=-1) >= f.shape[0]:
        raise ValueError("record does not match pooled feature rows")
    return f[torch.as_tensor(idx)]


def apply_edge_displacements(mesh: TriangleMesh, topology: EdgeTopology, delta) -> TriangleMesh:
    """Move each vertex by the mean of the displacement votes from its edges.

    delta is (E, 2, 3): one vote per edge side (side 0 = lower vertex id).
    """
    d = delta if isinstance(delta, torch.Tensor) else torch.as_tensor(delta, dtype=torch.float64)
    if d.shape != (topology.num_edges, 2, 3):
        raise ValueError(f"delta must be (E, 2, 3), got {tuple(d.shape)}")
    verts = torch.as_tensor(mesh.vertices, dtype=d.dtype)
    out = _displace_vertices(verts, topology, d)
    return mesh.with_vertices(out.detach().cpu().numpy().astype(np.float64))


def _displace_vertices(vertices_t: torch.Tensor, topology: EdgeTopology, delta: torch.Tensor) -> torch.Tensor:
    edges = torch.as_tensor(topology.edges.reshape(-1))
    votes = delta.reshape(-1, 3)
    acc = torch.zeros_like(vertices_t).index_add_(0, edges, votes)
    count = torch.zeros(vertices_t.shape[0], dtype=delta.dtype).index_add_(
        0, edges, torch.ones(len(edges), dtype=delta.dtype)
    )
    return vertices_t + acc / count.clamp(min=1.0)[:, None]


class _ResidualMeshBlock(nn.Module):
    def __init__(self, in_channels, out_channels, n_convs, generator, final=False):
        super().__init__()
        # The final block starts at zero: the first forward is the identity
        # deformation, so optimization can only improve on the input mesh.
        gain = 0.0 if final else 1.0
        convs = []
        for i in range(n_convs):
            last = i == n_convs - 1
            convs.append(
                MeshConv(in_channels if i == 0 else out_channels, out_channels, generator, gain=gain if last else 1.0)
            )
        self.convs = nn.ModuleList(convs)
        std = gain * (1.0 / in_channels) ** 0.5
        self.proj = nn.Parameter(torch.randn(in_channels, out_channels, generator=generator) * std)
        self.final = final

    def forward(self, x, topology):
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h, topology)
            if i < len(self.convs) - 1:
                h = torch.relu(h)
        h = h + x @ self.proj
        return h if self.final else torch.relu(h)


class Prior3DNet(nn.Module):
    """Six residual edge-conv blocks with two pool/unpool levels and skips."""

    def __init__(self, config: Prior3DConfig, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        plan = config.channel_plan
        blocks = []
        for i, (cin, cout) in enumerate(plan):
            blocks.append(
                _ResidualMeshBlock(cin, cout, config.convs_per_block, gen, final=(i == len(plan) - 1))
            )
        self.blocks = nn.ModuleList(blocks)
        self.pool_proportions = config.pool_proportions

    def forward(self, z: torch.Tensor, topology: EdgeTopology) -> torch.Tensor:
        x = self.blocks[0](z, topology)
        x = self.blocks[1](x, topology)
        skip0 = x
        x, topo1, rec1 = mesh_pool(x, topology, self.pool_proportions[0])
        x = self.blocks[2](x, topo1)
        skip1 = x
        x, topo2, rec2 = mesh_pool(x, topo1, self.pool_proportions[1])
        x = self.blocks[3](x, topo2)
        x = mesh_unpool(x, rec2) + skip1
        x = self.blocks[4](x, topo1)
        x = mesh_unpool(x, rec1) + skip0
        x = self.blocks[5](x, topology)
        return x


def _sample_surface_torch(vertices_t, faces, k, generator):
    """Differentiable area-weighted surface samples from a torch vertex tensor."""
    faces_t = torch.as_tensor(faces)
    tri = vertices_t[faces_t]
    cross = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=1)
    areas = 0.5 * cross.norm(dim=1).detach()
    probs = areas.clamp(min=1e-30)
    fid = torch.multinomial(probs, k, replacement=True, generator=generator)
    u = torch.rand(k, dtype=vertices_t.dtype, generator=generator)
    v = torch.rand(k, dtype=vertices_t.dtype, generator=generator)
    flip = u + v > 1.0
    u = torch.where(flip, 1.0 - u, u)
    v = torch.where(flip, 1.0 - v, v)
    t = tri[fid]
    return (1.0 - u - v)[:, None] * t[:, 0] + u[:, None] * t[:, 1] + v[:, None] * t[:, 2]


def optimize_3d_prior(
    mesh: TriangleMesh,
    cloud,
    config: Prior3DConfig,
    log_path=None,
) -> TriangleMesh:
    """Fit the edge network so its displacements pull the mesh onto the cloud.

    Freshly samples surface points each step, minimizes the weighted chamfer
    plus edge-length objective with Adam, and returns the displaced mesh from
    the final forward pass. Raises OptimizationError on divergence.
    """
    cloud_positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
    topology = build_edge_topology(mesh)
    z = init_edge_noise(topology, seed=config.seed, std=config.noise_std)
    net = Prior3DNet(config, seed=config.seed + 1)
    dtype = torch.float32
    verts0 = torch.as_tensor(mesh.vertices, dtype=dtype)
    cloud_t = torch.as_tensor(cloud_positions, dtype=dtype)
    z = z.to(dtype)
    k = config.samples_per_step or min(len(cloud_t), config.max_samples)
    gen = torch.Generator().manual_seed(config.seed + 2)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    def eval_loss():
        g = torch.Generator().manual_seed(config.seed + 3)
        with torch.no_grad():
            delta = net(z, topology).reshape(-1, 2, 3)
            verts = _displace_vertices(verts0, topology, delta)
            phat = _sample_surface_torch(verts, mesh.faces, k, g)
            return float(
                config.weights.lambda0 * chamfer_loss(phat, cloud_t)
                + config.weights.lambda1 * edge_length_loss(verts, topology)
            )

    loss0 = eval_loss()
    log_lines = []
    for step in range(config.steps):
        delta = net(z, topology).reshape(-1, 2, 3)
        verts = _displace_vertices(verts0, topology, delta)
        phat = _sample_surface_torch(verts, mesh.faces, k, gen)
        l_chamfer = chamfer_loss(phat, cloud_t)
        l_edge = edge_length_loss(verts, topology)
        loss = config.weights.lambda0 * l_chamfer + config.weights.lambda1 * l_edge
        if not torch.isfinite(loss):
            raise OptimizationError("3d prior diverged", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_path is not None:
            log_lines.append(
                f"{step} {float(l_chamfer.detach()):.8e} {float(l_edge.detach()):.8e} {float(loss.detach()):.8e}"
            )

    loss_final = eval_loss()
    if loss_final > loss0:
        import logging

        logging.getLogger(__name__).warning(
            "3d prior did not improve the fixed-sample loss: %.6g -> %.6g", loss0, loss_final
        )
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    with torch.no_grad():
        delta = net(z, topology).reshape(-1, 2, 3)
        verts = _displace_vertices(verts0, topology, delta)
    return mesh.with_vertices(verts.numpy().astype(np.float64))
