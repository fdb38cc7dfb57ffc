"""meshprior: textured watertight meshes from colored point clouds.

A colored point cloud is the only supervision: an edge-graph network deforms
a mesh toward the points in 3D, a UV-space image network densifies sparse
XYZ/RGB maps in 2D, and the two alternate until geometry and texture settle.
"""

from .errors import (
    AtlasQualityError,
    CoverageError,
    DegenerateInputError,
    MeshPriorError,
    OptimizationError,
    StageError,
    TopologyError,
    UVValidationError,
)
from .geometry import (
    EdgeTopology,
    PointCloud,
    ScaleFrame,
    SurfacePoint,
    SurfaceSamples,
    TriangleMesh,
    build_edge_topology,
    convex_hull,
    count_self_intersections,
    project_point_to_mesh,
    project_points_to_mesh,
    sample_surface,
)
from .losses import LossWeights, chamfer_loss, edge_length_loss, total_geometry_loss
from .metrics import MetricReport, chamfer_metric, emd_metric, f_score, normal_consistency
from .partition import MeshPartition, merge_partitions, partition_mesh
from .remesh import remesh_to_resolution

__version__ = "0.1.0"
