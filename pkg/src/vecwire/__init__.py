"""Turn triangle meshes into compact sets of 3D cubic Bezier curves and render them to SVG."""

from .camera import Camera, camera_to_world, orbit_cameras, world_to_camera
from .clustering import Cluster, ClusterConfig, cluster_all, estimate_orientations, grow_cluster
from .curvefit import (
    CubicBezier3,
    FitConfig,
    VectorGraphic3D,
    add_noise,
    chamfer_gradient,
    chamfer_loss,
    eval_bezier,
    fit_stage1,
    init_curves_from_cluster,
    sample_curves,
)
from .mesh import (
    EdgeAdjacency,
    EdgeSet,
    Mesh,
    MeshError,
    SalientPointCloud,
    build_edge_adjacency,
    detect_sharp_edges,
    detect_silhouette_edges,
    extract_salient_edges,
    load_mesh,
    normalize_mesh,
    sample_salient_points,
)
from .refine import (
    CoverageReport,
    RefinementError,
    coverage,
    init_refinement_curves,
    refine,
    residual_chamfer_objective,
    sds_objective,
)
from .render import RationalBezier2, RenderStyle, emit_svg, flatten_rational, project_curve, render_views

__version__ = "0.1.0"
