"""End-to-end pipeline: mesh -> salient cloud -> curves -> refinement -> SVG views."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusterConfig, ClusteringError, cluster_all, clusters_to_json, estimate_orientations
from .curves_io import dumps_graphic, graphic_to_dict, load_graphic, losses_csv, roundtrip
from .curvefit import STAGE1, STAGE2, CubicBezier3, FitConfig, VectorGraphic3D, chamfer_loss, fit_stage1, sample_curves
from .mesh import (
    LABEL_PRIORITY,
    Mesh,
    MeshError,
    SalientPointCloud,
    build_edge_adjacency,
    extract_salient_edges,
    load_mesh,
    normalize_mesh,
    parse_mesh,
    sample_salient_points,
)
from .refine import (
    ScoreServiceObjective,
    coverage,
    init_refinement_curves,
    refine,
    residual_chamfer_objective,
)
from .render import RenderStyle, render_views

logger = logging.getLogger(__name__)

RECON_ENDPOINT_ENV = "VECWIRE_RECON_ENDPOINT"
SDS_ENDPOINT_ENV = "VECWIRE_SDS_ENDPOINT"

STAGE_EXIT_CODES = {
    "config": 2,
    "fetch": 3,
    "load": 4,
    "extract": 5,
    "cluster": 6,
    "fit": 7,
    "refine": 8,
    "render": 9,
    "write": 10,
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage

    @property
    def exit_code(self) -> int:
        return STAGE_EXIT_CODES[self.stage]


class FetchError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    input: str = ""
    output_dir: str = "out"
    image: str = ""
    recon_endpoint: str = ""
    # salient extraction
    theta_sharp: float = 30.0
    n_views: int = 16
    silhouette_radius: float = 2.5
    spacing: float = 0.01
    # clustering
    d_thresh: float = 0.05
    theta_thresh: float = 50.0
    k: int = 10
    tau: int = 10
    continuity: bool = True
    # fitting (shared by both stages)
    s: int = 64
    lam: float = 1.0
    noise_sigma: float = 0.005
    lr: float = 5e-3
    stage1_steps: int = 100
    stage2_steps: int = 200
    # refinement
    r_cover: float = 0.05
    vertex_coverage: bool = False
    objective: str = "residual-chamfer"
    sds_endpoint: str = ""
    sds_weight: float = 2e-4
    sds_timeout: float = 120.0
    image_ref: str = ""
    # rendering
    render_views: int = 12
    render_elevation: float = 20.0
    render_radius: float = 2.5
    canvas: int = 512
    stroke_width: float = 1.5
    opacity: float = 0.8
    flatten_tol: float = 0.25
    curve_cap: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.objective not in ("residual-chamfer", "sds"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.render_views < 1 or self.n_views < 1:
            raise ValueError("view counts must be >= 1")
        if not self.r_cover > 0 or not self.spacing > 0:
            raise ValueError("r_cover and spacing must be positive")
        # nested invariants
        self.cluster_config()
        self.fit_config(1)
        self.style()

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(self.d_thresh, self.theta_thresh, self.k, self.tau, self.rng_seed, self.continuity)

    def fit_config(self, stage: int) -> FitConfig:
        steps = self.stage1_steps if stage == 1 else self.stage2_steps
        return FitConfig(self.s, self.lam, self.noise_sigma, self.lr, steps, self.rng_seed + stage - 1)

    def style(self) -> RenderStyle:
        return RenderStyle(self.stroke_width, "#000000", self.opacity, (self.canvas, self.canvas))


def _coerce(field: dataclasses.Field, raw):
    kind = type(field.default)
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        val = str(raw).strip().lower()
        if val in ("1", "true", "yes", "on"):
            return True
        if val in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{field.name}: expected a boolean, got {raw!r}")
    return kind(raw)


def config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(PipelineConfig))


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f for f in config_fields()}
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(fields[key], val)
    return out


def make_config(config_file=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the config file, then ``overrides`` (flags win)."""
    values = {}
    if config_file:
        values.update(parse_config_text(Path(config_file).read_text(encoding="utf-8")))
    fields = {f.name: f for f in config_fields()}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(fields[k], v)
    return PipelineConfig(**values)


def prepare_mesh(path) -> Mesh:
    return normalize_mesh(load_mesh(path))


def salient_cloud(mesh: Mesh, cfg: PipelineConfig):
    adj = build_edge_adjacency(mesh)
    edges = extract_salient_edges(mesh, adj, cfg.theta_sharp, cfg.n_views, cfg.silhouette_radius)
    cloud = sample_salient_points(mesh, edges, cfg.spacing)
    return cloud, edges, adj


def cluster_cloud(cloud: SalientPointCloud, cfg: PipelineConfig):
    cloud = estimate_orientations(cloud, cfg.k)
    return cloud, cluster_all(cloud, cfg.cluster_config())


def curve_samples(curves, s: int) -> np.ndarray:
    return sample_curves(curves, s)[0]


def stage2(graphic: VectorGraphic3D, cloud: SalientPointCloud, cfg: PipelineConfig, losses: list | None = None):
    """Freeze ``graphic`` and add refined curves where its samples leave the cloud uncovered.

    Returns ``(graphic, info)``; ``info`` describes what happened.
    """
    frozen = VectorGraphic3D(
        [CubicBezier3(c.control, frozen=True, provenance=c.provenance) for c in graphic.curves],
        graphic.center, graphic.scale,
    )
    report = coverage(cloud.points, curve_samples(frozen.curves, cfg.s), cfg.r_cover)
    uncovered = report.uncovered
    info = {"uncovered_points": int(len(uncovered)), "new_curves": 0, "noop": True}
    if len(uncovered) == 0 or cfg.stage2_steps == 0:
        info["reason"] = "no uncovered points" if len(uncovered) == 0 else "stage2_steps is 0"
        return frozen, info, report
    new = init_refinement_curves(uncovered, cloud, cfg.cluster_config(), rng_seed=cfg.rng_seed + 1)
    if not new:
        info["reason"] = "no residual cluster survived filtering"
        return frozen, info, report
    fit_cfg = cfg.fit_config(2)
    if cfg.objective == "sds":
        endpoint = cfg.sds_endpoint or os.environ.get(SDS_ENDPOINT_ENV, "")
        if not endpoint:
            raise ValueError("sds objective selected but no endpoint configured")
        objective = ScoreServiceObjective(endpoint, cfg.image_ref, cfg.sds_weight, cfg.sds_timeout)
    else:
        objective = residual_chamfer_objective(cloud.points[uncovered], fit_cfg)
    out = refine(frozen, new, objective, fit_cfg, losses=losses)
    info.update(noop=False, new_curves=len(new))
    return out, info, report


def fetch_mesh(image_path, endpoint: str, out_dir, timeout: float = 300.0):
    """POST image bytes to a reconstruction service and save the returned mesh.

    Returns ``(mesh_path, provenance)``.
    """
    data = Path(image_path).read_bytes()
    req = urllib.request.Request(endpoint, data=data, method="POST",
                                 headers={"Content-Type": "application/octet-stream"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise FetchError(f"fetch failed: {exc}") from exc
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FetchError("invalid mesh payload: not ASCII OBJ/PLY") from exc
    fmt = "ply" if text.lstrip().startswith("ply") else "obj"
    try:
        parse_mesh(text, fmt)
    except MeshError as exc:
        raise FetchError(f"invalid mesh payload: {exc}") from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"fetched_mesh.{fmt}"
    path.write_bytes(payload)
    provenance = {
        "endpoint": endpoint,
        "image": str(image_path),
        "image_sha256": hashlib.sha256(data).hexdigest(),
        "mesh_sha256": hashlib.sha256(payload).hexdigest(),
    }
    return path, provenance


def arc_length(curve: CubicBezier3, n: int = 1024) -> float:
    pts = curve(np.linspace(0.0, 1.0, n))
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def graphic_metrics(graphic: VectorGraphic3D, cloud_points: np.ndarray, s: int, r_cover: float) -> dict:
    pc_c = curve_samples(graphic.curves, s)
    if len(pc_c) == 0:
        raise ValueError("empty curve set: Chamfer distance undefined")
    return {
        "chamfer": chamfer_loss(pc_c, cloud_points, 1.0),
        "coverage": coverage(cloud_points, pc_c, r_cover).ratio,
        "curve_count": len(graphic.curves),
        "total_arc_length": float(sum(arc_length(c) for c in graphic.curves)),
    }


def metrics(curves_path, mesh_path, cfg: PipelineConfig | None = None) -> dict:
    """Geometric quality of a saved curve set against the mesh it was fitted on."""
    cfg = cfg or PipelineConfig()
    graphic = load_graphic(curves_path)
    mesh = prepare_mesh(mesh_path)
    center, scale = mesh.transform
    if not (np.allclose(graphic.center, center, rtol=1e-8, atol=1e-8)
            and np.isclose(graphic.scale, scale, rtol=1e-8, atol=0)):
        raise ValueError("normalization transform of curves does not match the mesh")
    cloud, _, _ = salient_cloud(mesh, cfg)
    if len(graphic.curves) == 0:
        return {"coverage": 0.0, "curve_count": 0, "total_arc_length": 0.0,
                "chamfer": None, "error": "empty curve set: Chamfer distance undefined"}
    return graphic_metrics(graphic, cloud.points, cfg.s, cfg.r_cover)


def _r(x):
    return None if x is None else float(x)


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage and write the artifacts; returns the manifest.

    Nothing is written to ``cfg.output_dir`` unless all stages succeed
    (a fetched mesh, when requested, is the exception).
    """
    timings = {}
    manifest: dict = {"config": dataclasses.asdict(cfg)}
    warnings: list[str] = []
    out = Path(cfg.output_dir)

    t0 = time.perf_counter()
    mesh_path = cfg.input
    if not mesh_path:
        endpoint = cfg.recon_endpoint or os.environ.get(RECON_ENDPOINT_ENV, "")
        if not (cfg.image and endpoint):
            raise PipelineError("config", "no input mesh and no image + reconstruction endpoint")
        try:
            mesh_path, prov = fetch_mesh(cfg.image, endpoint, out)
        except (FetchError, OSError) as exc:
            raise PipelineError("fetch", str(exc)) from exc
        manifest["fetched_mesh"] = prov
        timings["fetch"] = time.perf_counter() - t0

    t = time.perf_counter()
    try:
        mesh = prepare_mesh(mesh_path)
    except (MeshError, OSError) as exc:
        raise PipelineError("load", str(exc)) from exc
    timings["load"] = time.perf_counter() - t
    center, scale = mesh.transform
    manifest["mesh"] = {
        "path": str(mesh_path),
        "vertices": int(len(mesh.vertices)),
        "faces": int(len(mesh.faces)),
        "dropped_degenerate_faces": int(mesh.dropped_faces),
    }
    manifest["transform"] = {"center": [float(c) for c in center], "scale": float(scale)}

    t = time.perf_counter()
    cloud, edges, adj = salient_cloud(mesh, cfg)
    if len(cloud) == 0:
        raise PipelineError("extract", "no salient edges found")
    timings["extract"] = time.perf_counter() - t
    manifest["salient"] = {
        "edges": int(len(edges)),
        "by_label": {lab: int(len(edges.with_label(lab))) for lab in LABEL_PRIORITY},
        "nonmanifold_edges": int(len(adj.nonmanifold)),
        "points": int(len(cloud)),
    }

    t = time.perf_counter()
    try:
        cloud, clusters = cluster_cloud(cloud, cfg)
    except ClusteringError as exc:
        raise PipelineError("cluster", str(exc)) from exc
    if not clusters:
        raise PipelineError("cluster", f"no cluster has at least tau={cfg.tau} points")
    timings["cluster"] = time.perf_counter() - t

    t = time.perf_counter()
    losses1: list = []
    try:
        g1 = fit_stage1(clusters, cloud, cfg.fit_config(1), losses=losses1, center=center, scale=scale)
    except ValueError as exc:
        raise PipelineError("fit", str(exc)) from exc
    timings["fit"] = time.perf_counter() - t

    t = time.perf_counter()
    losses2: list = []
    try:
        final, info, before = stage2(g1, cloud, cfg, losses=losses2)
    except Exception as exc:
        raise PipelineError("refine", str(exc)) from exc
    timings["refine"] = time.perf_counter() - t

    # every reported number is computed from the curves exactly as saved
    final = roundtrip(final)
    stage1_saved = [c for c in final.curves if c.provenance == STAGE1]
    stage2_saved = [c for c in final.curves if c.provenance == STAGE2]
    pc_final = curve_samples(final.curves, cfg.s)
    after = coverage(cloud.points, pc_final, cfg.r_cover)
    unc = before.uncovered
    manifest["stage1"] = {
        "curves": len(stage1_saved),
        "clusters": len(clusters),
        "initial_loss": _r(losses1[0]),
        "final_loss": chamfer_loss(curve_samples(stage1_saved, cfg.s), cloud.points, cfg.lam),
        "steps": cfg.stage1_steps,
    }
    manifest["stage2"] = dict(info, curves=len(stage2_saved), steps=cfg.stage2_steps,
                              initial_loss=_r(losses2[0]) if losses2 else None,
                              final_loss=_r(losses2[-1]) if losses2 else None)
    manifest["coverage"] = {
        "r_cover": cfg.r_cover,
        "before_stage2": before.ratio,
        "after_stage2": after.ratio,
        "uncovered_subset_after": float(after.covered[unc].mean()) if len(unc) else None,
    }
    manifest["final"] = graphic_metrics(final, cloud.points, cfg.s, cfg.r_cover)
    if cfg.vertex_coverage:
        manifest["coverage"]["mesh_vertices_after"] = coverage(mesh.vertices, pc_final, cfg.r_cover).ratio
    if len(final.curves) > cfg.curve_cap:
        msg = f"{len(final.curves)} curves exceeds the cap of {cfg.curve_cap}"
        logger.warning(msg)
        warnings.append(msg)

    t = time.perf_counter()
    svgs = render_views(final, cfg.render_views, cfg.render_elevation, cfg.render_radius,
                        cfg.style(), cfg.flatten_tol)
    timings["render"] = time.perf_counter() - t
    manifest["render"] = {"views": len(svgs), "elevation": cfg.render_elevation, "radius": cfg.render_radius}
    manifest["timings_s"] = timings
    manifest["warnings"] = warnings

    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves.json").write_text(dumps_graphic(final), encoding="utf-8")
        (out / "clusters.json").write_text(clusters_to_json(clusters, cfg.cluster_config()), encoding="utf-8")
        cov = {"before_stage2": before.to_dict(), "after_stage2": after.to_dict()}
        (out / "coverage.json").write_text(json.dumps(cov, indent=1), encoding="utf-8")
        (out / "loss_stage1.csv").write_text(losses_csv(losses1), encoding="utf-8")
        (out / "loss_stage2.csv").write_text(losses_csv(losses2), encoding="utf-8")
        views = out / "views"
        views.mkdir(exist_ok=True)
        for i, svg in enumerate(svgs):
            (views / f"view_{i:02d}.svg").write_text(svg, encoding="utf-8")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    except OSError as exc:
        raise PipelineError("write", str(exc)) from exc
    return manifest


__all__ = [
    "PipelineConfig",
    "PipelineError",
    "FetchError",
    "run_pipeline",
    "fetch_mesh",
    "metrics",
    "make_config",
    "graphic_to_dict",
]
