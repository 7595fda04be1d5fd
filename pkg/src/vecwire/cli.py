"""Command-line entry point.

Subcommands: ``run`` (full pipeline), ``fit``, ``refine``, ``render``,
``metrics`` and ``fetch-mesh``. Every pipeline setting can come from a flat
``key = value`` config file (``--config``) and be overridden by a flag of
the same name (``--d-thresh 0.05``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .clustering import ClusteringError
from .curves_io import load_graphic, losses_csv, roundtrip, save_graphic
from .curvefit import fit_stage1
from .mesh import MeshError
from .pipeline import (
    RECON_ENDPOINT_ENV,
    FetchError,
    PipelineError,
    cluster_cloud,
    config_fields,
    fetch_mesh,
    make_config,
    metrics,
    prepare_mesh,
    run_pipeline,
    salient_cloud,
    stage2,
)
from .render import render_views

logger = logging.getLogger("vecwire")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    for f in config_fields():
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar=type(f.default).__name__.upper())


def _config(args):
    overrides = {f.name: getattr(args, f.name, None) for f in config_fields()}
    try:
        return make_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        raise PipelineError("config", str(exc)) from exc


def _load(cfg):
    try:
        return prepare_mesh(cfg.input)
    except (MeshError, OSError) as exc:
        raise PipelineError("load", str(exc)) from exc


def cmd_run(args):
    manifest = run_pipeline(_config(args))
    print(json.dumps({k: manifest[k] for k in ("stage1", "stage2", "coverage", "final")}, indent=1))


def cmd_fit(args):
    cfg = _config(args)
    mesh = _load(cfg)
    cloud, _, _ = salient_cloud(mesh, cfg)
    if len(cloud) == 0:
        raise PipelineError("extract", "no salient edges found")
    try:
        cloud, clusters = cluster_cloud(cloud, cfg)
    except ClusteringError as exc:
        raise PipelineError("cluster", str(exc)) from exc
    if not clusters:
        raise PipelineError("cluster", f"no cluster has at least tau={cfg.tau} points")
    losses = []
    center, scale = mesh.transform
    graphic = fit_stage1(clusters, cloud, cfg.fit_config(1), losses=losses, center=center, scale=scale)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graphic(graphic, out / "curves.json")
    (out / "loss_stage1.csv").write_text(losses_csv(losses), encoding="utf-8")
    print(f"{len(graphic.curves)} curves -> {out / 'curves.json'}")


def cmd_refine(args):
    cfg = _config(args)
    mesh = _load(cfg)
    graphic = load_graphic(args.curves)
    cloud, _, _ = salient_cloud(mesh, cfg)
    try:
        cloud, _ = cluster_cloud(cloud, cfg)
    except ClusteringError as exc:
        raise PipelineError("cluster", str(exc)) from exc
    losses = []
    try:
        refined, info, _ = stage2(graphic, cloud, cfg, losses=losses)
    except Exception as exc:
        raise PipelineError("refine", str(exc)) from exc
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graphic(refined, out / "curves.json")
    (out / "loss_stage2.csv").write_text(losses_csv(losses), encoding="utf-8")
    print(json.dumps(info))


def cmd_render(args):
    cfg = _config(args)
    graphic = roundtrip(load_graphic(args.curves))
    svgs = render_views(graphic, cfg.render_views, cfg.render_elevation, cfg.render_radius,
                        cfg.style(), cfg.flatten_tol)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, svg in enumerate(svgs):
        (out / f"view_{i:02d}.svg").write_text(svg, encoding="utf-8")
    print(f"{len(svgs)} views -> {out}")


def cmd_metrics(args):
    cfg = _config(args)
    try:
        report = metrics(args.curves, cfg.input, cfg)
    except (MeshError, OSError) as exc:
        raise PipelineError("load", str(exc)) from exc
    print(json.dumps(report, indent=1))
    if report.get("error"):
        return 1
    return 0


def cmd_fetch(args):
    endpoint = args.endpoint or os.environ.get(RECON_ENDPOINT_ENV, "")
    if not endpoint:
        raise PipelineError("config", f"no endpoint given (flag or ${RECON_ENDPOINT_ENV})")
    try:
        path, prov = fetch_mesh(args.image, endpoint, args.out)
    except (FetchError, OSError) as exc:
        raise PipelineError("fetch", str(exc)) from exc
    print(json.dumps({"mesh": str(path), **prov}, indent=1))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vecwire", description="Mesh to 3D Bezier vector graphics.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="salient extraction, clustering and first-stage fitting")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refine", help="second-stage refinement of a curves.json")
    p.add_argument("curves")
    _add_config_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("render", help="multi-view SVG rendering of a curves.json")
    p.add_argument("curves")
    _add_config_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="geometric metrics of a curves.json against its mesh")
    p.add_argument("curves")
    _add_config_flags(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("fetch-mesh", help="fetch a mesh from an image-to-3D service")
    p.add_argument("image")
    p.add_argument("--endpoint", default="")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_fetch)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
