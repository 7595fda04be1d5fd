"""Perspective projection of 3D Bezier curves and SVG output.

A cubic Bezier under a pinhole camera projects exactly onto a rational
cubic whose 2D control points are the projected 3D control points and
whose weights are their depths. SVG has no rational cubic primitive, so
curves are flattened to polylines with adaptive subdivision.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .camera import Camera, orbit_cameras, world_to_camera
from .curvefit import CubicBezier3, VectorGraphic3D, bernstein

logger = logging.getLogger(__name__)

Z_NEAR = 1e-3
MAX_DEPTH = 16


class NearPlaneError(ValueError):
    """A control point lies at or behind the near plane."""


@dataclass
class RationalBezier2:
    control: np.ndarray  # (4, 2)
    weights: np.ndarray  # (4,)

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=float).reshape(4, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(4)
        if not (self.weights > 0).all():
            raise ValueError("rational weights must be positive")

    def __call__(self, t):
        return eval_rational(self, t)

    def translated(self, offset) -> "RationalBezier2":
        return RationalBezier2(self.control + np.asarray(offset, dtype=float), self.weights)


@dataclass(frozen=True)
class RenderStyle:
    stroke_width: float = 1.5
    stroke: str = "#000000"
    opacity: float = 0.8
    canvas: tuple = (512, 512)

    def __post_init__(self):
        if not self.stroke_width > 0:
            raise ValueError("stroke width must be positive")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError("opacity must lie in (0, 1]")


def eval_rational(curve: RationalBezier2, t) -> np.ndarray:
    t_arr = np.asarray(t, dtype=float)
    b = bernstein(t_arr) * curve.weights
    pts = (b @ curve.control) / b.sum(axis=-1, keepdims=True)
    return pts[0] if t_arr.ndim == 0 else pts


def project_curve(curve: CubicBezier3, camera: Camera, z_near: float = Z_NEAR) -> RationalBezier2:
    """Image-plane rational Bezier of ``curve``: ``Q_k = f (x_k, y_k) / z_k``, ``w_k = z_k``."""
    cam = world_to_camera(camera, curve.control)
    z = cam[:, 2]
    if (z <= z_near).any():
        raise NearPlaneError("curve crosses near plane")
    f = camera.focal_length
    return RationalBezier2(f * cam[:, :2] / z[:, None], z)


def project_points(points, camera: Camera) -> np.ndarray:
    """Direct pinhole projection of 3D points to image-plane coordinates."""
    cam = world_to_camera(camera, points)
    return camera.focal_length * cam[..., :2] / cam[..., 2:3]


def _segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = min(max(float((p - a) @ ab) / denom, 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def flatten_rational(curve: RationalBezier2, tol: float = 0.25) -> np.ndarray:
    """Adaptive polyline through points of the curve.

    A parameter interval is split at its midpoint until the curve points at
    1/4, 1/2 and 3/4 of the interval all lie within ``tol`` of the chord.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    out = [eval_rational(curve, 0.0)]
    stack = [(0.0, 1.0, out[0], eval_rational(curve, 1.0), 0)]
    # depth-first, left interval on top, so vertices come out in order
    while stack:
        t0, t1, a, b, depth = stack.pop()
        ts = np.array([0.25, 0.5, 0.75]) * (t1 - t0) + t0
        probes = eval_rational(curve, ts)
        flat = all(_segment_distance(p, a, b) < tol for p in probes)
        if flat or depth >= MAX_DEPTH:
            out.append(b)
            continue
        tm, m = ts[1], probes[1]
        stack.append((tm, t1, m, b, depth + 1))
        stack.append((t0, tm, a, m, depth + 1))
    return np.array(out)


def _fmt(x: float) -> str:
    s = f"{x:.3f}"
    return "0.000" if s == "-0.000" else s


def path_data(poly: np.ndarray) -> str:
    parts = [f"M {_fmt(poly[0, 0])},{_fmt(poly[0, 1])}"]
    parts += [f"L {_fmt(x)},{_fmt(y)}" for x, y in poly[1:]]
    return " ".join(parts)


def canvas_camera(camera: Camera, style: RenderStyle) -> Camera:
    """``camera`` with its image size set to the style canvas (principal point kept if given)."""
    if tuple(camera.image_size) == tuple(style.canvas):
        return camera
    return Camera(camera.position, camera.look_at, camera.up, camera.focal_length,
                  tuple(style.canvas), camera.principal_point)


def project_graphic(graphic: VectorGraphic3D, camera: Camera, tol: float = 0.25):
    """Canvas polylines of every visible curve plus indices of skipped curves."""
    offset = camera.principal
    polys, skipped = [], []
    for i, c in enumerate(graphic.curves):
        try:
            rb = project_curve(c, camera).translated(offset)
        except NearPlaneError:
            logger.warning("curve %d crosses the near plane; skipped", i)
            skipped.append(i)
            continue
        polys.append((i, flatten_rational(rb, tol)))
    return polys, skipped


def emit_svg(graphic: VectorGraphic3D, camera: Camera, style: RenderStyle = RenderStyle(), tol: float = 0.25) -> str:
    """SVG 1.1 document with one path per visible curve.

    Canvas coordinates put the principal point at the canvas center with y
    pointing down. Output is byte-deterministic for identical inputs.
    """
    camera = canvas_camera(camera, style)
    w, h = style.canvas
    polys, skipped = project_graphic(graphic, camera, tol)
    lines = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
    ]
    if skipped:
        lines.append(f"<!-- skipped curves crossing the near plane: {' '.join(map(str, skipped))} -->")
    lines.append(
        f'<g fill="none" stroke="{style.stroke}" stroke-width="{style.stroke_width:g}" '
        f'stroke-opacity="{style.opacity:g}" stroke-linecap="round" stroke-linejoin="round">'
    )
    for i, poly in polys:
        lines.append(f'<path id="c{i}" d="{path_data(poly)}"/>')
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def view_cameras(n_views: int = 12, elevation: float = 20.0, radius: float = 2.5,
                 style: RenderStyle = RenderStyle(), fov_deg: float = 60.0) -> list[Camera]:
    w, _ = style.canvas
    f = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return orbit_cameras(n_views, elevation_deg=elevation, radius=radius,
                         focal_length=f, image_size=tuple(style.canvas))


def render_views(graphic: VectorGraphic3D, n_views: int = 12, elevation: float = 20.0,
                 radius: float = 2.5, style: RenderStyle = RenderStyle(), tol: float = 0.25) -> list[str]:
    """SVGs from ``n_views`` cameras at azimuths ``k * 360 / n_views`` around the origin."""
    return [emit_svg(graphic, cam, style, tol) for cam in view_cameras(n_views, elevation, radius, style)]
