"""Cubic Bezier curves, Chamfer loss and first-stage curve fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .clustering import Cluster
from .mesh import SalientPointCloud

logger = logging.getLogger(__name__)

STAGE1 = "stage1"
STAGE2 = "stage2"
GRAD_CLIP = 10.0
SELECTION_SAMPLES = 256


@dataclass
class CubicBezier3:
    control: np.ndarray  # (4, 3)
    frozen: bool = False
    provenance: str = STAGE1

    def __post_init__(self):
        self.control = np.array(self.control, dtype=float).reshape(4, 3)
        if not np.isfinite(self.control).all():
            raise ValueError("control points must be finite")

    def __call__(self, t):
        return eval_bezier(self, t)

    def is_line(self, atol: float = 1e-9) -> bool:
        p0, p1, p2, p3 = self.control
        return bool(
            np.allclose(p1, p0 + (p3 - p0) / 3.0, atol=atol, rtol=0)
            and np.allclose(p2, p0 + 2.0 * (p3 - p0) / 3.0, atol=atol, rtol=0)
        )

    @classmethod
    def line(cls, a, b, **kwargs) -> "CubicBezier3":
        """Degree-elevated straight segment from ``a`` to ``b``."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(np.stack([a, a + (b - a) / 3.0, a + 2.0 * (b - a) / 3.0, b]), **kwargs)


@dataclass
class VectorGraphic3D:
    curves: list = field(default_factory=list)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)

    def __len__(self):
        return len(self.curves)

    @property
    def control_array(self) -> np.ndarray:
        if not self.curves:
            return np.zeros((0, 4, 3))
        return np.stack([c.control for c in self.curves])


@dataclass(frozen=True)
class FitConfig:
    s: int = 64
    lam: float = 1.0
    noise_sigma: float = 0.005
    lr: float = 5e-3
    steps: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.s < 2:
            raise ValueError("s must be >= 2")
        if self.lam < 0 or self.noise_sigma < 0:
            raise ValueError("lam and noise_sigma must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


def bernstein(t) -> np.ndarray:
    """Cubic Bernstein weights, shape ``(len(t), 4)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    u = 1.0 - t
    return np.stack([u**3, 3.0 * u**2 * t, 3.0 * u * t**2, t**3], axis=-1)


def eval_bezier(curve: CubicBezier3, t):
    """Point(s) on ``curve`` at parameter(s) ``t`` in [0, 1]."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
        raise ValueError("t out of range [0, 1]")
    ctrl = curve.control if isinstance(curve, CubicBezier3) else np.asarray(curve, dtype=float)
    pts = bernstein(t_arr) @ ctrl
    # pin the endpoints so t=0 and t=1 reproduce P0 and P3 bit-for-bit
    flat = np.atleast_1d(t_arr)
    pts[flat == 0.0] = ctrl[0]
    pts[flat == 1.0] = ctrl[3]
    return pts[0] if t_arr.ndim == 0 else pts


def de_casteljau(control, t: float) -> np.ndarray:
    pts = np.array(control, dtype=float)
    while len(pts) > 1:
        pts = (1.0 - t) * pts[:-1] + t * pts[1:]
    return pts[0]


def sample_params(s: int) -> np.ndarray:
    """``t_j = (j - 1) / (s - 1)`` for ``j = 1..s``."""
    if s < 2:
        raise ValueError("s must be >= 2")
    return np.arange(s, dtype=float) / (s - 1)


def sample_curves(curves, s: int):
    """Sample ``s`` uniform parameters on every curve.

    Returns ``(points, curve_index, t)``; row ``i * s + j`` belongs to curve
    ``i`` at ``t_j``.
    """
    t = sample_params(s)
    ctrl = _controls(curves)
    if len(ctrl) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0)
    pts = np.einsum("sk,nkd->nsd", bernstein(t), ctrl).reshape(-1, 3)
    idx = np.repeat(np.arange(len(ctrl)), s)
    return pts, idx, np.tile(t, len(ctrl))


def _controls(curves) -> np.ndarray:
    if isinstance(curves, np.ndarray):
        return curves.reshape(-1, 4, 3)
    if isinstance(curves, VectorGraphic3D):
        return curves.control_array
    if not curves:
        return np.zeros((0, 4, 3))
    return np.stack([c.control for c in curves])


def nearest(src: np.ndarray, dst: np.ndarray, tree: cKDTree | None = None):
    """Index of and squared distance to the nearest ``dst`` point for every ``src`` point."""
    tree = cKDTree(dst) if tree is None else tree
    d, i = tree.query(src, k=1)
    diff = src - dst[i]
    return i, np.einsum("ij,ij->i", diff, diff)


def chamfer_loss(pc_c: np.ndarray, pc_s: np.ndarray, lam: float = 1.0) -> float:
    """Weighted two-sided mean squared nearest-neighbor distance.

    ``lam`` weights the curve-to-target term.
    """
    pc_c = np.asarray(pc_c, dtype=float).reshape(-1, 3)
    pc_s = np.asarray(pc_s, dtype=float).reshape(-1, 3)
    if len(pc_c) == 0 or len(pc_s) == 0:
        raise ValueError("chamfer_loss needs two non-empty clouds")
    _, d_cs = nearest(pc_c, pc_s)
    _, d_sc = nearest(pc_s, pc_c)
    # squared distances recomputed from coordinates, not taken from the tree
    return float(lam * d_cs.mean() + d_sc.mean())


def add_noise(pc_c: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Zero-mean Gaussian jitter with per-coordinate std ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    pc_c = np.asarray(pc_c, dtype=float)
    if sigma == 0 or pc_c.size == 0:
        return pc_c.copy()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return pc_c + rng.normal(0.0, sigma, size=pc_c.shape)


def chamfer_point_grad(pc_c: np.ndarray, pc_s: np.ndarray, lam: float = 1.0, target_tree=None):
    """Chamfer value and its gradient w.r.t. every point of ``pc_c``.

    Nearest-neighbor correspondences are fixed at their current values.
    """
    n_c, n_s = len(pc_c), len(pc_s)
    i_cs, d_cs = nearest(pc_c, pc_s, target_tree)
    i_sc, d_sc = nearest(pc_s, pc_c)
    grad = (2.0 * lam / n_c) * (pc_c - pc_s[i_cs])
    back = (2.0 / n_s) * (pc_c[i_sc] - pc_s)
    # fixed-order accumulation keeps results reproducible
    np.add.at(grad, i_sc, back)
    return float(lam * d_cs.mean() + d_sc.mean()), grad


def points_to_control_grad(point_grad: np.ndarray, n_curves: int, s: int) -> np.ndarray:
    """Chain per-sample gradients to control points through the Bernstein weights."""
    w = bernstein(sample_params(s))
    return np.einsum("sk,nsd->nkd", w, point_grad.reshape(n_curves, s, 3))


def chamfer_gradient(curves, pc_s: np.ndarray, cfg: FitConfig, rng=None, noise=None):
    """Loss and control-point gradient of the noise-augmented Chamfer loss.

    Parameters
    ----------
    curves : list of CubicBezier3
    pc_s : (m, 3) target cloud
    cfg : FitConfig
    rng : seed or Generator used to draw the augmentation noise
    noise : optional explicit (n * s, 3) offsets; overrides ``rng``

    Returns
    -------
    loss : float
    grad : (n, 4, 3) array, zero for frozen curves
    """
    ctrl = _controls(curves)
    pts, _, _ = sample_curves(ctrl, cfg.s)
    if noise is None:
        noisy = add_noise(pts, cfg.noise_sigma, rng if rng is not None else cfg.rng_seed)
    else:
        noisy = pts + noise
    loss, pg = chamfer_point_grad(noisy, np.asarray(pc_s, dtype=float), cfg.lam)
    grad = points_to_control_grad(pg, len(ctrl), cfg.s)
    grad[_frozen_mask(curves)] = 0.0
    return loss, grad


def _frozen_mask(curves) -> np.ndarray:
    if isinstance(curves, np.ndarray):
        return np.zeros(len(curves.reshape(-1, 4, 3)), dtype=bool)
    if isinstance(curves, VectorGraphic3D):
        curves = curves.curves
    return np.array([c.frozen for c in curves], dtype=bool)


def clip_gradient(grad: np.ndarray, max_norm: float = GRAD_CLIP) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def _polyline_sqdist(points: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Squared distance from each point to a densely sampled polyline."""
    i, _ = nearest(points, samples)
    best = np.full(len(points), np.inf)
    for lo in (i - 1, i):
        ok = (lo >= 0) & (lo + 1 < len(samples))
        lo = np.where(ok, lo, 0)
        a = samples[lo]
        b = samples[lo + 1]
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.einsum("ij,ij->i", points - a, ab) / np.where(denom > 0, denom, 1.0)
        proj = a + np.clip(t, 0.0, 1.0)[:, None] * ab
        d = np.einsum("ij,ij->i", points - proj, points - proj)
        best = np.where(ok, np.minimum(best, d), best)
    # single-sample polylines
    fallback = np.einsum("ij,ij->i", points - samples[i], points - samples[i])
    return np.where(np.isfinite(best), np.minimum(best, fallback), fallback)


def fit_error(points: np.ndarray, curve: CubicBezier3, n_samples: int = SELECTION_SAMPLES) -> float:
    """Mean squared distance from ``points`` to ``curve`` (one-sided)."""
    samples = bernstein(np.linspace(0.0, 1.0, n_samples)) @ curve.control
    return float(_polyline_sqdist(points, samples).mean())


def line_candidate(pts: np.ndarray) -> CubicBezier3:
    """Least-squares segment through ``pts``, oriented from the first point to the last."""
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    d = vt[0]
    proj = (pts - c) @ d
    a = c + proj.min() * d
    b = c + proj.max() * d
    if np.linalg.norm(a - pts[0]) > np.linalg.norm(b - pts[0]):
        a, b = b, a
    return CubicBezier3.line(a, b)


def curve_candidate(pts: np.ndarray) -> CubicBezier3:
    """Ends at the run's ends; inner controls at the points nearest 1/3 and 2/3 arc length."""
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    i1 = int(np.argmin(np.abs(arc - total / 3.0)))
    i2 = int(np.argmin(np.abs(arc - 2.0 * total / 3.0)))
    return CubicBezier3(np.stack([pts[0], pts[i1], pts[i2], pts[-1]]))


def init_curves_from_cluster(cluster: Cluster, cloud: SalientPointCloud, provenance: str = STAGE1) -> CubicBezier3:
    """Fit a line and a curve to the cluster and keep the one with smaller error.

    Ties go to the line.
    """
    idx = cluster.chain if isinstance(cluster, Cluster) else list(cluster)
    if len(idx) < 2:
        raise ValueError("cluster needs at least 2 points")
    pts = cloud.points[idx] if isinstance(cloud, SalientPointCloud) else np.asarray(cloud)[idx]
    if np.ptp(pts, axis=0).max() == 0.0:
        raise ValueError("degenerate cluster: all points identical")
    line = line_candidate(pts)
    if len(pts) == 2:
        return replace(line, provenance=provenance)
    curve = curve_candidate(pts)
    line_err = fit_error(pts, line)
    curve_err = fit_error(pts, curve)
    best = line if line_err <= curve_err + 1e-12 else curve
    return CubicBezier3(best.control, provenance=provenance)


def noise_free_loss(curves, pc_s: np.ndarray, cfg: FitConfig) -> float:
    pts, _, _ = sample_curves(curves, cfg.s)
    return chamfer_loss(pts, pc_s, cfg.lam)


def fit_stage1(clusters, cloud, cfg: FitConfig, losses: list | None = None,
               center=None, scale: float = 1.0) -> VectorGraphic3D:
    """Initialize one curve per cluster and run plain SGD on the Chamfer loss.

    All curves are optimized jointly against the full salient cloud. The
    noise-free loss is tracked every step (appended to ``losses`` when a
    list is given) and the best iterate is returned, so the result never
    scores worse than the initialization.
    """
    pc_s = cloud.points if isinstance(cloud, SalientPointCloud) else np.asarray(cloud, dtype=float)
    curves = [init_curves_from_cluster(c, pc_s) for c in clusters]
    if not curves:
        raise ValueError("fit_stage1 needs at least one cluster")
    ctrl = np.stack([c.control for c in curves])
    rng = np.random.default_rng(cfg.rng_seed)
    tree = cKDTree(pc_s)
    best_ctrl, best_loss = ctrl.copy(), noise_free_loss(ctrl, pc_s, cfg)
    history = [best_loss]
    for _ in range(cfg.steps):
        pts, _, _ = sample_curves(ctrl, cfg.s)
        noisy = add_noise(pts, cfg.noise_sigma, rng)
        _, pg = chamfer_point_grad(noisy, pc_s, cfg.lam, tree)
        grad = clip_gradient(points_to_control_grad(pg, len(ctrl), cfg.s))
        ctrl = ctrl - cfg.lr * grad
        loss = noise_free_loss(ctrl, pc_s, cfg)
        history.append(loss)
        if loss < best_loss:
            best_ctrl, best_loss = ctrl.copy(), loss
    if losses is not None:
        losses.extend(history)
    out = [CubicBezier3(c, provenance=STAGE1) for c in best_ctrl]
    return VectorGraphic3D(out, center=np.zeros(3) if center is None else center, scale=scale)
