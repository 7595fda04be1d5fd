"""Second stage: cover what the first-stage curves missed.

Salient points farther than ``r_cover`` from every first-stage sample are
re-clustered, new curves are seeded on the residual clusters, and only
those new curves are optimized while the first-stage curves stay frozen.

The objective is pluggable. :class:`ResidualChamferObjective` runs locally;
:class:`ScoreServiceObjective` delegates per-point gradients to an HTTP
scoring service (e.g. a score-distillation model host).
"""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np
from scipy.spatial import cKDTree

from .clustering import ClusterConfig, cluster_all
from .curvefit import (
    STAGE2,
    CubicBezier3,
    FitConfig,
    VectorGraphic3D,
    add_noise,
    clip_gradient,
    init_curves_from_cluster,
    nearest,
    points_to_control_grad,
    sample_curves,
)
from .mesh import SalientPointCloud

logger = logging.getLogger(__name__)

INIT_JITTER = 0.01


class RefinementError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"refinement failed at step {step}: {message}")
        self.step = step


@dataclass
class CoverageReport:
    covered: np.ndarray
    r_cover: float

    @property
    def uncovered(self) -> np.ndarray:
        return np.flatnonzero(~self.covered)

    @property
    def ratio(self) -> float:
        return float(self.covered.mean()) if len(self.covered) else 1.0

    def to_dict(self) -> dict:
        return {
            "r_cover": self.r_cover,
            "total": int(len(self.covered)),
            "covered": int(self.covered.sum()),
            "ratio": self.ratio,
            "uncovered": self.uncovered.tolist(),
        }


def coverage(pc_s: np.ndarray, pc_c: np.ndarray, r_cover: float = 0.05) -> CoverageReport:
    """Flag every target point within ``r_cover`` of its nearest curve sample."""
    if not r_cover > 0:
        raise ValueError("r_cover must be positive")
    pc_s = np.asarray(pc_s, dtype=float).reshape(-1, 3)
    pc_c = np.asarray(pc_c, dtype=float).reshape(-1, 3)
    if len(pc_s) == 0:
        raise ValueError("coverage needs a non-empty target cloud")
    if len(pc_c) == 0:
        return CoverageReport(np.zeros(len(pc_s), dtype=bool), r_cover)
    i = cKDTree(pc_c).query(pc_s, k=1)[1]
    diff = pc_s - pc_c[i]
    return CoverageReport(np.sqrt(np.einsum("ij,ij->i", diff, diff)) <= r_cover, r_cover)


def init_refinement_curves(
    uncovered,
    cloud: SalientPointCloud,
    cfg: ClusterConfig,
    rng_seed: int = 0,
    jitter: float = INIT_JITTER,
) -> list[CubicBezier3]:
    """Seed new, unfrozen curves on clusters of the uncovered points.

    Orientations come from ``cloud`` (estimated on the full cloud), and the
    size filter is relaxed to ``tau // 2``. Each fitted control point is
    then jittered with Gaussian noise of std ``jitter``.
    """
    uncovered = np.asarray(uncovered, dtype=np.int64)
    if len(uncovered) == 0:
        return []
    if cloud.orientations is None:
        raise ValueError("cloud orientations not estimated")
    sub = cloud.subset(uncovered)
    relaxed = replace(cfg, tau=max(1, cfg.tau // 2))
    clusters = [c for c in cluster_all(sub, relaxed) if len(c) >= 2]
    rng = np.random.default_rng(rng_seed)
    curves = []
    for c in clusters:
        try:
            base = init_curves_from_cluster(c, sub, provenance=STAGE2)
        except ValueError:
            continue
        ctrl = base.control + rng.normal(0.0, jitter, size=(4, 3)) if jitter > 0 else base.control
        curves.append(CubicBezier3(ctrl, frozen=False, provenance=STAGE2))
    return curves


class RefinementObjective(Protocol):
    """Value and per-point gradient over the combined sampled cloud.

    ``points`` holds the samples of every curve, frozen ones first;
    gradients are requested only for rows ``unfrozen_range[0]`` to
    ``unfrozen_range[1]`` (half-open) and must have that many rows.
    """

    def value_and_grad(self, points: np.ndarray, unfrozen_range: tuple[int, int], step: int):
        ...


class ResidualChamferObjective:
    """Chamfer loss between the new curves' samples and the uncovered points.

    ``reverse_weight`` scales the target-to-curve term; set it to 0 for the
    one-sided form.
    """

    def __init__(self, uncovered_points, lam: float = 1.0, noise_sigma: float = 0.0,
                 rng_seed: int = 0, reverse_weight: float = 1.0):
        self.target = np.asarray(uncovered_points, dtype=float).reshape(-1, 3)
        if len(self.target) == 0:
            raise ValueError("residual objective needs uncovered points")
        self.lam = lam
        self.noise_sigma = noise_sigma
        self.reverse_weight = reverse_weight
        self.tree = cKDTree(self.target)
        self.rng = np.random.default_rng(rng_seed)

    def value_and_grad(self, points, unfrozen_range, step):
        lo, hi = unfrozen_range
        own = add_noise(points[lo:hi], self.noise_sigma, self.rng)
        i_cs, d_cs = nearest(own, self.target, self.tree)
        value = self.lam * float(d_cs.mean())
        grad = (2.0 * self.lam / len(own)) * (own - self.target[i_cs])
        if self.reverse_weight:
            i_sc, d_sc = nearest(self.target, own)
            value += self.reverse_weight * float(d_sc.mean())
            back = (2.0 * self.reverse_weight / len(self.target)) * (own[i_sc] - self.target)
            np.add.at(grad, i_sc, back)
        return value, grad


def residual_chamfer_objective(uncovered_points, cfg: FitConfig | None = None, **kwargs) -> ResidualChamferObjective:
    cfg = cfg or FitConfig()
    kwargs.setdefault("lam", cfg.lam)
    kwargs.setdefault("noise_sigma", cfg.noise_sigma)
    kwargs.setdefault("rng_seed", cfg.rng_seed)
    return ResidualChamferObjective(uncovered_points, **kwargs)


class ScoreServiceObjective:
    """Objective whose per-point gradients come from an HTTP scoring service.

    Request body: ``{"points": [[x, y, z], ...], "unfrozen_range": [start, end],
    "image_ref": str, "step": int}``. Response body: ``{"grads": [[gx, gy, gz], ...]}``
    with one row per point in ``unfrozen_range`` and an optional ``"loss"``.
    Returned gradients are multiplied by ``weight``.
    """

    def __init__(self, endpoint: str, image_ref: str = "", weight: float = 1.0, timeout: float = 120.0):
        self.endpoint = endpoint
        self.image_ref = image_ref
        self.weight = weight
        self.timeout = timeout

    def value_and_grad(self, points, unfrozen_range, step):
        lo, hi = unfrozen_range
        body = json.dumps({
            "points": np.asarray(points, dtype=float).tolist(),
            "unfrozen_range": [int(lo), int(hi)],
            "image_ref": self.image_ref,
            "step": int(step),
        }).encode()
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise RefinementError(step, f"scoring service error: {exc}") from exc
        try:
            grads = np.asarray(payload["grads"], dtype=float).reshape(-1, 3)
        except (KeyError, TypeError, ValueError) as exc:
            raise RefinementError(step, "malformed scoring service response") from exc
        if len(grads) != hi - lo or not np.isfinite(grads).all():
            raise RefinementError(step, f"expected {hi - lo} finite gradients, got {len(grads)}")
        return float(payload.get("loss", float("nan"))), self.weight * grads


def sds_objective(endpoint: str, image_ref: str = "", weight: float = 1.0, timeout: float = 120.0) -> ScoreServiceObjective:
    return ScoreServiceObjective(endpoint, image_ref=image_ref, weight=weight, timeout=timeout)


def refine(
    graphic: VectorGraphic3D,
    new_curves: list,
    objective: RefinementObjective,
    cfg: FitConfig,
    losses: list | None = None,
    trajectory: list | None = None,
) -> VectorGraphic3D:
    """Optimize ``new_curves`` against ``objective`` with the input curves frozen.

    Returns a new graphic holding the input curves (frozen, bit-identical)
    followed by the optimized new curves. ``losses`` receives the objective
    value per step; ``trajectory`` the new-curve control points after each
    step.
    """
    fixed = [CubicBezier3(c.control.copy(), frozen=True, provenance=c.provenance) for c in graphic.curves]
    if not new_curves:
        return VectorGraphic3D(
            [CubicBezier3(c.control.copy(), c.frozen, c.provenance) for c in graphic.curves],
            graphic.center.copy(),
            graphic.scale,
        )
    frozen_pts = sample_curves(fixed, cfg.s)[0] if fixed else np.zeros((0, 3))
    ctrl = np.stack([c.control for c in new_curves]).astype(float)
    lo = len(frozen_pts)
    for step in range(cfg.steps):
        new_pts = sample_curves(ctrl, cfg.s)[0]
        combined = np.concatenate([frozen_pts, new_pts])
        try:
            value, pg = objective.value_and_grad(combined, (lo, len(combined)), step)
        except RefinementError:
            raise
        except Exception as exc:
            raise RefinementError(step, str(exc)) from exc
        pg = np.asarray(pg, dtype=float).reshape(-1, 3)
        if len(pg) != len(new_pts):
            raise RefinementError(step, "objective returned wrong gradient shape")
        grad = clip_gradient(points_to_control_grad(pg, len(ctrl), cfg.s))
        ctrl = ctrl - cfg.lr * grad
        if losses is not None:
            losses.append(value)
        if trajectory is not None:
            trajectory.append(ctrl.copy())
    added = [CubicBezier3(c, frozen=False, provenance=STAGE2) for c in ctrl]
    return VectorGraphic3D(fixed + added, graphic.center.copy(), graphic.scale)
