"""Orientation estimation and directional clustering of salient points.

Every point gets a unit direction from PCA over its k nearest neighbors.
Clusters are then grown point by point: from the most recently added
point ``p`` the nearest unassigned ``q`` within ``d_thresh`` is admitted if
the segment ``pq`` is aligned with ``q``'s direction to within
``theta_thresh``. A cluster grows forward from its seed until it stalls,
then once more backward from the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import SalientPointCloud

DEGENERATE_EIGENVALUE = 1e-24
EIGEN_TIE_RTOL = 1e-9


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    d_thresh: float = 0.05
    theta_thresh: float = 50.0
    k: int = 10
    tau: int = 10
    rng_seed: int = 0
    # also require v_q to follow the incoming growth direction (see _grow)
    continuity: bool = True

    def __post_init__(self):
        if not self.d_thresh > 0:
            raise ValueError("d_thresh must be positive")
        if not 0.0 < self.theta_thresh <= 90.0:
            raise ValueError("theta_thresh must lie in (0, 90] degrees")
        if self.k < 3:
            raise ValueError("k must be >= 3")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


@dataclass
class Cluster:
    """A run of salient points.

    ``forward`` starts at the seed and lists points in the order they were
    admitted going forward; ``backward`` lists the points admitted after
    the restart from the seed. Each member was admitted from the member
    just before it in its list (the seed for the first backward point).
    """

    seed: int
    forward: list = field(default_factory=list)
    backward: list = field(default_factory=list)

    @property
    def members(self) -> list:
        """Indices in growth order."""
        return self.forward + self.backward

    @property
    def chain(self) -> list:
        """Indices ordered along the run, from one end to the other."""
        return self.backward[::-1] + self.forward

    def __len__(self):
        return len(self.forward) + len(self.backward)

    def admission_pairs(self) -> list[tuple[int, int]]:
        """``(p, q)`` pairs where ``q`` was admitted from ``p``."""
        pairs = list(zip(self.forward[:-1], self.forward[1:]))
        back = [self.seed] + self.backward
        pairs += list(zip(back[:-1], back[1:]))
        return pairs


def _principal_direction(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    w, v = np.linalg.eigh(cov)
    top = w[-1]
    if top <= DEGENERATE_EIGENVALUE:
        return np.array([1.0, 0.0, 0.0]), True
    tied = [j for j in range(3) if w[j] >= top * (1.0 - EIGEN_TIE_RTOL)]
    candidates = [canonical_sign(v[:, j]) for j in tied]
    return max(candidates, key=tuple), False


def canonical_sign(vec: np.ndarray) -> np.ndarray:
    """Flip ``vec`` so its first nonzero component is positive."""
    for c in vec:
        if c != 0:
            return vec if c > 0 else -vec
    return vec


def estimate_orientations(cloud: SalientPointCloud, k: int = 10) -> SalientPointCloud:
    """Unit principal direction of each point's k-nearest-neighbor set (point included)."""
    if k < 3:
        raise ClusteringError("k must be >= 3")
    n = len(cloud)
    if n < k:
        raise ClusteringError(f"cloud too small: {n} points for k={k}")
    pts = cloud.points
    _, nbr = cKDTree(pts).query(pts, k=k)
    local = pts[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    w, v = np.linalg.eigh(cov)
    top = w[:, -1]
    orient = v[:, :, -1].copy()
    degenerate = top <= DEGENERATE_EIGENVALUE
    # ties and degenerate neighborhoods take the slow, deterministic path
    tied = w[:, -2] >= top * (1.0 - EIGEN_TIE_RTOL)
    for i in np.flatnonzero(tied | degenerate):
        orient[i], degenerate[i] = _principal_direction(cov[i])
    orient = np.where(_first_nonzero_negative(orient)[:, None], -orient, orient)
    orient /= np.linalg.norm(orient, axis=1, keepdims=True)
    return SalientPointCloud(pts, orient, cloud.edge_ids, degenerate)


def _first_nonzero_negative(vecs: np.ndarray) -> np.ndarray:
    nz = vecs != 0
    first = np.argmax(nz, axis=1)
    vals = vecs[np.arange(len(vecs)), first]
    return vals < 0


def admissible(points: np.ndarray, orientations: np.ndarray, p: int, q: int, cfg: ClusterConfig) -> bool:
    """Distance and alignment test for admitting ``q`` after ``p``."""
    d = points[q] - points[p]
    dist = math.sqrt(float(d @ d))
    if dist > cfg.d_thresh:
        return False
    if dist == 0.0:
        return True
    cos = abs(float(d @ orientations[q])) / dist
    return math.degrees(math.acos(min(cos, 1.0))) < cfg.theta_thresh


def follows(direction: np.ndarray, orientation: np.ndarray, cfg: ClusterConfig) -> bool:
    """Whether ``orientation`` lies within ``theta_thresh`` of the growth ``direction``."""
    cos = min(abs(float(direction @ orientation)), 1.0)
    return math.degrees(math.acos(cos)) < cfg.theta_thresh


def _heading(points, orient, path, reach: float) -> np.ndarray:
    """Growth direction over the last ``reach`` of the run, or the seed orientation."""
    if len(path) == 1:
        return orient[path[0]]
    tip = points[path[-1]]
    back = path[0]
    for idx in reversed(path[:-1]):
        back = idx
        if np.linalg.norm(tip - points[idx]) >= reach:
            break
    d = tip - points[back]
    n = np.linalg.norm(d)
    return d / n if n > 0 else orient[path[-1]]


def _grow(points, orient, tree, start, unassigned, cfg) -> list:
    # The pq-vs-v_q test alone lets a run cut diagonally across a right-angle
    # corner (a 45 deg hop passes at theta=50) and follow any junction whose
    # PCA directions are smeared. With ``continuity`` both the step pq and
    # the candidate orientation must also stay within theta of the heading.
    path = [start]
    while True:
        p = path[-1]
        cand = [q for q in tree.query_ball_point(points[p], cfg.d_thresh) if unassigned[q]]
        if not cand:
            return path[1:]
        cand = np.asarray(cand)
        dist = np.linalg.norm(points[cand] - points[p], axis=1)
        heading = _heading(points, orient, path, cfg.d_thresh) if cfg.continuity else None
        nxt = None
        for j in np.lexsort((cand, dist)):
            q = int(cand[j])
            if not admissible(points, orient, p, q, cfg):
                continue
            if heading is not None:
                step = (points[q] - points[p]) / dist[j] if dist[j] > 0 else heading
                if not (follows(heading, step, cfg) and follows(heading, orient[q], cfg)):
                    continue
            nxt = q
            break
        if nxt is None:
            return path[1:]
        unassigned[nxt] = False
        path.append(nxt)


def grow_cluster(
    cloud: SalientPointCloud,
    seed: int,
    unassigned: np.ndarray,
    cfg: ClusterConfig,
    tree: cKDTree | None = None,
) -> Cluster:
    """Grow one cluster from ``seed``.

    ``unassigned`` is a boolean mask over the cloud and is updated in place.
    """
    if cloud.orientations is None:
        raise ClusteringError("orientations not estimated")
    if not unassigned[seed]:
        raise ClusteringError(f"seed {seed} is already assigned")
    if tree is None:
        tree = cKDTree(cloud.points)
    unassigned[seed] = False
    fwd = _grow(cloud.points, cloud.orientations, tree, seed, unassigned, cfg)
    back = _grow(cloud.points, cloud.orientations, tree, seed, unassigned, cfg)
    return Cluster(seed=int(seed), forward=[int(seed)] + fwd, backward=back)


def cluster_all(cloud: SalientPointCloud, cfg: ClusterConfig) -> list[Cluster]:
    """Partition the cloud from random seeds, then drop clusters smaller than ``tau``."""
    if cloud.orientations is None:
        raise ClusteringError("orientations not estimated")
    rng = np.random.default_rng(cfg.rng_seed)
    unassigned = np.ones(len(cloud), dtype=bool)
    tree = cKDTree(cloud.points) if len(cloud) else None
    clusters = []
    while unassigned.any():
        free = np.flatnonzero(unassigned)
        seed = int(free[rng.integers(len(free))])
        clusters.append(grow_cluster(cloud, seed, unassigned, cfg, tree))
    return [c for c in clusters if len(c) >= cfg.tau]


def clusters_to_json(clusters: list[Cluster], cfg: ClusterConfig) -> str:
    doc = {
        "config": asdict(cfg),
        "clusters": [{"seed": c.seed, "forward": c.forward, "backward": c.backward} for c in clusters],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def clusters_from_json(text: str) -> tuple[list[Cluster], ClusterConfig]:
    doc = json.loads(text)
    cfg = ClusterConfig(**doc["config"])
    return [Cluster(c["seed"], list(c["forward"]), list(c["backward"])) for c in doc["clusters"]], cfg
