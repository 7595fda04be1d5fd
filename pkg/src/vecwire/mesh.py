"""Triangle mesh loading, normalization and salient-edge extraction.

The salient point cloud is built from three kinds of edges:

* sharp edges, whose two incident face normals deviate by more than a
  threshold angle,
* boundary (1 face) and non-manifold (>2 faces) edges,
* silhouette edges seen from a ring of cameras around the object.

Points are then sampled along the union at a fixed arc-length spacing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera, orbit_cameras

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12

SHARP = "sharp"
BOUNDARY = "boundary"
NONMANIFOLD = "nonmanifold"
SILHOUETTE = "silhouette"
# when an edge qualifies under several labels the first one listed wins
LABEL_PRIORITY = (SHARP, BOUNDARY, NONMANIFOLD, SILHOUETTE)


class MeshError(Exception):
    """Raised for unreadable, unsupported or empty mesh input."""


@dataclass
class Mesh:
    """Indexed triangle mesh.

    Attributes
    ----------
    vertices : (n, 3) float array
    faces : (m, 3) int array
    face_normals : (m, 3) float array of unit normals
    dropped_faces : int
        Number of degenerate faces removed at construction.
    transform : (center, scale) or None
        Set by :func:`normalize_mesh`; ``normalized = (v - center) * scale``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray = None
    dropped_faces: int = 0
    transform: tuple | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        if self.face_normals is None:
            self._drop_degenerate()
        self.face_normals = np.asarray(self.face_normals, dtype=float).reshape(-1, 3)

    def _drop_degenerate(self):
        cross = self._face_cross()
        doubled_area = np.linalg.norm(cross, axis=1)
        # threshold is in normalized units (longest bbox side == 2)
        extent = _longest_side(self.vertices) if len(self.vertices) else 0.0
        unit = (extent / 2.0) ** 2 if extent > 0 else 1.0
        keep = 0.5 * doubled_area >= DEGENERATE_AREA * unit
        n_bad = int((~keep).sum())
        if n_bad:
            logger.warning("dropped %d degenerate face(s)", n_bad)
        self.dropped_faces += n_bad
        self.faces = self.faces[keep]
        self.face_normals = cross[keep] / doubled_area[keep, None]

    def _face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    @property
    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)


def _longest_side(vertices: np.ndarray) -> float:
    return float((vertices.max(axis=0) - vertices.min(axis=0)).max())


def _parse_obj(text: str):
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return verts, faces


def _parse_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError("unsupported format: missing ply header")
    n_vert = n_face = 0
    vert_props: list[str] = []
    current = None
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise MeshError("unsupported format: only ASCII PLY is supported")
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise MeshError("unsupported format: ply header not terminated")
    try:
        xyz = [vert_props.index(c) for c in ("x", "y", "z")]
    except ValueError as exc:
        raise MeshError("ply vertex element lacks x/y/z") from exc
    body = [ln.split() for ln in lines[body_start:] if ln.strip()]
    if len(body) < n_vert + n_face:
        raise MeshError("ply body shorter than header declares")
    verts = [[float(row[j]) for j in xyz] for row in body[:n_vert]]
    faces = []
    for row in body[n_vert:n_vert + n_face]:
        n = int(row[0])
        idx = [int(x) for x in row[1:1 + n]]
        for k in range(1, n - 1):
            faces.append([idx[0], idx[k], idx[k + 1]])
    return verts, faces


def parse_mesh(text: str, fmt: str) -> Mesh:
    """Build a :class:`Mesh` from OBJ or ASCII PLY text."""
    try:
        if fmt == "obj":
            verts, faces = _parse_obj(text)
        elif fmt == "ply":
            verts, faces = _parse_ply(text)
        else:
            raise MeshError(f"unsupported format: {fmt!r}")
    except (ValueError, IndexError) as exc:
        raise MeshError(f"unreadable file: {exc}") from exc
    if not verts or not faces:
        raise MeshError("empty mesh")
    mesh = Mesh(np.array(verts, dtype=float), np.array(faces, dtype=np.int64))
    if len(mesh.faces) == 0:
        raise MeshError("empty mesh: all faces degenerate")
    if not np.isfinite(mesh.vertices).all():
        raise MeshError("unreadable file: non-finite vertex coordinates")
    return mesh


def load_mesh(path) -> Mesh:
    """Load an OBJ or ASCII PLY file, dropping degenerate faces."""
    path = Path(path)
    fmt = path.suffix.lower().lstrip(".")
    if fmt not in ("obj", "ply"):
        raise MeshError(f"unsupported format: {path.suffix or path.name}")
    try:
        text = path.read_text(encoding="utf-8", errors="strict")
    except (OSError, UnicodeDecodeError) as exc:
        raise MeshError(f"unreadable file: {path}") from exc
    return parse_mesh(text, fmt)


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale its longest side to 2.

    The transform is composed with any previous normalization so the
    recorded ``(center, scale)`` always maps the *original* coordinates.
    """
    v = mesh.vertices
    if len(v) == 0:
        raise MeshError("empty mesh")
    lo, hi = v.min(axis=0), v.max(axis=0)
    center = (lo + hi) / 2.0
    side = float((hi - lo).max())
    if side == 0:
        raise MeshError("mesh has zero extent")
    scale = 2.0 / side
    new_v = (v - center) * scale
    if mesh.transform is not None:
        c0, s0 = mesh.transform
        center = np.asarray(c0) + center / s0
        scale = s0 * scale
    return Mesh(
        new_v,
        mesh.faces.copy(),
        face_normals=mesh.face_normals.copy(),
        dropped_faces=mesh.dropped_faces,
        transform=(np.asarray(center, dtype=float), float(scale)),
    )


@dataclass
class EdgeAdjacency:
    edges: np.ndarray  # (E, 2) sorted vertex pairs, i < j
    edge_faces: list  # per edge, tuple of incident face indices

    @property
    def face_count(self) -> np.ndarray:
        return np.array([len(f) for f in self.edge_faces], dtype=np.int64)

    @property
    def nonmanifold(self) -> np.ndarray:
        return np.flatnonzero(self.face_count > 2)


def build_edge_adjacency(mesh: Mesh) -> EdgeAdjacency:
    f = mesh.faces
    if len(f) == 0:
        return EdgeAdjacency(np.zeros((0, 2), dtype=np.int64), [])
    half = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    face_of = np.tile(np.arange(len(f)), 3)
    half = np.sort(half, axis=1)
    edges, inverse = np.unique(half, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.lexsort((face_of, inverse))
    splits = np.flatnonzero(np.diff(inverse[order])) + 1
    edge_faces = [tuple(int(x) for x in grp) for grp in np.split(face_of[order], splits)]
    return EdgeAdjacency(edges.astype(np.int64), edge_faces)


@dataclass
class EdgeSet:
    """Subset of mesh edges with one label per member.

    ``pairs`` holds the vertex-index pair of each member so the set can be
    sampled without the adjacency it was drawn from.
    """

    indices: np.ndarray  # sorted unique edge indices into EdgeAdjacency
    labels: list = field(default_factory=list)
    pairs: np.ndarray = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.pairs is None:
            self.pairs = np.zeros((0, 2), dtype=np.int64)
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.indices)

    def with_label(self, label: str) -> np.ndarray:
        return np.array([i for i, lab in zip(self.indices, self.labels) if lab == label], dtype=np.int64)

    @classmethod
    def from_mapping(cls, mapping: dict, adj: EdgeAdjacency) -> "EdgeSet":
        keys = sorted(mapping)
        idx = np.array(keys, dtype=np.int64)
        return cls(idx, [mapping[k] for k in keys], adj.edges[idx] if len(idx) else None)

    def union(self, other: "EdgeSet") -> "EdgeSet":
        merged = dict(zip(self.indices.tolist(), self.labels))
        pairs = dict(zip(self.indices.tolist(), self.pairs.tolist()))
        for i, lab, pr in zip(other.indices.tolist(), other.labels, other.pairs.tolist()):
            pairs.setdefault(i, pr)
            if i not in merged or LABEL_PRIORITY.index(lab) < LABEL_PRIORITY.index(merged[i]):
                merged[i] = lab
        keys = sorted(merged)
        return EdgeSet(
            np.array(keys, dtype=np.int64),
            [merged[k] for k in keys],
            np.array([pairs[k] for k in keys], dtype=np.int64),
        )


def _two_face_edges(adj: EdgeAdjacency):
    idx = [i for i, fs in enumerate(adj.edge_faces) if len(fs) == 2]
    pairs = np.array([adj.edge_faces[i] for i in idx], dtype=np.int64).reshape(-1, 2)
    return np.array(idx, dtype=np.int64), pairs


def normal_angles(mesh: Mesh, adj: EdgeAdjacency):
    """Angle in degrees between the two face normals of every 2-face edge."""
    idx, pairs = _two_face_edges(adj)
    n = mesh.face_normals
    cos = np.einsum("ij,ij->i", n[pairs[:, 0]], n[pairs[:, 1]])
    return idx, np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def detect_sharp_edges(mesh: Mesh, adj: EdgeAdjacency, theta_sharp: float = 30.0) -> EdgeSet:
    """Sharp, boundary and non-manifold edges.

    A 2-face edge is sharp when its normal-deviation angle exceeds
    ``theta_sharp`` degrees.
    """
    if not 0.0 < theta_sharp < 180.0:
        raise ValueError("theta_sharp must lie in (0, 180) degrees")
    labels = {}
    idx, angles = normal_angles(mesh, adj)
    for i in idx[angles > theta_sharp].tolist():
        labels[i] = SHARP
    for i, fs in enumerate(adj.edge_faces):
        if len(fs) == 1:
            labels[i] = BOUNDARY
        elif len(fs) > 2:
            labels[i] = NONMANIFOLD
    return EdgeSet.from_mapping(labels, adj)


def front_facing(mesh: Mesh, camera: Camera) -> np.ndarray:
    to_cam = camera.center - mesh.face_centroids
    return np.einsum("ij,ij->i", mesh.face_normals, to_cam) > 0


def detect_silhouette_edges(mesh: Mesh, adj: EdgeAdjacency, camera: Camera) -> EdgeSet:
    """2-face edges shared by one front-facing and one back-facing triangle."""
    idx, pairs = _two_face_edges(adj)
    if len(idx) == 0:
        return EdgeSet(np.zeros(0, dtype=np.int64), [])
    front = front_facing(mesh, camera)
    sil = np.sort(idx[front[pairs[:, 0]] != front[pairs[:, 1]]])
    return EdgeSet(sil, [SILHOUETTE] * len(sil), adj.edges[sil])


def extract_salient_edges(
    mesh: Mesh,
    adj: EdgeAdjacency,
    theta_sharp: float = 30.0,
    n_views: int = 16,
    radius: float = 2.5,
) -> EdgeSet:
    """Sharp/boundary/non-manifold edges plus silhouettes from a horizontal camera ring."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    result = detect_sharp_edges(mesh, adj, theta_sharp)
    for cam in orbit_cameras(n_views, elevation_deg=0.0, radius=radius):
        result = result.union(detect_silhouette_edges(mesh, adj, cam))
    return result


@dataclass
class SalientPointCloud:
    """Points on salient edges with optional per-point orientation.

    ``edge_ids`` records the edge each point was first sampled from (``-1``
    when unknown). ``degenerate`` flags points whose neighborhood had no
    spread when orientations were estimated.
    """

    points: np.ndarray
    orientations: np.ndarray | None = None
    edge_ids: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.edge_ids is None:
            self.edge_ids = np.full(len(self.points), -1, dtype=np.int64)
        if self.orientations is not None:
            self.orientations = np.asarray(self.orientations, dtype=float).reshape(-1, 3)
            if len(self.orientations) != len(self.points):
                raise ValueError("points and orientations differ in length")

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "SalientPointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        return SalientPointCloud(
            self.points[indices],
            None if self.orientations is None else self.orientations[indices],
            self.edge_ids[indices],
            None if self.degenerate is None else self.degenerate[indices],
        )


def edge_sample_count(length: float, spacing: float) -> int:
    """Number of samples (endpoints included) for an edge of ``length``."""
    # the 1e-9 slack keeps exact multiples such as 2 / 0.05 from rounding up
    return int(math.ceil(length / spacing - 1e-9)) + 1 if length > 0 else 1


def sample_salient_points(mesh: Mesh, edges: EdgeSet, spacing: float = 0.01) -> SalientPointCloud:
    """Sample every edge at uniform arc length, endpoints included.

    An edge of length ``L`` yields ``ceil(L / spacing) + 1`` points, so
    consecutive samples are never farther apart than ``spacing``. Points
    shared by several edges (within 1e-9) are kept once, attributed to the
    first edge in index order.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    if len(edges) == 0:
        return SalientPointCloud(np.zeros((0, 3)))
    a = mesh.vertices[edges.pairs[:, 0]]
    b = mesh.vertices[edges.pairs[:, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    chunks, owners = [], []
    for k, (pa, pb, length) in enumerate(zip(a, b, lengths)):
        n = edge_sample_count(length, spacing)
        t = np.linspace(0.0, 1.0, n)[:, None] if n > 1 else np.zeros((1, 1))
        chunks.append(pa + t * (pb - pa))
        owners.append(np.full(n, edges.indices[k], dtype=np.int64))
    pts = np.concatenate(chunks)
    own = np.concatenate(owners)
    keep = np.ones(len(pts), dtype=bool)
    for i, j in sorted(cKDTree(pts).query_pairs(1e-9)):
        if keep[i]:
            keep[j] = False
    return SalientPointCloud(pts[keep], edge_ids=own[keep])
