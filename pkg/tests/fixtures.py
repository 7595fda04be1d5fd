"""Synthetic meshes and point clouds used across the test suite."""

import contextlib
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np

from vecwire.mesh import Mesh, SalientPointCloud

CUBE_QUADS = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]


def cube_arrays(lo=0.0, hi=1.0):
    v = np.array([[x, y, z] for x in (lo, hi) for y in (lo, hi) for z in (lo, hi)], dtype=float)
    f = []
    for a, b, c, d in CUBE_QUADS:
        f += [(a, b, c), (a, c, d)]
    return v, np.array(f)


def cube_mesh(lo=0.0, hi=1.0):
    return Mesh(*cube_arrays(lo, hi))


def box_mesh(size):
    v, f = cube_arrays()
    return Mesh(v * np.asarray(size, dtype=float), f)


def obj_text(vertices, faces):
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    return "\n".join(lines) + "\n"


def ply_text(vertices, faces):
    head = [
        "ply", "format ascii 1.0", f"element vertex {len(vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header",
    ]
    body = [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in faces]
    return "\n".join(head + body) + "\n"


def icosphere(subdivisions=2, radius=1.0):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(verts) * radius, np.array(faces))


def bumpy_torus(n_u=70, n_v=72, R=1.0, r=0.35, ridges=6, ridge_height=0.06):
    """Closed torus with angular ridges; 2 * n_u * n_v triangles."""
    u = np.linspace(0, 2 * np.pi, n_u, endpoint=False)
    v = np.linspace(0, 2 * np.pi, n_v, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    rr = r + ridge_height * np.abs(np.sin(ridges * uu / 2.0))
    x = (R + rr * np.cos(vv)) * np.cos(uu)
    y = rr * np.sin(vv)
    z = (R + rr * np.cos(vv)) * np.sin(uu)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_u):
        for j in range(n_v):
            a = i * n_v + j
            b = ((i + 1) % n_u) * n_v + j
            c = ((i + 1) % n_u) * n_v + (j + 1) % n_v
            d = i * n_v + (j + 1) % n_v
            faces += [(a, b, c), (a, c, d)]
    return Mesh(verts, np.array(faces))


def _segment(a, b, spacing):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = int(np.ceil(np.linalg.norm(b - a) / spacing - 1e-9)) + 1
    return a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)


def coral_skeleton():
    """Trunk, two main branches and five short terminal twigs.

    Every junction turns by more than 60 degrees, so each segment is its own
    cluster under the default 50 degree threshold. Twigs are 0.4 long.
    """
    fork = np.array([0.0, 0.0, 0.0])
    left = np.array([-0.7, 0.35, 0.0])
    right = np.array([0.7, 0.35, 0.1])
    mid = np.array([0.0, -0.45, 0.0])
    main = [((0.0, -0.9, 0.0), fork), (fork, left), (fork, right)]

    def perp(d):
        d = d / np.linalg.norm(d)
        return np.array([-d[1], d[0], 0.0]) / np.hypot(d[0], d[1])

    twigs = [
        (left, left + 0.4 * perp(left)),
        (left, left + 0.4 * np.array([0.0, 0.0, 1.0])),
        (right, right - 0.4 * perp(right)),
        (right, right + 0.4 * np.array([0.0, 0.0, -1.0])),
        (mid, mid + 0.4 * np.array([1.0, 0.0, 0.0])),
    ]
    return main, twigs


def coral_cloud(spacing=0.01):
    """Salient-style point cloud of a branched coral; returns (cloud, twig point index lists)."""
    main, twigs = coral_skeleton()
    chunks = [_segment(a, b, spacing) for a, b in main]
    twig_chunks = [_segment(a, b, spacing)[1:] for a, b in twigs]  # twig root lies on its parent
    pts = np.concatenate(chunks + twig_chunks)
    # drop duplicate junction points
    _, keep = np.unique(np.round(pts, 9), axis=0, return_index=True)
    keep = np.sort(keep)
    pts = pts[keep]
    twig_idx = []
    for tc in twig_chunks:
        twig_idx.append([int(np.argmin(np.linalg.norm(pts - p, axis=1))) for p in tc])
    return SalientPointCloud(pts), twig_idx


def l_shape_cloud(spacing=0.01, leg=0.5):
    a = _segment((0, 0, 0), (leg, 0, 0), spacing)
    b = _segment((0, 0, 0), (0, leg, 0), spacing)[1:]
    return SalientPointCloud(np.concatenate([a, b])), len(a)


def line_cloud(n=20, spacing=0.01, direction=(1.0, 0.0, 0.0)):
    d = np.asarray(direction, dtype=float)
    return SalientPointCloud(np.arange(n)[:, None] * spacing * d)


def circle_cloud(n=200, radius=1.0):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return SalientPointCloud(np.stack([radius * np.cos(a), radius * np.sin(a), np.zeros(n)], axis=1))


def coral_stage1(tau=50, seed=0):
    """Coral cloud with first-stage curves on the trunk and main branches only.

    A large ``tau`` keeps the short twigs out of the first stage, so they
    show up as uncovered residual regions.
    """
    from vecwire.clustering import ClusterConfig, cluster_all, estimate_orientations
    from vecwire.curvefit import FitConfig, fit_stage1

    cloud, twigs = coral_cloud()
    cloud = estimate_orientations(cloud, 10)
    clusters = cluster_all(cloud, ClusterConfig(tau=tau, rng_seed=seed))
    graphic = fit_stage1(clusters, cloud, FitConfig(rng_seed=seed))
    return cloud, graphic, twigs


class _EchoHandler(BaseHTTPRequestHandler):
    target = None
    mode = "echo"
    requests = None

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.requests.append(body)
        lo, hi = body["unfrozen_range"]
        own = np.asarray(body["points"], dtype=float)[lo:hi]
        if self.mode == "zero":
            out = {"grads": np.zeros_like(own).tolist()}
        elif self.mode == "malformed":
            out = {"gradients": []}
        elif self.mode == "short":
            out = {"grads": np.zeros((max(0, len(own) - 1), 3)).tolist()}
        else:
            # brute-force nearest target point for every new-curve sample
            d2 = ((own[:, None, :] - self.target[None, :, :]) ** 2).sum(-1)
            q = self.target[np.argmin(d2, axis=1)]
            out = {"grads": ((own - q) * 2.0 / len(own)).tolist(), "loss": float(d2.min(axis=1).mean())}
        raw = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@contextlib.contextmanager
def echo_service(target=None, mode="echo"):
    """Local gradient service; yields ``(url, received_requests)``."""
    requests = []
    handler = type("Handler", (_EchoHandler,), {
        "target": None if target is None else np.asarray(target, dtype=float),
        "mode": mode,
        "requests": requests,
    })
    server = HTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}/score", requests
    finally:
        server.shutdown()
        server.server_close()
