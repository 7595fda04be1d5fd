import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import coral_cloud, cube_mesh
from vecwire.clustering import ClusterConfig, cluster_all, estimate_orientations
from vecwire.curvefit import (
    CubicBezier3,
    FitConfig,
    add_noise,
    bernstein,
    chamfer_gradient,
    chamfer_loss,
    de_casteljau,
    eval_bezier,
    fit_stage1,
    init_curves_from_cluster,
    noise_free_loss,
    sample_curves,
)
from vecwire.mesh import SalientPointCloud, build_edge_adjacency, detect_sharp_edges, normalize_mesh, sample_salient_points

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
control_st = st.lists(st.tuples(coords, coords, coords), min_size=4, max_size=4).map(np.array)


def brute_chamfer(a, b, lam):
    fwd = sum(min(float(np.sum((p - q) ** 2)) for q in b) for p in a) / len(a)
    bwd = sum(min(float(np.sum((p - q) ** 2)) for p in a) for q in b) / len(b)
    return lam * fwd + bwd


def frozen_loss(ctrl, pc_s, s, lam, i_cs, i_sc, noise):
    """Chamfer loss with the nearest-neighbor assignments held fixed."""
    pts = sample_curves(ctrl, s)[0] + noise
    return lam * np.mean(np.sum((pts - pc_s[i_cs]) ** 2, axis=1)) + np.mean(np.sum((pts[i_sc] - pc_s) ** 2, axis=1))


# evaluation ---------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(control_st, st.floats(0, 1))
def test_bernstein_matches_de_casteljau(ctrl, t):
    assert np.abs(eval_bezier(CubicBezier3(ctrl), t) - de_casteljau(ctrl, t)).max() <= 1e-12 * max(1.0, np.abs(ctrl).max())


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1))
def test_partition_of_unity(t):
    assert abs(bernstein(t).sum() - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(control_st)
def test_endpoints_exact(ctrl):
    c = CubicBezier3(ctrl)
    assert np.array_equal(eval_bezier(c, 0.0), ctrl[0])
    assert np.array_equal(eval_bezier(c, 1.0), ctrl[3])


def test_constant_curve():
    c = CubicBezier3(np.tile([0.3, -1.2, 4.0], (4, 1)))
    assert np.allclose(eval_bezier(c, np.linspace(0, 1, 11)), [0.3, -1.2, 4.0], atol=1e-12)


def test_elevated_line_midpoint():
    c = CubicBezier3([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert np.allclose(eval_bezier(c, 0.5), [1.5, 0, 0])
    assert c.is_line()


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_t_out_of_range(t):
    with pytest.raises(ValueError):
        eval_bezier(CubicBezier3(np.zeros((4, 3))), t)


def test_nonfinite_control_rejected():
    with pytest.raises(ValueError):
        CubicBezier3([[0, 0, 0], [np.inf, 0, 0], [0, 0, 0], [0, 0, 0]])


# sampling -----------------------------------------------------------------------------

def test_sample_two_endpoints():
    ctrl = np.arange(12, dtype=float).reshape(4, 3)
    pts, idx, t = sample_curves([CubicBezier3(ctrl)], 2)
    assert np.array_equal(pts, ctrl[[0, 3]]) and idx.tolist() == [0, 0] and t.tolist() == [0.0, 1.0]


def test_sample_count_and_backpointers():
    rng = np.random.default_rng(0)
    curves = [CubicBezier3(rng.normal(size=(4, 3))) for _ in range(3)]
    pts, idx, t = sample_curves(curves, 64)
    assert len(pts) == 192
    for row in (0, 70, 191):
        assert np.allclose(pts[row], de_casteljau(curves[idx[row]].control, t[row]), atol=1e-12)


def test_sample_point_curve():
    pts, _, _ = sample_curves([CubicBezier3(np.ones((4, 3)))], 64)
    assert len(pts) == 64 and np.allclose(pts, 1.0)


# chamfer ------------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 5))
def test_chamfer_self_is_zero(seed, lam):
    a = np.random.default_rng(seed).normal(size=(40, 3))
    assert chamfer_loss(a, a, lam) == 0.0


def test_chamfer_single_pair():
    p, q = np.array([[0.0, 0, 0]]), np.array([[0.3, 0.4, 0]])
    assert chamfer_loss(p, q, 2.0) == pytest.approx(3.0 * 0.25, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 3))
def test_chamfer_matches_brute_force(seed, lam):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(80, 3))
    assert abs(chamfer_loss(a, b, lam) - brute_chamfer(a, b, lam)) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_chamfer_scale_covariance(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(45, 3))
    base = chamfer_loss(a, b, 1.3)
    assert chamfer_loss(c * a, c * b, 1.3) == pytest.approx(c * c * base, rel=1e-9)


def test_chamfer_empty_raises():
    with pytest.raises(ValueError):
        chamfer_loss(np.zeros((0, 3)), np.zeros((3, 3)))


# noise ------------------------------------------------------------------------------------

def test_noise_zero_is_identity():
    a = np.random.default_rng(1).normal(size=(10, 3))
    assert np.array_equal(add_noise(a, 0.0, 5), a)


def test_noise_statistics():
    a = np.zeros((10000, 3))
    std = add_noise(a, 0.01, np.random.default_rng(3)).std(axis=0)
    assert np.all((std >= 0.009) & (std <= 0.011))


def test_noise_empty():
    assert add_noise(np.zeros((0, 3)), 0.1, 0).shape == (0, 3)


# gradient ------------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ctrl = rng.normal(size=(1, 4, 3))
    pc_s = rng.normal(size=(120, 3))
    cfg = FitConfig(s=32, lam=0.7, noise_sigma=0.01)
    noise = rng.normal(scale=0.01, size=(32, 3))
    loss, grad = chamfer_gradient(ctrl, pc_s, cfg, noise=noise)
    pts = sample_curves(ctrl, 32)[0] + noise
    i_cs = np.argmin(((pts[:, None] - pc_s[None]) ** 2).sum(-1), axis=1)
    i_sc = np.argmin(((pc_s[:, None] - pts[None]) ** 2).sum(-1), axis=1)
    assert loss == pytest.approx(frozen_loss(ctrl, pc_s, 32, 0.7, i_cs, i_sc, noise), abs=1e-12)
    h = 1e-5
    for k in range(4):
        for d in range(3):
            up, dn = ctrl.copy(), ctrl.copy()
            up[0, k, d] += h
            dn[0, k, d] -= h
            fd = (frozen_loss(up, pc_s, 32, 0.7, i_cs, i_sc, noise)
                  - frozen_loss(dn, pc_s, 32, 0.7, i_cs, i_sc, noise)) / (2 * h)
            assert abs(grad[0, k, d] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_gradient_zero_at_match():
    c = CubicBezier3(np.random.default_rng(2).normal(size=(4, 3)))
    pc_s = sample_curves([c], 16)[0]
    _, g = chamfer_gradient([c], pc_s, FitConfig(s=16, noise_sigma=0.0))
    assert np.array_equal(g, np.zeros_like(g))


def test_frozen_curve_zero_gradient():
    rng = np.random.default_rng(4)
    curves = [CubicBezier3(rng.normal(size=(4, 3)), frozen=True), CubicBezier3(rng.normal(size=(4, 3)))]
    _, g = chamfer_gradient(curves, rng.normal(size=(50, 3)), FitConfig(s=16))
    assert np.array_equal(g[0], np.zeros((4, 3))) and np.any(g[1] != 0)


# model selection --------------------------------------------------------------------------

def test_collinear_cluster_prefers_line():
    pts = np.stack([np.linspace(-0.4, 0.6, 40), np.zeros(40), np.zeros(40)], axis=1)
    c = init_curves_from_cluster(list(range(40)), pts)
    assert c.is_line()
    ends = sorted([c.control[0][0], c.control[3][0]])
    assert abs(ends[0] + 0.4) < 1e-6 and abs(ends[1] - 0.6) < 1e-6


def test_quarter_circle_prefers_curve():
    a = np.linspace(0, np.pi / 2, 40)
    pts = np.stack([np.cos(a), np.sin(a), np.zeros(40)], axis=1)
    c = init_curves_from_cluster(list(range(40)), pts)
    assert not c.is_line()
    # the selected curve really is the better fit: compare against an independent dense check
    dense = eval_bezier(c, np.linspace(0, 1, 2000))
    err = np.mean(np.min(((pts[:, None] - dense[None]) ** 2).sum(-1), axis=1))
    chord = pts[-1] - pts[0]
    t = np.clip((pts - pts[0]) @ chord / (chord @ chord), 0, 1)
    line_err = np.mean(np.sum((pts - (pts[0] + t[:, None] * chord)) ** 2, axis=1))
    assert err < line_err


def test_two_point_cluster_is_line():
    pts = np.array([[0.0, 0, 0], [0.03, 0.04, 0]])
    c = init_curves_from_cluster([0, 1], pts)
    assert c.is_line()
    assert np.allclose(c.control[[0, 3]], pts)


def test_identical_points_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        init_curves_from_cluster([0, 1, 2], np.zeros((3, 3)))


# stage-I loop ----------------------------------------------------------------------------

def _cube_inputs():
    m = normalize_mesh(cube_mesh())
    es = detect_sharp_edges(m, build_edge_adjacency(m), 30.0)
    cloud = estimate_orientations(sample_salient_points(m, es, 0.01), 10)
    return cloud, cluster_all(cloud, ClusterConfig())


def test_steps_zero_returns_init():
    cloud, clusters = _cube_inputs()
    g = fit_stage1(clusters, cloud, FitConfig(steps=0))
    init = [init_curves_from_cluster(c, cloud) for c in clusters]
    assert all(np.array_equal(a.control, b.control) for a, b in zip(g.curves, init))
    assert all(c.provenance == "stage1" for c in g.curves)


def test_cube_fit_endpoints_near_corners():
    cloud, clusters = _cube_inputs()
    g = fit_stage1(clusters, cloud, FitConfig())
    assert len(g.curves) == 12
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    for c in g.curves:
        for e in (c.control[0], c.control[3]):
            assert np.linalg.norm(corners - e, axis=1).min() <= 0.02


@pytest.mark.parametrize("fixture", ["cube", "coral"])
def test_fit_never_increases_loss(fixture):
    if fixture == "cube":
        cloud, clusters = _cube_inputs()
    else:
        cloud, _ = coral_cloud()
        cloud = estimate_orientations(cloud, 10)
        clusters = cluster_all(cloud, ClusterConfig())
    cfg = FitConfig()
    losses = []
    g = fit_stage1(clusters, cloud, cfg, losses=losses)
    assert len(losses) == cfg.steps + 1
    final = noise_free_loss(g.curves, cloud.points, cfg)
    assert final < losses[0]
    assert final == min(losses)


def test_fit_deterministic():
    cloud, clusters = _cube_inputs()
    a = fit_stage1(clusters, cloud, FitConfig(steps=20))
    b = fit_stage1(clusters, cloud, FitConfig(steps=20))
    assert np.array_equal(a.control_array, b.control_array)


def test_fit_moves_noisy_init_toward_target():
    # a perturbed line segment is pulled back toward its samples
    pts = np.stack([np.linspace(0, 1, 60), np.zeros(60), np.zeros(60)], axis=1)
    cloud = SalientPointCloud(pts)
    cfg = FitConfig(lr=0.05, steps=50, noise_sigma=0.0)
    losses = []
    fit_stage1([list(range(0, 60, 2))], cloud, cfg, losses=losses)
    assert losses[-1] <= losses[0]


@pytest.mark.parametrize("kw", [dict(s=1), dict(lam=-1), dict(noise_sigma=-0.1), dict(lr=0), dict(steps=-1)])
def test_fit_config_validation(kw):
    with pytest.raises(ValueError):
        FitConfig(**kw)
