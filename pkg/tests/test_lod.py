import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from tmlp.lod import (
    LodLevel,
    MetricReport,
    blend_levels,
    chamfer_and_normals,
    contour_length,
    eval_levels,
    eval_lod,
    marching_cubes,
    marching_squares,
    psnr,
    render_grid,
    sample_mesh,
    sample_segments,
    ssim,
    supervised_levels,
    surface_area,
    vertex_normals,
    write_obj_mesh,
    write_obj_segments,
)
from tmlp.model import ModelConfig, forward, init_siren
from tmlp.signals import SdfShape, analytic_sdf, grid_centers, grid_points, image_coords, surface_points

from _oracles import brute_ssim


@pytest.fixture
def model():
    return init_siren(ModelConfig(2, 3, 16, 4, seed=2))


def test_level_split():
    lv = LodLevel(2.25)
    assert (lv.floor, lv.alpha) == (2, 0.25)
    with pytest.raises(ValueError):
        LodLevel(0.5)
    with pytest.raises(ValueError):
        LodLevel(4.5).check(4)


def test_blend_endpoints_and_midpoint(model, rng):
    x = rng.uniform(-1, 1, (20, 2))
    outs, _ = forward(model, x)
    assert np.array_equal(eval_lod(model, x, 2), outs.y[1])
    assert np.array_equal(eval_lod(model, x, 2.5), 0.5 * outs.y[1] + 0.5 * outs.y[2])
    near = eval_lod(model, x, 3 - 1e-12)
    assert np.allclose(near, outs.y[2], atol=1e-9)


@pytest.mark.parametrize("base", [1, 2, 3])
def test_lod_is_affine_in_alpha(model, rng, base):
    x = rng.uniform(-1, 1, (30, 2))
    lo, hi = eval_lod(model, x, base), eval_lod(model, x, base + 1)
    for a in (0, 0.25, 0.5, 0.75, 1):
        assert np.max(np.abs(eval_lod(model, x, base + a) - ((1 - a) * lo + a * hi))) < 1e-12


def test_supervised_levels():
    assert supervised_levels((0, 0.5, 0.5, 0.5, 2.5)) == [2, 3, 4, 5]
    assert supervised_levels((0, 0, 1, 1, 1)) == [3, 4, 5]


def test_render_grid(model):
    g = render_grid(model, 64, 4)
    outs, _ = forward(model, image_coords((64, 64)))
    assert np.array_equal(g, outs.y[3].reshape(64, 64, 3))
    one = render_grid(model, 1, 1)
    assert np.array_equal(one[0, 0], forward(model, np.zeros((1, 2)))[0].y[0][0])


def test_render_grid_3d():
    m = init_siren(ModelConfig(3, 1, 8, 2, seed=1))
    g = render_grid(m, 6, 2)
    outs, _ = forward(m, grid_points(6, 3))
    assert g.shape == (6, 6, 6)
    assert np.array_equal(g.ravel(), outs.y[1][:, 0])


def circle_field(n, r=0.5):
    c = grid_centers(n)
    X, Y = np.meshgrid(c, c)
    return np.hypot(X, Y) - r


def test_marching_squares_trivial_fields():
    assert marching_squares(np.ones((5, 5))).shape == (0, 2, 2)
    assert marching_squares(-np.ones((5, 5))).shape == (0, 2, 2)


def test_marching_squares_circle_length():
    segs = marching_squares(circle_field(128))
    assert abs(contour_length(segs) - np.pi) < 0.01 * np.pi


def test_marching_squares_sign_flip_symmetry():
    f = np.random.default_rng(3).standard_normal((12, 12))
    a = marching_squares(f)
    b = marching_squares(-f)
    key = lambda s: sorted(tuple(sorted(map(tuple, np.round(seg, 12)))) for seg in s)
    # saddles may pair differently; the vertex set is identical
    va = sorted(map(tuple, np.round(a.reshape(-1, 2), 12)))
    vb = sorted(map(tuple, np.round(b.reshape(-1, 2), 12)))
    assert va == vb
    assert len(key(a)) == len(key(b))


def bilinear(f, xs, ys, p):
    c = int(np.clip(np.searchsorted(xs, p[0]) - 1, 0, len(xs) - 2))
    r = int(np.clip(np.searchsorted(ys, p[1]) - 1, 0, len(ys) - 2))
    tx = (p[0] - xs[c]) / (xs[c + 1] - xs[c])
    ty = (p[1] - ys[r]) / (ys[r + 1] - ys[r])
    return (
        f[r, c] * (1 - tx) * (1 - ty) + f[r, c + 1] * tx * (1 - ty) + f[r + 1, c] * (1 - tx) * ty + f[r + 1, c + 1] * tx * ty
    )


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (7, 9), elements=st.floats(-1, 1)))
def test_marching_squares_vertices_on_edges_and_zero(f):
    xs, ys = grid_centers(9), grid_centers(7)
    segs = marching_squares(f)
    for p in segs.reshape(-1, 2):
        on_x = np.min(np.abs(xs - p[0])) < 1e-12
        on_y = np.min(np.abs(ys - p[1])) < 1e-12
        assert on_x or on_y
        assert abs(bilinear(f, xs, ys, p)) < 1e-9


def test_sample_segments_normals_outward():
    segs = marching_squares(circle_field(64))
    pts, normals = sample_segments(segs, 500)
    radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    # contour orientation is arbitrary, so compare |cos|
    assert np.min(np.abs(np.sum(radial * normals, axis=1))) > 0.95


def test_marching_cubes_sphere_area():
    f = analytic_sdf(SdfShape.sphere(0.5), grid_points(64, 3)).reshape(64, 64, 64)
    verts, faces = marching_cubes(f)
    assert abs(surface_area(verts, faces) - np.pi) < 0.03 * np.pi
    cell_diag = np.sqrt(3) * 2 / 64
    assert np.max(np.abs(analytic_sdf(SdfShape.sphere(0.5), verts))) < 2 * cell_diag
    normals = vertex_normals(verts, faces)
    radial = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    assert np.mean(np.sum(normals * radial, axis=1)) > 0.99


def test_marching_cubes_empty_and_limits():
    v, f = marching_cubes(-np.ones((4, 4, 4)))
    assert v.shape == (0, 3) and f.shape == (0, 3)
    with pytest.raises(ValueError):
        marching_cubes(np.zeros((65, 2, 2)))


def test_marching_cubes_torus_offset_axes():
    shape = SdfShape.torus(0.5, 0.2, center=(0.1, -0.2, 0.05))
    f = analytic_sdf(shape, grid_points(48, 3)).reshape(48, 48, 48)
    verts, faces = marching_cubes(f)
    assert np.max(np.abs(analytic_sdf(shape, verts))) < 2 * np.sqrt(3) * 2 / 48
    pts, normals = sample_mesh(verts, faces, 2000, np.random.default_rng(0))
    gt, gn = surface_points(shape, 2000, np.random.default_rng(1))
    assert np.mean(np.abs(analytic_sdf(shape, pts))) < 2e-3
    # sample spacing (~0.02 at this density) dominates the chamfer value
    cd, nc = chamfer_and_normals(pts, normals, gt, gn)
    assert cd < 0.03 and nc > 0.98


def test_psnr_closed_forms():
    a = np.zeros((4, 4))
    assert psnr(a, a) == 99.0
    assert psnr(np.full((4, 4), 0.1), a) == pytest.approx(20.0)
    assert psnr(np.full((4, 4), 0.5), a) == pytest.approx(10 * np.log10(4))
    assert psnr(np.full((4, 4), 0.5), a) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-6, 0.5), st.floats(1e-6, 0.5))
def test_psnr_monotone_in_mse(e1, e2):
    a = np.zeros((2, 2))
    lo, hi = sorted((e1, e2))
    assert psnr(np.full((2, 2), lo), a) >= psnr(np.full((2, 2), hi), a)


def test_ssim_identity_and_anticorrelation():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    assert ssim(board, 1 - board) < 0


def test_ssim_matches_brute_force_fixture():
    rng = np.random.default_rng(42)
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + rng.normal(0, 0.1, (16, 16)), 0, 1)
    assert abs(ssim(a, b) - brute_ssim(a, b)) < 1e-6


def test_ssim_matches_scikit_image_at_odd_window():
    # scikit-image needs odd windows; the same statistic at 7x7 must agree
    rng = np.random.default_rng(7)
    a = rng.uniform(size=(16, 16))
    b = np.clip(0.8 * a + rng.normal(0, 0.1, (16, 16)), 0, 1)
    ref = structural_similarity(a, b, win_size=7, data_range=1.0, use_sample_covariance=False)
    assert abs(ssim(a, b, window=7) - ref) < 1e-6


def test_ssim_rgb_uses_luma():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 12, 12, 3))
    la = a @ [0.299, 0.587, 0.114]
    lb = b @ [0.299, 0.587, 0.114]
    assert ssim(a, b) == pytest.approx(ssim(la, lb), abs=1e-15)


def circle_samples(r, n):
    t = (np.arange(n) + 0.5) / n * 2 * np.pi
    nrm = np.stack([np.cos(t), np.sin(t)], axis=1)
    return r * nrm, nrm


def test_chamfer_examples():
    p, n = circle_samples(0.5, 400)
    assert chamfer_and_normals(p, n, p, n) == (0.0, 1.0)
    q, m = circle_samples(0.6, 4000)
    cd, nc = chamfer_and_normals(circle_samples(0.5, 4000)[0], circle_samples(0.5, 4000)[1], q, m)
    assert cd == pytest.approx(0.1, abs=1e-4) and nc == pytest.approx(1.0, abs=1e-6)
    rot = np.random.default_rng(0).uniform(0, 2 * np.pi, 400)
    turned = np.stack([np.cos(rot), np.sin(rot)], axis=1)
    assert chamfer_and_normals(p, turned, p, n)[1] < 1
    with pytest.raises(ValueError):
        chamfer_and_normals(np.zeros((0, 2)), np.zeros((0, 2)), p, n)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (6, 2), elements=st.floats(-1, 1)), arrays(np.float64, (4, 2), elements=st.floats(-1, 1)))
def test_chamfer_symmetric_and_zero_iff_equal(a, b):
    na = np.tile([1.0, 0.0], (6, 1))
    nb = np.tile([0.0, 1.0], (4, 1))
    assert chamfer_and_normals(a, na, b, nb)[0] == pytest.approx(chamfer_and_normals(b, nb, a, na)[0], abs=1e-15)
    same = set(map(tuple, a)) == set(map(tuple, b))
    assert (chamfer_and_normals(a, na, b, nb)[0] == 0) == same


def test_metric_report_round_trip():
    r = MetricReport()
    r.add(LodLevel(1), psnr=20.5, ssim=0.5)
    r.add(2.5, mae=0.01)
    back = MetricReport.from_csv(r.to_csv())
    assert back.column("level") == [1.0, 2.5]
    assert back.column("psnr")[0] == 20.5 and np.isnan(back.column("psnr")[1])


def test_obj_writers(tmp_path):
    segs = marching_squares(circle_field(16))
    write_obj_segments(tmp_path / "c.obj", segs)
    lines = (tmp_path / "c.obj").read_text().splitlines()
    assert sum(l.startswith("l ") for l in lines) == len(segs)
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    write_obj_mesh(tmp_path / "m.obj", verts, np.array([[0, 1, 2]]))
    assert (tmp_path / "m.obj").read_text().splitlines()[-1] == "f 1 2 3"


def test_eval_levels_single_pass(model, rng):
    x = rng.uniform(-1, 1, (10, 2))
    outs = eval_levels(model, x, [LodLevel(1), LodLevel(2.5), LodLevel(4)])
    assert np.array_equal(outs[2], eval_lod(model, x, 4))
    assert np.array_equal(outs[1], blend_levels(forward(model, x)[0].y, 2.5))
