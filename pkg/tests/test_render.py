import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from facejitter.camera import OrthographicCamera
from facejitter.model import ShapeCoefficients
from facejitter.render import (COS_HI, COS_LO, HeadMesh, PixelMap, PoseSpec, background_affine,
                               background_warp, bilinear_sample, compute_pixel_map, feather,
                               read_depth, render_depth, render_pose, resample, smoothstep,
                               visibility_weight, warp_affine, write_depth)
from facejitter.synthetic import synthetic_scene

W = H = 96
C = (W - 1) / 2


@pytest.fixture(scope="module")
def mean_mesh(model):
    return HeadMesh.build(model, ShapeCoefficients.zeros(model))


@pytest.fixture(scope="module")
def scene(model):
    return synthetic_scene(model, 3, size=W)


def _pixel_grid(w, h):
    return np.stack(np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float)), -1)


# ---------------------------------------------------------------- pose spec

def test_pose_spec_validation_and_defaults():
    with pytest.raises(ValueError):
        PoseSpec(0, 0, 0, 0, 10)
    src = OrthographicCamera(1.5, 10, 20, 0.1, 0.2, 0.3)
    pose = PoseSpec.from_source(src, 32, 32, d_yaw=0.5)
    cam = pose.camera(src)
    assert (cam.scale, cam.tu, cam.tv) == (1.5, 10, 20)
    assert cam.yaw == pytest.approx(0.6) and cam.pitch == 0.2


# ---------------------------------------------------------------- visibility

def test_visibility_head_on():
    assert visibility_weight([0, 0, 1.0], [0, 0, -1.0]) == 1.0


@settings(max_examples=30)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_visibility_zero_when_occluded(x, y, z):
    n = np.array([x, y, z + 2.0])
    n /= np.linalg.norm(n)
    assert visibility_weight(n, [0, 0, -1.0], occluded=True) == 0.0


def test_visibility_midpoint_is_half():
    c = 0.5 * (COS_LO + COS_HI)
    n = np.array([math.sqrt(1 - c * c), 0.0, c])
    assert float(visibility_weight(n, [0, 0, -1.0])) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=50)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_smoothstep_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    sa, sb = smoothstep(lo, 0.1, 0.4), smoothstep(hi, 0.1, 0.4)
    assert 0.0 <= sa <= sb <= 1.0


# ---------------------------------------------------------------- pixel map

def test_identity_pose_maps_pixels_to_themselves(mean_mesh):
    src = OrthographicCamera(0.4, C, C, 0.3, -0.1, 0.2)
    pm = compute_pixel_map(mean_mesh, src, src, W, H)
    d = np.abs(pm.source - _pixel_grid(W, H))[pm.mask]
    assert pm.mask.sum() > 1000 and d.max() < 0.5


def test_pixel_map_invariants(mean_mesh):
    src = OrthographicCamera(0.4, C, C, 0.3, 0.0, 0.0)
    pm = compute_pixel_map(mean_mesh, src, src.with_pose(-0.4, 0.1, 0.0), W, H)
    for w in (pm.weight, pm.mirror_weight):
        assert np.all((w >= 0) & (w <= 1))
        assert np.all(w[~pm.mask] == 0)
    assert np.all(np.isinf(pm.depth[~pm.mask])) and np.all(np.isfinite(pm.depth[pm.mask]))


def test_mirrored_yaw_symmetry_oracle(mean_mesh):
    src = OrthographicCamera(0.4, C, C, 0.35, 0.0, 0.0)
    a = compute_pixel_map(mean_mesh, src, src, W, H)
    b = compute_pixel_map(mean_mesh, src, src.with_pose(-0.35, 0.0, 0.0), W, H)
    both = a.mask & b.mask[:, ::-1]
    assert both.sum() > 0.99 * a.mask.sum()
    d = np.abs(a.source - b.mirror[:, ::-1])[both]
    assert d.max() < 0.5


def test_quarter_turn_far_side_uses_mirror(mean_mesh):
    # source turned 0.5 rad; the target looks 90 degrees further round, at the
    # side hidden from the source, whose mirror image the source does see
    src = OrthographicCamera(0.4, C, C, 0.5, 0.0, 0.0)
    pm = compute_pixel_map(mean_mesh, src, src.with_pose(0.5 - math.pi / 2, 0.0, 0.0), W, H)
    hidden = pm.mask & (pm.weight == 0)
    assert hidden.sum() > 0.3 * pm.mask.sum()
    assert np.mean(pm.mirror_weight[hidden] > 0) > 0.8


# ---------------------------------------------------------------- resampling

def _identity_map(h, w, weight=1.0, mirror_weight=1.0):
    grid = _pixel_grid(w, h)
    return PixelMap(grid, np.full((h, w), weight), grid[:, ::-1].copy(), np.full((h, w), mirror_weight),
                    np.ones((h, w), bool), np.zeros((h, w, 3)), np.zeros((h, w)))


def test_resample_identity_map(scene):
    face, alpha = resample(scene.image, _identity_map(H, W))
    assert np.abs(face - scene.image).max() <= 1 / 255
    assert np.all(alpha == 1)


def test_resample_pure_mirror(scene):
    face, alpha = resample(scene.image, _identity_map(H, W, weight=0.0))
    np.testing.assert_allclose(face, scene.image[:, ::-1], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_resample_constant_color_invariance(seed, level):
    g = np.random.default_rng(seed)
    src = np.full((20, 30, 3), level)
    pm = PixelMap(g.uniform(-5, 35, (8, 9, 2)), g.uniform(0, 1, (8, 9)), g.uniform(-5, 35, (8, 9, 2)),
                  g.uniform(0, 1, (8, 9)), g.uniform(size=(8, 9)) < 0.7, np.zeros((8, 9, 3)), np.zeros((8, 9)))
    face, alpha = resample(src, pm)
    live = alpha > 0
    np.testing.assert_allclose(face[live], level, atol=1e-12)
    assert np.all(alpha[~pm.mask] == 0) and np.all((alpha >= 0) & (alpha <= 1))


def test_bilinear_sample_flags_outside():
    img = np.arange(12.0).reshape(3, 4)
    vals, inside = bilinear_sample(img, np.array([[1.5, 1.0], [-0.1, 0.0], [np.nan, 1.0], [3.0, 2.0]]))
    assert inside.tolist() == [True, False, False, True]
    assert vals[0] == pytest.approx(5.5) and vals[3] == 11.0


# ---------------------------------------------------------------- background

def test_background_identity_is_exact(scene, mean_mesh):
    cam = scene.case.camera
    out = background_warp(scene.image, mean_mesh, cam, cam, W, H)
    assert np.array_equal(out, scene.image)


def _manual_bilinear(img, u, v):
    h, w = img.shape[:2]
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(int), w - 2)
    v0 = np.minimum(np.floor(v).astype(int), h - 2)
    fu, fv = (u - u0)[..., None], (v - v0)[..., None]
    return ((1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u0 + 1]
            + (1 - fu) * fv * img[v0 + 1, u0] + fu * fv * img[v0 + 1, u0 + 1])


def test_roll_rotates_background_about_head_center(scene, mean_mesh):
    src = OrthographicCamera(0.4, 50.0, 44.0, 0.0, 0.0, 0.0)
    phi = 0.3
    out = background_warp(scene.image, mean_mesh, src, src.with_pose(0.0, 0.0, phi), W, H)
    # oracle: target pixel p takes the source at center + Rot(-phi) (p - center)
    grid = _pixel_grid(W, H)
    d = grid - [src.tu, src.tv]
    c, s = math.cos(phi), math.sin(phi)
    u = src.tu + c * d[..., 0] + s * d[..., 1]
    v = src.tv - s * d[..., 0] + c * d[..., 1]
    expect = _manual_bilinear(scene.image, u, v)
    assert np.abs(out - expect).mean() <= 1 / 255


def test_background_constant_source(mean_mesh):
    img = np.full((H, W, 3), 0.25)
    src = OrthographicCamera(0.4, C, C)
    out = background_warp(img, mean_mesh, src, src.with_pose(0.6, -0.2, 0.4), W, H)
    np.testing.assert_allclose(out, 0.25, atol=1e-12)


def test_background_affine_maps_plane_points(mean_mesh):
    # a point on the background plane must land where both cameras project it
    src = OrthographicCamera(0.4, C, C, 0.2, 0.1, 0.0)
    tgt = src.with_pose(-0.3, 0.0, 0.2)
    A, b = background_affine(mean_mesh, src, tgt)
    from facejitter.render import silhouette_vertices
    sil = mean_mesh.vertices[silhouette_vertices(mean_mesh, src)]
    d_star = np.median(sil @ src.rotation[2])
    g = np.random.default_rng(0)
    xy = g.uniform(-50, 50, (10, 2))
    X = np.c_[xy, np.full(10, d_star)] @ src.rotation  # head-frame points on the plane
    us = X @ src.matrix().T + src.offset
    ut = X @ tgt.matrix().T + tgt.offset
    np.testing.assert_allclose(ut @ A.T + b, us, atol=1e-9)


def test_warp_affine_matches_scipy_shift():
    img = np.random.default_rng(1).uniform(size=(20, 25))
    out = warp_affine(img, np.eye(2), np.array([2.0, 1.0]), 25, 20)
    ref = ndimage.shift(img, (-1.0, -2.0), order=1, mode="nearest")
    np.testing.assert_allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------- render_pose

def test_identity_render_reproduces_face(model, scene):
    fit = scene.fit()
    cam = scene.case.camera
    lay = render_pose(scene.image, fit, model, PoseSpec.from_source(cam, W, H), layers=True)
    region = lay.pixel_map.mask & ~lay.feather_band
    assert np.abs(lay.image - scene.image)[region].mean() <= 2 / 255


def test_compositing_partition(model, scene):
    fit = scene.fit()
    pose = PoseSpec.from_source(scene.case.camera, W, H, d_yaw=0.3, d_roll=0.1)
    lay = render_pose(scene.image, fit, model, pose, layers=True)
    a = lay.alpha[..., None]
    np.testing.assert_allclose(lay.image, a * lay.face + (1 - a) * lay.background, atol=1e-12)
    assert np.all((lay.alpha >= 0) & (lay.alpha <= 1))


def test_render_deterministic(model, scene):
    pose = PoseSpec.from_source(scene.case.camera, W, H, d_yaw=-0.4)
    a = render_pose(scene.image, scene.fit(), model, pose)
    b = render_pose(scene.image, scene.fit(), model, pose)
    assert a.tobytes() == b.tobytes()


def test_off_frame_fit_renders_background_only(model, scene):
    fit = scene.fit()
    far = fit.images[0].camera
    fit.images[0].camera = OrthographicCamera(far.scale, 5000.0, 5000.0, far.yaw, far.pitch, far.roll)
    pose = PoseSpec.from_source(fit.images[0].camera, W, H, d_yaw=0.2)
    lay = render_pose(scene.image, fit, model, pose, layers=True)
    assert not lay.pixel_map.mask.any()
    np.testing.assert_array_equal(lay.image, lay.background)


def test_output_dimensions_follow_pose(model, scene):
    pose = PoseSpec.from_source(scene.case.camera, 64, 40, d_pitch=0.1)
    assert render_pose(scene.image, scene.fit(), model, pose).shape == (40, 64, 3)


def test_feather_fades_inward():
    m = np.zeros((30, 30), bool)
    m[5:25, 5:25] = True
    f = feather(m)
    assert f[15, 15] == pytest.approx(1.0, abs=1e-6)
    assert 0 < f[5, 15] < 0.8 and np.all(f[~m] == 0)


# ---------------------------------------------------------------- depth

def test_sphere_depth_oracle():
    import sys
    sys.path.insert(0, __file__.rsplit("/", 1)[0])
    from test_model import _icosphere
    V, F = _icosphere(4)
    V = V * 40.0 + [3.0, -2.0, 5.0]
    cam = OrthographicCamera(1.0, 64.0 - 3.0, 64.0 + 2.0)
    d = render_depth(V, F, cam, 128, 128)
    # the camera looks down -z: the nearest point is the sphere top, depth measured below camera z = 0
    top = -(5.0 + 40.0)
    assert d[64, 64] == pytest.approx(top, abs=40.0 * 2e-3)
    assert np.isinf(d[0, 0]) and np.isinf(d[127, 127])
    # convex mesh: depth grows away from the nearest point along any row
    row = d[64]
    finite = np.flatnonzero(np.isfinite(row))
    i0 = int(np.argmin(row))
    right, left = row[i0:finite.max() + 1], row[finite.min():i0 + 1][::-1]
    assert np.all(np.diff(right) >= -1e-6) and np.all(np.diff(left) >= -1e-6)


def test_depth_sentinel_off_mesh():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    d = render_depth(V, [[0, 1, 2]], OrthographicCamera(1.0, 500.0, 500.0), 8, 8)
    assert d.dtype == np.float32 and np.all(np.isinf(d))


def test_depth_file_round_trip(tmp_path):
    d = np.random.default_rng(0).uniform(size=(5, 7)).astype(np.float32)
    d[0, 0] = np.inf
    write_depth(tmp_path / "d.fjd", d)
    assert np.array_equal(read_depth(tmp_path / "d.fjd"), d)
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_depth(tmp_path / "bad")
