import colorsys
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facejitter.bvh import build_bvh
from facejitter.camera import OrthographicCamera
from facejitter.model import ShapeCoefficients, vertex_normals
from facejitter.relight import (EmptyFieldError, LightingSpec, ModulationField, apply_modulation,
                                extend_modulation, face_modulation, laplace_residual, relight)
from facejitter.render import HeadMesh, compute_pixel_map
from facejitter.synthetic import render_vertex_colors, truth_fit, vertex_texture

W = H = 96
C = (W - 1) / 2
FRONT = OrthographicCamera(0.4, C, C)


@pytest.fixture(scope="module")
def gray_head(model):
    """Flat-gray mean head, frontal, on a uniform background (mirror symmetric)."""
    tex = vertex_texture(model, flat=0.6)
    img, mask = render_vertex_colors(model.mean, model.topology.triangles, tex, FRONT, W, H,
                                     np.full((H, W, 3), 0.3))
    fit = truth_fit(ShapeCoefficients.zeros(model), FRONT)
    return img, mask, fit


def _sphere_mesh(radius=30.0, levels=6):
    import sys
    sys.path.insert(0, __file__.rsplit("/", 1)[0])
    from test_model import _icosphere
    V, F = _icosphere(levels)
    V = V * radius
    # mirror partner across x = 0 (exact on the icosphere vertex set)
    key = {tuple(np.round(v, 9)): i for i, v in enumerate(V)}
    sym = np.array([key[tuple(np.round(v * [-1, 1, 1], 9))] for v in V])
    n, _ = vertex_normals(V, F)
    return HeadMesh(V, F, n, sym, build_bvh(V, F))


# ---------------------------------------------------------------- LightingSpec

def test_lighting_spec_validation():
    with pytest.raises(ValueError):
        LightingSpec((1.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        LightingSpec((0.0, 0.0, -1.0), 0.0, 0.0)
    with pytest.raises(ValueError):
        LightingSpec((0.0, 0.0, -1.0), -0.1, 0.5)
    spec = LightingSpec.toward((3.0, 0.0, -4.0))
    assert np.linalg.norm(spec.direction) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- face_modulation

def test_ambient_only_modulation_is_one(model):
    mesh = HeadMesh.build(model, ShapeCoefficients.zeros(model))
    pm = compute_pixel_map(mesh, FRONT, FRONT, W, H)
    f = face_modulation(pm, LightingSpec((0.3, 0.0, -math.sqrt(0.91)), 0.7, 0.0))
    assert np.all(f.values[f.known] == 1.0)
    assert np.all(pm.mask[f.known])


def test_sphere_modulation_matches_analytic_normals():
    mesh = _sphere_mesh()
    cam = OrthographicCamera(1.0, 40.0, 40.0)
    pm = compute_pixel_map(mesh, cam, cam, 81, 81)
    light = LightingSpec((0.0, 0.0, -1.0), 0.5, 0.5)
    f = face_modulation(pm, light)
    v, u = np.nonzero(f.known)
    x, y = (u - 40.0) / 30.0, (v - 40.0) / 30.0
    nz = np.sqrt(np.clip(1 - x * x - y * y, 0, 1))
    raw = 0.5 + 0.5 * nz
    expect = raw / raw.mean()
    assert np.abs(f.values[v, u] - expect).max() < 1e-3
    # maximal at the most camera-facing pixel, decreasing with surface angle
    assert f.values[40, 40] == pytest.approx(f.values[f.known].max(), abs=1e-4)
    order = np.argsort(nz)
    assert np.corrcoef(nz[order], f.values[v, u][order])[0, 1] > 0.999


def test_light_from_left_brightens_left_half(model):
    mesh = HeadMesh.build(model, ShapeCoefficients.zeros(model))
    pm = compute_pixel_map(mesh, FRONT, FRONT, W, H)
    f = face_modulation(pm, LightingSpec.toward((1.0, 0.0, -1.0)))  # travelling +x: source on the left
    left = f.known.copy()
    left[:, W // 2:] = False
    right = f.known.copy()
    right[:, :W // 2 + 1] = False
    assert f.values[left].mean() > f.values[right].mean()


def test_empty_head_raises(model):
    mesh = HeadMesh.build(model, ShapeCoefficients.zeros(model))
    away = OrthographicCamera(0.4, 5000.0, 5000.0)
    pm = compute_pixel_map(mesh, away, away, 16, 16)
    with pytest.raises(EmptyFieldError):
        face_modulation(pm, LightingSpec((0.0, 0.0, -1.0)))


# ---------------------------------------------------------------- Laplace extension

def _ring(n=128, inner=40, outer=60):
    yy, xx = np.mgrid[0:n, 0:n]
    r = np.hypot(xx - n / 2, yy - n / 2)
    return (r >= inner) & (r <= outer), xx, yy


def test_constant_boundary_gives_constant_field():
    known, _, _ = _ring()
    vals = np.where(known, 1.37, 0.0)
    out = extend_modulation(ModulationField(vals, known))
    assert np.all(out.values == 1.37)


def test_single_known_pixel_fills_everything():
    known = np.zeros((40, 50), bool)
    known[20, 25] = True
    out = extend_modulation(ModulationField(np.where(known, 2.0, 0.0), known))
    np.testing.assert_allclose(out.values, 2.0, atol=1e-9)


def test_linear_ramp_is_reproduced():
    n = 128
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    ramp = 0.01 * xx - 0.004 * yy + 0.7
    # Dirichlet frame on the image border, so the Neumann border never applies
    known = np.zeros((n, n), bool)
    known[0, :] = known[-1, :] = known[:, 0] = known[:, -1] = True
    known[40:50, 60:70] = True
    out = extend_modulation(ModulationField(np.where(known, ramp, 0.0), known))
    assert np.abs(out.values - ramp)[~known].max() < 1e-3


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_mask_harmonic_and_bounded(seed):
    g = np.random.default_rng(seed)
    known = g.uniform(size=(64, 64)) < 0.05
    known[0, 0] = True
    vals = np.where(known, g.uniform(0.5, 1.5, known.shape), 0.0)
    out = extend_modulation(ModulationField(vals, known))
    assert laplace_residual(out.values, known).max() < 1e-4
    lo, hi = vals[known].min(), vals[known].max()
    assert out.values.min() >= lo - 1e-6 and out.values.max() <= hi + 1e-6
    assert np.array_equal(out.values[known], vals[known])


def test_extend_needs_a_known_pixel():
    with pytest.raises(EmptyFieldError):
        extend_modulation(ModulationField(np.zeros((4, 4)), np.zeros((4, 4), bool)))


# ---------------------------------------------------------------- apply_modulation

def test_unit_modulation_is_bit_identical():
    img = np.random.default_rng(0).uniform(size=(10, 12, 3))
    out = apply_modulation(img, np.ones((10, 12)) + 1e-12)
    assert out.tobytes() == img.tobytes()


def test_half_modulation_on_gray():
    img = np.full((5, 5, 3), 0.6)
    out = apply_modulation(img, np.full((5, 5), 0.5))
    np.testing.assert_allclose(out, 0.3, atol=1 / 255)


def test_saturated_red_keeps_hue():
    img = np.zeros((1, 1, 3))
    img[..., 0] = 1.0
    out = apply_modulation(img, np.full((1, 1), 0.5))
    h, s, v = colorsys.rgb_to_hsv(*out[0, 0])
    assert abs(h * 360.0) < 1.0 and v == pytest.approx(0.5)


@settings(max_examples=100)
@given(st.tuples(st.floats(0.05, 1), st.floats(0.05, 1), st.floats(0.05, 1)), st.floats(0.1, 3.0))
def test_hue_and_saturation_preserved(rgb, m):
    img = np.array(rgb, float).reshape(1, 1, 3)
    out = apply_modulation(img, np.full((1, 1), m))
    h0, s0, v0 = colorsys.rgb_to_hsv(*img[0, 0])
    h1, s1, v1 = colorsys.rgb_to_hsv(*out[0, 0])
    assert v1 == pytest.approx(min(1.0, v0 * m), abs=1e-12)
    if v0 * m <= 1.0 and s0 > 1e-6:
        dh = abs(h1 - h0) % 1.0
        assert min(dh, 1 - dh) * 360.0 <= 1.0
        assert s1 == pytest.approx(s0, abs=1e-9)


def test_apply_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        apply_modulation(np.zeros((4, 4, 3)), np.ones((3, 4)))


# ---------------------------------------------------------------- relight

def test_ambient_only_relight_is_identity(model, gray_head):
    img, _, fit = gray_head
    out = relight(img, fit, model, LightingSpec((0.0, 0.0, -1.0), 1.0, 0.0))
    assert out.tobytes() == img.tobytes()


def test_frontal_light_correlates_with_shading(model, gray_head):
    img, _, fit = gray_head
    light = LightingSpec((0.0, 0.0, -1.0), 0.5, 0.5)
    fields = []
    out = relight(img, fit, model, light, field_out=fields)
    mesh = HeadMesh.build(model, ShapeCoefficients.zeros(model))
    pm = compute_pixel_map(mesh, FRONT, FRONT, W, H)
    hv = pm.mask & (pm.weight > 0.9)
    shade = np.maximum(0.0, -(pm.normal[hv] @ np.asarray(light.direction)))
    assert np.corrcoef(out[hv].mean(axis=1), shade)[0, 1] > 0.95
    # unit-mean normalization keeps the mean face brightness
    known = fields[0].known
    v0, v1 = img[known].max(axis=1), out[known].max(axis=1)
    assert abs(v1.mean() / v0.mean() - 1.0) < 0.02


def test_mirrored_lights_give_mirrored_images(model, gray_head):
    img, _, fit = gray_head
    d = np.array([0.5, -0.2, -0.8])
    a = relight(img, fit, model, LightingSpec.toward(d))
    b = relight(img, fit, model, LightingSpec.toward(d * [-1, 1, 1]))
    assert np.abs(a - b[:, ::-1]).mean() <= 2 / 255


def test_relight_deterministic(model, gray_head):
    img, _, fit = gray_head
    light = LightingSpec.toward((0.2, 0.3, -1.0), 0.4, 0.8)
    assert relight(img, fit, model, light).tobytes() == relight(img, fit, model, light).tobytes()
