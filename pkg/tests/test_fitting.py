import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facejitter.camera import OrthographicCamera, project
from facejitter.fitting import (FitConfig, FitError, FitResult, LandmarkSet, anchor_indices,
                                assemble_system, fit, fit_independent, landmark_anchor_points,
                                load_landmarks, save_landmarks, solve_coefficients)
from facejitter.model import CONTOUR_IDS, ShapeCoefficients, instantiate_shape, vertex_normals
from facejitter.synthetic import angle_error, landmarks_for, random_camera, random_coefficients

FRONTAL = OrthographicCamera(1.0, 128.0, 128.0)


# ---------------------------------------------------------------- LandmarkSet

def test_landmark_set_validation():
    with pytest.raises(ValueError):
        LandmarkSet("a", [1, 1], np.zeros((2, 2)), None)
    with pytest.raises(ValueError):
        LandmarkSet("a", [1], [[np.nan, 0.0]], None)
    with pytest.raises(ValueError):
        LandmarkSet("a", [], np.zeros((0, 2)), None)
    with pytest.raises(ValueError):
        LandmarkSet("a", [1], [[0.0, 0.0]], [1.5])


def test_landmark_file_round_trip(tmp_path):
    g = np.random.default_rng(0)
    sets = [LandmarkSet.full("a", g.normal(size=(68, 2))),
            LandmarkSet("b", [3, 40], [[1.0, 2.0], [3.0, 4.0]], [0.5, 1.0])]
    save_landmarks(tmp_path / "lm.json", sets)
    back = load_landmarks(tmp_path / "lm.json")
    assert [b.image_id for b in back] == ["a", "b"]
    for s, b in zip(sets, back):
        np.testing.assert_array_equal(s.points, b.points)
        np.testing.assert_array_equal(s.confidence, b.confidence)
    # JSON-lines variant of the same records
    (tmp_path / "lm.jsonl").write_text("\n".join(json.dumps(s.to_dict()) for s in sets))
    assert [b.image_id for b in load_landmarks(tmp_path / "lm.jsonl")] == ["a", "b"]


# ---------------------------------------------------------------- anchors

def test_frontal_jaw_anchors_mirror_symmetric(model):
    P = landmark_anchor_points(model, FRONTAL, ShapeCoefficients.zeros(model))
    for k in range(8):
        a, b = P[k], P[16 - k]
        np.testing.assert_allclose([a[0], a[1], a[2]], [-b[0], b[1], b[2]], atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-0.4, 0.4), st.floats(-0.5, 0.5))
def test_interior_anchors_pose_independent(model, yaw, pitch, roll):
    c = ShapeCoefficients(np.linspace(-1, 1, model.n_subject), np.zeros(model.n_expression))
    V = instantiate_shape(model, c)
    P = landmark_anchor_points(model, OrthographicCamera(1.0, 0, 0, yaw, pitch, roll), c)
    ids = np.arange(17, 68)
    np.testing.assert_array_equal(P[ids], V[model.topology.landmark_vertex[ids]])


def _silhouette_oracle(model, V, cam):
    """Exhaustive scan of every jaw-strip edge for sign changes of n . view."""
    n, _ = vertex_normals(V, model.topology.triangles)
    view = cam.view_direction()
    M = cam.matrix()
    out = {}
    for k in CONTOUR_IDS:
        strip = model.topology.contour_strips[k]
        f = [float(n[v] @ view) for v in strip]
        cands = set()
        for i in range(len(strip) - 1):
            if f[i] == 0 or f[i + 1] == 0 or (f[i] > 0) != (f[i + 1] > 0):
                cands.add(i if abs(f[i]) <= abs(f[i + 1]) else i + 1)
        if not cands:
            cands = {int(np.argmin(np.abs(f)))}
        goal = M @ V[model.topology.contour_nominal[k]]
        best = min(cands, key=lambda i: (round(float(np.sum((M @ V[strip[i]] - goal) ** 2)), 9), strip[i]))
        out[k] = int(strip[best])
    return out


def test_jaw_anchors_follow_silhouette_under_yaw(model):
    V = model.mean
    frontal = anchor_indices(model, V, OrthographicCamera(1.0, 0, 0))
    cam = OrthographicCamera(1.0, 0, 0, math.radians(30), 0, 0)
    turned = anchor_indices(model, V, cam)
    oracle = _silhouette_oracle(model, V, cam)
    assert {k: int(turned[k]) for k in CONTOUR_IDS} == oracle
    # the camera sits on the -x side: near-side jaw anchors move toward the midline
    near = [k for k in range(7)]
    assert np.all(np.abs(V[turned[near], 0]) < np.abs(V[frontal[near], 0]))


def test_no_camera_uses_nominal_anchors(model):
    idx = anchor_indices(model, model.mean, None)
    np.testing.assert_array_equal(idx[:17], model.topology.contour_nominal)


# ---------------------------------------------------------------- linear system

def _two_view(model, seed=0):
    g = np.random.default_rng(seed)
    alpha = g.standard_normal(model.n_subject)
    cases = []
    for n in range(2):
        c = ShapeCoefficients(alpha, g.standard_normal(model.n_expression))
        cam = random_camera(g)
        cases.append(landmarks_for(model, c, cam, image_id=f"v{n}"))
    return cases


def test_system_block_structure(small_model):
    m = small_model
    cases = _two_view(m)
    V = [instantiate_shape(m, c.coeffs) for c in cases]
    anchors = [anchor_indices(m, v, c.camera) for v, c in zip(V, cases)]
    sysm = assemble_system(m, [c.landmarks for c in cases], [c.camera for c in cases], anchors)
    ks, ke = m.n_subject, m.n_expression
    A = sysm.matrix
    (a0, b0), (a1, b1) = sysm.row_blocks
    assert np.abs(A[a0:b0, :ks]).max() > 0 and np.abs(A[a1:b1, :ks]).max() > 0
    assert np.all(A[a0:b0, ks + ke:] == 0)
    assert np.all(A[a1:b1, ks:ks + ke] == 0)
    # ridge rows
    assert A.shape[0] == b1 + ks + 2 * ke


def test_beta_subsolve_recovers_expression(model):
    g = np.random.default_rng(4)
    live = model.expression_sigma > 0  # zero-variance components have no effect on shape
    beta_true = np.where(live, g.standard_normal(model.n_expression), 0.0)
    coeffs = ShapeCoefficients(g.standard_normal(model.n_subject), beta_true)
    case = landmarks_for(model, coeffs, random_camera(g))
    V = instantiate_shape(model, coeffs)
    anc = anchor_indices(model, V, case.camera)
    s = assemble_system(model, [case.landmarks], [case.camera], [anc], regularization=0.0)
    ks = model.n_subject
    # move the known alpha contribution to the right-hand side, then solve for beta alone
    rhs = s.rhs - s.matrix[:, :ks] @ coeffs.alpha
    beta, *_ = np.linalg.lstsq(s.matrix[:, ks:][:, live], rhs, rcond=None)
    np.testing.assert_allclose(beta, beta_true[live], atol=1e-6)


def test_zero_residual_gives_zero_solution(model):
    case = landmarks_for(model, ShapeCoefficients.zeros(model), FRONTAL)
    anc = anchor_indices(model, model.mean, FRONTAL)
    s = assemble_system(model, [case.landmarks], [FRONTAL], [anc])
    assert np.abs(s.rhs).max() < 1e-9
    alpha, betas = solve_coefficients(s)
    assert np.abs(alpha).max() < 1e-9 and np.abs(betas[0]).max() < 1e-9


def test_rank_deficient_system_is_finite(small_model):
    m = small_model
    ls = LandmarkSet("dup", [30, 31], [[100.0, 100.0], [101.0, 102.0]], None)
    anc = anchor_indices(m, m.mean, FRONTAL)
    s = assemble_system(m, [ls], [FRONTAL], [anc], regularization=0.0)
    s.matrix = np.vstack([s.matrix, s.matrix])
    s.rhs = np.concatenate([s.rhs, s.rhs])
    alpha, betas = solve_coefficients(s)
    assert np.all(np.isfinite(alpha)) and np.all(np.isfinite(betas[0]))
    assert np.abs(alpha).max() <= 3.0


def test_solve_closed_loop_reprojection(model):
    g = np.random.default_rng(8)
    coeffs = random_coefficients(model, g)
    case = landmarks_for(model, coeffs, random_camera(g))
    V = instantiate_shape(model, coeffs)
    anc = anchor_indices(model, V, case.camera)
    s = assemble_system(model, [case.landmarks], [case.camera], [anc])
    alpha, betas = solve_coefficients(s)
    W = instantiate_shape(model, ShapeCoefficients(alpha, betas[0]))
    err = project(case.camera, W[anc]) - case.landmarks.points
    assert np.sqrt(np.mean(np.sum(err ** 2, axis=1))) < 0.5


def test_assemble_rejects_empty(model):
    with pytest.raises(ValueError):
        assemble_system(model, [], [], [])


# ---------------------------------------------------------------- fit

def test_fit_closed_loop(model):
    g = np.random.default_rng(21)
    case = landmarks_for(model, random_coefficients(model, g), random_camera(g))
    r = fit([case.landmarks], model)
    assert r.converged
    im = r.images[0]
    assert im.rms < 0.5
    for a in ("yaw", "pitch", "roll"):
        assert angle_error(getattr(im.camera, a), getattr(case.camera, a)) < 0.01


def test_mean_shape_fixed_point(model):
    case = landmarks_for(model, ShapeCoefficients.zeros(model), FRONTAL)
    r = fit([case.landmarks], model)
    assert r.converged and r.iterations <= 2
    assert np.abs(r.alpha).max() < 0.05 and np.abs(r.images[0].beta).max() < 0.05


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_rms_trajectory_non_increasing(model, seed):
    g = np.random.default_rng(seed)
    case = landmarks_for(model, random_coefficients(model, g), random_camera(g))
    r = fit([case.landmarks], model)
    h = np.asarray(r.rms_history)
    assert np.all(np.diff(h) <= 1e-6)


@pytest.fixture(scope="module")
def base_fit(model):
    g = np.random.default_rng(5)
    case = landmarks_for(model, random_coefficients(model, g), random_camera(g))
    return case, fit([case.landmarks], model)


def test_translation_equivariance(model, base_fit):
    case, r = base_fit
    du = np.array([13.0, -7.5])
    r2 = fit([LandmarkSet.full("x", case.landmarks.points + du)], model)
    np.testing.assert_allclose(r2.alpha, r.alpha, atol=1e-6)
    np.testing.assert_allclose(r2.images[0].beta, r.images[0].beta, atol=1e-6)
    c1, c2 = r.images[0].camera, r2.images[0].camera
    assert c2.tu - c1.tu == pytest.approx(du[0], abs=1e-6)
    assert c2.tv - c1.tv == pytest.approx(du[1], abs=1e-6)
    assert c2.scale == pytest.approx(c1.scale, rel=1e-9)


def test_scale_equivariance(model, base_fit):
    case, r = base_fit
    r2 = fit([LandmarkSet.full("x", case.landmarks.points * 1.7)], model)
    np.testing.assert_allclose(r2.alpha, r.alpha, atol=1e-6)
    np.testing.assert_allclose(r2.images[0].beta, r.images[0].beta, atol=1e-6)
    assert r2.images[0].camera.scale == pytest.approx(1.7 * r.images[0].camera.scale, rel=1e-9)


def test_joint_fit_shares_alpha(model):
    cases = _two_view(model, 3)
    r = fit([c.landmarks for c in cases], model)
    assert len(r.images) == 2 and r.converged
    assert all(im.rms < 0.5 for im in r.images)
    assert len(fit_independent([c.landmarks for c in cases], model)) == 2


def test_degenerate_image_dropped(model):
    good = landmarks_for(model, ShapeCoefficients.zeros(model), FRONTAL, image_id="good").landmarks
    # four landmarks whose anchors are all on the midline plane -> coplanar
    bad = LandmarkSet("bad", [8, 27, 30, 33], np.zeros((4, 2)) + 5.0, None)
    r = fit([good, bad], model)
    assert r.images[1].dropped and not r.images[0].dropped
    with pytest.raises(FitError):
        fit([bad], model)


def test_fit_result_round_trip(tmp_path, base_fit):
    _, r = base_fit
    r.save(tmp_path / "fit.json")
    back = FitResult.load(tmp_path / "fit.json")
    np.testing.assert_array_equal(back.alpha, r.alpha)
    assert back.images[0].camera == r.images[0].camera
    assert back.converged == r.converged and back.rms_history == r.rms_history


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(max_iterations=0)
    with pytest.raises(ValueError):
        FitConfig(tolerance=-1)
