"""Synthetic ground-truth cases: known shape, camera, landmarks and textured images.

These stand in for a landmark detector and real photographs when testing the
pipeline end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import OrthographicCamera, project
from .fitting import FitResult, ImageFit, LandmarkSet, anchor_indices
from .model import MorphableModel, ShapeCoefficients, instantiate_shape


@dataclass
class SyntheticCase:
    coeffs: ShapeCoefficients
    camera: OrthographicCamera
    landmarks: LandmarkSet
    clean_points: np.ndarray


def random_coefficients(model: MorphableModel, rng: np.random.Generator,
                        limit: float = 2.5, expression_scale: float = 1.0) -> ShapeCoefficients:
    alpha = np.clip(rng.standard_normal(model.n_subject), -limit, limit)
    beta = np.clip(expression_scale * rng.standard_normal(model.n_expression), -limit, limit)
    return ShapeCoefficients(alpha, beta)


def random_camera(rng: np.random.Generator, size: int = 256, yaw_range: float = 0.5,
                  pitch_range: float = 0.25, roll_range: float = 0.25) -> OrthographicCamera:
    s = rng.uniform(0.8, 1.2) * size / 256.0
    c = (size - 1) / 2.0
    return OrthographicCamera(s, c + rng.uniform(-10, 10) * size / 256, c + rng.uniform(-10, 10) * size / 256,
                              rng.uniform(-yaw_range, yaw_range), rng.uniform(-pitch_range, pitch_range),
                              rng.uniform(-roll_range, roll_range))


def landmarks_for(model: MorphableModel, coeffs: ShapeCoefficients, camera: OrthographicCamera,
                  image_id: str = "synthetic", noise: float = 0.0,
                  rng: np.random.Generator | None = None) -> SyntheticCase:
    """Project the pose-dependent anchors of a known head (landmark oracle)."""
    V = instantiate_shape(model, coeffs)
    pts = project(camera, V[anchor_indices(model, V, camera)])
    noisy = pts
    if noise > 0:
        rng = rng or np.random.default_rng()
        noisy = pts + noise * rng.standard_normal(pts.shape)
    return SyntheticCase(coeffs, camera, LandmarkSet.full(image_id, noisy), pts)


def truth_fit(coeffs: ShapeCoefficients, camera: OrthographicCamera, image_id: str = "synthetic") -> FitResult:
    """A FitResult carrying ground truth, for rendering tests."""
    im = ImageFit(image_id, np.asarray(coeffs.beta, dtype=float), camera, 0.0, np.zeros((0, 2)))
    return FitResult(np.asarray(coeffs.alpha, dtype=float), [im], True, 0, [0.0])


def angle_error(a: float, b: float) -> float:
    return abs(math.remainder(a - b, 2 * math.pi))


def vertex_texture(model: MorphableModel, seed: int = 0, flat: float | None = None) -> np.ndarray:
    """Smooth per-vertex RGB in [0, 1], defined on the mean shape."""
    V = model.mean
    if flat is not None:
        return np.full((len(V), 3), float(flat))
    g = np.random.default_rng(seed)
    base = np.array([0.72, 0.55, 0.45])
    col = np.tile(base, (len(V), 1))
    for _ in range(4):
        k = g.normal(size=3)
        k *= g.uniform(0.03, 0.07) / np.linalg.norm(k)
        phase = g.uniform(0, 2 * np.pi)
        amp = g.uniform(0.04, 0.1, 3)
        col += amp * np.sin(V @ k + phase)[:, None]
    return np.clip(col, 0.0, 1.0)


def background_image(height: int, width: int, seed: int = 0) -> np.ndarray:
    g = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    img = np.empty((height, width, 3))
    for c in range(3):
        a, b = g.uniform(-0.5, 0.5, 2)
        img[..., c] = 0.45 + 0.25 * np.sin(a * xx / 9.0 + b * yy / 7.0 + c) * np.cos(yy / 23.0)
    return np.clip(img, 0.0, 1.0)


def render_vertex_colors(vertices: np.ndarray, triangles: np.ndarray, colors: np.ndarray,
                         camera: OrthographicCamera, width: int, height: int,
                         background: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Direct ray-cast render of a per-vertex-colored mesh: ``(image, mask)``."""
    from .bvh import build_bvh, intersect_rays
    from .render import camera_rays

    origins, direction, _ = camera_rays(camera, width, height, vertices)
    hits = intersect_rays(build_bvh(vertices, triangles), origins, direction[None])
    img = (np.zeros((height * width, colors.shape[1])) if background is None
           else np.array(background, dtype=float).reshape(height * width, -1))
    h = hits.hit
    tri = np.asarray(triangles)[hits.triangle[h]]
    img[h] = np.einsum("ri,rij->rj", hits.barycentric[h], colors[tri])
    return img.reshape(height, width, -1), h.reshape(height, width)


@dataclass
class SyntheticScene:
    case: SyntheticCase
    vertices: np.ndarray
    texture: np.ndarray  # per-vertex RGB
    image: np.ndarray    # (H, W, 3) in [0, 1]
    mask: np.ndarray

    def fit(self, image_id: str = "synthetic") -> FitResult:
        return truth_fit(self.case.coeffs, self.case.camera, image_id)


def synthetic_scene(model: MorphableModel, seed: int, size: int = 256,
                    yaw_range: float = 0.5, expression_scale: float = 1.0,
                    texture: np.ndarray | None = None) -> SyntheticScene:
    """A textured synthetic head photographed over a smooth background."""
    rng = np.random.default_rng(seed)
    coeffs = random_coefficients(model, rng, expression_scale=expression_scale)
    cam = random_camera(rng, size, yaw_range=yaw_range)
    case = landmarks_for(model, coeffs, cam)
    V = instantiate_shape(model, coeffs)
    tex = vertex_texture(model, seed) if texture is None else texture
    bg = background_image(size, size, seed)
    img, mask = render_vertex_colors(V, model.topology.triangles, tex, cam, size, size, bg)
    return SyntheticScene(case, V, tex, img, mask)


def write_synthetic_dataset(out_dir, count: int, seed: int = 0, size: int = 256, noise: float = 0.0,
                            model: MorphableModel | None = None) -> MorphableModel:
    """Model file, textured images, landmark files, ``manifest.jsonl`` and ``truth.json``."""
    import json
    from pathlib import Path

    from .augment import DatasetManifest, ManifestRecord
    from .fitting import save_landmarks
    from .imaging import write_png
    from .modelio import save_model
    from .population import build_synthetic_model

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(exist_ok=True)
    model = model or build_synthetic_model(seed)
    save_model(model, out / "model.fjmm")
    records, truth = [], {}
    for i in range(count):
        rid = f"rec{i:04d}"
        scene = synthetic_scene(model, seed=seed * 100_003 + i, size=size)
        pts = scene.case.landmarks.points
        if noise > 0:
            pts = pts + noise * np.random.default_rng([seed, i]).standard_normal(pts.shape)
        write_png(out / "images" / f"{rid}.png", scene.image)
        save_landmarks(out / "landmarks" / f"{rid}.json", [LandmarkSet.full(rid, pts)])
        records.append(ManifestRecord(rid, f"subject{i:04d}", f"images/{rid}.png", f"landmarks/{rid}.json"))
        truth[rid] = {"camera": scene.case.camera.to_dict(),
                      "alpha": scene.case.coeffs.alpha.tolist(), "beta": scene.case.coeffs.beta.tolist()}
    DatasetManifest(records, out).save(out / "manifest.jsonl")
    (out / "truth.json").write_text(json.dumps(truth))
    return model
