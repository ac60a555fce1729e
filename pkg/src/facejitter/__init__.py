"""Pose and lighting jitter of face images from a 3-d morphable head fit."""

__version__ = "0.1.0"

from .camera import OrthographicCamera, angles_to_rotation, decompose_affine, estimate_affine_camera, project
from .fitting import FitConfig, FitResult, LandmarkSet, fit, fit_independent
from .model import MeshTopology, MorphableModel, ShapeCoefficients, instantiate_shape

__all__ = [
    "FitConfig", "FitResult", "LandmarkSet", "MeshTopology", "MorphableModel", "OrthographicCamera",
    "ShapeCoefficients", "angles_to_rotation", "decompose_affine", "estimate_affine_camera", "fit",
    "fit_independent", "instantiate_shape", "project",
]
