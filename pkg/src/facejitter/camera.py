"""Orthographic cameras, affine DLT estimation and RQ decomposition.

Conventions (used by every other module):

* Head coordinates: +x toward image right, +y toward image bottom (chin has
  larger y than brow), +z out of the face toward a frontal camera.
* Rotation ``R = R_roll(z) @ R_pitch(x) @ R_yaw(y)``.
* Camera space is ``R @ x``. The camera looks down camera-space -z, so larger
  camera z is nearer the camera. ``(u, v) = s * (R x)[:2] + (t_u, t_v)``.
* Pixel (u, v) is (column, row); pixel centers sit at integer coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

CONVENTION = "R=Rz(roll)*Rx(pitch)*Ry(yaw);view=-z;x-right,y-down"

# direction light/view rays travel in camera space
VIEW_DIR = np.array([0.0, 0.0, -1.0])

DLT_MAX_CONDITION = 1e8
GIMBAL_EPS = 1e-9


class DegenerateConfigurationError(ValueError):
    """Raised when correspondences cannot determine a camera."""


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def angles_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return rot_z(roll) @ rot_x(pitch) @ rot_y(yaw)


def rotation_to_angles(R: np.ndarray) -> tuple[float, float, float, bool]:
    """Inverse of :func:`angles_to_rotation`.

    Returns ``(yaw, pitch, roll, gimbal_locked)``. In the gimbal-lock region
    (|cos pitch| ~ 0) roll is set to 0 and yaw absorbs the remaining rotation.
    """
    R = np.asarray(R, dtype=float)
    sp = float(np.clip(R[2, 1], -1.0, 1.0))
    cp = math.hypot(R[2, 0], R[2, 2])
    pitch = math.atan2(sp, cp)
    if cp < GIMBAL_EPS:
        # R = Rx(+-pi/2) Ry(yaw) with roll folded in; recover combined angle
        yaw = math.atan2(R[0, 2], R[0, 0])
        return yaw, pitch, 0.0, True
    yaw = math.atan2(-R[2, 0], R[2, 2])
    roll = math.atan2(-R[0, 1], R[1, 1])
    return yaw, pitch, roll, False


@dataclass(frozen=True)
class OrthographicCamera:
    scale: float
    tu: float
    tv: float
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"camera scale must be positive, got {self.scale}")

    @property
    def rotation(self) -> np.ndarray:
        return angles_to_rotation(self.yaw, self.pitch, self.roll)

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.tu, self.tv])

    def matrix(self) -> np.ndarray:
        """2x3 linear part ``s * R[:2]``."""
        return self.scale * self.rotation[:2]

    def view_direction(self) -> np.ndarray:
        """Viewing direction expressed in head coordinates."""
        return self.rotation.T @ VIEW_DIR

    def to_camera_space(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T

    def to_affine(self) -> "AffineCamera":
        return AffineCamera(self.matrix(), self.offset)

    def with_pose(self, yaw: float, pitch: float, roll: float) -> "OrthographicCamera":
        return OrthographicCamera(self.scale, self.tu, self.tv, yaw, pitch, roll)

    def to_dict(self) -> dict:
        return {
            "s": self.scale,
            "t_u": self.tu,
            "t_v": self.tv,
            "yaw": self.yaw,
            "pitch": self.pitch,
            "roll": self.roll,
            "convention": CONVENTION,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrthographicCamera":
        conv = d.get("convention", CONVENTION)
        if conv != CONVENTION:
            raise ValueError(f"unsupported camera convention {conv!r}")
        return cls(float(d["s"]), float(d["t_u"]), float(d["t_v"]),
                   float(d["yaw"]), float(d["pitch"]), float(d["roll"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "OrthographicCamera":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class AffineCamera:
    M: np.ndarray  # 2x3, pixels per mm
    t: np.ndarray  # 2, pixels

    def project(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.M.T + self.t


def project(camera: OrthographicCamera, points: np.ndarray) -> np.ndarray:
    """Orthographic projection of one point (3,) or many (n, 3) to pixels."""
    pts = np.asarray(points, dtype=float)
    return pts @ camera.matrix().T + camera.offset


def estimate_affine_camera(points3d: np.ndarray, points2d: np.ndarray,
                           weights: np.ndarray | None = None) -> AffineCamera:
    """Least-squares affine camera from 2-d/3-d correspondences (DLT).

    Points are centered and isotropically scaled before solving; the
    condition number of the normalized normal matrix gates degeneracy.
    """
    X = np.asarray(points3d, dtype=float)
    U = np.asarray(points2d, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3 or U.shape != (X.shape[0], 2):
        raise ValueError("expected (n, 3) and (n, 2) correspondences")
    n = X.shape[0]
    if n < 4:
        raise DegenerateConfigurationError(f"need at least 4 correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.sum(w > 0) < 4:
        raise DegenerateConfigurationError("fewer than 4 correspondences with positive weight")

    wsum = w.sum()
    cx = (w[:, None] * X).sum(0) / wsum
    cu = (w[:, None] * U).sum(0) / wsum
    Xc = X - cx
    spread = math.sqrt((w * (Xc ** 2).sum(1)).sum() / wsum)
    if spread == 0.0:
        raise DegenerateConfigurationError("all 3-d points coincide")
    Xn = Xc / spread

    sw = np.sqrt(w)[:, None]
    A = sw * Xn
    normal = A.T @ A
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > DLT_MAX_CONDITION:
        raise DegenerateConfigurationError(
            f"3-d points nearly coplanar (condition number {cond:.3g})")
    # the normalized centered system separates translation exactly
    Mn, *_ = np.linalg.lstsq(A, sw * (U - cu), rcond=None)
    M = Mn.T / spread
    t = cu - M @ cx
    return AffineCamera(M, t)


def rq(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """RQ decomposition of a 2x3 matrix: ``M = K @ Q``.

    K is 2x2 upper triangular with positive diagonal, Q has orthonormal rows.
    Built from QR of the row-reversed transpose.
    """
    M = np.asarray(M, dtype=float)
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    q, r = np.linalg.qr((P @ M).T)  # (3x2) (2x2)
    K = P @ r.T @ P
    Q = P @ q.T
    signs = np.sign(np.diag(K))
    signs[signs == 0] = 1.0
    D = np.diag(signs)
    return K @ D, D @ Q


def decompose_affine(affine: AffineCamera) -> tuple[OrthographicCamera, np.ndarray]:
    """Split an affine camera into an orthographic camera and a residual.

    ``M = s * residual @ R[:2]`` with ``residual`` upper triangular and unit mean
    diagonal. The residual is for diagnostics only.
    """
    M = np.asarray(affine.M, dtype=float)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("affine camera matrix is rank deficient")
    K, Q = rq(M)
    s = 0.5 * (K[0, 0] + K[1, 1])
    residual = K / s
    r3 = np.cross(Q[0], Q[1])
    R = np.vstack([Q, r3])
    yaw, pitch, roll, _ = rotation_to_angles(R)
    cam = OrthographicCamera(float(s), float(affine.t[0]), float(affine.t[1]), yaw, pitch, roll)
    return cam, residual


def compose_affine(camera: OrthographicCamera, residual: np.ndarray | None = None) -> AffineCamera:
    M = camera.matrix()
    if residual is not None:
        M = np.asarray(residual) @ M
    return AffineCamera(M, camera.offset)
