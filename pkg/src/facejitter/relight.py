"""Approximate relighting: Lambertian modulation on the face, Laplace extension
to the full frame, and intensity-only application.

Light directions are travel directions in camera space (the way photons move),
so a light shining straight into the face from the camera has direction
(0, 0, -1) and Lambertian shading is ``max(0, -n·l)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .fitting import FitResult
from .model import MorphableModel
from .render import HeadMesh, PixelMap, PoseSpec, _image_index, compute_pixel_map

KNOWN_VISIBILITY = 0.5
SOR_OMEGA = 1.9
SOR_MAX_SWEEPS = 10_000
SOR_TOL = 1e-6
COARSEST = 16  # grids at most this size are solved without a coarser initial guess
IDENTITY_EPS = 1e-9


class EmptyFieldError(ValueError):
    pass


@dataclass(frozen=True)
class LightingSpec:
    direction: tuple  # unit travel direction, camera space
    ambient: float = 0.5
    directional: float = 0.5

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,) or not abs(np.linalg.norm(d) - 1.0) <= 1e-9:
            raise ValueError("light direction must be a unit 3-vector")
        if self.ambient < 0 or self.directional < 0 or self.ambient + self.directional <= 0:
            raise ValueError("lighting weights must be non-negative and not both zero")
        object.__setattr__(self, "direction", tuple(float(x) for x in d))

    @classmethod
    def toward(cls, direction, ambient: float = 0.5, directional: float = 0.5) -> "LightingSpec":
        d = np.asarray(direction, dtype=float)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0:
            raise ValueError("light direction must be a nonzero finite 3-vector")
        return cls(tuple(d / n), ambient, directional)

    def to_dict(self) -> dict:
        return {"direction": list(self.direction), "ambient": self.ambient,
                "directional": self.directional}


@dataclass
class ModulationField:
    values: np.ndarray  # (H, W); meaningful where known (sparse) or everywhere (dense)
    known: np.ndarray   # (H, W) bool
    iterations: int = 0
    residual: float = 0.0


def lambert(normals: np.ndarray, lighting: LightingSpec) -> np.ndarray:
    l = np.asarray(lighting.direction)
    return lighting.ambient + lighting.directional * np.maximum(0.0, -(normals @ l))


def face_modulation(pmap: PixelMap, lighting: LightingSpec) -> ModulationField:
    """Unit-mean Lambertian modulation on well-visible head pixels.

    ``pmap`` must be the pixel map of the source view (target = source camera),
    so its weights are source visibilities and its normals source-camera normals.
    """
    known = pmap.mask & (pmap.weight > KNOWN_VISIBILITY)
    if not known.any():
        raise EmptyFieldError("no visible head pixels to light")
    raw = lambert(pmap.normal[known], lighting)
    values = np.zeros(pmap.mask.shape)
    if np.ptp(raw) == 0.0:
        values[known] = 1.0  # ambient only: normalization is exactly the identity
    else:
        values[known] = raw / raw.mean()
    return ModulationField(values, known)


@numba.njit(cache=True)
def _sor_sweeps(u, known, omega, sweeps):
    H, W = u.shape
    for _ in range(sweeps):
        for color in range(2):
            for i in range(H):
                im = i - 1 if i > 0 else 0
                ip = i + 1 if i < H - 1 else H - 1
                for j in range((i + color) % 2, W, 2):
                    if known[i, j]:
                        continue
                    jm = j - 1 if j > 0 else 0
                    jp = j + 1 if j < W - 1 else W - 1
                    avg = 0.25 * (u[im, j] + u[ip, j] + u[i, jm] + u[i, jp])
                    u[i, j] += omega * (avg - u[i, j])


@numba.njit(cache=True)
def _max_residual(u, known):
    H, W = u.shape
    worst = 0.0
    for i in range(H):
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < H - 1 else H - 1
        for j in range(W):
            if known[i, j]:
                continue
            jm = j - 1 if j > 0 else 0
            jp = j + 1 if j < W - 1 else W - 1
            r = abs(u[i, j] - 0.25 * (u[im, j] + u[ip, j] + u[i, jm] + u[i, jp]))
            if r > worst:
                worst = r
    return worst


def laplace_residual(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """|u - mean of 4 neighbours| per pixel (edge-replicated borders), 0 on known pixels."""
    u = np.asarray(values, dtype=float)
    p = np.pad(u, 1, mode="edge")
    avg = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
    return np.where(known, 0.0, np.abs(u - avg))


def _initial_guess(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Solution of the half-resolution problem, upsampled; nearest known value on small grids."""
    H, W = known.shape
    if max(H, W) <= COARSEST:
        from scipy import ndimage
        _, (ii, jj) = ndimage.distance_transform_edt(~known, return_indices=True)
        return values[ii, jj]
    h, w = (H + 1) // 2, (W + 1) // 2
    vals = np.pad(np.where(known, values, np.nan), ((0, 2 * h - H), (0, 2 * w - W)),
                  constant_values=np.nan)
    blocks = vals.reshape(h, 2, w, 2).transpose(0, 2, 1, 3).reshape(h, w, 4)
    coarse_known = np.isfinite(blocks).any(axis=2)
    coarse = np.zeros((h, w))
    # the median keeps a constant boundary exactly constant through the pyramid
    coarse[coarse_known] = np.nanmedian(blocks[coarse_known], axis=1)
    solved, _, _ = _solve(coarse, coarse_known, SOR_TOL)
    return np.repeat(np.repeat(solved, 2, axis=0), 2, axis=1)[:H, :W]


def _solve(values: np.ndarray, known: np.ndarray, tol: float, max_sweeps: int = SOR_MAX_SWEEPS,
           omega: float = SOR_OMEGA, check_every: int = 10):
    u = np.where(known, values, _initial_guess(values, known))
    u = np.ascontiguousarray(u, dtype=np.float64)
    k = np.ascontiguousarray(known)
    done = 0
    res = _max_residual(u, k)
    while res >= tol and done < max_sweeps:
        n = min(check_every, max_sweeps - done)
        _sor_sweeps(u, k, omega, n)
        done += n
        res = _max_residual(u, k)
    return u, done, res


def extend_modulation(field: ModulationField, tol: float = SOR_TOL,
                      max_sweeps: int = SOR_MAX_SWEEPS) -> ModulationField:
    """Dense field: discrete Laplace equation on unknown pixels, Dirichlet on known ones.

    Red-black SOR (omega = 1.9) with zero-normal-derivative image borders,
    started from the solution of the same problem at half resolution.
    """
    known = np.asarray(field.known, dtype=bool)
    if not known.any():
        raise EmptyFieldError("extend_modulation needs at least one known pixel")
    values = np.where(known, field.values, 0.0).astype(np.float64)
    u, done, res = _solve(values, known, tol, max_sweeps)
    return ModulationField(u, known, done, res)


def apply_modulation(image: np.ndarray, field) -> np.ndarray:
    """Scale HSV value by the field, keeping hue and saturation.

    In HSV every RGB channel is proportional to the value, so the result is the
    RGB triple times ``clamp(v * m, 0, 1) / v``. Pixels whose modulation is 1
    within 1e-9 are copied unchanged.
    """
    img = np.asarray(image, dtype=float)
    m = np.asarray(field.values if isinstance(field, ModulationField) else field, dtype=float)
    if m.shape != img.shape[:2]:
        raise ValueError("modulation field and image dimensions differ")
    out = img.copy()
    touch = np.abs(m - 1.0) > IDENTITY_EPS
    if not touch.any():
        return out
    px = img[touch]
    v = px.max(axis=-1) if img.ndim == 3 else px
    scaled = np.clip(v * m[touch], 0.0, 1.0)
    ratio = np.divide(scaled, v, out=np.zeros_like(v), where=v > 0)
    out[touch] = px * (ratio[:, None] if img.ndim == 3 else ratio)
    return out


def relight(image: np.ndarray, fit: FitResult, model: MorphableModel, lighting: LightingSpec,
            image_index=0, mesh: HeadMesh | None = None, field_out: list | None = None) -> np.ndarray:
    """face_modulation -> extend_modulation -> apply_modulation."""
    n = _image_index(fit, image_index)
    mesh = mesh or HeadMesh.from_fit(fit, model, n)
    cam = fit.images[n].camera
    H, W = np.asarray(image).shape[:2]
    pmap = compute_pixel_map(mesh, cam, PoseSpec.from_source(cam, W, H).camera(cam), W, H)
    dense = extend_modulation(face_modulation(pmap, lighting))
    if field_out is not None:
        field_out.append(dense)
    return apply_modulation(image, dense)
