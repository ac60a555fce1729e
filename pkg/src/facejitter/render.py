"""Novel-pose rendering of a fitted head over a planar background warp.

Every output pixel casts a ray of the target camera into the fitted mesh. The
hit point is projected into the source image (direct sample) and, through
the vertex symmetry map, its mirror image is projected too (symmetric fill).
Both samples carry a visibility weight that fades at grazing incidence and
drops to zero under self-occlusion in the source view. The face layer is
composited over a fronto-parallel plane through the source silhouette.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bvh import TriangleBVH, build_bvh, intersect_rays
from .camera import OrthographicCamera
from .fitting import FitResult
from .model import MorphableModel, ShapeCoefficients, instantiate_shape, vertex_normals

COS_LO = 0.1
COS_HI = 0.4
FEATHER_SIGMA = 2.0  # px
FEATHER_TOL = 1e-3   # feather factor below 1 - tol marks the feather band
OCCLUSION_EPS = 1e-4  # shadow-ray origin offset, fraction of the bbox diagonal
Q_MIN = 1e-3  # floor on |cos| between source and target optical axes in the plane warp

DEPTH_MAGIC = b"FJDP"
DEPTH_VERSION = 1


@dataclass(frozen=True)
class PoseSpec:
    """Target view. Scale and offset default to the source camera's."""

    yaw: float
    pitch: float
    roll: float
    width: int
    height: int
    scale: float | None = None
    tu: float | None = None
    tv: float | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("PoseSpec dimensions must be positive")

    @classmethod
    def from_source(cls, camera: OrthographicCamera, width: int, height: int,
                    d_yaw: float = 0.0, d_pitch: float = 0.0, d_roll: float = 0.0) -> "PoseSpec":
        return cls(camera.yaw + d_yaw, camera.pitch + d_pitch, camera.roll + d_roll, width, height)

    def camera(self, source: OrthographicCamera) -> OrthographicCamera:
        return OrthographicCamera(source.scale if self.scale is None else self.scale,
                                  source.tu if self.tu is None else self.tu,
                                  source.tv if self.tv is None else self.tv,
                                  self.yaw, self.pitch, self.roll)

    def to_dict(self) -> dict:
        return dict(yaw=self.yaw, pitch=self.pitch, roll=self.roll, width=self.width,
                    height=self.height, scale=self.scale, tu=self.tu, tv=self.tv)


@dataclass(frozen=True, eq=False)
class HeadMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    symmetry: np.ndarray
    bvh: TriangleBVH

    @classmethod
    def build(cls, model: MorphableModel, coeffs: ShapeCoefficients) -> "HeadMesh":
        V = instantiate_shape(model, coeffs)
        tri = model.topology.triangles
        normals, _ = vertex_normals(V, tri)
        return cls(V, tri, normals, model.topology.symmetry, build_bvh(V, tri))

    @classmethod
    def from_fit(cls, fit: FitResult, model: MorphableModel, image=0) -> "HeadMesh":
        return cls.build(model, fit.coefficients(_image_index(fit, image)))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


@dataclass
class PixelMap:
    source: np.ndarray         # (H, W, 2) direct source pixel (u, v)
    weight: np.ndarray         # (H, W) direct visibility weight
    mirror: np.ndarray         # (H, W, 2) mirrored source pixel
    mirror_weight: np.ndarray  # (H, W)
    mask: np.ndarray           # (H, W) bool, ray hit the head
    normal: np.ndarray         # (H, W, 3) unit surface normal, target camera space
    depth: np.ndarray          # (H, W) target depth, +inf off the mask

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class RenderLayers:
    image: np.ndarray
    face: np.ndarray
    alpha: np.ndarray
    background: np.ndarray
    feather_band: np.ndarray
    pixel_map: PixelMap


def _image_index(fit: FitResult, image) -> int:
    if isinstance(image, str):
        return fit.image(image)[0]
    return int(image)


def smoothstep(x, lo: float, hi: float):
    t = np.clip((np.asarray(x, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def visibility_weight(normal, view_dir, occluded=False, cos_lo: float = COS_LO,
                      cos_hi: float = COS_HI):
    """Fade-out weight of a surface sample seen along ``view_dir`` (travel direction)."""
    n = np.asarray(normal, dtype=float)
    cos = np.maximum(0.0, -(n @ np.asarray(view_dir, dtype=float)))
    return np.where(occluded, 0.0, smoothstep(cos, cos_lo, cos_hi))


def camera_rays(camera: OrthographicCamera, width: int, height: int, vertices: np.ndarray):
    """Head-frame origins (one per pixel, row-major) and the shared direction.

    Origins sit on a camera-space plane in front of every vertex; the ray
    depth to a point minus ``z0`` is the point's depth below camera z = 0.
    """
    R = camera.rotation
    z0 = float((vertices @ R[2]).max()) + 1.0
    v, u = np.mgrid[0:height, 0:width].astype(float)
    cam = np.stack([(u.ravel() - camera.tu) / camera.scale,
                    (v.ravel() - camera.tv) / camera.scale,
                    np.full(u.size, z0)], axis=1)
    return cam @ R, R.T @ np.array([0.0, 0.0, -1.0]), z0


def _source_weight(mesh: HeadMesh, points, normals, source: OrthographicCamera):
    view = source.view_direction()
    w = visibility_weight(normals, view)
    live = np.flatnonzero(w > 0)
    if live.size:
        eps = OCCLUSION_EPS * mesh.diagonal
        hits = intersect_rays(mesh.bvh, points[live] - eps * view, -view)
        w[live[hits.hit]] = 0.0
    return w


def compute_pixel_map(mesh: HeadMesh, source: OrthographicCamera, target: OrthographicCamera,
                      width: int, height: int) -> PixelMap:
    origins, direction, z0 = camera_rays(target, width, height, mesh.vertices)
    hits = intersect_rays(mesh.bvh, origins, direction[None])
    hit = np.flatnonzero(hits.hit)
    P = width * height
    tri = mesh.triangles[hits.triangle[hit]]
    bary = hits.barycentric[hit]

    def interp(values, corners):
        return np.einsum("ri,rij->rj", bary, values[corners])

    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(n > 0, n, 1.0)

    X = interp(mesh.vertices, tri)
    N = unit(interp(mesh.normals, tri))
    sym_tri = mesh.symmetry[tri]
    Xm = interp(mesh.vertices, sym_tri)
    Nm = unit(interp(mesh.normals, sym_tri))

    src = np.full((P, 2), np.nan)
    mir = np.full((P, 2), np.nan)
    w = np.zeros(P)
    wm = np.zeros(P)
    normal = np.zeros((P, 3))
    depth = np.full(P, np.inf)
    M, t = source.matrix(), source.offset
    src[hit] = X @ M.T + t
    mir[hit] = Xm @ M.T + t
    w[hit] = _source_weight(mesh, X, N, source)
    wm[hit] = _source_weight(mesh, Xm, Nm, source)
    normal[hit] = N @ target.rotation.T
    depth[hit] = hits.depth[hit] - z0
    mask = hits.hit.reshape(height, width)
    return PixelMap(src.reshape(height, width, 2), w.reshape(height, width),
                    mir.reshape(height, width, 2), wm.reshape(height, width), mask,
                    normal.reshape(height, width, 3), depth.reshape(height, width))


def pixel_map_for(fit: FitResult, model: MorphableModel, pose: PoseSpec, image=0,
                  mesh: HeadMesh | None = None) -> PixelMap:
    n = _image_index(fit, image)
    mesh = mesh or HeadMesh.from_fit(fit, model, n)
    source = fit.images[n].camera
    return compute_pixel_map(mesh, source, pose.camera(source), pose.width, pose.height)


def bilinear_sample(image: np.ndarray, coords: np.ndarray):
    """Sample ``image`` (H, W[, C]) at pixel coords (..., 2) as (u, v).

    Returns ``(values, inside)``; points outside ``[0, W-1] x [0, H-1]`` (or
    NaN) are flagged and sampled with edge clamping.
    """
    img = np.asarray(image, dtype=float)
    H, W = img.shape[:2]
    uv = np.asarray(coords, dtype=float)
    flat = uv.reshape(-1, 2)
    inside = (np.isfinite(flat).all(axis=1) & (flat[:, 0] >= 0) & (flat[:, 0] <= W - 1)
              & (flat[:, 1] >= 0) & (flat[:, 1] <= H - 1))
    rc = np.nan_to_num(flat[:, ::-1].T)
    chans = img.reshape(H, W, -1)
    vals = np.stack([ndimage.map_coordinates(chans[..., c], rc, order=1, mode="nearest")
                     for c in range(chans.shape[2])], axis=-1)
    vals = vals.reshape(uv.shape[:-1] + img.shape[2:])
    return vals, inside.reshape(uv.shape[:-1])


def resample(source: np.ndarray, pmap: PixelMap) -> tuple[np.ndarray, np.ndarray]:
    """Face layer ``(color, alpha)`` blended from direct and mirrored samples.

    The mirrored weight is scaled by ``1 - w_direct``: fully visible pixels
    keep their own appearance, occluded ones take the mirror's, and grazing
    ones blend the two.
    """
    direct, in_d = bilinear_sample(source, pmap.source)
    mirror, in_m = bilinear_sample(source, pmap.mirror)
    wd = np.where(in_d & pmap.mask, pmap.weight, 0.0)
    # the mirror only fills in what the direct view lacks
    wm = np.where(in_m & pmap.mask, pmap.mirror_weight, 0.0) * (1.0 - wd)
    total = wd + wm
    safe = np.where(total > 0, total, 1.0)
    if direct.ndim == 3:
        color = (wd[..., None] * direct + wm[..., None] * mirror) / safe[..., None]
        color = np.where((total > 0)[..., None], color, 0.0)
    else:
        color = np.where(total > 0, (wd * direct + wm * mirror) / safe, 0.0)
    alpha = np.where(pmap.mask, np.clip(total, 0.0, 1.0), 0.0)
    return color, alpha


def silhouette_vertices(mesh: HeadMesh, camera: OrthographicCamera) -> np.ndarray:
    """Vertices of triangles straddling the occluding contour (sign change of n·view)."""
    f = mesh.normals @ camera.view_direction()
    s = f[mesh.triangles] > 0
    straddle = s.any(axis=1) & ~s.all(axis=1)
    return np.unique(mesh.triangles[straddle])


def background_affine(mesh: HeadMesh, source: OrthographicCamera,
                      target: OrthographicCamera) -> tuple[np.ndarray, np.ndarray]:
    """Target-pixel to source-pixel affine map ``u_src = A @ u_tgt + b``.

    The background is the plane parallel to the source image plane at the
    median source-camera depth of the silhouette vertices.
    """
    sil = silhouette_vertices(mesh, source)
    pts = mesh.vertices[sil] if sil.size else mesh.vertices
    d_star = float(np.median(pts @ source.rotation[2]))
    Q = source.rotation @ target.rotation.T
    q22 = Q[2, 2] if abs(Q[2, 2]) >= Q_MIN else np.copysign(Q_MIN, Q[2, 2])
    # camera-space target point (x, y, lam) on the plane: lam = (d* - Q20 x - Q21 y) / Q22
    L = np.array([[1.0, 0.0], [0.0, 1.0], [-Q[2, 0] / q22, -Q[2, 1] / q22]])
    l0 = np.array([0.0, 0.0, d_star / q22])
    G = Q[:2] @ L  # source camera xy per target camera xy
    g = Q[:2] @ l0
    st, ss = target.scale, source.scale
    A = ss * G / st
    b = ss * (g - G @ target.offset / st) + source.offset
    return A, b


def warp_affine(image: np.ndarray, A: np.ndarray, b: np.ndarray, width: int, height: int) -> np.ndarray:
    """Output pixel (u, v) takes ``image`` at ``A @ (u, v) + b``, bilinear, edge-clamped."""
    img = np.asarray(image, dtype=float)
    if (img.shape[1], img.shape[0]) == (width, height) and np.allclose(A, np.eye(2), rtol=0, atol=1e-12) \
            and np.allclose(b, 0.0, rtol=0, atol=1e-12):
        return img.copy()
    # scipy works in (row, col) = (v, u) order
    Ar = A[::-1, ::-1]
    br = b[::-1]
    chans = img.reshape(img.shape[0], img.shape[1], -1)
    out = np.stack([ndimage.affine_transform(chans[..., c], Ar, offset=br, output_shape=(height, width),
                                             order=1, mode="nearest") for c in range(chans.shape[2])],
                   axis=-1)
    return out.reshape((height, width) + img.shape[2:])


def background_warp(source_image: np.ndarray, mesh: HeadMesh, source: OrthographicCamera,
                    target: OrthographicCamera, width: int, height: int) -> np.ndarray:
    A, b = background_affine(mesh, source, target)
    return warp_affine(source_image, A, b, width, height)


def feather(mask: np.ndarray, sigma: float = FEATHER_SIGMA) -> np.ndarray:
    """Inward fade of a binary mask: Gaussian-blurred mask, zero outside it."""
    m = np.asarray(mask, dtype=float)
    return np.where(mask, ndimage.gaussian_filter(m, sigma, mode="nearest"), 0.0)


def render_pose(source_image: np.ndarray, fit: FitResult, model: MorphableModel, pose: PoseSpec,
                image=0, mesh: HeadMesh | None = None, layers: bool = False):
    """Render the fitted head at ``pose`` composited over the warped background."""
    n = _image_index(fit, image)
    mesh = mesh or HeadMesh.from_fit(fit, model, n)
    source = fit.images[n].camera
    target = pose.camera(source)
    pmap = compute_pixel_map(mesh, source, target, pose.width, pose.height)
    face, alpha = resample(source_image, pmap)
    f = feather(pmap.mask)
    alpha = alpha * f
    background = background_warp(source_image, mesh, source, target, pose.width, pose.height)
    a = alpha[..., None] if face.ndim == 3 else alpha
    out = a * face + (1.0 - a) * background
    if not layers:
        return out
    band = pmap.mask & (f < 1.0 - FEATHER_TOL)
    return RenderLayers(out, face, alpha, background, band, pmap)


def render_depth(vertices: np.ndarray, triangles, camera: OrthographicCamera, width: int, height: int,
                 bvh: TriangleBVH | None = None) -> np.ndarray:
    """Nearest-hit depth below camera z = 0 (larger is farther); +inf off the mesh."""
    V = np.asarray(vertices, dtype=float)
    bvh = bvh or build_bvh(V, triangles)
    origins, direction, z0 = camera_rays(camera, width, height, V)
    hits = intersect_rays(bvh, origins, direction[None])
    depth = np.where(hits.hit, hits.depth - z0, np.inf)
    return depth.reshape(height, width).astype(np.float32)


def write_depth(path, depth: np.ndarray) -> None:
    """Depth file: magic, version, height, width (little-endian u32), then float32 rows."""
    d = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<III", DEPTH_VERSION, d.shape[0], d.shape[1]))
        f.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != DEPTH_MAGIC:
            raise ValueError(f"{path}: not a depth file")
        version, h, w = struct.unpack("<III", head[4:])
        if version != DEPTH_VERSION:
            raise ValueError(f"{path}: unsupported depth file version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: truncated depth data")
    return data.reshape(h, w).astype(np.float32)
