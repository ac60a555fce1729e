"""Joint camera and shape estimation from 2-d landmarks.

Alternates per-image affine camera estimation (DLT + RQ) with a linear solve
for one shared subject coefficient vector and one expression vector per image.
"""

from __future__ import annotations

import json
import logging
import math
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .camera import (DegenerateConfigurationError, OrthographicCamera, decompose_affine,
                     estimate_affine_camera, project, rot_x, rot_y, rot_z)
from .model import (CONTOUR_IDS, N_LANDMARKS, MorphableModel, ShapeCoefficients,
                    instantiate_shape, vertex_normals)

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    image_id: str
    ids: np.ndarray         # (L,) landmark ids
    points: np.ndarray      # (L, 2) pixels
    confidence: np.ndarray  # (L,) in [0, 1]

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        conf = (np.ones(len(ids)) if self.confidence is None
                else np.asarray(self.confidence, dtype=float))
        if len(ids) == 0:
            raise ValueError(f"landmark set {self.image_id!r} is empty")
        if len(np.unique(ids)) != len(ids):
            raise ValueError(f"duplicate landmark ids in {self.image_id!r}")
        if ids.min() < 0 or ids.max() >= N_LANDMARKS:
            raise ValueError(f"landmark id out of range in {self.image_id!r}")
        if pts.shape != (len(ids), 2) or conf.shape != (len(ids),):
            raise ValueError("points/confidence do not match ids")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"non-finite landmark position in {self.image_id!r}")
        if np.any((conf < 0) | (conf > 1)):
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)

    @classmethod
    def full(cls, image_id: str, points: np.ndarray) -> "LandmarkSet":
        return cls(image_id, np.arange(N_LANDMARKS), points, np.ones(N_LANDMARKS))

    def to_dict(self) -> dict:
        return {"image_id": self.image_id,
                "landmarks": [[int(i), float(u), float(v), float(c)]
                              for i, (u, v), c in zip(self.ids, self.points, self.confidence)]}

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkSet":
        rows = np.asarray(d["landmarks"], dtype=float).reshape(-1, 4)
        return cls(str(d["image_id"]), rows[:, 0].astype(np.int64), rows[:, 1:3], rows[:, 3])


def load_landmarks(path) -> list[LandmarkSet]:
    """Landmark file: one JSON record per image, either a JSON list or JSON lines."""
    with open(path) as f:
        text = f.read()
    text = text.strip()
    if text.startswith("["):
        records = json.loads(text)
    elif text.startswith("{") and "\n" not in text:
        records = [json.loads(text)]
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [LandmarkSet.from_dict(r) for r in records]


def save_landmarks(path, sets) -> None:
    with open(path, "w") as f:
        json.dump([s.to_dict() for s in sets], f)


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 10
    tolerance: float = 0.05  # px, change in RMS between outer iterations
    clamp: float = 3.0       # coefficient limit in sigma units
    regularization: float = 1e-3
    damping: float = 1e-3    # initial Levenberg-Marquardt damping of the joint step
    max_retries: int = 8

    def __post_init__(self):
        if (self.max_iterations < 1 or self.tolerance <= 0 or self.clamp <= 0
                or self.regularization < 0 or self.damping <= 0 or self.max_retries < 0):
            raise ValueError(f"invalid FitConfig {self}")


@dataclass
class ImageFit:
    image_id: str
    beta: np.ndarray
    camera: OrthographicCamera | None
    rms: float
    residual: np.ndarray  # observed minus projected mean-head anchors, (L, 2)
    dropped: bool = False


@dataclass
class FitResult:
    alpha: np.ndarray
    images: list[ImageFit]
    converged: bool
    iterations: int
    rms_history: list[float] = field(default_factory=list)

    def coefficients(self, n: int = 0) -> ShapeCoefficients:
        return ShapeCoefficients(self.alpha, self.images[n].beta)

    def image(self, image_id: str) -> tuple[int, ImageFit]:
        for n, im in enumerate(self.images):
            if im.image_id == image_id:
                return n, im
        raise KeyError(image_id)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "rms_history": list(self.rms_history),
            "images": [{
                "image_id": im.image_id,
                "beta": im.beta.tolist(),
                "camera": None if im.camera is None else im.camera.to_dict(),
                "rms": im.rms,
                "residual": im.residual.tolist(),
                "dropped": im.dropped,
            } for im in self.images],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        images = [ImageFit(im["image_id"], np.asarray(im["beta"], dtype=float),
                           None if im["camera"] is None else OrthographicCamera.from_dict(im["camera"]),
                           float(im["rms"]), np.asarray(im["residual"], dtype=float).reshape(-1, 2),
                           bool(im.get("dropped", False)))
                  for im in d["images"]]
        return cls(np.asarray(d["alpha"], dtype=float), images, bool(d["converged"]),
                   int(d["iterations"]), [float(x) for x in d.get("rms_history", [])])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "FitResult":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _silhouette_candidates(f: np.ndarray, spread: int = 0) -> np.ndarray:
    """Strip positions at silhouette crossings of ``f = n . view``."""
    sign = np.sign(f)
    crossings = np.nonzero(sign[:-1] * sign[1:] <= 0)[0]
    if crossings.size == 0:
        centers = np.array([np.argmin(np.abs(f))])
    elif spread == 0:
        centers = np.where(np.abs(f[crossings]) <= np.abs(f[crossings + 1]), crossings, crossings + 1)
    else:
        centers = np.concatenate([crossings, crossings + 1])
    if spread:
        centers = (centers[:, None] + np.arange(-spread, spread + 1)).ravel()
    return np.unique(np.clip(centers, 0, len(f) - 1))


def anchor_indices(model: MorphableModel, vertices: np.ndarray,
                   camera: OrthographicCamera | None, normals: np.ndarray | None = None,
                   targets: np.ndarray | None = None, nearest: bool = False) -> np.ndarray:
    """Anchor vertex per landmark id (68,) for the given shape and camera.

    Contour landmarks take the silhouette vertex of their strip; when several
    crossings exist the one projecting closest to the nominal anchor wins,
    ties going to the lowest vertex index. With ``targets`` (68, 2) observed
    pixels (NaN where unobserved), the vertices bracketing each crossing and
    their neighbours compete instead, and the one projecting closest to the
    observation wins. Without a camera the frontal nominal anchors are used.
    """
    topo = model.topology
    idx = topo.landmark_vertex.copy()
    if camera is None:
        idx[list(CONTOUR_IDS)] = topo.contour_nominal
        return idx
    if normals is None:
        normals, _ = vertex_normals(vertices, topo.triangles)
    view = camera.view_direction()
    M = camera.matrix()
    for k in CONTOUR_IDS:
        strip = topo.contour_strips[k]
        f = normals[strip] @ view
        proj = vertices[strip] @ M.T
        observed = targets is not None and np.all(np.isfinite(targets[k]))
        if observed and nearest:
            cands = np.arange(len(strip))
            goal = targets[k] - camera.offset
        elif observed:
            cands = _silhouette_candidates(f, spread=1)
            goal = targets[k] - camera.offset
        else:
            cands = _silhouette_candidates(f)
            goal = vertices[topo.contour_nominal[k]] @ M.T
        d = np.sum((proj[cands] - goal) ** 2, axis=1)
        idx[k] = int(strip[cands[d == d.min()]].min())
    return idx


def _targets(ls: LandmarkSet) -> np.ndarray:
    t = np.full((N_LANDMARKS, 2), np.nan)
    t[ls.ids] = ls.points
    return t


def landmark_anchor_points(model: MorphableModel, camera: OrthographicCamera | None,
                           coeffs: ShapeCoefficients, targets: np.ndarray | None = None) -> np.ndarray:
    """3-d anchor position (mm) for each of the 68 landmarks."""
    V = instantiate_shape(model, coeffs)
    return V[anchor_indices(model, V, camera, targets=targets)]


@dataclass
class LinearSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    n_subject: int
    n_expression: int
    n_images: int
    row_blocks: list  # (start, stop) data rows per image

    def split(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        ks, ke = self.n_subject, self.n_expression
        betas = [x[ks + n * ke: ks + (n + 1) * ke] for n in range(self.n_images)]
        return x[:ks], betas


def _projected_basis(P: np.ndarray, basis: np.ndarray, idx: np.ndarray) -> np.ndarray:
    sub = basis[:, idx, :]  # (k, L, 3)
    return np.einsum("ij,klj->lik", P, sub).reshape(2 * len(idx), basis.shape[0])


def assemble_system(model: MorphableModel, landmark_sets, cameras, anchors,
                    regularization: float = 1e-3) -> LinearSystem:
    """Stacked block system: columns [alpha | beta_0 | ... | beta_N].

    ``anchors[n]`` is the (68,) anchor vertex table for image n. Landmark rows
    are weighted by confidence. Ridge rows are scaled by the mean camera scale
    so the system stays equivariant to pixel scaling.
    """
    if len(landmark_sets) == 0:
        raise ValueError("no landmark sets to assemble")
    ks, ke = model.n_subject, model.n_expression
    N = len(landmark_sets)
    ncols = ks + N * ke
    blocks, rhs, row_blocks = [], [], []
    start = 0
    for n, (ls, cam, anc) in enumerate(zip(landmark_sets, cameras, anchors)):
        if len(ls.ids) == 0:
            raise ValueError("empty landmark set")
        idx = np.asarray(anc)[ls.ids]
        P = cam.matrix()
        w = np.repeat(ls.confidence, 2)
        rows = np.zeros((2 * len(idx), ncols))
        rows[:, :ks] = _projected_basis(P, model.subject_basis, idx)
        rows[:, ks + n * ke: ks + (n + 1) * ke] = _projected_basis(P, model.expression_basis, idx)
        delta = ls.points - project(cam, model.mean[idx])
        blocks.append(rows * w[:, None])
        rhs.append(delta.ravel() * w)
        row_blocks.append((start, start + 2 * len(idx)))
        start += 2 * len(idx)
    if regularization > 0:
        scale = float(np.mean([c.scale for c in cameras]))
        blocks.append(regularization * scale * np.eye(ncols))
        rhs.append(np.zeros(ncols))
    return LinearSystem(np.vstack(blocks), np.concatenate(rhs), ks, ke, N, row_blocks)


def _tsvd_solve(A: np.ndarray, b: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    U, sv, Vt = np.linalg.svd(A, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        return np.zeros(A.shape[1])
    keep = sv > rcond * sv[0]
    return Vt[keep].T @ ((U[:, keep].T @ b) / sv[keep])


def _lstsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # pivoted QR; the damped systems solved here have full column rank
    return scipy.linalg.lstsq(A, b, lapack_driver="gelsy", check_finite=False)[0]


def _clamped_lstsq(A: np.ndarray, b: np.ndarray, n_bounded: int, limit: float) -> np.ndarray:
    """Least squares with ``|x_i| <= limit`` on the first ``n_bounded`` unknowns.

    Violating unknowns are pinned at their bound and the rest re-solved until
    the free solution is feasible (an active-set pass without release).
    """
    ncols = A.shape[1]
    x = _lstsq(A, b)
    free = np.ones(ncols, dtype=bool)
    for _ in range(n_bounded):
        over = free[:n_bounded] & (np.abs(x[:n_bounded]) > limit)
        if not over.any():
            break
        pinned = np.flatnonzero(over)
        x[pinned] = np.sign(x[pinned]) * limit
        free[pinned] = False
        fixed = ~free
        x[free] = _lstsq(A[:, free], b - A[:, fixed] @ x[fixed])
    return x


def _camera_columns(cam: OrthographicCamera, points: np.ndarray) -> np.ndarray:
    """d(projection)/d(yaw, pitch, roll, s, t_u, t_v), shape (2L, 6)."""
    Ry, Rx, Rz = rot_y(cam.yaw), rot_x(cam.pitch), rot_z(cam.roll)
    dRy = rot_y(cam.yaw + np.pi / 2) - np.diag([0.0, 1.0, 0.0])
    dRx = rot_x(cam.pitch + np.pi / 2) - np.diag([1.0, 0.0, 0.0])
    dRz = rot_z(cam.roll + np.pi / 2) - np.diag([0.0, 0.0, 1.0])
    L = len(points)
    J = np.zeros((L, 2, 6))
    J[:, :, 0] = cam.scale * points @ (Rz @ Rx @ dRy)[:2].T
    J[:, :, 1] = cam.scale * points @ (Rz @ dRx @ Ry)[:2].T
    J[:, :, 2] = cam.scale * points @ (dRz @ Rx @ Ry)[:2].T
    J[:, :, 3] = points @ (Rz @ Rx @ Ry)[:2].T
    J[:, 0, 4] = 1.0
    J[:, 1, 5] = 1.0
    return J.reshape(2 * L, 6)


def _update_camera(cam: OrthographicCamera, d: np.ndarray) -> OrthographicCamera:
    s = cam.scale + d[3]
    if s <= 0:
        s = 0.5 * cam.scale
    return OrthographicCamera(s, cam.tu + d[4], cam.tv + d[5],
                              cam.yaw + d[0], cam.pitch + d[1], cam.roll + d[2])


def solve_coefficients(system: LinearSystem, clamp: float | None = 3.0,
                       rcond: float = 1e-10) -> tuple[np.ndarray, list[np.ndarray]]:
    """Minimum-norm truncated-SVD solution, then elementwise clamp."""
    x = _tsvd_solve(system.matrix, system.rhs, rcond)
    if clamp is not None:
        x = np.clip(x, -clamp, clamp)
    return system.split(x)


def _rms(err: np.ndarray) -> float:
    return float(math.sqrt(np.mean(np.sum(err ** 2, axis=1)))) if len(err) else float("nan")


class _Workspace:
    """Per-model restriction of the bases to the vertices the fit reads.

    Fitting only touches landmark anchors and jaw-strip vertices; shapes are
    instantiated on that subset (other rows stay zero) and normals come from
    the triangles incident to the strips, which reproduces the full-mesh
    normals exactly on those vertices.
    """

    def __init__(self, model: MorphableModel):
        topo = model.topology
        band = topo.jaw_band
        interior = topo.landmark_vertex[topo.landmark_vertex >= 0]
        touches = np.isin(topo.triangles, band).any(axis=1)
        self.triangles = topo.triangles[touches]
        self.sub = np.unique(np.concatenate([self.triangles.ravel(), interior, topo.contour_nominal]))
        self.n = model.n_vertices
        self.mean = model.mean[self.sub]
        self.subject = np.ascontiguousarray(model.subject_basis[:, self.sub, :]).reshape(model.n_subject, -1)
        self.expression = np.ascontiguousarray(
            model.expression_basis[:, self.sub, :]).reshape(model.n_expression, -1)

    def shape(self, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
        V = np.zeros((self.n, 3))
        V[self.sub] = self.mean + (alpha @ self.subject + beta @ self.expression).reshape(-1, 3)
        return V

    def normals(self, V: np.ndarray) -> np.ndarray:
        normals, _ = vertex_normals(V, self.triangles)
        return normals


_WORKSPACES: "weakref.WeakKeyDictionary[MorphableModel, _Workspace]" = weakref.WeakKeyDictionary()


def _workspace(model: MorphableModel) -> _Workspace:
    ws = _WORKSPACES.get(model)
    if ws is None:
        ws = _WORKSPACES[model] = _Workspace(model)
    return ws


@dataclass
class _State:
    alpha: np.ndarray
    betas: list
    cams: list
    rms: float = float("inf")
    shapes: dict = field(default_factory=dict)
    anchors: dict = field(default_factory=dict)
    forced: dict = field(default_factory=dict)  # image -> anchor table overriding the silhouette rule
    nearest: bool = False  # jaw anchors by image distance alone (warm start only)


def _evaluate(model, images, state: _State, active) -> _State:
    """Fill in shapes, anchors and overall landmark RMS for ``active`` images."""
    errs = []
    ws = _workspace(model)
    state.shapes, state.anchors = {}, {}
    for n in active:
        ls = images[n]
        V = ws.shape(state.alpha, state.betas[n])
        if n in state.forced:
            anc = state.forced[n]
        else:
            normals = ws.normals(V)
            anc = anchor_indices(model, V, state.cams[n], normals, _targets(ls), state.nearest)
        state.shapes[n], state.anchors[n] = V, anc
        errs.append((ls.points - project(state.cams[n], V[anc[ls.ids]])) * np.sqrt(ls.confidence)[:, None])
    state.rms = _rms(np.vstack(errs))
    return state


def _initial_camera(model, ls: LandmarkSet, V: np.ndarray) -> OrthographicCamera:
    anc = anchor_indices(model, V, None)
    cam, _ = decompose_affine(estimate_affine_camera(V[anc[ls.ids]], ls.points, ls.confidence))
    # one re-selection of the contour anchors under the estimated pose
    anc = anchor_indices(model, V, cam, targets=_targets(ls))
    cam, _ = decompose_affine(estimate_affine_camera(V[anc[ls.ids]], ls.points, ls.confidence))
    return cam


def _joint_step(model, images, state: _State, active, config: FitConfig, mu: float,
                freeze_cameras: bool = False) -> _State:
    """Damped linear solve for [alpha | beta_n] plus per-image camera corrections."""
    sets = [images[n] for n in active]
    cams = [state.cams[n] for n in active]
    system = assemble_system(model, sets, cams, [state.anchors[n] for n in active],
                             config.regularization)
    n_shape = system.matrix.shape[1]
    n_rows = system.matrix.shape[0]
    n_cam = 6 * len(active)
    ncols = n_shape + n_cam
    A = np.zeros((n_rows + ncols, ncols))
    b = np.zeros(n_rows + ncols)
    A[:n_rows, :n_shape] = system.matrix
    b[:n_rows] = system.rhs
    for k, (n, (r0, r1)) in enumerate(zip(active, system.row_blocks)):
        ls = images[n]
        X = state.shapes[n][state.anchors[n][ls.ids]]
        A[r0:r1, n_shape + 6 * k: n_shape + 6 * (k + 1)] = (
            _camera_columns(state.cams[n], X) * np.repeat(ls.confidence, 2)[:, None])
    # Marquardt damping toward the current estimate
    col = np.linalg.norm(A[:n_rows], axis=0)
    col[col == 0] = 1.0
    x_cur = np.concatenate([state.alpha] + [state.betas[n] for n in active] + [np.zeros(n_cam)])
    A[n_rows + np.arange(ncols), np.arange(ncols)] = mu * col
    b[n_rows:] = mu * col * x_cur
    if freeze_cameras:
        A[:n_rows, n_shape:] = 0.0
        A[n_rows + n_shape:, n_shape:] = np.diag(col[n_shape:])

    x = _clamped_lstsq(A, b, n_shape, config.clamp)
    shape = np.clip(x[:n_shape], -config.clamp, config.clamp)
    alpha, bs = system.split(shape)
    betas = list(state.betas)
    new_cams = list(state.cams)
    for k, n in enumerate(active):
        betas[n] = bs[k]
        new_cams[n] = _update_camera(state.cams[n], x[n_shape + 6 * k: n_shape + 6 * (k + 1)])
    return _evaluate(model, images, _State(alpha, betas, new_cams, forced=state.forced, nearest=state.nearest), active)


def _damped_descent(model, images, state: _State, active, config: FitConfig, mu: float,
                    freeze_cameras: bool = False):
    """One accepted Levenberg-Marquardt step (or the unchanged state)."""
    for _ in range(config.max_retries + 1):
        trial = _joint_step(model, images, state, active, config, mu, freeze_cameras)
        if trial.rms <= state.rms:
            return trial, max(mu / 10.0, config.damping)
        mu *= 10.0
    return state, mu


_LEFT_JAW = tuple(range(0, 8))
_RIGHT_JAW = tuple(range(9, 17))
# (landmark ids, per-landmark step direction); runs of neighbouring landmarks
# and whole jaw sides move together, in the same or opposite directions
_JAW_GROUPS = (
    tuple(((k,), (1,)) for k in CONTOUR_IDS)
    + tuple((g, (1,) * len(g)) for g in (_LEFT_JAW, _RIGHT_JAW, _LEFT_JAW[:4], _LEFT_JAW[4:],
                                         _RIGHT_JAW[:4], _RIGHT_JAW[4:], tuple(CONTOUR_IDS)))
    + ((_LEFT_JAW + _RIGHT_JAW, (1,) * 8 + (-1,) * 8),)
    + tuple((side[i:i + w], (1,) * w) for side in (_LEFT_JAW, _RIGHT_JAW)
            for w in (2, 3) for i in range(len(side) - w + 1))
    + tuple(((k, 16 - k), (1, 1)) for k in _LEFT_JAW)
)


def _contour_moves(model, anchors: np.ndarray, ids, reach: int = 2):
    """Jaw anchor re-assignments ``{landmark id: vertex}``.

    Single landmarks move up to ``reach`` strip steps; groups move by one.
    """
    strips = model.topology.contour_strips
    pos = {}
    for k in CONTOUR_IDS:
        hit = np.flatnonzero(strips[k] == anchors[k])
        if k in ids and hit.size:
            pos[k] = int(hit[0])
    for group, signs in _JAW_GROUPS:
        if not all(k in pos for k in group):
            continue
        steps = range(-reach, reach + 1) if len(group) == 1 else (-1, 1)
        for step in steps:
            if step == 0:
                continue
            move = {k: int(strips[k][pos[k] + step * d]) for k, d in zip(group, signs)
                    if 0 <= pos[k] + step * d < len(strips[k])}
            if move:
                yield move


def _linearized(model, images, state: _State, active, config: FitConfig):
    """Jacobian over [alpha | beta_n | camera_n] and residual at the current state."""
    sets = [images[n] for n in active]
    system = assemble_system(model, sets, [state.cams[n] for n in active],
                             [state.anchors[n] for n in active], config.regularization)
    n_shape = system.matrix.shape[1]
    A = np.zeros((system.matrix.shape[0], n_shape + 6 * len(active)))
    A[:, :n_shape] = system.matrix
    x_cur = np.concatenate([state.alpha] + [state.betas[n] for n in active])
    r = system.rhs - system.matrix @ x_cur
    for j, (n, (r0, r1)) in enumerate(zip(active, system.row_blocks)):
        ls = images[n]
        X = state.shapes[n][state.anchors[n][ls.ids]]
        A[r0:r1, n_shape + 6 * j: n_shape + 6 * (j + 1)] = (
            _camera_columns(state.cams[n], X) * np.repeat(ls.confidence, 2)[:, None])
    return A, r, system


def _predicted_rms(model, images, state: _State, active, config: FitConfig, moves) -> np.ndarray:
    """Landmark RMS after one linearized joint solve, for each anchor move.

    A move ``(image position j, {landmark id: vertex})`` swaps two rows per
    landmark in the current system; each candidate is a low-rank Woodbury
    update of the normal equations rather than a fresh solve. Moves of equal
    size are batched.
    """
    A, r, system = _linearized(model, images, state, active, config)
    H = A.T @ A
    Hinv = np.linalg.pinv(H, rcond=1e-12, hermitian=True)
    g = A.T @ r
    rr = float(r @ r)
    n_data = system.row_blocks[-1][1] // 2
    ks, ke = model.n_subject, model.n_expression
    n_shape = system.matrix.shape[1]
    ncols = A.shape[1]

    # replacement rows for every (image, landmark, vertex) any move needs
    rows_of: dict = {}
    for j, n in enumerate(active):
        wanted = sorted({(k, v) for jj, mv in moves if jj == j for k, v in mv.items()})
        if not wanted:
            continue
        ls, cam = images[n], state.cams[n]
        where = {int(k): p for p, k in enumerate(ls.ids)}
        vs = np.array([v for _, v in wanted])
        pos = np.array([where[k] for k, _ in wanted])
        P = cam.matrix()
        X = state.shapes[n][vs]
        new = np.zeros((len(vs), 2, ncols))
        new[:, :, :ks] = np.einsum("ij,kmj->mik", P, model.subject_basis[:, vs, :])
        new[:, :, ks + j * ke: ks + (j + 1) * ke] = np.einsum("ij,kmj->mik", P, model.expression_basis[:, vs, :])
        new[:, :, n_shape + 6 * j: n_shape + 6 * (j + 1)] = _camera_columns(cam, X).reshape(len(vs), 2, 6)
        w = ls.confidence[pos]
        new *= w[:, None, None]
        res = w[:, None] * (ls.points[pos] - project(cam, X))
        ridx = system.row_blocks[j][0] + 2 * pos[:, None] + np.arange(2)
        for i, key in enumerate(wanted):
            rows_of[(j,) + key] = (new[i], res[i], ridx[i])

    out = np.empty(len(moves))
    by_size: dict = {}
    for i, (j, mv) in enumerate(moves):
        by_size.setdefault(len(mv), []).append(i)
    for size, members in by_size.items():
        m = 2 * size
        U = np.empty((len(members), 2 * m, ncols))
        d_new = np.empty((len(members), m))
        d_old = np.empty((len(members), m))
        for b, i in enumerate(members):
            j, mv = moves[i]
            parts = [rows_of[(j, k, v)] for k, v in mv.items()]
            ridx = np.concatenate([p[2] for p in parts])
            U[b, :m] = A[ridx]
            U[b, m:] = np.concatenate([p[0] for p in parts])
            d_old[b] = r[ridx]
            d_new[b] = np.concatenate([p[1] for p in parts])
        g2 = (g - np.einsum("bmk,bm->bk", U[:, :m], d_old)
              + np.einsum("bmk,bm->bk", U[:, m:], d_new))
        rr2 = rr - np.sum(d_old ** 2, axis=1) + np.sum(d_new ** 2, axis=1)
        HiU = U @ Hinv
        Hig = g2 @ Hinv
        S = np.einsum("bik,bjk->bij", U, HiU) + np.diag(np.r_[-np.ones(m), np.ones(m)])
        y = np.einsum("bik,bk->bi", U, Hig)
        try:
            z = np.linalg.solve(S, y[..., None])[..., 0]
        except np.linalg.LinAlgError:
            z = np.stack([np.linalg.lstsq(Si, yi, rcond=None)[0] for Si, yi in zip(S, y)])
        dx = Hig - np.einsum("bik,bi->bk", HiU, z)
        out[members] = np.sqrt(np.maximum(rr2 - np.sum(g2 * dx, axis=1), 0.0) / n_data)
    return out


def _polish(model, images, state: _State, active, config: FitConfig, anchors: dict,
            steps: int = 4, freeze_cameras: bool = False) -> _State:
    """Damped steps with the anchor tables held fixed, then rule re-evaluation."""
    trial = _evaluate(model, images, _State(state.alpha, state.betas, state.cams, forced=anchors, nearest=state.nearest), active)
    mu = config.damping
    for _ in range(steps):
        prev = trial.rms
        trial, mu = _damped_descent(model, images, trial, active, config, mu, freeze_cameras)
        if prev - trial.rms < 1e-3 * max(prev, 1e-3):
            break
    return _evaluate(model, images, _State(trial.alpha, trial.betas, trial.cams, nearest=state.nearest), active)


def _refine_contours(model, images, state: _State, active, config: FitConfig,
                     candidates: int = 3, rounds: int = 12) -> _State:
    """Discrete local search over the jaw anchor assignment.

    The silhouette rule admits self-consistent states whose jaw anchors sit a
    strip step or two away from the best assignment, and the pose is weakly
    determined by the interior landmarks, so such states can carry sizeable
    pose errors at small RMS. Single-landmark re-assignments are ranked by a
    linearized solve; the best few are polished with the anchors held fixed,
    and one is kept only if the RMS under the silhouette rule drops.
    """
    for _ in range(rounds):
        base = {n: state.anchors[n] for n in active}
        moves = [(j, mv) for j, n in enumerate(active)
                 for mv in _contour_moves(model, base[n], set(images[n].ids.tolist()))]
        if not moves:
            return state
        preds = _predicted_rms(model, images, state, active, config, moves)
        for i in np.argsort(preds, kind="stable")[:candidates]:
            if preds[i] >= 0.9 * state.rms:
                break
            j, move = moves[i]
            n = active[j]
            table = base[n].copy()
            table[list(move)] = list(move.values())
            free = _polish(model, images, state, active, config, {**base, n: table})
            if free.rms < 0.95 * state.rms:
                state = free
                break
        else:
            return state
    return state


def _reseed_from_single_views(model, images, state: _State, active, config: FitConfig) -> _State:
    """Try single-view solutions as seeds for the joint fit.

    In a joint fit one view can settle on an off-by-a-step jaw assignment that
    the shared subject vector then absorbs. For every view, its single-view
    fit supplies (a) its jaw anchors, swapped into the joint state, and (b) its
    subject vector, from which the joint fit is restarted. A candidate is kept
    only if the joint RMS drops by at least 5%.
    """
    for n in active:
        single = fit([images[n]], model, config)
        if single.images[0].dropped:
            continue
        alone = _evaluate(model, [images[n]],
                          _State(single.alpha, [single.images[0].beta], [single.images[0].camera]), [0])
        if not np.array_equal(alone.anchors[0], state.anchors[n]):
            tables = {m: state.anchors[m] for m in active}
            tables[n] = alone.anchors[0]
            trial = _polish(model, images, state, active, config, tables, steps=30)
            if trial.rms < 0.95 * state.rms:
                state = trial
        betas = [np.zeros(model.n_expression) for _ in images]
        betas[n] = single.images[0].beta
        V = _workspace(model).shape(single.alpha, np.zeros(model.n_expression))
        cams = list(state.cams)
        try:
            for m in active:
                if m != n:
                    cams[m] = _initial_camera(model, images[m], V)
        except DegenerateConfigurationError:
            continue
        cams[n] = single.images[0].camera
        trial = _stages(model, images, _State(single.alpha, betas, cams), active, config, warm=False)[0]
        if trial.rms < 0.95 * state.rms:
            state = trial
    return state


def _stages(model, images, state: _State, active, config: FitConfig, warm: bool = True):
    """Interior-only warm start, camera-frozen nearest-anchor stage, full fit, local search."""
    interior = [_interior_subset(ls) for ls in images]
    if all(interior[n] is not None for n in active):
        if warm:
            state, _, _, _ = _descend(model, interior, state, active, config)
        state, _, _, _ = _descend(model, images, _State(state.alpha, state.betas, state.cams, nearest=True),
                                  active, config, freeze_cameras=True)
        state = _State(state.alpha, state.betas, state.cams)
    state, history, converged, it = _descend(model, images, state, active, config)
    if converged:
        refined = _refine_contours(model, images, state, active, config)
        if refined.rms < state.rms:
            state = refined
            history.append(state.rms)
    return state, history, converged, it


def _interior_subset(ls: LandmarkSet) -> LandmarkSet | None:
    keep = ls.ids >= len(CONTOUR_IDS)
    if keep.all() or np.sum(keep & (ls.confidence > 0)) < 6:
        return None
    return LandmarkSet(ls.image_id, ls.ids[keep], ls.points[keep], ls.confidence[keep])


def _descend(model, images, state: _State, active, config: FitConfig, freeze_cameras: bool = False):
    """Outer iterations: DLT + RQ camera update, then a damped joint solve.

    The joint solve runs a few damped steps with the current anchors held
    fixed and re-selects anchors afterwards; if that raises the RMS a single
    damped step with re-selection is taken instead.
    """
    state = _evaluate(model, images, state, active)
    history: list[float] = []
    mu = config.damping
    it = 0
    for it in range(1, config.max_iterations + 1):
        if not freeze_cameras:
            trial_cams = list(state.cams)
            for n in active:
                ls = images[n]
                V, anc = state.shapes[n], state.anchors[n]
                try:
                    trial_cams[n], _ = decompose_affine(
                        estimate_affine_camera(V[anc[ls.ids]], ls.points, ls.confidence))
                except DegenerateConfigurationError as exc:
                    log.warning("image %s: camera re-estimation skipped in iteration %d: %s",
                                ls.image_id, it, exc)
            trial = _evaluate(model, images, _State(state.alpha, state.betas, trial_cams, nearest=state.nearest), active)
            if trial.rms <= state.rms:
                state = trial
        polished = _polish(model, images, state, active, config,
                           {n: state.anchors[n] for n in active}, freeze_cameras=freeze_cameras)
        if polished.rms <= state.rms:
            state = polished
        else:
            state, mu = _damped_descent(model, images, state, active, config, mu, freeze_cameras)
        history.append(state.rms)
        if len(history) > 1 and abs(history[-1] - history[-2]) < config.tolerance:
            return state, history, True, it
    return state, history, False, it


def fit(images, model: MorphableModel, config: FitConfig | None = None) -> FitResult:
    """Jointly fit one subject vector, per-image expressions and cameras.

    Starts from the mean head. Each outer iteration re-estimates every camera by
    DLT + RQ on the current anchors (kept when it does not raise the landmark
    RMS), then takes a damped joint step on the block system extended with
    linearized camera corrections. Steps that raise the RMS are retried with
    heavier damping, so the RMS trajectory never increases.

    The pose-dependent jaw anchors make the objective piecewise, with
    self-consistent states one strip step off the truth. To start inside the
    right basin, the loop is first run on the interior (fixed-anchor)
    landmarks only; the full fit then continues from that estimate.
    """
    config = config or FitConfig()
    images = list(images)
    if not images:
        raise ValueError("fit needs at least one landmark set")
    N = len(images)
    state = _State(np.zeros(model.n_subject), [np.zeros(model.n_expression) for _ in range(N)], [None] * N)
    dropped = [False] * N
    for n, ls in enumerate(images):
        try:
            state.cams[n] = _initial_camera(model, ls, model.mean)
        except DegenerateConfigurationError as exc:
            log.warning("image %s dropped: %s", ls.image_id, exc)
            dropped[n] = True
    active = [n for n in range(N) if not dropped[n]]
    if not active:
        raise FitError("camera estimation degenerate for every image")

    state, history, converged, it = _stages(model, images, state, active, config)
    if converged:
        if len(active) > 1:
            swapped = _reseed_from_single_views(model, images, state, active, config)
            if swapped.rms < state.rms:
                state = swapped
                history.append(state.rms)
        # the outer tolerance stops far above the noise floor on clean data;
        # settle the continuous unknowns with the anchors held
        settled = _polish(model, images, state, active, config,
                          {n: state.anchors[n] for n in active}, steps=30)
        if settled.rms < state.rms:
            state = settled
            history.append(state.rms)

    results = []
    for n, ls in enumerate(images):
        cam = state.cams[n]
        if n not in state.shapes:
            results.append(ImageFit(ls.image_id, state.betas[n], cam, float("nan"),
                                    np.full((len(ls.ids), 2), np.nan), True))
            continue
        idx = state.anchors[n][ls.ids]
        rms = _rms(ls.points - project(cam, state.shapes[n][idx]))
        delta = ls.points - project(cam, model.mean[idx])
        results.append(ImageFit(ls.image_id, state.betas[n], cam, rms, delta, dropped[n]))
    return FitResult(state.alpha, results, converged, it, history)


def fit_independent(images, model: MorphableModel, config: FitConfig | None = None) -> list[FitResult]:
    return [fit([ls], model, config) for ls in images]
