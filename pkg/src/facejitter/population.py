"""Procedural head template and synthetic head populations.

The template is a latitude/longitude ellipsoid grid with facial relief. The
longitude grid is symmetric under x -> -x so the mirror map is exact, and the
quad diagonals are mirrored across the midline so the triangulation is too.

Template parameters are (theta, phi): theta is longitude about the vertical
axis (0 = facing the camera, negative = image left), phi is latitude (positive
= up, toward the crown).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (CONTOUR_IDS, N_LANDMARKS, MeshTopology, MorphableModel,
                    build_pca_basis, landmark_mirror_table)

HEAD_RADII = (78.0, 108.0, 95.0)  # half width, half height, half depth (mm)

# (theta, phi) for image-left and midline landmarks; the rest are mirrored
_INTERIOR_PARAMS = {
    17: (-0.62, 0.33), 18: (-0.50, 0.37), 19: (-0.37, 0.39), 20: (-0.24, 0.38), 21: (-0.11, 0.35),
    27: (0.0, 0.20), 28: (0.0, 0.11), 29: (0.0, 0.02), 30: (0.0, -0.07),
    31: (-0.13, -0.14), 32: (-0.07, -0.16), 33: (0.0, -0.17),
    36: (-0.47, 0.19), 37: (-0.39, 0.24), 38: (-0.27, 0.24), 39: (-0.19, 0.19),
    40: (-0.27, 0.14), 41: (-0.39, 0.14),
    48: (-0.28, -0.37), 49: (-0.18, -0.31), 50: (-0.08, -0.28), 51: (0.0, -0.29),
    59: (-0.18, -0.44), 58: (-0.08, -0.47), 57: (0.0, -0.48),
    60: (-0.22, -0.38), 61: (-0.10, -0.34), 62: (0.0, -0.34),
    67: (-0.10, -0.42), 66: (0.0, -0.42),
}

# frontal jawline for the image-left half plus the chin (ids 0..8)
_CONTOUR_PARAMS = [
    (-1.52, 0.10), (-1.52, -0.05), (-1.50, -0.20), (-1.45, -0.36), (-1.36, -0.52),
    (-1.20, -0.68), (-0.95, -0.82), (-0.55, -0.94), (0.0, -1.02),
]


@dataclass(frozen=True)
class HeadGrid:
    n_lon: int
    n_lat: int
    theta: np.ndarray  # per-vertex longitude
    phi: np.ndarray    # per-vertex latitude
    triangles: np.ndarray
    symmetry: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.theta)

    def ring_index(self, i: int, j: int) -> int:
        return 1 + i * self.n_lon + (j % self.n_lon)


def make_grid(n_lon: int = 96, n_lat: int = 51) -> HeadGrid:
    if n_lon < 8 or n_lon % 2 or n_lat < 4:
        raise ValueError("n_lon must be an even number >= 8 and n_lat >= 4")
    lat = np.pi / 2 - np.pi * (np.arange(n_lat) + 1) / (n_lat + 1)
    j = np.arange(n_lon)
    lon = 2 * np.pi * j / n_lon
    lon = np.where(lon > np.pi, lon - 2 * np.pi, lon)
    theta = np.concatenate([[0.0], np.tile(lon, n_lat), [0.0]])
    phi = np.concatenate([[np.pi / 2], np.repeat(lat, n_lon), [-np.pi / 2]])
    n = len(theta)
    top, bottom = 0, n - 1

    def rid(i, jj):
        return 1 + i * n_lon + (jj % n_lon)

    tris = []
    half = n_lon // 2
    for jj in range(n_lon):
        tris.append((top, rid(0, jj + 1), rid(0, jj)))
        tris.append((bottom, rid(n_lat - 1, jj), rid(n_lat - 1, jj + 1)))
    for i in range(n_lat - 1):
        for jj in range(n_lon):
            a, b = rid(i, jj), rid(i, jj + 1)
            c, d = rid(i + 1, jj + 1), rid(i + 1, jj)
            if jj < half:
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                tris.append((a, b, d))
                tris.append((b, c, d))
    triangles = np.array(tris, dtype=np.int64)

    sym = np.empty(n, dtype=np.int64)
    sym[top], sym[bottom] = top, bottom
    for i in range(n_lat):
        for jj in range(n_lon):
            sym[rid(i, jj)] = rid(i, (n_lon - jj) % n_lon)
    return HeadGrid(n_lon, n_lat, theta, phi, triangles, sym)


def _gauss(theta, phi, t0, p0, wt, wp):
    dt = np.angle(np.exp(1j * (theta - t0)))
    return np.exp(-0.5 * ((dt / wt) ** 2 + ((phi - p0) / wp) ** 2))


def _sym_gauss(theta, phi, t0, p0, wt, wp):
    """Bump at (+-t0, p0), identical on both sides."""
    return _gauss(np.abs(theta), phi, abs(t0), p0, wt, wp)


def _front(theta, phi):
    return np.clip(np.cos(theta), 0.0, None) * np.clip(np.cos(phi), 0.0, None)


# Head depth is tied to width: an independent depth scale would trade off
# exactly against yaw under orthographic projection of the landmarks.
SUBJECT_PARAMS = ("width", "height", "jaw", "brow", "nose_len", "nose_width",
                  "chin", "cheek", "eye_depth", "forehead", "mouth_height")
N_SUBJECT_BUMPS = 20
EXPRESSION_PARAMS = ("mouth_open", "smile", "smile_left", "smile_right", "brow_raise",
                     "brow_frown", "eye_close", "pucker", "jaw_shift", "cheek_puff")


def _bump_centers():
    # fixed pseudo-random but seed-independent layout; theta >= 0 side only
    g = np.random.default_rng(12345)
    t = g.uniform(0.0, 1.6, N_SUBJECT_BUMPS)
    p = g.uniform(-1.0, 1.0, N_SUBJECT_BUMPS)
    w = g.uniform(0.25, 0.5, N_SUBJECT_BUMPS)
    return t, p, w


def head_vertices(grid: HeadGrid, subject: dict | None = None, bumps=None,
                  expression: dict | None = None) -> np.ndarray:
    """Vertex positions of the parametric head.

    ``subject`` and ``expression`` map parameter names to unitless amounts
    (0 = template). ``bumps`` are amplitudes (mm) of the extra symmetric bumps.
    """
    sp = {k: 0.0 for k in SUBJECT_PARAMS}
    sp.update(subject or {})
    ep = {k: 0.0 for k in EXPRESSION_PARAMS}
    ep.update(expression or {})
    th, ph = grid.theta, grid.phi
    a, b, c = HEAD_RADII

    # radial relief (mm) along the ellipsoid direction, symmetric in theta
    relief = (
        22.0 * (1 + 0.15 * sp["nose_len"]) * _gauss(th, ph, 0.0, -0.02, 0.10 * (1 + 0.15 * sp["nose_width"]), 0.16)
        + 5.0 * _gauss(th, ph, 0.0, -0.14, 0.16, 0.06)
        + (4.0 + 1.5 * sp["brow"]) * _sym_gauss(th, ph, 0.33, 0.38, 0.25, 0.07)
        - (6.0 + 2.0 * sp["eye_depth"]) * _sym_gauss(th, ph, 0.33, 0.19, 0.14, 0.07)
        + 4.0 * _gauss(th, ph, 0.0, -0.31, 0.22, 0.06)
        + 3.0 * _gauss(th, ph, 0.0, -0.45, 0.18, 0.05)
        + (8.0 + 3.0 * sp["chin"]) * _gauss(th, ph, 0.0, -0.75, 0.25, 0.12)
        + (3.0 + 2.0 * sp["cheek"]) * _sym_gauss(th, ph, 0.55, -0.12, 0.25, 0.2)
        + 3.0 * sp["forehead"] * _gauss(th, ph, 0.0, 0.7, 0.6, 0.25)
        + 4.0 * sp["jaw"] * _sym_gauss(th, ph, 0.5, -0.7, 0.45, 0.2)
    )
    if bumps is not None:
        t0, p0, w0 = _bump_centers()
        for amp, t, p, w in zip(bumps, t0, p0, w0):
            relief = relief + amp * _sym_gauss(th, ph, t, p, w, w)

    cphi = np.cos(ph)
    x = a * (1 + 0.045 * sp["width"]) * cphi * np.sin(th)
    y = -b * (1 + 0.035 * sp["height"]) * np.sin(ph)
    z = c * (1 + 0.045 * sp["width"]) * cphi * np.cos(th)
    P = np.stack([x, y, z], axis=1)
    radial = P / np.linalg.norm(P, axis=1, keepdims=True)
    P = P + relief[:, None] * radial

    front = _front(th, ph)
    # mouth region height and brow vertical offset move along y
    P[:, 1] += 3.0 * sp["mouth_height"] * _gauss(th, ph, 0.0, -0.38, 0.3, 0.12)
    P[:, 1] -= 2.0 * sp["brow"] * _sym_gauss(th, ph, 0.33, 0.38, 0.3, 0.1)
    P[:, 2] += 6.0 * sp["jaw"] * front * _gauss(th, ph, 0.0, -0.8, 0.8, 0.2)

    # expressions (not necessarily symmetric)
    lower = 1.0 / (1.0 + np.exp((ph + 0.40) / 0.03))  # below the mouth line
    jaw_region = lower * np.clip(np.cos(th), 0.0, None) ** 2
    P[:, 1] += 10.0 * ep["mouth_open"] * jaw_region
    P[:, 2] -= 3.0 * ep["mouth_open"] * jaw_region
    for name, sides in (("smile", (-1, 1)), ("smile_left", (-1,)), ("smile_right", (1,))):
        for side in sides:
            g = _gauss(th, ph, side * 0.28, -0.37, 0.12, 0.09)
            P[:, 1] -= 4.0 * ep[name] * g
            P[:, 0] += side * 3.0 * ep[name] * g
            P[:, 2] -= 1.5 * ep[name] * g
    brow = _sym_gauss(th, ph, 0.33, 0.38, 0.25, 0.09)
    P[:, 1] -= 4.0 * ep["brow_raise"] * brow
    inner_brow = _sym_gauss(th, ph, 0.15, 0.36, 0.1, 0.07)
    P[:, 1] += 3.0 * ep["brow_frown"] * inner_brow
    P[:, 0] -= np.sign(th) * 2.0 * ep["brow_frown"] * inner_brow
    lid = _sym_gauss(th, ph, 0.33, 0.24, 0.12, 0.04)
    P[:, 1] += 3.0 * ep["eye_close"] * lid
    lips = _gauss(th, ph, 0.0, -0.38, 0.18, 0.08)
    P[:, 2] += 5.0 * ep["pucker"] * lips
    P[:, 0] -= 3.0 * ep["pucker"] * np.sin(th) * lips
    P[:, 0] += 5.0 * ep["jaw_shift"] * jaw_region
    cheek = _sym_gauss(th, ph, 0.5, -0.2, 0.22, 0.18)
    P += (4.0 * ep["cheek_puff"] * cheek)[:, None] * radial
    return P


def symmetrize(vertices: np.ndarray, symmetry: np.ndarray) -> np.ndarray:
    mirrored = vertices[symmetry] * np.array([-1.0, 1.0, 1.0])
    return 0.5 * (vertices + mirrored)


def _nearest_vertex(grid: HeadGrid, t: float, p: float, exclude=()) -> int:
    dt = np.angle(np.exp(1j * (grid.theta - t))) * np.cos(p)
    d = dt ** 2 + (grid.phi - p) ** 2
    if exclude:
        d = d.copy()
        d[list(exclude)] = np.inf
    return int(np.argmin(d))


def _plane_strip(template: np.ndarray, nominal: int, start: float = 0.6,
                 past_rim: float = 0.8) -> np.ndarray:
    """Ordered vertices along the cut through the nominal jaw anchor.

    The cutting plane contains the frontal viewing axis and the image-plane
    direction from the head center to the anchor. Along it the polar angle
    ``psi`` runs from the face (psi = 0) over the frontal rim (psi = pi/2) to
    the back; the strip covers ``start <= psi <= pi/2 + past_rim``.
    """
    d = template[nominal, :2]
    e = np.array([d[0], d[1], 0.0]) / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    dirs = template / np.linalg.norm(template, axis=1, keepdims=True)
    out: list[int] = []
    for psi in np.linspace(start, np.pi / 2 + past_rim, 800):
        v = int(np.argmax(dirs @ (np.sin(psi) * e + np.cos(psi) * z)))
        if not out or out[-1] != v:
            if v in out:
                break
            out.append(v)
    return np.array(out, dtype=np.int64)


def make_topology(grid: HeadGrid) -> MeshTopology:
    mirror = landmark_mirror_table()
    sym = grid.symmetry
    lv = np.full(N_LANDMARKS, -1, dtype=np.int64)
    used: set[int] = set()
    for k in sorted(_INTERIOR_PARAMS):
        t, p = _INTERIOR_PARAMS[k]
        v = _nearest_vertex(grid, t, p, exclude=used)
        lv[k] = v
        lv[mirror[k]] = sym[v]
        used.update((v, int(sym[v])))

    template = template_vertices(grid)
    nominal = np.zeros(len(CONTOUR_IDS), dtype=np.int64)
    strips: list = [None] * len(CONTOUR_IDS)
    for k, (t, p) in enumerate(_CONTOUR_PARAMS):
        nominal[k] = _nearest_vertex(grid, t, p)
        strips[k] = _plane_strip(template, nominal[k])
        m = mirror[k]
        nominal[m] = sym[nominal[k]]
        strips[m] = sym[strips[k]]
    return MeshTopology(grid.triangles, grid.n_vertices, lv, nominal, tuple(strips), sym)


def template_vertices(grid: HeadGrid) -> np.ndarray:
    return symmetrize(head_vertices(grid), grid.symmetry)


def gen_synthetic_population(seed: int, count: int, mode: str = "subject",
                             grid: HeadGrid | None = None) -> np.ndarray:
    """Deterministic population of head meshes, shape (count, N, 3).

    Subject mode varies intrinsic shape and is exactly bilaterally symmetric;
    expression mode deforms the template with random expression fields.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if mode not in ("subject", "expression"):
        raise ValueError(f"unknown population mode {mode!r}")
    grid = grid or make_grid()
    rng = np.random.default_rng(seed)
    out = np.empty((count, grid.n_vertices, 3))
    for i in range(count):
        if mode == "subject":
            params = dict(zip(SUBJECT_PARAMS, rng.standard_normal(len(SUBJECT_PARAMS))))
            bumps = 1.5 * rng.standard_normal(N_SUBJECT_BUMPS)
            V = head_vertices(grid, subject=params, bumps=bumps)
            out[i] = symmetrize(V, grid.symmetry)
        else:
            params = dict(zip(EXPRESSION_PARAMS, rng.uniform(-1.0, 1.0, len(EXPRESSION_PARAMS))))
            params["mouth_open"] = abs(params["mouth_open"])
            params["eye_close"] = abs(params["eye_close"])
            out[i] = head_vertices(grid, expression=params)
    return out


def build_synthetic_model(seed: int = 0, n_subjects: int = 200, n_expressions: int = 60,
                          rank_subject: int = 50, rank_expression: int = 20,
                          n_lon: int = 96, n_lat: int = 51) -> MorphableModel:
    grid = make_grid(n_lon, n_lat)
    topo = make_topology(grid)
    ss = np.random.SeedSequence(seed)
    s_seed, e_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    subjects = gen_synthetic_population(s_seed, n_subjects, "subject", grid)
    expressions = gen_synthetic_population(e_seed, n_expressions, "expression", grid)
    pca_s = build_pca_basis(subjects, rank_subject)
    pca_e = build_pca_basis(expressions, rank_expression)
    meta = {"generator": "procedural-head", "seed": seed, "n_subjects": n_subjects,
            "n_expressions": n_expressions, "n_lon": n_lon, "n_lat": n_lat}
    return MorphableModel(topo, pca_s.mean, pca_s.scaled, pca_s.sigma,
                          pca_e.scaled, pca_e.sigma, meta)
