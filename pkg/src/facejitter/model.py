"""Linear statistical head-shape model: mean mesh plus subject and expression bases."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

N_LANDMARKS = 68
CONTOUR_IDS = tuple(range(17))  # jawline, pose dependent
INTERIOR_IDS = tuple(range(17, 68))

# 68-point mirror pairs (image-left <-> image-right); unlisted ids are on the midline
_MIRROR_PAIRS = (
    [(i, 16 - i) for i in range(8)]
    + [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]
    + [(31, 35), (32, 34)]
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    + [(60, 64), (61, 63), (65, 67)]
)


def landmark_mirror_table() -> np.ndarray:
    table = np.arange(N_LANDMARKS)
    for a, b in _MIRROR_PAIRS:
        table[a], table[b] = b, a
    return table


@dataclass(frozen=True, eq=False)
class MeshTopology:
    """Fixed mesh connectivity plus landmark and symmetry vertex maps.

    ``landmark_vertex[k]`` is the anchor vertex of interior landmark k and -1 for
    contour-class landmarks. Contour landmark k has ``contour_nominal[k]`` (its
    anchor in the reference frontal view) and an ordered candidate strip
    ``contour_strips[k]`` of vertices crossing the jaw band.
    """

    triangles: np.ndarray
    n_vertices: int
    landmark_vertex: np.ndarray
    contour_nominal: np.ndarray
    contour_strips: tuple
    symmetry: np.ndarray

    def __post_init__(self):
        tri = np.ascontiguousarray(self.triangles, dtype=np.int64)
        object.__setattr__(self, "triangles", tri)
        object.__setattr__(self, "landmark_vertex", np.asarray(self.landmark_vertex, dtype=np.int64))
        object.__setattr__(self, "contour_nominal", np.asarray(self.contour_nominal, dtype=np.int64))
        object.__setattr__(self, "symmetry", np.asarray(self.symmetry, dtype=np.int64))
        object.__setattr__(self, "contour_strips",
                           tuple(np.asarray(s, dtype=np.int64) for s in self.contour_strips))
        self.validate()

    def validate(self):
        n = self.n_vertices
        tri = self.triangles
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if tri.size and (tri.min() < 0 or tri.max() >= n):
            raise ValueError("triangle index out of range")
        if np.any((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])):
            raise ValueError("degenerate triangle (repeated vertex index)")
        sym = self.symmetry
        if sym.shape != (n,) or sym.min() < 0 or sym.max() >= n:
            raise ValueError("symmetry map must map every vertex to a vertex")
        if not np.array_equal(sym[sym], np.arange(n)):
            raise ValueError("symmetry map is not an involution")
        lv = self.landmark_vertex
        if lv.shape != (N_LANDMARKS,):
            raise ValueError(f"landmark map must cover {N_LANDMARKS} landmarks")
        contour = np.asarray(CONTOUR_IDS)
        interior = np.asarray(INTERIOR_IDS)
        if np.any(lv[contour] != -1):
            raise ValueError("contour landmarks must not carry a fixed anchor")
        if np.any(lv[interior] < 0) or np.any(lv[interior] >= n):
            raise ValueError("interior landmark anchor out of range")
        if self.contour_nominal.shape != (len(CONTOUR_IDS),) or len(self.contour_strips) != len(CONTOUR_IDS):
            raise ValueError("every contour landmark needs a nominal anchor and a strip")
        for k, strip in enumerate(self.contour_strips):
            if strip.size == 0 or strip.min() < 0 or strip.max() >= n:
                raise ValueError(f"contour strip {k} is empty or out of range")

    @property
    def jaw_band(self) -> np.ndarray:
        return np.unique(np.concatenate(self.contour_strips))


@dataclass(frozen=True)
class ShapeCoefficients:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def zeros(cls, model: "MorphableModel") -> "ShapeCoefficients":
        return cls(np.zeros(model.n_subject), np.zeros(model.n_expression))


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape with sigma-scaled PCA bases (units: mm per standard deviation)."""

    topology: MeshTopology
    mean: np.ndarray             # (N, 3)
    subject_basis: np.ndarray    # (k_s, N, 3), sigma-scaled
    subject_sigma: np.ndarray    # (k_s,)
    expression_basis: np.ndarray  # (k_e, N, 3), sigma-scaled
    expression_sigma: np.ndarray  # (k_e,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.topology.n_vertices
        for name in ("mean", "subject_basis", "subject_sigma", "expression_basis", "expression_sigma"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.mean.shape != (n, 3):
            raise ValueError(f"mean must be ({n}, 3)")
        for basis, sigma in ((self.subject_basis, self.subject_sigma),
                             (self.expression_basis, self.expression_sigma)):
            if basis.ndim != 3 or basis.shape[1:] != (n, 3) or sigma.shape != (basis.shape[0],):
                raise ValueError("basis must be (k, N, 3) with matching sigma")

    @property
    def n_vertices(self) -> int:
        return self.topology.n_vertices

    @property
    def n_subject(self) -> int:
        return self.subject_basis.shape[0]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[0]


def instantiate_shape(model: MorphableModel, coeffs: ShapeCoefficients) -> np.ndarray:
    """``V = mean + sum(alpha_i A_i) + sum(beta_j B_j)``."""
    alpha = np.asarray(coeffs.alpha, dtype=float)
    beta = np.asarray(coeffs.beta, dtype=float)
    if alpha.shape != (model.n_subject,) or beta.shape != (model.n_expression,):
        raise ValueError(
            f"coefficient lengths {alpha.shape}/{beta.shape} do not match "
            f"basis counts {model.n_subject}/{model.n_expression}")
    V = model.mean.copy()
    if alpha.size:
        V += np.tensordot(alpha, model.subject_basis, axes=1)
    if beta.size:
        V += np.tensordot(beta, model.expression_basis, axes=1)
    return V


class PCABasis(NamedTuple):
    mean: np.ndarray        # (N, 3)
    directions: np.ndarray  # (rank, N, 3), orthonormal when flattened
    sigma: np.ndarray       # (rank,)

    @property
    def scaled(self) -> np.ndarray:
        return self.directions * self.sigma[:, None, None]


def build_pca_basis(samples, rank: int) -> PCABasis:
    X = np.asarray(samples, dtype=float)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError("samples must be (S, N, 3)")
    S, N, _ = X.shape
    if S < 2:
        raise ValueError("PCA needs at least 2 samples")
    if rank < 0 or rank > min(S - 1, 3 * N):
        raise ValueError(f"rank {rank} exceeds min(samples - 1, 3N) = {min(S - 1, 3 * N)}")
    # offsetting by the first sample keeps the mean exact for identical samples
    mean = X[0] + (X - X[0]).mean(axis=0)
    D = (X - mean).reshape(S, 3 * N)
    _, sv, vt = np.linalg.svd(D, full_matrices=False)
    # singular values at rounding level are numerically zero variance
    sv = np.where(sv > np.finfo(float).eps * max(S, 3 * N) * np.abs(X).max(), sv, 0.0)
    vt = vt[:rank]
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(rank), idx])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    sigma = sv[:rank] / np.sqrt(S - 1)
    return PCABasis(mean, vt.reshape(rank, N, 3), sigma)


def project_to_basis(basis: PCABasis, sample: np.ndarray) -> np.ndarray:
    """Coefficients in sigma units (zero where sigma is zero)."""
    d = (np.asarray(sample, dtype=float) - basis.mean).ravel()
    proj = basis.directions.reshape(len(basis.sigma), -1) @ d
    out = np.zeros_like(proj)
    nz = basis.sigma > 0
    out[nz] = proj[nz] / basis.sigma[nz]
    return out


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted unit vertex normals and a mask of isolated vertices."""
    V = np.asarray(vertices, dtype=float)
    if isinstance(triangles, MeshTopology):
        triangles = triangles.triangles
    tri = np.asarray(triangles)
    # unnormalized cross product carries twice the triangle area
    face = np.cross(V[tri[:, 1]] - V[tri[:, 0]], V[tri[:, 2]] - V[tri[:, 0]])
    idx = tri.ravel()
    acc = np.empty_like(V)
    for c in range(3):
        acc[:, c] = np.bincount(idx, weights=np.repeat(face[:, c], 3), minlength=len(V))
    norm = np.linalg.norm(acc, axis=1)
    isolated = norm == 0
    out = np.zeros_like(V)
    out[~isolated] = acc[~isolated] / norm[~isolated, None]
    return out, isolated
