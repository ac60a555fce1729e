"""Bounding-volume hierarchy over mesh triangles and nearest-hit ray casting.

Construction is a median split on the longest centroid axis. Queries run in
numba kernels, parallel over rays. Intersection uses Moller-Trumbore with no
back-face culling; among hits at exactly equal depth the lowest triangle id
wins, so the BVH and the brute-force scan return identical results.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the TBB build shipped with some distributions is too old for numba
    numba.config.THREADING_LAYER = "omp"

LEAF_SIZE = 4
NO_HIT = -1


@dataclass(frozen=True, eq=False)
class TriangleBVH:
    vertices: np.ndarray   # (N, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    box_lo: np.ndarray     # (M, 3) per node
    box_hi: np.ndarray     # (M, 3)
    left: np.ndarray       # (M,) child node or -1 for a leaf
    right: np.ndarray      # (M,)
    start: np.ndarray      # (M,) leaf range into ``order``
    count: np.ndarray      # (M,)
    order: np.ndarray      # (T,) triangle ids grouped by leaf

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def leaves(self) -> list[np.ndarray]:
        return [self.order[s:s + c] for s, c, l in zip(self.start, self.count, self.left) if l < 0]


class Hit(NamedTuple):
    triangle: int
    barycentric: np.ndarray  # weights of the triangle's three vertices
    depth: float


class RayHits(NamedTuple):
    triangle: np.ndarray     # (R,) int64, -1 on miss
    barycentric: np.ndarray  # (R, 3)
    depth: np.ndarray        # (R,), +inf on miss

    @property
    def hit(self) -> np.ndarray:
        return self.triangle >= 0


def build_bvh(vertices, triangles, leaf_size: int = LEAF_SIZE) -> TriangleBVH:
    V = np.ascontiguousarray(vertices, dtype=np.float64)
    if hasattr(triangles, "triangles"):
        triangles = triangles.triangles
    T = np.ascontiguousarray(triangles, dtype=np.int64)
    if T.ndim != 2 or T.shape[1] != 3 or len(T) == 0:
        raise ValueError("build_bvh needs a non-empty (T, 3) triangle array")
    corners = V[T]
    tlo, thi = corners.min(axis=1), corners.max(axis=1)
    cent = corners.mean(axis=1)

    order = np.arange(len(T))
    lo, hi, left, right, start, count = [], [], [], [], [], []
    # explicit stack of (node id, first, last); children are allocated on split
    def new_node(a, b):
        ids = order[a:b]
        lo.append(tlo[ids].min(axis=0))
        hi.append(thi[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(a)
        count.append(b - a)
        return len(lo) - 1

    stack = [(new_node(0, len(T)), 0, len(T))]
    while stack:
        node, a, b = stack.pop()
        if b - a <= leaf_size:
            continue
        ids = order[a:b]
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the split deterministic under ties
        order[a:b] = ids[np.argsort(c[:, axis], kind="stable")]
        m = (a + b) // 2
        l_node = new_node(a, m)
        r_node = new_node(m, b)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((r_node, m, b))
        stack.append((l_node, a, m))

    return TriangleBVH(V, T, np.array(lo), np.array(hi), np.array(left, dtype=np.int64),
                       np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
                       np.array(count, dtype=np.int64), order)


@numba.njit(cache=True, inline="always")
def _tri_hit(V, tri, t, o, d):
    """Moller-Trumbore; returns (depth, b1, b2) with depth = inf on a miss."""
    i0, i1, i2 = tri[t, 0], tri[t, 1], tri[t, 2]
    e1x = V[i1, 0] - V[i0, 0]
    e1y = V[i1, 1] - V[i0, 1]
    e1z = V[i1, 2] - V[i0, 2]
    e2x = V[i2, 0] - V[i0, 0]
    e2y = V[i2, 1] - V[i0, 1]
    e2z = V[i2, 2] - V[i0, 2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx = o[0] - V[i0, 0]
    sy = o[1] - V[i0, 1]
    sz = o[2] - V[i0, 2]
    b1 = (sx * px + sy * py + sz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    b2 = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return np.inf, 0.0, 0.0
    depth = (e2x * qx + e2y * qy + e2z * qz) * inv
    if depth <= 0.0:
        return np.inf, 0.0, 0.0
    return depth, b1, b2


@numba.njit(cache=True, inline="always")
def _slab(lo, hi, node, o, inv_d, t_max):
    t0 = 0.0
    t1 = t_max
    for a in range(3):
        ta = (lo[node, a] - o[a]) * inv_d[a]
        tb = (hi[node, a] - o[a]) * inv_d[a]
        if ta > tb:
            ta, tb = tb, ta
        # NaN from 0 * inf (ray in the slab plane) keeps the ray alive
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return t0 <= t1


@numba.njit(cache=True, parallel=True)
def _cast_bvh(V, tri, lo, hi, left, right, start, count, order, origins, dirs, t_max,
              out_tri, out_b, out_t, out_tests):
    for r in numba.prange(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        inv_d = np.empty(3)
        for a in range(3):
            inv_d[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
        best_t = t_max[r]
        best_id = -1
        bb1 = 0.0
        bb2 = 0.0
        tests = 0
        stack = np.empty(64, dtype=np.int64)
        sp = 0
        if _slab(lo, hi, 0, o, inv_d, best_t):
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _slab(lo, hi, node, o, inv_d, best_t):
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    t = order[k]
                    tests += 1
                    depth, b1, b2 = _tri_hit(V, tri, t, o, d)
                    if depth < best_t or (depth == best_t and best_id >= 0 and t < best_id):
                        best_t = depth
                        best_id = t
                        bb1 = b1
                        bb2 = b2
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        out_tri[r] = best_id
        out_tests[r] = tests
        if best_id >= 0:
            out_t[r] = best_t
            out_b[r, 0] = 1.0 - bb1 - bb2
            out_b[r, 1] = bb1
            out_b[r, 2] = bb2
        else:
            out_t[r] = np.inf


@numba.njit(cache=True, parallel=True)
def _cast_brute(V, tri, origins, dirs, out_tri, out_b, out_t):
    for r in numba.prange(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        best_t = np.inf
        best_id = -1
        bb1 = 0.0
        bb2 = 0.0
        for t in range(tri.shape[0]):
            depth, b1, b2 = _tri_hit(V, tri, t, o, d)
            if depth < best_t:
                best_t = depth
                best_id = t
                bb1 = b1
                bb2 = b2
        out_tri[r] = best_id
        out_t[r] = best_t
        if best_id >= 0:
            out_b[r, 0] = 1.0 - bb1 - bb2
            out_b[r, 1] = bb1
            out_b[r, 2] = bb2


def _ray_arrays(origins, directions):
    O = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    D = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    if D.shape[0] == 1 and O.shape[0] > 1:
        D = np.ascontiguousarray(np.broadcast_to(D, O.shape))
    if O.shape != D.shape or O.shape[1] != 3:
        raise ValueError("origins and directions must be (R, 3)")
    return O, D


def intersect_rays(bvh: TriangleBVH, origins, directions, max_depth=None,
                   return_tests: bool = False):
    """Nearest hit per ray, or ``(hits, triangle tests per ray)``.

    ``max_depth`` (scalar or per ray) limits the search to hits strictly
    nearer than it; used for occlusion rays.
    """
    O, D = _ray_arrays(origins, directions)
    R = len(O)
    t_max = np.full(R, np.inf) if max_depth is None else np.ascontiguousarray(
        np.broadcast_to(np.asarray(max_depth, dtype=np.float64), (R,)))
    out_tri = np.empty(R, dtype=np.int64)
    out_b = np.zeros((R, 3))
    out_t = np.empty(R)
    tests = np.empty(R, dtype=np.int64)
    _cast_bvh(bvh.vertices, bvh.triangles, bvh.box_lo, bvh.box_hi, bvh.left, bvh.right,
              bvh.start, bvh.count, bvh.order, O, D, t_max, out_tri, out_b, out_t, tests)
    hits = RayHits(out_tri, out_b, out_t)
    return (hits, tests) if return_tests else hits


def intersect_ray(bvh: TriangleBVH, origin, direction) -> Hit | None:
    hits = intersect_rays(bvh, np.asarray(origin)[None], np.asarray(direction)[None])
    if hits.triangle[0] < 0:
        return None
    return Hit(int(hits.triangle[0]), hits.barycentric[0], float(hits.depth[0]))


def intersect_brute_force(vertices, triangles, origins, directions) -> RayHits:
    """All-triangle scan with the same intersection test and tie-break."""
    V = np.ascontiguousarray(vertices, dtype=np.float64)
    T = np.ascontiguousarray(triangles, dtype=np.int64)
    O, D = _ray_arrays(origins, directions)
    R = len(O)
    out_tri = np.empty(R, dtype=np.int64)
    out_b = np.zeros((R, 3))
    out_t = np.empty(R)
    _cast_brute(V, T, O, D, out_tri, out_b, out_t)
    return RayHits(out_tri, out_b, out_t)
