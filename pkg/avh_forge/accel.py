"""
Bounding-volume hierarchy over a triangle mesh.

The hierarchy is flattened into node arrays (box bounds, child links and face
ranges into a reordered face list). Queries are batched: a set of rays (or
points) descends the tree together and is narrowed at every node, so a query
touches exactly the faces an exhaustive scan would accept.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from .mesh import DegenerateMeshError, TriMesh, compute_normals

logger = logging.getLogger(__name__)

_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class AccelConfig:
    """
    :param self_hit_fraction: Self-hit epsilon as a fraction of the mesh
      bounding-box diagonal.
    :param leaf_size: Maximum number of faces per leaf.
    """

    self_hit_fraction: float = 1e-6
    leaf_size: int = 4

    def __post_init__(self):
        if self.self_hit_fraction < 0:
            raise AccelError("self_hit_fraction must be nonnegative")
        if self.leaf_size < 1:
            raise AccelError("leaf_size must be at least 1")


class RayHit(NamedTuple):
    position: np.ndarray
    face_index: int
    barycentric: np.ndarray
    distance: float
    hit_normal: np.ndarray


@dataclass(frozen=True)
class RayHits:
    """Nearest hits of a batch of rays; ``face_index`` is -1 where a ray missed."""

    face_index: np.ndarray
    distance: np.ndarray
    barycentric: np.ndarray
    position: np.ndarray
    normal: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.face_index >= 0

    def __len__(self):
        return len(self.face_index)

    def __getitem__(self, i) -> Optional[RayHit]:
        if self.face_index[i] < 0:
            return None
        return RayHit(
            position=self.position[i],
            face_index=int(self.face_index[i]),
            barycentric=self.barycentric[i],
            distance=float(self.distance[i]),
            hit_normal=self.normal[i],
        )


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def intersect_ray_triangles(origins, dirs, v0, v1, v2, t_min, t_max):
    """Möller-Trumbore test of every ray against every triangle.

    Edges and corners count as inside. Rays parallel to a triangle's plane and
    degenerate triangles never hit.

    :param origins: ``(R, 3)``
    :param dirs: ``(R, 3)``
    :param v0: ``(T, 3)`` first corners (and ``v1``, ``v2`` likewise).
    :param t_min: ``(R,)`` lower bound on accepted distances.
    :param t_max: ``(R,)`` upper bound on accepted distances.
    :returns: ``(t, u, v)`` arrays of shape ``(R, T)``; ``t`` is ``inf`` on misses.
    """
    o = origins[:, None, :]
    d = dirs[:, None, :]
    e1 = (v1 - v0)[None, :, :]
    e2 = (v2 - v0)[None, :, :]
    p = np.cross(d, e2)
    det = _dot(e1, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o - v0[None, :, :]
        u = _dot(s, p) * inv
        q = np.cross(s, e1)
        v = _dot(d, q) * inv
        t = _dot(e2, q) * inv
        ok = (
            (det != 0)
            & (u >= 0.0)
            & (v >= 0.0)
            & (u + v <= 1.0)
            & (t >= t_min[:, None])
            & (t <= t_max[:, None])
        )
    return np.where(ok, t, np.inf), np.where(ok, u, 0.0), np.where(ok, v, 0.0)


def closest_point_on_triangles(points, a, b, c):
    """Closest point of triangle ``(a, b, c)`` to ``points``, broadcasting over
    leading dimensions (region tests after Ericson, *Real-Time Collision Detection*).

    Degenerate triangles give NaN.
    """
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = points - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = points - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom
    conditions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    choices = [
        np.broadcast_to(a, ap.shape),
        np.broadcast_to(b, ap.shape),
        a + t_ab[..., None] * ab,
        np.broadcast_to(c, ap.shape),
        a + t_ac[..., None] * ac,
        b + t_bc[..., None] * (c - b),
    ]
    interior = a + ab * v_in[..., None] + ac * w_in[..., None]
    conditions = [np.broadcast_to(cond[..., None], ap.shape) for cond in conditions]
    return np.select(conditions, choices, default=interior)


class SurfaceAccel:
    """Immutable BVH over one :class:`TriMesh`.

    Safe to query from several threads at once: every query only reads the
    node arrays.

    :param mesh: The mesh to index.
    :param config: Build and query settings.
    """

    def __init__(self, mesh: TriMesh, config: Optional[AccelConfig] = None):
        if mesh.n_faces == 0:
            raise AccelError("cannot build an acceleration structure over an empty mesh")
        self.config = config or AccelConfig()
        if mesh.vertex_normals is None:
            try:
                mesh = compute_normals(mesh)
            except DegenerateMeshError:
                logger.warning("building an acceleration structure over a degenerate mesh")
        self.mesh = mesh
        self.epsilon = self.config.self_hit_fraction * mesh.bbox_diagonal()
        tri = mesh.corners()
        self._v0 = tri[:, 0].copy()
        self._v1 = tri[:, 1].copy()
        self._v2 = tri[:, 2].copy()
        self._face_normals = mesh.face_normals()
        self._build(tri)
        used = np.unique(mesh.faces)
        self._vertex_ids = used
        self._kdtree = cKDTree(mesh.vertices[used])
        for array in (self._v0, self._v1, self._v2, self._face_normals, self._order):
            array.setflags(write=False)
        logger.debug(f"Built BVH with {self.n_nodes} nodes over {mesh.n_faces} faces")

    def _build(self, tri):
        fmin = tri.min(axis=1)
        fmax = tri.max(axis=1)
        centroids = tri.mean(axis=1)
        pad = 1e-7 * self.mesh.bbox_diagonal() + 1e-12
        order = np.arange(len(tri))
        box_min, box_max, left, right, start, count = [], [], [], [], [], []

        def new_node(s, n):
            idx = order[s : s + n]
            box_min.append(fmin[idx].min(axis=0) - pad)
            box_max.append(fmax[idx].max(axis=0) + pad)
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(n)
            return len(start) - 1

        stack = [new_node(0, len(tri))]
        leaf_size = self.config.leaf_size
        while stack:
            node = stack.pop()
            s, n = start[node], count[node]
            idx = order[s : s + n]
            if n <= leaf_size:
                # ascending face ids inside a leaf make argmin pick the lowest on ties
                order[s : s + n] = np.sort(idx)
                continue
            extent = centroids[idx].max(axis=0) - centroids[idx].min(axis=0)
            axis = int(np.argmax(extent))
            order[s : s + n] = idx[np.argsort(centroids[idx, axis], kind="stable")]
            half = n // 2
            left[node] = new_node(s, half)
            right[node] = new_node(s + half, n - half)
            stack.append(right[node])
            stack.append(left[node])

        self._order = order
        self._box_min = np.array(box_min)
        self._box_max = np.array(box_max)
        self._left = np.array(left)
        self._right = np.array(right)
        self._start = np.array(start)
        self._count = np.array(count)

    @property
    def n_nodes(self) -> int:
        return len(self._start)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self._left < 0))

    def _leaf_faces(self, node):
        s = self._start[node]
        return self._order[s : s + self._count[node]]

    def _ray_box(self, node, origins, dirs, inv, t_min, t_max):
        bmin = self._box_min[node]
        bmax = self._box_max[node]
        parallel = dirs == 0
        inside = (origins >= bmin) & (origins <= bmax)
        with np.errstate(invalid="ignore"):
            t1 = (bmin - origins) * inv
            t2 = (bmax - origins) * inv
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = np.maximum(lo.max(axis=1), t_min)
        t_far = np.minimum(hi.min(axis=1), t_max)
        return t_near <= t_far

    def _traverse_rays(self, origins, dirs, t_min, t_max, any_hit):
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_f = np.full(n, -1, dtype=np.int64)
        best_u = np.zeros(n)
        best_v = np.zeros(n)
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs
        stack = [(0, np.arange(n))]
        while stack:
            node, rays = stack.pop()
            if any_hit:
                rays = rays[best_f[rays] < 0]
            if not rays.size:
                continue
            limit = np.minimum(t_max[rays], best_t[rays])
            inside = self._ray_box(node, origins[rays], dirs[rays], inv[rays], t_min[rays], limit)
            rays = rays[inside]
            if not rays.size:
                continue
            if self._left[node] >= 0:
                stack.append((self._right[node], rays))
                stack.append((self._left[node], rays))
                continue
            faces = self._leaf_faces(node)
            t, u, v = intersect_ray_triangles(
                origins[rays],
                dirs[rays],
                self._v0[faces],
                self._v1[faces],
                self._v2[faces],
                t_min[rays],
                t_max[rays],
            )
            j = np.argmin(t, axis=1)
            rows = np.arange(len(rays))
            tt = t[rows, j]
            ff = faces[j]
            current = best_t[rays]
            better = np.isfinite(tt) & ((tt < current) | ((tt == current) & (ff < best_f[rays])))
            winners = rays[better]
            best_t[winners] = tt[better]
            best_f[winners] = ff[better]
            best_u[winners] = u[rows, j][better]
            best_v[winners] = v[rows, j][better]
        return best_t, best_f, best_u, best_v

    @staticmethod
    def _as_rays(origins, dirs, max_dist, min_dist):
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = len(origins)
        if dirs.shape != origins.shape or origins.shape[1:] != (3,):
            raise ValueError("origins and dirs must both be (N, 3)")
        t_max = np.broadcast_to(np.asarray(max_dist, dtype=np.float64), (n,)).copy()
        t_min = np.broadcast_to(np.asarray(min_dist, dtype=np.float64), (n,)).copy()
        if not (np.all(np.isfinite(origins)) and np.all(np.isfinite(dirs))):
            raise AccelError("ray origins and directions must be finite")
        if np.any(np.isnan(t_max)) or np.any(np.isnan(t_min)):
            raise AccelError("ray distance bounds must not be NaN")
        return origins, dirs, t_min, t_max

    def cast(self, origins, dirs, max_dist=np.inf, min_dist=None) -> RayHits:
        """Nearest hit of every ray with ``min_dist <= t <= max_dist``.

        Ties on equal distance go to the lowest face index. ``min_dist``
        defaults to the self-hit epsilon.
        """
        min_dist = self.epsilon if min_dist is None else min_dist
        origins, dirs, t_min, t_max = self._as_rays(origins, dirs, max_dist, min_dist)
        best_t, best_f, best_u, best_v = self._traverse_rays(origins, dirs, t_min, t_max, False)
        hit = best_f >= 0
        bary = np.stack([1.0 - best_u - best_v, best_u, best_v], axis=-1)
        bary = np.clip(bary, 0.0, 1.0)
        bary /= bary.sum(axis=1, keepdims=True)
        faces = np.where(hit, best_f, 0)
        corners = self.mesh.faces[faces]
        position = np.einsum("nk,nkc->nc", bary, self.mesh.vertices[corners])
        normal = self._face_normals[faces]
        if self.mesh.vertex_normals is not None:
            smooth = np.einsum("nk,nkc->nc", bary, self.mesh.vertex_normals[corners])
            length = np.linalg.norm(smooth, axis=1, keepdims=True)
            normal = np.where(length > 0, smooth / np.where(length > 0, length, 1.0), normal)
        miss = ~hit
        position[miss] = np.nan
        normal = np.where(miss[:, None], np.nan, normal)
        bary[miss] = np.nan
        return RayHits(
            face_index=best_f,
            distance=np.where(hit, best_t, np.inf),
            barycentric=bary,
            position=position,
            normal=normal,
        )

    def occluded(self, origins, dirs, max_dist=np.inf, min_dist=None) -> np.ndarray:
        """Whether each ray hits anything with ``min_dist <= t <= max_dist``."""
        min_dist = self.epsilon if min_dist is None else min_dist
        origins, dirs, t_min, t_max = self._as_rays(origins, dirs, max_dist, min_dist)
        _, best_f, _, _ = self._traverse_rays(origins, dirs, t_min, t_max, True)
        return best_f >= 0

    def closest_points(self, points):
        """Closest surface point to every query point.

        :returns: ``(closest, face_index, squared_distance)``; ties on equal
          distance go to the lowest face index.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(np.isfinite(points)):
            raise AccelError("query points must be finite")
        n = len(points)
        bound, _ = self._kdtree.query(points)
        # every indexed vertex lies on the surface, so its distance bounds the answer
        limit = (bound * (1.0 + 1e-9)) ** 2 + 1e-30
        best_d = np.full(n, np.inf)
        best_f = np.full(n, -1, dtype=np.int64)
        best_p = np.zeros((n, 3))
        stack = [(0, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            p = points[idx]
            gap = np.maximum(np.maximum(self._box_min[node] - p, 0.0), p - self._box_max[node])
            box_d = np.sum(gap * gap, axis=1)
            idx = idx[box_d <= np.minimum(limit[idx], best_d[idx])]
            if not idx.size:
                continue
            if self._left[node] >= 0:
                stack.append((self._right[node], idx))
                stack.append((self._left[node], idx))
                continue
            faces = self._leaf_faces(node)
            p = points[idx][:, None, :]
            cp = closest_point_on_triangles(p, self._v0[faces], self._v1[faces], self._v2[faces])
            d = np.sum((cp - p) ** 2, axis=-1)
            d = np.where(np.isnan(d), np.inf, d)
            j = np.argmin(d, axis=1)
            rows = np.arange(len(idx))
            dd = d[rows, j]
            ff = faces[j]
            current = best_d[idx]
            better = np.isfinite(dd) & ((dd < current) | ((dd == current) & (ff < best_f[idx])))
            winners = idx[better]
            best_d[winners] = dd[better]
            best_f[winners] = ff[better]
            best_p[winners] = cp[rows, j][better]
        if np.any(best_f < 0):
            raise AccelError("closest-point query found no face")
        return best_p, best_f, best_d


def build_accel(mesh: TriMesh, config: Optional[AccelConfig] = None) -> SurfaceAccel:
    return SurfaceAccel(mesh, config)


def ray_cast(
    accel: SurfaceAccel, origin, direction, max_dist: float = np.inf
) -> Optional[RayHit]:
    """Nearest hit of one ray within ``max_dist``, ignoring self-hits closer
    than the accelerator's epsilon.

    :param direction: Unit vector (length 1 within 1e-6).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if not (np.all(np.isfinite(origin)) and np.all(np.isfinite(direction))):
        raise AccelError("ray origin and direction must be finite")
    if np.isnan(max_dist):
        raise AccelError("max_dist must not be NaN")
    if abs(np.linalg.norm(direction) - 1.0) > _UNIT_TOL:
        raise AccelError(f"ray direction must be a unit vector, got {direction}")
    return accel.cast(origin[None], direction[None], max_dist)[0]


class AccelError(Exception):
    """Base class for exceptions in this module."""

    pass
