"""
Triangle meshes, UV-space lookups and texture sampling.

Grids (textures, displacement maps, score maps) are stored with row 0 at the
top. The texel in row ``r`` and column ``c`` of a ``W x H`` grid has its centre
at ``uv = ((c + 0.5) / W, 1 - (r + 0.5) / H)``, so ``uv = (0, 0)`` is the centre
of the bottom-left texel.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

logger = logging.getLogger(__name__)

# barycentric slack when testing texel centres against UV triangles
_INSIDE_TOL = 1e-12


def _readonly(array):
    if array is not None:
        array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TriMesh:
    """An indexed triangle mesh.

    :param vertices: ``(V, 3)`` positions in meters.
    :param faces: ``(F, 3)`` vertex indices.
    :param uv_corners: Optional ``(F, 3, 2)`` texture coordinates, one per face corner.
    :param vertex_normals: Optional ``(V, 3)`` unit normals.
    :param texture: Optional ``(H, W, 3)`` 8-bit RGB image.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_corners: Optional[np.ndarray] = None
    vertex_normals: Optional[np.ndarray] = None
    texture: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        uv_corners = self.uv_corners
        if uv_corners is not None:
            uv_corners = np.array(uv_corners, dtype=np.float64)
            if uv_corners.shape != (len(faces), 3, 2):
                raise MeshError(
                    f"uv_corners must cover every face corner, got shape {uv_corners.shape}"
                )
        normals = self.vertex_normals
        if normals is not None:
            normals = np.array(normals, dtype=np.float64)
            if normals.shape != vertices.shape:
                raise MeshError("vertex_normals must match vertices")
        texture = self.texture
        if texture is not None:
            texture = np.array(texture, dtype=np.uint8)
            if texture.ndim != 3 or texture.shape[2] != 3 or texture.size == 0:
                raise MeshError("texture must be a non-empty (H, W, 3) image")
        object.__setattr__(self, "vertices", _readonly(vertices))
        object.__setattr__(self, "faces", _readonly(faces))
        object.__setattr__(self, "uv_corners", _readonly(uv_corners))
        object.__setattr__(self, "vertex_normals", _readonly(normals))
        object.__setattr__(self, "texture", _readonly(texture))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def has_uvs(self) -> bool:
        return self.uv_corners is not None

    def replace(self, **changes) -> "TriMesh":
        return replace(self, **changes)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same topology, UVs and texture at new positions; normals are dropped."""
        return replace(self, vertices=vertices, vertex_normals=None)

    def corners(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.corners()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit face normals; zero for degenerate faces."""
        return normalize(self.face_cross())

    def face_centroids(self) -> np.ndarray:
        return self.corners().mean(axis=1)

    def bbox_diagonal(self) -> float:
        if not self.n_vertices:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def welded(self) -> np.ndarray:
        """Vertex labels, equal for vertices at exactly the same position."""
        _, labels = np.unique(self.vertices, axis=0, return_inverse=True)
        return labels.reshape(-1)


class SurfacePoint(NamedTuple):
    position: np.ndarray
    normal: np.ndarray
    face_index: int
    overlaps: int


@dataclass(frozen=True)
class TexelMap:
    """Which face (and where in it) covers each texel centre of a ``W x H`` grid.

    :param face_index: ``(H, W)`` face indices, -1 outside every UV chart.
    :param barycentric: ``(H, W, 3)`` weights of the face corners.
    :param overlaps: Number of texels claimed by more than one UV triangle.
    """

    face_index: np.ndarray
    barycentric: np.ndarray
    overlaps: int = 0

    @property
    def defined(self) -> np.ndarray:
        return self.face_index >= 0

    @property
    def shape(self):
        return self.face_index.shape


def normalize(vectors):
    """Unit vectors along the last axis; zero vectors stay zero."""
    vectors = np.asarray(vectors, dtype=np.float64)
    lengths = np.linalg.norm(vectors, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(lengths > 0, vectors / np.where(lengths > 0, lengths, 1.0), 0.0)
    return unit


def compute_normals(mesh: TriMesh) -> TriMesh:
    """Area-weighted unit vertex normals.

    Zero-area faces contribute nothing. Vertices touched only by degenerate
    faces (or by no face) get ``+z``.
    """
    if mesh.n_faces == 0:
        raise MeshError("cannot compute normals of a mesh without faces")
    cross = mesh.face_cross()
    if not np.any(np.linalg.norm(cross, axis=1) > 0):
        raise DegenerateMeshError("degenerate mesh")
    accum = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(accum, mesh.faces[:, k], cross)
    normals = normalize(accum)
    missing = ~np.any(normals != 0, axis=1)
    if missing.any():
        logger.debug(f"{int(missing.sum())} vertices without a defined normal")
        normals[missing] = (0.0, 0.0, 1.0)
    return mesh.replace(vertex_normals=normals)


def barycentric_2d(points, a, b, c):
    """Barycentric weights of 2D ``points`` in triangles ``(a, b, c)``.

    Broadcasts over leading dimensions; degenerate triangles give NaN.
    """
    v0 = b - a
    v1 = c - a
    v2 = points - a
    d00 = np.sum(v0 * v0, axis=-1)
    d01 = np.sum(v0 * v1, axis=-1)
    d11 = np.sum(v1 * v1, axis=-1)
    d20 = np.sum(v2 * v0, axis=-1)
    d21 = np.sum(v2 * v1, axis=-1)
    denom = d00 * d11 - d01 * d01
    with np.errstate(invalid="ignore", divide="ignore"):
        l1 = (d11 * d20 - d01 * d21) / denom
        l2 = (d00 * d21 - d01 * d20) / denom
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def _clean_barycentric(bary):
    bary = np.clip(bary, 0.0, 1.0)
    return bary / bary.sum(axis=-1, keepdims=True)


def texel_centers(width: int, height: int) -> np.ndarray:
    """``(H, W, 2)`` uv coordinates of every texel centre."""
    u = (np.arange(width) + 0.5) / width
    v = 1.0 - (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def rasterize_uv(mesh: TriMesh, width: int, height: Optional[int] = None) -> TexelMap:
    """Find the face covering every texel centre.

    Texels covered by several UV triangles keep the lowest face index; the
    number of such texels is reported on the returned map and logged.
    """
    if not mesh.has_uvs:
        raise MeshError("mesh has no UV coordinates")
    height = width if height is None else height
    face_index = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    overlaps = 0
    uv = mesh.uv_corners
    for f in range(mesh.n_faces):
        tri = uv[f]
        umin, vmin = tri.min(axis=0)
        umax, vmax = tri.max(axis=0)
        c0 = max(int(np.ceil(umin * width - 0.5)), 0)
        c1 = min(int(np.floor(umax * width - 0.5)), width - 1)
        r0 = max(int(np.ceil((1.0 - vmax) * height - 0.5)), 0)
        r1 = min(int(np.floor((1.0 - vmin) * height - 0.5)), height - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        cc, rr = np.meshgrid(cols, rows)
        points = np.stack([(cc + 0.5) / width, 1.0 - (rr + 0.5) / height], axis=-1)
        weights = barycentric_2d(points, tri[0], tri[1], tri[2])
        if not np.all(np.isfinite(weights)):
            continue
        inside = np.all(weights >= -_INSIDE_TOL, axis=-1)
        if not inside.any():
            continue
        taken = face_index[rr, cc] >= 0
        strictly = np.all(weights > 1e-9, axis=-1)
        overlaps += int(np.count_nonzero(inside & taken & strictly))
        claim = inside & ~taken
        face_index[rr[claim], cc[claim]] = f
        bary[rr[claim], cc[claim]] = _clean_barycentric(weights[claim])
    if overlaps:
        logger.warning(f"{overlaps} texels are covered by overlapping UV triangles")
    return TexelMap(face_index=face_index, barycentric=bary, overlaps=overlaps)


def interpolate(mesh: TriMesh, values, face_index, barycentric) -> np.ndarray:
    """Barycentric interpolation of per-vertex ``values`` at points on faces."""
    values = np.asarray(values)
    corners = values[mesh.faces[face_index]]
    if values.ndim == 1:
        return np.einsum("...k,...k->...", barycentric, corners)
    return np.einsum("...k,...kc->...c", barycentric, corners)


def surface_at_texels(mesh: TriMesh, texel_map: TexelMap):
    """Positions and unit normals of ``mesh`` at every defined texel (row-major)."""
    if mesh.vertex_normals is None:
        mesh = compute_normals(mesh)
    defined = texel_map.defined
    faces = texel_map.face_index[defined]
    bary = texel_map.barycentric[defined]
    positions = interpolate(mesh, mesh.vertices, faces, bary)
    normals = normalize(interpolate(mesh, mesh.vertex_normals, faces, bary))
    return positions, normals


def texel_to_surface(mesh: TriMesh, uv) -> Optional[SurfacePoint]:
    """Map a uv coordinate to the point of ``mesh`` carrying it.

    Returns ``None`` outside every chart. When UV triangles overlap, the
    lowest face index wins and the overlap is counted and logged.
    """
    if not mesh.has_uvs:
        raise MeshError("mesh has no UV coordinates")
    uv = np.asarray(uv, dtype=np.float64)
    if not np.all(np.isfinite(uv)) or np.any(uv < 0) or np.any(uv > 1):
        return None
    tri = mesh.uv_corners
    weights = barycentric_2d(uv[None, :], tri[:, 0], tri[:, 1], tri[:, 2])
    with np.errstate(invalid="ignore"):
        inside = np.all(weights >= -_INSIDE_TOL, axis=-1)
    hits = np.flatnonzero(inside)
    if not hits.size:
        return None
    # shared edges and corners are not overlaps
    overlaps = int(np.count_nonzero(np.all(weights[hits[1:]] > 1e-9, axis=-1)))
    if overlaps:
        logger.warning(f"uv {tuple(uv)} lies in {overlaps + 1} overlapping UV triangles")
    f = int(hits[0])
    bary = _clean_barycentric(weights[f])
    if mesh.vertex_normals is None:
        mesh = compute_normals(mesh)
    corners = mesh.faces[f]
    position = bary @ mesh.vertices[corners]
    normal = normalize(bary @ mesh.vertex_normals[corners])
    return SurfacePoint(position=position, normal=normal, face_index=f, overlaps=overlaps)


def bilinear_sample(grid, uv) -> np.ndarray:
    """Bilinear lookup with clamp-to-edge addressing.

    :param grid: ``(H, W)`` or ``(H, W, C)`` array.
    :param uv: ``(..., 2)`` coordinates.
    :returns: ``(...)`` or ``(..., C)`` samples as float64.
    """
    grid = np.asarray(grid, dtype=np.float64)
    scalar = grid.ndim == 2
    if scalar:
        grid = grid[..., None]
    height, width = grid.shape[:2]
    if height == 0 or width == 0:
        raise MeshError("cannot sample an empty grid")
    uv = np.asarray(uv, dtype=np.float64)
    flat = uv.reshape(-1, 2)
    x = np.clip(flat[:, 0] * width - 0.5, 0.0, width - 1)
    y = np.clip((1.0 - flat[:, 1]) * height - 0.5, 0.0, height - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = grid[y0, x0] * (1.0 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1.0 - fx) + grid[y1, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    out = out.reshape(uv.shape[:-1] + (grid.shape[2],))
    return out[..., 0] if scalar else out


def sample_texture(image, uv) -> np.ndarray:
    """RGB in ``[0, 1]`` at ``uv``; 8-bit images are rescaled by 1/255."""
    image = np.asarray(image)
    if image.size == 0:
        raise MeshError("cannot sample an empty image")
    if image.dtype == np.uint8:
        image = image.astype(np.float64) / 255.0
    return np.clip(bilinear_sample(image, uv), 0.0, 1.0)


class MeshError(Exception):
    """Base class for exceptions in this module."""

    pass


class DegenerateMeshError(MeshError):
    """Every face of the mesh has zero area."""

    pass
