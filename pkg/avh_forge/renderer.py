"""
Synthesis of a displaced, textured mesh for a novel pose.

The template is posed, the decoder predicts texture and displacement maps for
the pose, the posed mesh is subdivided twice and every vertex is moved by the
displacement sampled at its UV coordinates.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .decoder import DecoderOutput, DecoderWeights, forward
from .formats import read_png, to_uint8
from .mesh import TriMesh, barycentric_2d, bilinear_sample, compute_normals, normalize
from .skinning import Pose, Shape, SkinnedTemplate, pose_mesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderConfig:
    """
    :param subdivision_levels: Midpoint subdivisions applied before displacing.
    :param finger_mask: Optional path of a grayscale PNG; texels brighter than
      mid-gray get no displacement.
    :param preview_size: Side of the ``--preview`` image in pixels.
    """

    subdivision_levels: int = 2
    finger_mask: Optional[str] = None
    preview_size: int = 512

    def __post_init__(self):
        if self.subdivision_levels < 0 or self.preview_size < 1:
            raise RenderError("subdivision_levels must be >= 0 and preview_size positive")


def _subdivide_once(mesh: TriMesh) -> TriMesh:
    faces = mesh.faces
    n_faces = len(faces)
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    # one midpoint per edge of the welded surface, so UV-seam copies share it
    keys = np.sort(mesh.welded()[pairs], axis=1)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    edges = pairs[first]
    inverse = inverse.reshape(-1)
    mid = mesh.n_vertices + inverse.reshape(3, n_faces).T  # ab, bc, ca per face
    vertices = np.concatenate([mesh.vertices, mesh.vertices[edges].mean(axis=1)])
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mid[:, 0], mid[:, 1], mid[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )
    uv_corners = None
    if mesh.has_uvs:
        uv = mesh.uv_corners
        uab = (uv[:, 0] + uv[:, 1]) / 2
        ubc = (uv[:, 1] + uv[:, 2]) / 2
        uca = (uv[:, 2] + uv[:, 0]) / 2
        uv_corners = np.concatenate(
            [
                np.stack([uv[:, 0], uab, uca], axis=1),
                np.stack([uab, uv[:, 1], ubc], axis=1),
                np.stack([uca, ubc, uv[:, 2]], axis=1),
                np.stack([uab, ubc, uca], axis=1),
            ]
        )
    normals = None
    if mesh.vertex_normals is not None:
        n = mesh.vertex_normals
        normals = np.concatenate([n, normalize(n[edges].mean(axis=1))])
        missing = ~np.any(normals != 0, axis=1)
        normals[missing] = (0.0, 0.0, 1.0)
    return TriMesh(
        vertices=vertices,
        faces=new_faces,
        uv_corners=uv_corners,
        vertex_normals=normals,
        texture=mesh.texture,
    )


def subdivide(mesh: TriMesh, levels: int = 2) -> TriMesh:
    """Split every triangle into four at its edge midpoints, ``levels`` times.

    Midpoints are shared by the faces meeting at an edge; UVs are split per
    corner, so charts stay separate at seams.
    """
    if levels < 0:
        raise RenderError("levels must be non-negative")
    for _ in range(levels):
        mesh = _subdivide_once(mesh)
    return mesh


class VertexDisplacement(NamedTuple):
    offsets: np.ndarray
    missing: int


def displacement_at_vertices(mesh: TriMesh, displacement, finger_mask=None) -> VertexDisplacement:
    """Per-vertex displacement, averaged over the corner UVs of all vertices at
    the vertex's position.

    Vertices without a usable UV get zero and are counted in ``missing``.
    """
    if not mesh.has_uvs:
        raise RenderError("mesh has no UV coordinates")
    d = np.asarray(displacement, dtype=np.float64)
    if d.ndim != 3 or d.shape[2] != 3:
        raise RenderError(f"displacement must be (H, W, 3), got {d.shape}")
    if finger_mask is not None:
        finger_mask = np.asarray(finger_mask, dtype=bool)
        if finger_mask.shape != d.shape[:2]:
            raise RenderError(
                f"finger mask of shape {finger_mask.shape} does not match the map {d.shape[:2]}"
            )
        d = np.where(finger_mask[..., None], 0.0, d)
    uv = mesh.uv_corners.reshape(-1, 2)
    labels = mesh.welded()
    ids = labels[mesh.faces.reshape(-1)]
    usable = np.all(np.isfinite(uv), axis=1) & np.all((uv >= 0) & (uv <= 1), axis=1)
    n_points = int(labels.max(initial=-1)) + 1
    total = np.zeros((n_points, 3))
    count = np.zeros(n_points)
    np.add.at(total, ids[usable], bilinear_sample(d, uv[usable]))
    np.add.at(count, ids[usable], 1.0)
    missing = int(np.count_nonzero(count[labels] == 0))
    if missing:
        logger.warning(f"{missing} vertices have no usable UV; they are not displaced")
    offsets = (total / np.maximum(count, 1.0)[:, None])[labels]
    return VertexDisplacement(offsets=offsets, missing=missing)


def load_finger_mask(path_or_file, resolution: int) -> np.ndarray:
    """Boolean ``(resolution, resolution)`` mask from a grayscale PNG, nearest-sampled
    when the image has another size."""
    image = read_png(path_or_file, grayscale=True)
    rows = (np.arange(resolution) * image.shape[0]) // resolution
    cols = (np.arange(resolution) * image.shape[1]) // resolution
    return image[np.ix_(rows, cols)] > 127


def apply_displacement(mesh: TriMesh, displacement, finger_mask=None) -> TriMesh:
    """Move each vertex by the displacement map sampled bilinearly at its UV.

    Displacements are world-space vectors of the posed frame. Texels under
    ``finger_mask`` contribute zero.
    """
    offsets, _ = displacement_at_vertices(mesh, displacement, finger_mask)
    if not np.any(offsets):
        return mesh
    return compute_normals(mesh.with_vertices(mesh.vertices + offsets))


def synthesize(
    weights: DecoderWeights,
    template: SkinnedTemplate,
    shape: Shape,
    pose: Pose,
    config: RenderConfig = RenderConfig(),
    finger_mask=None,
    maps: Optional[DecoderOutput] = None,
) -> TriMesh:
    """Posed, subdivided and displaced template carrying the predicted texture.

    :param maps: Decoder output for ``pose`` when already computed.
    """
    posed = pose_mesh(template, shape, pose)
    if maps is None:
        maps = forward(weights, pose.theta)
    fine = subdivide(posed, config.subdivision_levels)
    displaced = apply_displacement(fine, maps.displacement, finger_mask)
    return displaced.replace(texture=to_uint8(maps.texture))


def render_preview(mesh: TriMesh, size: int = 512, margin: float = 0.05) -> np.ndarray:
    """Orthographic view along ``-z`` shaded by ``|n_z|`` of each face.

    :returns: ``(size, size)`` uint8 image, background 0.
    """
    image = np.zeros((size, size), dtype=np.uint8)
    depth = np.full((size, size), -np.inf)
    if not mesh.n_faces:
        return image
    lo = mesh.vertices[:, :2].min(axis=0)
    extent = max(float(np.max(mesh.vertices[:, :2].max(axis=0) - lo)), 1e-12)
    scale = size * (1.0 - 2.0 * margin) / extent
    centre = (mesh.vertices[:, :2].max(axis=0) + lo) / 2.0
    # pixel coordinates: x to the right, row 0 at the top
    xy = (mesh.vertices[:, :2] - centre) * scale + size / 2.0
    xy[:, 1] = size - xy[:, 1]
    z = mesh.vertices[:, 2]
    shade = np.abs(mesh.face_normals()[:, 2])
    for f, (i, j, k) in enumerate(mesh.faces):
        tri = xy[[i, j, k]]
        c0, r0 = np.maximum(np.ceil(tri.min(axis=0) - 0.5).astype(int), 0)
        c1, r1 = np.minimum(np.floor(tri.max(axis=0) - 0.5).astype(int), size - 1)
        if c1 < c0 or r1 < r0:
            continue
        cc, rr = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        points = np.stack([cc + 0.5, rr + 0.5], axis=-1)
        w = barycentric_2d(points, tri[0], tri[1], tri[2])
        if not np.all(np.isfinite(w)):
            continue
        inside = np.all(w >= 0, axis=-1)
        zf = w @ z[[i, j, k]]
        closer = inside & (zf > depth[rr, cc])
        depth[rr[closer], cc[closer]] = zf[closer]
        image[rr[closer], cc[closer]] = int(round(255 * shade[f]))
    return image


class RenderError(Exception):
    """Base class for exceptions in this module."""

    pass
