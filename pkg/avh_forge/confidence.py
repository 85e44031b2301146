"""
Per-texel confidence of a bake and frame-level quality gating.

The confidence ``kappa`` of a matched texel is the product of four terms in
``[0, 1]``:

* ``v``: how exposed the scan is at the matched point,
* ``w``: how exposed the registered mesh is at the texel,
* ``delta``: the clipped, inverted distance between texel and match,
* ``nms``: agreement of the two surface normals.

Exposure is estimated per face by casting a fixed hemisphere of rays from the
face centroid and counting how many of them hit the mesh itself.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .accel import SurfaceAccel, build_accel
from .baking import BakeBundle, mean_confidence
from .mesh import TriMesh, interpolate

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class ConfidenceConfig:
    """
    :param hemisphere_samples: Rays per face for the visibility estimate.
    :param distance_clip_fraction: Distances are clipped at this fraction of
      the registered mesh's bounding-box diagonal.
    :param ray_offset: Self-hit distance for visibility rays; ``None`` uses
      the accelerator's epsilon.
    :param quality_threshold: Frames whose mean confidence falls below this
      are discarded.
    """

    hemisphere_samples: int = 64
    distance_clip_fraction: float = 1.0 / 50.0
    ray_offset: Optional[float] = None
    quality_threshold: float = 130.0 / 255.0

    def __post_init__(self):
        if self.hemisphere_samples < 4:
            raise ConfidenceError("hemisphere_samples must be at least 4")
        if self.distance_clip_fraction <= 0:
            raise ConfidenceError("distance_clip_fraction must be positive")


class FrameQuality(NamedTuple):
    mean: float
    keep: bool


def hemisphere_directions(samples: int = 64) -> np.ndarray:
    """Fibonacci spiral over the ``+z`` hemisphere, ``(samples, 3)`` unit vectors."""
    k = np.arange(samples)
    z = 1.0 - (k + 0.5) / samples
    radius = np.sqrt(1.0 - z * z)
    phi = k * GOLDEN_ANGLE
    return np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)


def tangent_frames(normals):
    """Orthonormal tangents ``(t, b)`` completing each unit normal to a right-handed
    frame, without branching on the normal's direction."""
    n = np.asarray(normals, dtype=np.float64)
    sign = np.where(n[:, 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=1)
    bt = np.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t, bt


def face_visibility(
    mesh: TriMesh, accel: SurfaceAccel, config: ConfidenceConfig = ConfidenceConfig()
) -> np.ndarray:
    """Fraction of hemisphere rays from each face centroid that escape the mesh.

    Faces without area count as fully visible.
    """
    normals = mesh.face_normals()
    valid = np.any(normals != 0, axis=1)
    visibility = np.ones(mesh.n_faces)
    if not valid.any():
        return visibility
    local = hemisphere_directions(config.hemisphere_samples)
    n = normals[valid]
    t, bt = tangent_frames(n)
    dirs = (
        local[None, :, 0:1] * t[:, None, :]
        + local[None, :, 1:2] * bt[:, None, :]
        + local[None, :, 2:3] * n[:, None, :]
    )
    origins = np.broadcast_to(mesh.face_centroids()[valid][:, None, :], dirs.shape)
    offset = accel.epsilon if config.ray_offset is None else config.ray_offset
    hits = accel.occluded(origins.reshape(-1, 3), dirs.reshape(-1, 3), min_dist=offset)
    counts = hits.reshape(-1, config.hemisphere_samples).sum(axis=1)
    visibility[valid] = 1.0 - counts / config.hemisphere_samples
    return visibility


def vertex_visibility(mesh: TriMesh, face_values) -> np.ndarray:
    """Average face values onto their vertices; unreferenced vertices get 1."""
    total = np.zeros(mesh.n_vertices)
    count = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(total, mesh.faces[:, k], face_values)
        np.add.at(count, mesh.faces[:, k], 1.0)
    return np.where(count > 0, total / np.maximum(count, 1.0), 1.0)


def visibility(
    mesh: TriMesh,
    accel: SurfaceAccel,
    texel_faces,
    shape,
    config: ConfidenceConfig = ConfidenceConfig(),
    defined: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-texel visibility grid; texels outside ``defined`` are 0.

    :param texel_faces: ``(faces, barycentric)`` for the defined texels in row-major order.
    """
    faces, bary = texel_faces
    per_vertex = vertex_visibility(mesh, face_visibility(mesh, accel, config))
    grid = np.zeros(shape)
    mask = defined if defined is not None else np.ones(shape, dtype=bool)
    grid[mask] = np.clip(interpolate(mesh, per_vertex, faces, bary), 0.0, 1.0)
    return grid


def inverse_distance_score(distances, fit_diagonal: float, clip_fraction: float = 1.0 / 50.0):
    """``1 - min(d, D * clip_fraction) / (D * clip_fraction)``: 1 at zero
    distance, 0 at and beyond the clip distance."""
    if not fit_diagonal > 0:
        raise ConfidenceError(f"fit diagonal must be positive, got {fit_diagonal}")
    clip = fit_diagonal * clip_fraction
    distances = np.clip(np.asarray(distances, dtype=np.float64), 0.0, clip)
    return 1.0 - distances / clip


def normal_match_score(n, m):
    """``(n . m + 1) / 2`` for unit normals."""
    dot = np.sum(np.asarray(n, dtype=np.float64) * np.asarray(m, dtype=np.float64), axis=-1)
    return np.clip((dot + 1.0) / 2.0, 0.0, 1.0)


def combine_confidence(v, w, delta, nms) -> np.ndarray:
    grids = [np.asarray(g, dtype=np.float64) for g in (v, w, delta, nms)]
    if any(g.shape != grids[0].shape for g in grids):
        raise ConfidenceError(f"shape mismatch: {[g.shape for g in grids]}")
    v, w, delta, nms = grids
    return v * w * delta * nms


def frame_quality(
    kappa, defined: Optional[np.ndarray] = None, threshold: float = 130.0 / 255.0
) -> FrameQuality:
    """Mean confidence over the defined texels and the keep decision."""
    mean = mean_confidence(kappa, defined)
    return FrameQuality(mean=mean, keep=mean >= threshold)


def apply_confidence(
    bundle: BakeBundle,
    registered: TriMesh,
    scan: TriMesh,
    config: ConfidenceConfig = ConfidenceConfig(),
    registered_accel: Optional[SurfaceAccel] = None,
    scan_accel: Optional[SurfaceAccel] = None,
) -> BakeBundle:
    """Fill the component score maps, ``kappa`` and the frame quality of a fresh bake."""
    if bundle.matches is None or bundle.texel_faces is None:
        raise ConfidenceError("confidence needs a bundle straight from bake_frame")
    registered_accel = registered_accel or build_accel(registered)
    scan_accel = scan_accel or build_accel(scan)
    shape = bundle.matched.shape
    defined = bundle.defined

    w = visibility(registered, registered_accel, bundle.texel_faces, shape, config, defined)

    matches = bundle.matches
    ok = matches.matched
    scan_vertex = vertex_visibility(scan, face_visibility(scan, scan_accel, config))
    v = np.zeros(shape)
    matched_ids = np.flatnonzero(defined.ravel())[ok]
    v.reshape(-1)[matched_ids] = np.clip(
        interpolate(scan, scan_vertex, matches.face_index[ok], matches.barycentric[ok]), 0.0, 1.0
    )

    matched = bundle.matched
    delta = np.where(
        matched,
        inverse_distance_score(
            bundle.distance, registered.bbox_diagonal(), config.distance_clip_fraction
        ),
        0.0,
    )
    nms = np.where(matched, np.clip((bundle.normal_dot + 1.0) / 2.0, 0.0, 1.0), 0.0)
    kappa = np.where(matched, combine_confidence(v, w, delta, nms), 0.0)
    quality = frame_quality(kappa, defined, config.quality_threshold)
    logger.info(
        f"Frame '{bundle.frame_id}': mean confidence {quality.mean:.4f} "
        f"({'kept' if quality.keep else 'discarded'})"
    )
    return bundle.replace(
        visibility_scan=v,
        visibility_registered=w,
        distance_score=delta,
        normal_score=nms,
        confidence=kappa,
        quality=quality.mean,
    )


class ConfidenceError(Exception):
    """Base class for exceptions in this module."""

    pass
