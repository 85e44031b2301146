"""
Texel correspondences between a registered template and a scan, and baking
of scan color and displacement into the template's UV space.

For every texel centre covered by a UV triangle the registered mesh gives a
query point ``r`` with normal ``n``, and the unregistered (shadow) mesh gives
its twin ``s`` at the same uv. Two rays from ``r`` along ``+n`` and ``-n``
look for the scan; the chosen hit ``x`` gives the texel's color and the
displacement ``d = x - s``.
"""

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .accel import SurfaceAccel, build_accel
from .formats import read_json, read_pfm, read_png, to_uint8, write_json, write_pfm, write_png
from .mesh import TriMesh, interpolate, rasterize_uv, sample_texture, surface_at_texels
from .storage import AbstractTarget

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


@dataclass(frozen=True)
class BakeConfig:
    """
    :param resolution: Side of the square texture and displacement maps.
    :param max_match_fraction: Ray length cap as a fraction of the scan's
      bounding-box diagonal.
    :param outlier_limit: Largest accepted per-axis offset between the scan
      hit and the registered surface, meters.
    """

    resolution: int = 1024
    max_match_fraction: float = 0.1
    outlier_limit: float = 0.05

    def __post_init__(self):
        if self.resolution < 1:
            raise BakeError("resolution must be positive")
        if self.max_match_fraction <= 0 or self.outlier_limit <= 0:
            raise BakeError("max_match_fraction and outlier_limit must be positive")


class Polarity(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class Match(NamedTuple):
    source_uv: Optional[np.ndarray]
    source_point: np.ndarray
    twin_point: Optional[np.ndarray]
    target_point: np.ndarray
    target_normal: np.ndarray
    source_normal: np.ndarray
    distance: float
    polarity: Polarity


@dataclass(frozen=True)
class MatchArrays:
    """Batched correspondence results; ``face_index`` is -1 where nothing matched."""

    face_index: np.ndarray
    barycentric: np.ndarray
    target_point: np.ndarray
    target_normal: np.ndarray
    distance: np.ndarray
    positive: np.ndarray

    @property
    def matched(self) -> np.ndarray:
        return self.face_index >= 0


def _select(ahead_d, behind_d, ahead_pol, behind_pol):
    """Pick between the ``+n`` ray's hit and the ``-n`` ray's hit.

    Distances are ``inf`` where a ray found nothing. Returns a boolean array,
    true where the ``+n`` ray's hit is chosen (meaningless where both missed).
    """
    ahead_hit = np.isfinite(ahead_d)
    behind_hit = np.isfinite(behind_d)
    same = ahead_pol == behind_pol
    # equal polarity: nearer hit, first ray on ties
    pick_same = ahead_d <= behind_d
    # mixed polarity: the positive hit unless it is more than twice as far
    positive_first = np.where(ahead_pol, ahead_d <= 2.0 * behind_d, ~(behind_d <= 2.0 * ahead_d))
    both = np.where(same, pick_same, positive_first)
    return np.where(ahead_hit & behind_hit, both, ahead_hit)


def find_matches(
    points, normals, scan_accel: SurfaceAccel, max_dist: float, offset: Optional[float] = None
) -> MatchArrays:
    """Correspondence search for many query points at once.

    Each ray starts ``offset`` behind its query point (default: the scan
    accelerator's self-hit epsilon) so that a scan surface passing through the
    point is found at distance 0. Distances are measured from the query point
    and capped at ``max_dist``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    eps = scan_accel.epsilon if offset is None else float(offset)
    hits = []
    for sign in (1.0, -1.0):
        dirs = sign * normals
        hit = scan_accel.cast(points - eps * dirs, dirs, max_dist=max_dist + eps, min_dist=0.0)
        distance = np.where(hit.hit, np.maximum(hit.distance - eps, 0.0), np.inf)
        with np.errstate(invalid="ignore"):
            positive = np.sum(normals * hit.normal, axis=1) > 0
        hits.append((hit, distance, positive))
    (ahead_hit, ahead_d, ahead_pol), (behind_hit, behind_d, behind_pol) = hits
    take_ahead = _select(ahead_d, behind_d, ahead_pol, behind_pol)
    matched = np.isfinite(ahead_d) | np.isfinite(behind_d)

    def pick(a, b):
        chosen = np.where(take_ahead.reshape(-1, *([1] * (a.ndim - 1))), a, b)
        return chosen

    face = np.where(matched, pick(ahead_hit.face_index, behind_hit.face_index), -1)
    return MatchArrays(
        face_index=face,
        barycentric=pick(ahead_hit.barycentric, behind_hit.barycentric),
        target_point=pick(ahead_hit.position, behind_hit.position),
        target_normal=pick(ahead_hit.normal, behind_hit.normal),
        distance=np.where(matched, pick(ahead_d, behind_d), np.inf),
        positive=np.where(matched, pick(ahead_pol, behind_pol), False),
    )


def find_match(r, n, scan_accel: SurfaceAccel, max_dist: float = np.inf) -> Optional[Match]:
    """Correspondence for a single query point ``r`` with unit normal ``n``."""
    r = np.asarray(r, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise BakeError(f"query normal must be a unit vector, got {n}")
    result = find_matches(r[None], n[None], scan_accel, max_dist)
    if not result.matched[0]:
        return None
    return Match(
        source_uv=None,
        source_point=r,
        twin_point=None,
        target_point=result.target_point[0],
        target_normal=result.target_normal[0],
        source_normal=n,
        distance=float(result.distance[0]),
        polarity=Polarity.POSITIVE if result.positive[0] else Polarity.NEGATIVE,
    )


@dataclass(frozen=True, eq=False)
class BakeBundle:
    """Everything baked for one frame, as ``(H, W)`` or ``(H, W, 3)`` grids.

    ``offset`` is ``x - r`` (scan hit minus registered surface), ``distance``
    its length and ``normal_dot`` is ``n . m``; all three are zero where no
    match was found. ``matches`` and ``texel_faces`` carry per-texel lookup data
    for the confidence terms and are not serialized.
    """

    frame_id: str
    theta: np.ndarray
    texture: np.ndarray
    displacement: np.ndarray
    offset: np.ndarray
    distance: np.ndarray
    normal_dot: np.ndarray
    defined: np.ndarray
    matched: np.ndarray
    visibility_scan: np.ndarray
    visibility_registered: np.ndarray
    distance_score: np.ndarray
    normal_score: np.ndarray
    confidence: np.ndarray
    config_hash: str = ""
    quality: Optional[float] = None
    matches: Optional[MatchArrays] = field(default=None, repr=False, compare=False)
    texel_faces: Optional[tuple] = field(default=None, repr=False, compare=False)

    @property
    def resolution(self) -> int:
        return self.texture.shape[0]

    def replace(self, **changes) -> "BakeBundle":
        return replace(self, **changes)

    def displacement_weight(self) -> np.ndarray:
        """Registered-mesh visibility restricted to matched texels."""
        return self.visibility_registered * self.matched


_FLOAT_GRIDS = (
    "displacement",
    "offset",
    "distance",
    "normal_dot",
    "visibility_scan",
    "visibility_registered",
    "distance_score",
    "normal_score",
    "confidence",
)
_MASKS = ("defined", "matched")


def bake_frame(
    registered: TriMesh,
    shadow: TriMesh,
    scan: TriMesh,
    resolution: Optional[int] = None,
    config: BakeConfig = BakeConfig(),
    frame_id: str = "",
    theta=None,
    scan_accel: Optional[SurfaceAccel] = None,
) -> BakeBundle:
    """Bake scan color and displacement into the template's UV space."""
    if not (registered.has_uvs and shadow.has_uvs):
        raise BakeError("registered and shadow meshes need UV coordinates")
    if registered.faces.shape != shadow.faces.shape or not np.array_equal(
        registered.faces, shadow.faces
    ):
        raise BakeError("registered and shadow meshes must share their topology")
    if scan.texture is None or not scan.has_uvs:
        raise BakeError("scan must carry a texture and UV coordinates")
    resolution = resolution or config.resolution
    scan_accel = scan_accel or build_accel(scan)
    max_dist = config.max_match_fraction * scan.bbox_diagonal()
    logger.info(f"Baking frame '{frame_id}' at {resolution}x{resolution}")

    texel_map = rasterize_uv(registered, resolution, resolution)
    defined = texel_map.defined
    faces = texel_map.face_index[defined]
    bary = texel_map.barycentric[defined]
    r, n = surface_at_texels(registered, texel_map)
    s = interpolate(shadow, shadow.vertices, faces, bary)
    found = find_matches(r, n, scan_accel, max_dist)
    ok = found.matched

    hit_faces = found.face_index[ok]
    hit_uv = np.einsum("nk,nkc->nc", found.barycentric[ok], scan.uv_corners[hit_faces])
    colors = sample_texture(scan.texture, hit_uv)

    shape = (resolution, resolution)
    texel_ids = np.flatnonzero(defined.ravel())
    matched_ids = texel_ids[ok]

    def scatter(values, channels=None):
        grid = np.zeros(shape + ((channels,) if channels else ()), dtype=np.float64)
        flat = grid.reshape(-1, channels) if channels else grid.reshape(-1)
        flat[matched_ids] = values
        return grid

    x = found.target_point[ok]
    normal_dot = np.sum(n[ok] * found.target_normal[ok], axis=1)
    matched = np.zeros(shape, dtype=bool)
    matched.reshape(-1)[matched_ids] = True
    zeros = np.zeros(shape)
    logger.info(
        f"Frame '{frame_id}': {int(ok.sum())} of {int(defined.sum())} defined texels matched"
    )
    return BakeBundle(
        frame_id=frame_id,
        theta=np.zeros((0, 3)) if theta is None else np.asarray(theta, dtype=np.float64),
        texture=scatter(colors, 3),
        displacement=scatter(x - s[ok], 3),
        offset=scatter(x - r[ok], 3),
        distance=scatter(found.distance[ok]),
        normal_dot=scatter(normal_dot),
        defined=defined,
        matched=matched,
        visibility_scan=zeros,
        visibility_registered=zeros,
        distance_score=zeros,
        normal_score=zeros,
        confidence=zeros,
        matches=found,
        texel_faces=(faces, bary),
    )


def mean_confidence(kappa, defined: Optional[np.ndarray] = None) -> float:
    """Mean of ``kappa`` over the defined texels (unmatched ones count as 0)."""
    kappa = np.asarray(kappa, dtype=np.float64)
    values = kappa[defined] if defined is not None else kappa.ravel()
    return float(values.mean()) if values.size else 0.0


def filter_outliers(bundle: BakeBundle, limit: float = 0.05) -> BakeBundle:
    """Unmatch texels whose scan hit lies more than ``limit`` from the registered
    surface along any axis. The test uses ``x - r``, not the displacement.
    A scored bundle gets its quality recomputed from the filtered confidence."""
    bad = bundle.matched & np.any(np.abs(bundle.offset) > limit, axis=-1)
    if not bad.any():
        return bundle
    logger.info(f"Frame '{bundle.frame_id}': removing {int(bad.sum())} outlier texels")
    confidence = np.where(bad, 0.0, bundle.confidence)
    quality = bundle.quality
    if quality is not None:
        quality = mean_confidence(confidence, bundle.defined)
    return bundle.replace(matched=bundle.matched & ~bad, confidence=confidence, quality=quality)


def resample_bundle(bundle: BakeBundle, resolution: int) -> BakeBundle:
    """Block-average every grid down to ``resolution``; masks keep texels where
    more than half of the block was set."""
    if resolution == bundle.resolution:
        return bundle
    factor, rest = divmod(bundle.resolution, resolution)
    if rest or factor < 1:
        raise BakeError(
            f"cannot resample a {bundle.resolution} bundle to {resolution}: not an integer factor"
        )

    def block_mean(grid):
        grid = np.asarray(grid, dtype=np.float64)
        blocks = grid.reshape(resolution, factor, resolution, factor, *grid.shape[2:])
        return blocks.mean(axis=(1, 3))

    changes = {name: block_mean(getattr(bundle, name)) for name in _FLOAT_GRIDS}
    changes["texture"] = block_mean(bundle.texture)
    for name in _MASKS:
        changes[name] = block_mean(getattr(bundle, name)) > 0.5
    return bundle.replace(matches=None, texel_faces=None, **changes)


def save_bundle(bundle: BakeBundle, target: AbstractTarget, prefix: str, extra: dict = None):
    """Write PNGs (texture, masks, confidence preview), PFMs (float grids) and
    a ``bundle.json`` sidecar under ``prefix``."""
    files = {"texture": "texture.png"}
    with target.open(f"{prefix}/texture.png", mode="wb") as f:
        write_png(f, bundle.texture)
    for name in _MASKS:
        files[name] = f"{name}.png"
        with target.open(f"{prefix}/{name}.png", mode="wb") as f:
            write_png(f, bundle_mask_image(getattr(bundle, name)))
    for name in _FLOAT_GRIDS:
        files[name] = f"{name}.pfm"
        with target.open(f"{prefix}/{name}.pfm", mode="wb") as f:
            write_pfm(f, getattr(bundle, name))
    with target.open(f"{prefix}/confidence.png", mode="wb") as f:
        write_png(f, bundle.confidence)
    sidecar = {
        "version": BUNDLE_VERSION,
        "frame_id": bundle.frame_id,
        "theta": bundle.theta,
        "resolution": bundle.resolution,
        "config_hash": bundle.config_hash,
        "quality": bundle.quality,
        "matched_texels": int(bundle.matched.sum()),
        "defined_texels": int(bundle.defined.sum()),
        "files": files,
    }
    sidecar.update(extra or {})
    with target.open(f"{prefix}/bundle.json", mode="wb") as f:
        write_json(f, sidecar)


def bundle_mask_image(mask) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def preview_images(bundle: BakeBundle) -> dict:
    """8-bit previews of the color, the displacement (each axis scaled by the
    largest magnitude, zero at mid-gray) and the confidence map."""
    d = np.asarray(bundle.displacement, dtype=np.float64)
    scale = float(np.abs(d).max())
    normalized = (d / scale + 1.0) / 2.0 if scale > 0 else np.full(d.shape, 0.5)
    return {
        "texture": to_uint8(bundle.texture),
        "displacement": to_uint8(normalized),
        "confidence": to_uint8(bundle.confidence),
    }


def read_sidecar(target: AbstractTarget, prefix: str) -> dict:
    with target.open(f"{prefix}/bundle.json", mode="rb") as f:
        return read_json(f)


def load_bundle(target: AbstractTarget, prefix: str) -> BakeBundle:
    sidecar = read_sidecar(target, prefix)
    files = sidecar["files"]
    grids = {}
    with target.open(f"{prefix}/{files['texture']}", mode="rb") as f:
        grids["texture"] = read_png(f).astype(np.float64) / 255.0
    for name in _MASKS:
        with target.open(f"{prefix}/{files[name]}", mode="rb") as f:
            grids[name] = read_png(f, grayscale=True) > 127
    for name in _FLOAT_GRIDS:
        with target.open(f"{prefix}/{files[name]}", mode="rb") as f:
            grids[name] = read_pfm(f)
    return BakeBundle(
        frame_id=sidecar["frame_id"],
        theta=np.asarray(sidecar["theta"], dtype=np.float64),
        config_hash=sidecar["config_hash"],
        quality=sidecar.get("quality"),
        **grids,
    )


class BakeError(Exception):
    """Base class for exceptions in this module."""

    pass
