"""
Fast-marching inpainting (Telea) of texture, displacement and score grids.

Unknown pixels are filled in order of their distance ``T`` from the known
region. Each newly reached pixel is estimated from the already known pixels
within ``radius`` as a weighted mean of first-order extrapolations
``I(q) + grad I(q) . (p - q)``, with Telea's distance, level-set and
direction weights.
"""

import heapq
import logging
from dataclasses import dataclass

import numpy as np

from .baking import BakeBundle

logger = logging.getLogger(__name__)

KNOWN = 0
BAND = 1
INSIDE = 2
OUTSIDE = 3

_FAR = 1.0e6
# up, left, down, right
_NEIGHBORS = ((-1, 0), (0, -1), (1, 0), (0, 1))


@dataclass(frozen=True)
class InpaintConfig:
    """
    :param radius: Neighborhood radius, in texels, of each fast-marching estimate.
    """

    radius: int = 3

    def __post_init__(self):
        if self.radius < 1:
            raise InpaintError("radius must be at least 1")


def _solve(flags, T, i1, j1, i2, j2):
    a11 = T[i1, j1]
    a22 = T[i2, j2]
    known1 = flags[i1, j1] <= BAND
    known2 = flags[i2, j2] <= BAND
    if known1 and known2:
        diff = a11 - a22
        if abs(diff) >= 1.0:
            return 1.0 + min(a11, a22)
        return (a11 + a22 + np.sqrt(2.0 - diff * diff)) * 0.5
    if known1:
        return 1.0 + a11
    if known2:
        return 1.0 + a22
    return 1.0 + min(a11, a22)


def _one_sided(usable_plus, usable_minus, plus, center, minus, scale=0.5):
    """Central difference where both sides are usable, one-sided otherwise."""
    return np.where(
        usable_plus & usable_minus,
        (plus - minus) * scale,
        np.where(usable_plus, plus - center, np.where(usable_minus, center - minus, 0.0)),
    )


class _Telea:
    def __init__(self, image, known, fill, radius):
        height, width, channels = image.shape
        self.pad = pad = radius + 1
        shape = (height + 2 * pad, width + 2 * pad)
        inner = (slice(pad, pad + height), slice(pad, pad + width))
        self.inner = inner
        self.flags = np.full(shape, OUTSIDE, dtype=np.int8)
        self.T = np.full(shape, _FAR)
        self.image = np.zeros(shape + (channels,))
        self.flags[inner][fill] = INSIDE
        self.flags[inner][known] = KNOWN
        self.T[inner][known] = 0.0
        self.image[inner][known] = image[known]
        self.lo = image[known].min(axis=0)
        self.hi = image[known].max(axis=0)
        dy, dx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
        disc = (dy * dy + dx * dx <= radius * radius) & ((dy != 0) | (dx != 0))
        self.offsets = np.stack([dy[disc], dx[disc]], axis=1)
        # r = p - q for q = p + offset
        r = -self.offsets.astype(np.float64)
        length2 = np.sum(r * r, axis=1)
        self.r = r
        self.dst = 1.0 / (length2 * np.sqrt(length2))

    def _gradient_T(self, i, j):
        flags, T = self.flags, self.T

        def usable(a, b):
            return flags[a, b] <= BAND

        gx = _one_sided(
            usable(i, j + 1), usable(i, j - 1), T[i, j + 1], T[i, j], T[i, j - 1]
        )
        gy = _one_sided(
            usable(i + 1, j), usable(i - 1, j), T[i + 1, j], T[i, j], T[i - 1, j]
        )
        return float(gy), float(gx)

    def _estimate(self, i, j):
        flags, T, img = self.flags, self.T, self.image
        qi = i + self.offsets[:, 0]
        qj = j + self.offsets[:, 1]
        sel = flags[qi, qj] <= BAND
        qi, qj = qi[sel], qj[sel]
        r = self.r[sel]
        gy, gx = self._gradient_T(i, j)
        direction = r[:, 0] * gy + r[:, 1] * gx
        direction = np.where(np.abs(direction) <= 0.01, 1e-6, direction)
        level = 1.0 / (1.0 + np.abs(T[qi, qj] - T[i, j]))
        w = np.abs(self.dst[sel] * level * direction)

        def usable(a, b):
            return (flags[a, b] <= BAND)[:, None]

        center = img[qi, qj]
        grad_x = _one_sided(
            usable(qi, qj + 1), usable(qi, qj - 1), img[qi, qj + 1], center, img[qi, qj - 1]
        )
        grad_y = _one_sided(
            usable(qi + 1, qj), usable(qi - 1, qj), img[qi + 1, qj], center, img[qi - 1, qj]
        )
        estimate = center + grad_y * r[:, 0:1] + grad_x * r[:, 1:2]
        value = np.sum(w[:, None] * estimate, axis=0) / np.sum(w)
        return np.clip(value, self.lo, self.hi)

    def run(self):
        flags, T = self.flags, self.T
        width = flags.shape[1]
        inside = flags == INSIDE
        near_inside = np.zeros_like(inside)
        near_inside[1:, :] |= inside[:-1, :]
        near_inside[:-1, :] |= inside[1:, :]
        near_inside[:, 1:] |= inside[:, :-1]
        near_inside[:, :-1] |= inside[:, 1:]
        band = (flags == KNOWN) & near_inside
        flags[band] = BAND
        heap = [(0.0, int(idx)) for idx in np.flatnonzero(band)]
        heapq.heapify(heap)
        while heap:
            _, idx = heapq.heappop(heap)
            i, j = divmod(idx, width)
            flags[i, j] = KNOWN
            for di, dj in _NEIGHBORS:
                k, m = i + di, j + dj
                if flags[k, m] != INSIDE:
                    continue
                T[k, m] = min(
                    _solve(flags, T, k - 1, m, k, m - 1),
                    _solve(flags, T, k + 1, m, k, m - 1),
                    _solve(flags, T, k - 1, m, k, m + 1),
                    _solve(flags, T, k + 1, m, k, m + 1),
                )
                # estimated while still INSIDE so the pixel is not its own source
                self.image[k, m] = self._estimate(k, m)
                flags[k, m] = BAND
                heapq.heappush(heap, (T[k, m], k * width + m))
        reached = flags[self.inner] <= BAND
        return self.image[self.inner].copy(), reached


def _inpaint(image, known_mask, radius, fill_mask):
    image = np.asarray(image, dtype=np.float64)
    scalar = image.ndim == 2
    if scalar:
        image = image[..., None]
    known = np.asarray(known_mask, dtype=bool)
    if known.shape != image.shape[:2]:
        raise InpaintError(f"mask shape {known.shape} does not match image {image.shape[:2]}")
    if not known.any():
        raise InpaintError("cannot inpaint an image without known pixels")
    fill = ~known if fill_mask is None else (np.asarray(fill_mask, dtype=bool) & ~known)
    if radius < 1:
        raise InpaintError("radius must be at least 1")
    if not fill.any():
        out = image.copy()
        reached = known.copy()
    else:
        out, reached = _Telea(image, known, fill, int(radius)).run()
        out[~reached] = image[~reached]
    return (out[..., 0] if scalar else out), reached


def fmm_inpaint(image, known_mask, radius: int = 3, fill_mask=None) -> np.ndarray:
    """Fill the unknown pixels of ``image`` by fast marching.

    :param image: ``(H, W)`` or ``(H, W, C)`` grid.
    :param known_mask: ``(H, W)`` booleans; these pixels are kept as they are.
    :param radius: Neighborhood radius in pixels.
    :param fill_mask: Pixels to fill; defaults to every unknown pixel. Pixels
      neither known nor to be filled are ignored and returned unchanged.
    """
    out, _ = _inpaint(image, known_mask, radius, fill_mask)
    return out


def fill_bundle(bundle: BakeBundle, radius: int = 3) -> BakeBundle:
    """Inpaint texture and displacement of a bake.

    The first pass fills unmatched texels inside the UV charts from the matched
    ones; the second pass fills everything else (chart gutters and any chart
    the first pass could not reach). Masks and confidence maps are kept.
    """
    matched = bundle.matched
    if matched.all():
        return bundle
    if not matched.any():
        logger.warning(f"Frame '{bundle.frame_id}' has no matched texels; nothing to inpaint from")
        return bundle
    stacked = np.concatenate([bundle.texture, bundle.displacement], axis=-1)
    in_chart = bundle.defined & ~matched
    stacked, reached = _inpaint(stacked, matched, radius, in_chart)
    logger.debug(
        f"Frame '{bundle.frame_id}': filled {int((reached & in_chart).sum())} in-chart texels"
    )
    stacked, reached = _inpaint(stacked, reached, radius, None)
    assert reached.all()
    return bundle.replace(
        texture=np.clip(stacked[..., :3], 0.0, 1.0), displacement=stacked[..., 3:]
    )


class InpaintError(Exception):
    """Base class for exceptions in this module."""

    pass
