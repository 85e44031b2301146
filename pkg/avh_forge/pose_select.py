"""
Training-frame selection by pose variance.

Poses are compared through the cosines of their joint angles. The frames are
clustered with k-means (k-means++ seeding from a fixed seed, then Lloyd
iterations) and the frame nearest each cluster centre is selected.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionConfig:
    """
    :param n_frames: Number of training frames ``f``.
    :param n_validation: Number of validation frames, disjoint from the training ones.
    :param max_iters: Lloyd iteration limit.
    :param tol: Relative change of the within-cluster sum of squares that stops Lloyd.
    :param seed: Seed of the k-means++ initialization.
    """

    n_frames: int = 100
    n_validation: int = 10
    max_iters: int = 300
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1 or self.n_validation < 0:
            raise SelectionError("n_frames must be positive and n_validation nonnegative")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: List[float] = field(default_factory=list)
    iterations: int = 0


@dataclass
class Selection:
    training: List[int]
    validation: List[int]
    labels: np.ndarray
    centroids: np.ndarray
    degenerate_clusters: int = 0


def pose_features(theta) -> np.ndarray:
    """Cosines of all joint angles in joint-major order (69 values for 23 joints)."""
    return np.cos(np.asarray(theta, dtype=np.float64).reshape(-1))


def _sq_distances(X, centroids):
    return np.sum((X[:, None, :] - centroids[None, :, :]) ** 2, axis=2)


def kmeans_plusplus(X, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding. When every point already coincides with a chosen
    centre the lowest-index unchosen point is taken."""
    n = len(X)
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = _sq_distances(X, X[chosen]).min(axis=1)
        total = d2.sum()
        if total > 0:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        else:
            unchosen = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(unchosen[0]))
    return X[chosen].copy()


def kmeans(
    X, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6
) -> KMeansResult:
    """Lloyd's algorithm; an empty cluster is re-seeded at the point farthest
    from its assigned centre."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(X, k, rng)
    d2 = _sq_distances(X, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(X)), labels].sum())
    result = KMeansResult(centroids=centroids, labels=labels, inertia=[inertia])
    scale = max(inertia, 1.0)
    for iteration in range(max_iters):
        new_centroids = centroids.copy()
        own = d2[np.arange(len(X)), labels]
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                new_centroids[c] = X[far]
                own[far] = 0.0
        d2 = _sq_distances(X, new_centroids)
        new_labels = np.argmin(d2, axis=1)
        new_inertia = float(d2[np.arange(len(X)), new_labels].sum())
        assert new_inertia <= inertia + 1e-12 * scale, "k-means inertia increased"
        change = (inertia - new_inertia) / inertia if inertia > 0 else 0.0
        centroids, labels, inertia = new_centroids, new_labels, new_inertia
        result.inertia.append(inertia)
        result.iterations = iteration + 1
        if change < tol:
            break
    result.centroids = centroids
    result.labels = labels
    return result


def _nearest(X, centroid, candidates) -> Optional[int]:
    if not len(candidates):
        return None
    d = np.sum((X[candidates] - centroid) ** 2, axis=1)
    # candidates are ascending, so argmin breaks ties towards the lowest index
    return int(candidates[int(np.argmin(d))])


def select(poses, config: SelectionConfig = SelectionConfig()) -> Selection:
    """Training frames (one per cluster) and validation frames (the next-nearest
    members of distinct clusters), both sorted."""
    X = np.stack([pose_features(theta) for theta in poses]) if len(poses) else np.zeros((0, 0))
    n = len(X)
    f = config.n_frames
    if f > n:
        raise SelectionError(f"cannot select {f} frames out of {n}")
    result = kmeans(X, f, seed=config.seed, max_iters=config.max_iters, tol=config.tol)
    taken = np.zeros(n, dtype=bool)
    training = []
    degenerate = 0
    for c in range(f):
        members = np.flatnonzero((result.labels == c) & ~taken)
        pick = _nearest(X, result.centroids[c], members)
        if pick is None:
            degenerate += 1
            pick = _nearest(X, result.centroids[c], np.flatnonzero(~taken))
        taken[pick] = True
        training.append(pick)
    if degenerate:
        logger.warning(f"{degenerate} of {f} k-means clusters had no frame of their own")

    validation = []
    wanted = min(config.n_validation, n - f)
    if wanted < config.n_validation:
        logger.warning(f"only {wanted} frames left for validation")
    for c in range(f):
        if len(validation) == wanted:
            break
        pick = _nearest(X, result.centroids[c], np.flatnonzero((result.labels == c) & ~taken))
        if pick is not None:
            taken[pick] = True
            validation.append(pick)
    c = 0
    while len(validation) < wanted:
        pick = _nearest(X, result.centroids[c % f], np.flatnonzero(~taken))
        taken[pick] = True
        validation.append(pick)
        c += 1
    return Selection(
        training=sorted(training),
        validation=sorted(validation),
        labels=result.labels,
        centroids=result.centroids,
        degenerate_clusters=degenerate,
    )


def select_frames(poses, f: int = 100, seed: int = 0) -> List[int]:
    """Sorted indices of ``f`` frames, the one nearest each k-means centre."""
    return select(poses, SelectionConfig(n_frames=f, n_validation=0, seed=seed)).training


class SelectionError(Exception):
    """Base class for exceptions in this module."""

    pass
