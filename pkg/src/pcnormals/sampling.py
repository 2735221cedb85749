"""Local patch and global context construction for a query point.

A query gets two inputs: a local patch (its r nearest neighbors, centered at
the query, normalized to unit radius, rotated into its principal frame) and a
global point set drawn without replacement with probability proportional to a
distance-decaying weight, so nearby structure is sampled densely while the
rest of the shape stays represented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import KdIndex, PointCloud
from .errors import DegenerateInputError, ParameterError, SizeError

WEIGHT_FLOOR = 0.05
WEIGHT_SLOPE = 1.5


@dataclass(frozen=True)
class Patch:
    """Aligned local neighborhood of one query point.

    `local_points[0]` is the query itself (at the origin); rows are ordered by
    ascending distance to the query and scaled so the farthest has norm 1.
    `align_rot_A` maps world offsets into the patch frame via row-vector
    right-multiplication: local = (world - query) @ A.T.
    """

    query_index: int
    local_points: np.ndarray
    align_rot_A: np.ndarray
    radius: float
    neighbor_indices: np.ndarray


@dataclass(frozen=True)
class GlobalSet:
    """Globally sampled context, centered at the query, scaled by cloud scale."""

    points: np.ndarray
    source_indices: np.ndarray
    weights_used: np.ndarray


def global_weights(cloud: PointCloud, i: int, r_set) -> np.ndarray:
    """Sampling weight per cloud point, clamped to [0.05, 1].

    Weight falls off linearly with distance from the query at rate 1.5 of the
    maximum distance; points in `r_set` are forced to weight 1 so a uniform
    backbone of the shape always survives.
    """
    r_set = np.asarray(list(r_set), dtype=int)
    if r_set.size and (r_set.min() < 0 or r_set.max() >= cloud.n):
        raise ParameterError("r_set contains indices outside the cloud")
    diff = cloud.points - cloud.points[i]
    dist = np.linalg.norm(diff, axis=1)
    dmax = dist.max()
    if dmax <= 0.0:
        raise DegenerateInputError("all points coincide; sampling weights undefined")
    w = np.clip(1.0 - WEIGHT_SLOPE * dist / dmax, WEIGHT_FLOOR, 1.0)
    w[r_set] = 1.0
    return w


def weighted_sample_without_replacement(
    weights: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw `count` distinct indices with probability proportional to weight.

    Uses exponential-key order statistics (key = -ln(u)/w, keep the smallest
    keys), which is deterministic for a given generator state and reduces to
    exact proportional sampling for a single draw.
    """
    weights = np.asarray(weights, dtype=float)
    if count > weights.size:
        raise SizeError(f"cannot draw {count} items from {weights.size}")
    if (weights <= 0).any():
        raise ParameterError("weights must be positive")
    u = np.maximum(rng.random(weights.size), 1e-300)
    keys = -np.log(u) / weights
    order = np.argsort(keys, kind="stable")
    return order[:count]


def sample_global(cloud: PointCloud, i: int, r_prime: int, rng: np.random.Generator) -> GlobalSet:
    """Draw the global point set for query `i` (deterministic given rng state)."""
    if r_prime <= 0:
        raise SizeError(f"r_prime must be positive, got {r_prime}")
    if r_prime > cloud.n:
        raise SizeError(f"r_prime={r_prime} exceeds point count {cloud.n}")
    if cloud.scale_s <= 0.0:
        raise DegenerateInputError("cloud has zero extent")
    r_set = rng.choice(cloud.n, size=r_prime, replace=False)
    w = global_weights(cloud, i, r_set)
    chosen = weighted_sample_without_replacement(w, r_prime, rng)
    pts = (cloud.points[chosen] - cloud.points[i]) / cloud.scale_s
    return GlobalSet(points=pts, source_indices=chosen, weights_used=w[chosen])


def pca_align(points) -> tuple[np.ndarray, np.ndarray]:
    """Rotate `points` into their principal frame.

    Returns (aligned, A) with aligned = (points - centroid) @ A.T. Rows of A
    are the covariance eigenvectors in descending eigenvalue order, signs
    fixed deterministically, det(A) = +1, so the smallest-variance direction
    maps to the z-axis.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise DegenerateInputError("principal alignment needs at least 3 points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    vecs = eigvecs[:, ::-1]  # columns, descending eigenvalue
    vals = eigvals[::-1]
    if vals[0] <= 0.0 or vals[1] <= 1e-12 * vals[0]:
        raise DegenerateInputError("points are collinear; principal frame undefined")
    # deterministic sign: largest-magnitude component of each axis positive
    for c in range(3):
        pivot = np.argmax(np.abs(vecs[:, c]))
        if vecs[pivot, c] < 0:
            vecs[:, c] = -vecs[:, c]
    if np.linalg.det(vecs) < 0:
        vecs[:, 1] = -vecs[:, 1]
    rot = vecs.T
    return centered @ vecs, rot


def sample_local_patch(
    cloud: PointCloud, i: int, r: int, index: KdIndex | None = None
) -> Patch:
    """Build the aligned, unit-radius local patch around query `i`.

    Patches with fewer than 3 points skip principal alignment (identity
    rotation); a zero-radius patch (r = 1) is returned unscaled.
    """
    if index is None:
        index = KdIndex(cloud)
    idx = index.knn(cloud.points[i], r)
    pts = cloud.points[idx]
    centered = pts - cloud.points[i]
    if r >= 3:
        _, rot = pca_align(pts)
    else:
        rot = np.eye(3)
    local = centered @ rot.T
    radius = float(np.linalg.norm(local, axis=1).max())
    if radius > 0.0:
        local = local / radius
    return Patch(
        query_index=int(i),
        local_points=local,
        align_rot_A=rot,
        radius=radius,
        neighbor_indices=idx,
    )
