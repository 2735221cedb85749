"""Classical reference estimators: PCA plane fit and order-2 jet fit."""

from __future__ import annotations

import warnings

import numpy as np

from .cloud import KdIndex, PointCloud
from .errors import DegenerateInputError, ParameterError

JET_CONDITION_LIMIT = 1e12
JET_RIDGE = 1e-12


def pca_normal(cloud: PointCloud, i: int, k: int, index: KdIndex | None = None) -> np.ndarray:
    """Unoriented normal as the smallest-variance direction of the k neighbors."""
    if k < 3:
        raise ParameterError(f"PCA normal needs k >= 3, got {k}")
    if index is None:
        index = KdIndex(cloud)
    nbrs = cloud.points[index.knn(cloud.points[i], k)]
    centered = nbrs - nbrs.mean(axis=0)
    cov = centered.T @ centered / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] <= 1e-12 * max(eigvals[2], 1e-300):
        raise DegenerateInputError("neighborhood is collinear; plane fit undefined")
    normal = eigvecs[:, 0]
    return normal / np.linalg.norm(normal)


def jet_normal(cloud: PointCloud, i: int, k: int, index: KdIndex | None = None) -> np.ndarray:
    """Unoriented normal from a height-field quadric fit in the PCA frame.

    Neighbors are expressed relative to the query in its principal frame and
    rescaled to unit radius; a six-coefficient quadric h(x, y) is fit by
    ridge-regularized normal equations and the normal follows from its
    gradient at the query. Ill-conditioned systems fall back to the PCA
    normal with a warning.
    """
    if k < 6:
        raise ParameterError(f"jet normal needs k >= 6, got {k}")
    if index is None:
        index = KdIndex(cloud)
    nbrs = cloud.points[index.knn(cloud.points[i], k)]
    centered = nbrs - nbrs.mean(axis=0)
    cov = centered.T @ centered / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] <= 1e-12 * max(eigvals[2], 1e-300):
        raise DegenerateInputError("neighborhood is collinear; jet fit undefined")
    frame = eigvecs[:, ::-1]  # columns: two tangents then the height axis
    local = (nbrs - cloud.points[i]) @ frame
    scale = np.linalg.norm(local, axis=1).max()
    if scale > 0:
        local = local / scale
    x, y, h = local[:, 0], local[:, 1], local[:, 2]
    design = np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=1)
    gram = design.T @ design
    if np.linalg.cond(gram) > JET_CONDITION_LIMIT:
        warnings.warn("jet fit ill-conditioned; falling back to PCA normal", stacklevel=2)
        return pca_normal(cloud, i, k, index=index)
    coef = np.linalg.solve(gram + JET_RIDGE * np.eye(6), design.T @ h)
    local_normal = np.array([-coef[1], -coef[2], 1.0])
    normal = frame @ local_normal
    return normal / np.linalg.norm(normal)


def estimate_normals(
    cloud: PointCloud,
    method: str,
    k: int,
    queries=None,
    index: KdIndex | None = None,
) -> np.ndarray:
    """Per-point normals for `queries` (default all points) in input order."""
    estimator = {"pca": pca_normal, "jet": jet_normal}.get(method)
    if estimator is None:
        raise ParameterError(f"unknown baseline method {method!r}")
    if index is None:
        index = KdIndex(cloud)
    if queries is None:
        queries = np.arange(cloud.n)
    queries = np.asarray(queries, dtype=int)
    out = np.zeros((queries.size, 3))
    for row, q in enumerate(queries):
        out[row] = estimator(cloud, int(q), k, index=index)
    return out
