"""Consistent normal orientation: MST sign propagation and sign correction.

`mst_orient` builds a kNN graph weighted by 1 - |n_a . n_b|, extracts a
minimum spanning tree, roots it at the highest point (normal flipped toward
+z if needed), and flips each child whose normal disagrees with its parent.
`sign_correct` snaps unoriented predictions to an already-consistent
reference field; it never changes unsigned angles and is idempotent.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass

import numpy as np

from .cloud import KdIndex, PointCloud, load_normals
from .errors import DegenerateInputError, MissingDataError, ParameterError, SizeError


@dataclass(frozen=True)
class OrientedField:
    """Unit normals row-aligned with a cloud, plus where they came from."""

    normals: np.ndarray
    source: str

    def __post_init__(self):
        norms = np.linalg.norm(self.normals, axis=1)
        if (norms < 1e-12).any():
            raise DegenerateInputError("oriented field contains a zero normal")


def _knn_adjacency(cloud: PointCloud, k: int) -> list[list[int]]:
    index = KdIndex(cloud)
    adjacency: list[set[int]] = [set() for _ in range(cloud.n)]
    kk = min(k + 1, cloud.n)
    for i in range(cloud.n):
        for j in index.knn(cloud.points[i], kk):
            if j != i:
                adjacency[i].add(int(j))
                adjacency[int(j)].add(i)
    return [sorted(nbrs) for nbrs in adjacency]


def mst_orient(cloud: PointCloud, k: int = 10) -> OrientedField:
    """Globally consistent signs by propagation along a minimum spanning tree.

    Disconnected kNN graphs are handled per component (with a warning); each
    component is rooted at its highest point.
    """
    if cloud.normals is None:
        raise MissingDataError("cloud carries no normals to orient")
    if k < 2:
        raise ParameterError(f"graph degree k must be at least 2, got {k}")
    n = cloud.n
    normals = cloud.normals.copy()
    adjacency = _knn_adjacency(cloud, k)

    visited = np.zeros(n, dtype=bool)
    tree: list[list[int]] = [[] for _ in range(n)]
    components = 0
    while not visited.all():
        remaining = np.flatnonzero(~visited)
        root = remaining[np.argmax(cloud.points[remaining, 2])]
        components += 1
        # Prim growth; heap entries (weight, parent, child) are fully ordered
        visited[root] = True
        heap: list[tuple[float, int, int]] = []
        for j in adjacency[root]:
            heapq.heappush(heap, (1.0 - abs(normals[root] @ normals[j]), root, j))
        while heap:
            _, parent, child = heapq.heappop(heap)
            if visited[child]:
                continue
            visited[child] = True
            tree[parent].append(child)
            for j in adjacency[child]:
                if not visited[j]:
                    heapq.heappush(heap, (1.0 - abs(normals[child] @ normals[j]), child, j))

        if normals[root, 2] < 0:
            normals[root] = -normals[root]
        stack = [root]
        while stack:
            node = stack.pop()
            for child in tree[node]:
                if normals[node] @ normals[child] < 0:
                    normals[child] = -normals[child]
                stack.append(child)
    if components > 1:
        warnings.warn(
            f"kNN graph has {components} components; orientation propagated per component",
            stacklevel=2,
        )
    return OrientedField(normals=normals, source="mst")


def sign_correct(pred, ref: OrientedField | np.ndarray) -> np.ndarray:
    """Flip each prediction toward the reference field (zero dot counts as +)."""
    pred = np.asarray(pred, dtype=float)
    ref_normals = ref.normals if isinstance(ref, OrientedField) else np.asarray(ref, dtype=float)
    if pred.shape != ref_normals.shape:
        raise SizeError(f"prediction shape {pred.shape} != reference shape {ref_normals.shape}")
    dots = (pred * ref_normals).sum(axis=1)
    signs = np.where(dots < 0, -1.0, 1.0)
    return pred * signs[:, None]


def load_reference_field(path, cloud: PointCloud) -> OrientedField:
    """External orientation field (e.g. a neural gradient output), unit-normalized."""
    arr = load_normals(path)
    if arr.shape[0] != cloud.n:
        raise SizeError(f"reference field has {arr.shape[0]} rows, cloud has {cloud.n}")
    norms = np.linalg.norm(arr, axis=1)
    if (norms < 1e-12).any():
        raise DegenerateInputError("reference field contains a zero normal")
    return OrientedField(normals=arr / norms[:, None], source="external_file")
