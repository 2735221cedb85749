"""Point-cloud container, spatial index, and plain-text file I/O.

File formats (all ASCII, LF line endings, one record per line):
    .xyz      "x y z"            positions
    .normals  "nx ny nz"         unit vectors, row-aligned with the .xyz
    .conf     one real per line  confidence values in [0, 1]
    .pidx     one integer        query-point indices

Values are written with 17 significant digits so a load/save round trip
reproduces doubles exactly.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateInputError,
    EmptyInputError,
    ParameterError,
    ParseError,
    SizeError,
)

FLOAT_FMT = "%.17g"


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SizeError(f"expected an (n, 3) position array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise EmptyInputError("point cloud has no points")
    if not np.isfinite(pts).all():
        raise ParameterError("positions contain non-finite values")
    return pts


def bbox_diagonal(points: np.ndarray) -> float:
    """Euclidean diagonal of the axis-aligned bounding box."""
    extent = points.max(axis=0) - points.min(axis=0)
    return float(np.sqrt((extent * extent).sum()))


class PointCloud:
    """Positions with optional per-point normals and confidences.

    `points` is read-only after construction; derive a new cloud instead of
    mutating coordinates so `scale_s` (the bounding-box diagonal) always
    matches the stored positions. Normals are renormalized to unit length on
    assignment; confidences must lie in [0, 1].
    """

    def __init__(self, points, normals=None, confidences=None):
        self._points = _as_points(points)
        self._points.setflags(write=False)
        self.scale_s = bbox_diagonal(self._points)
        self._normals = None
        self._confidences = None
        if normals is not None:
            self.normals = normals
        if confidences is not None:
            self.confidences = confidences

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def n(self) -> int:
        return self._points.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def normals(self) -> np.ndarray | None:
        return self._normals

    @normals.setter
    def normals(self, normals):
        arr = np.asarray(normals, dtype=float)
        if arr.shape != self._points.shape:
            raise SizeError(
                f"normals shape {arr.shape} does not match points shape {self._points.shape}"
            )
        norms = np.linalg.norm(arr, axis=1)
        if (norms < 1e-12).any():
            raise DegenerateInputError("zero-length normal encountered")
        # rescale only rows that need it, so unit inputs pass through bit-exact
        off = np.abs(norms - 1.0) > 1e-12
        if off.any():
            arr = arr.copy()
            arr[off] /= norms[off, None]
        arr.setflags(write=False)
        self._normals = arr

    @property
    def confidences(self) -> np.ndarray | None:
        return self._confidences

    @confidences.setter
    def confidences(self, values):
        arr = np.asarray(values, dtype=float)
        if arr.shape != (self.n,):
            raise SizeError(f"expected {self.n} confidences, got shape {arr.shape}")
        if (arr < 0).any() or (arr > 1).any():
            raise ParameterError("confidences must lie in [0, 1]")
        arr.setflags(write=False)
        self._confidences = arr

    def with_points(self, points) -> "PointCloud":
        """New cloud with replaced positions (normals/confidences dropped)."""
        return PointCloud(points)

    def subset(self, indices) -> "PointCloud":
        """New cloud restricted to `indices`, carrying attributes along."""
        idx = np.asarray(indices, dtype=int)
        normals = self._normals[idx] if self._normals is not None else None
        conf = self._confidences[idx] if self._confidences is not None else None
        return PointCloud(self._points[idx], normals=normals, confidences=conf)


class KdIndex:
    """Immutable spatial index over a snapshot of cloud positions.

    Query results match a brute-force scan exactly: neighbors are ordered by
    ascending distance with ties broken by the lower point index.
    """

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
        self._points = np.array(pts, dtype=float)
        self._points.setflags(write=False)
        self.count = self._points.shape[0]
        self.checksum = hashlib.sha256(self._points.tobytes()).hexdigest()
        self._tree = cKDTree(self._points)

    def _resolve(self, q: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
        # order candidates by (squared distance, index) and keep the first k
        diff = self._points[candidates] - q
        d2 = (diff * diff).sum(axis=1)
        order = np.lexsort((candidates, d2))
        return candidates[order[:k]]

    def knn(self, q, k: int) -> np.ndarray:
        """Indices of the k nearest points to `q`."""
        if k <= 0:
            raise SizeError(f"k must be positive, got {k}")
        if k > self.count:
            raise SizeError(f"k={k} exceeds point count {self.count}")
        q = np.asarray(q, dtype=float).reshape(3)
        m = min(k + 1, self.count)
        dists, idx = self._tree.query(q, k=m)
        dists = np.atleast_1d(dists)
        idx = np.atleast_1d(idx)
        if m > k and dists[k] <= dists[k - 1]:
            # tie straddles the cut: pull every point within the tied radius
            radius = dists[k - 1] * (1.0 + 1e-12) + 1e-300
            candidates = np.asarray(self._tree.query_ball_point(q, radius), dtype=int)
        else:
            candidates = idx[:m]
        return self._resolve(q, candidates, k)

    def nearest(self, q) -> tuple[int, float]:
        """(index, distance) of the closest point to `q`."""
        idx = self.knn(q, 1)[0]
        return int(idx), float(np.linalg.norm(self._points[idx] - np.asarray(q, dtype=float)))


def _parse_rows(path, n_fields: int, kind: str) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open("r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            fields = stripped.split()
            if len(fields) != n_fields:
                raise ParseError(
                    f"expected {n_fields} fields per {kind} line, got {len(fields)}",
                    line=lineno,
                )
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise ParseError(f"non-numeric value in {kind} file: {stripped!r}", line=lineno)
    if not rows:
        raise EmptyInputError(f"{kind} file {path} contains no data lines")
    return np.asarray(rows, dtype=float)


def load_xyz(path) -> PointCloud:
    """Read an .xyz file into a PointCloud (scale recomputed)."""
    return PointCloud(_parse_rows(path, 3, "xyz"))


def save_xyz(path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    _write_rows(path, pts)


def load_normals(path, expected_count: int | None = None) -> np.ndarray:
    arr = _parse_rows(path, 3, "normals")
    if expected_count is not None and arr.shape[0] != expected_count:
        raise SizeError(f"expected {expected_count} normals, file has {arr.shape[0]}")
    return arr


def save_normals(path, normals) -> None:
    _write_rows(path, np.asarray(normals, dtype=float))


def load_conf(path, expected_count: int | None = None) -> np.ndarray:
    arr = _parse_rows(path, 1, "conf").reshape(-1)
    if expected_count is not None and arr.shape[0] != expected_count:
        raise SizeError(f"expected {expected_count} confidences, file has {arr.shape[0]}")
    return arr


def save_conf(path, values) -> None:
    _write_rows(path, np.asarray(values, dtype=float).reshape(-1, 1))


def load_pidx(path, point_count: int | None = None) -> np.ndarray:
    """Read a .pidx query-index file (one integer per line)."""
    arr = _parse_rows(path, 1, "pidx").reshape(-1)
    idx = arr.astype(int)
    if (idx != arr).any():
        raise ParseError("pidx file contains non-integer values")
    if (idx < 0).any():
        raise ParseError("pidx file contains negative indices")
    if point_count is not None and (idx >= point_count).any():
        raise SizeError(f"pidx entry exceeds point count {point_count}")
    return idx


def save_pidx(path, indices) -> None:
    path = Path(path)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        for i in np.asarray(indices, dtype=int):
            fh.write(f"{int(i)}\n")


def _write_rows(path, arr: np.ndarray) -> None:
    path = Path(path)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        for row in arr:
            fh.write(" ".join(FLOAT_FMT % v for v in row))
            fh.write("\n")
