"""Per-sample confidence estimation against a paired noise-free cloud.

Two signals grade how trustworthy a training sample is:
  * surface inclusion: distance from the (noisy) point to the nearest clean
    point, decayed as exp(-d / (s * sigma_S)) with s the cloud scale;
  * normal discrepancy: the unsigned angle between the sample's annotated
    normal and the nearest clean point's normal, normalized to [0, 1] and
    decayed as exp(-d / sigma_N).

Both equal 1 exactly when the sample sits on the clean surface with a
matching normal and decrease strictly as either distance grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import KdIndex, PointCloud, save_conf
from .errors import DegenerateInputError, MissingDataError, ParameterError

SIGMA_SURFACE = 0.05
SIGMA_NORMAL = 0.06


@dataclass(frozen=True)
class ConfidenceRecord:
    point_index: int
    d_surface: float
    d_normal: float
    c_surface: float
    c_normal: float


def surface_distance(p, clean_index: KdIndex) -> float:
    """Distance from `p` to the nearest point of the clean cloud."""
    _, dist = clean_index.nearest(p)
    return dist


def surface_confidence(d_s: float, s: float, sigma_s: float) -> float:
    if s <= 0.0:
        raise ParameterError(f"cloud scale must be positive, got {s}")
    if sigma_s <= 0.0:
        raise ParameterError(f"sigma_s must be positive, got {sigma_s}")
    return math.exp(-d_s / (s * sigma_s))


def nearest_surface_normal(p, clean: PointCloud, clean_index: KdIndex | None = None) -> np.ndarray:
    """Normal of the clean point closest to `p` (ties to the lower index)."""
    if clean.normals is None:
        raise MissingDataError("clean cloud carries no normals")
    if clean_index is None:
        clean_index = KdIndex(clean)
    idx, _ = clean_index.nearest(p)
    return clean.normals[idx]


def normal_discrepancy(n, n_hat) -> float:
    """Unsigned angular gap between two directions, scaled to [0, 1].

    Flip-invariant: the inner product enters in absolute value, so n and -n
    are equivalent. Evaluated as atan2(|n x n_hat|, |n . n_hat|), which
    equals arccos of the clamped absolute inner product but is exact at the
    endpoints (0 for identical vectors, 1 for perpendicular ones).
    """
    n = np.asarray(n, dtype=float)
    n_hat = np.asarray(n_hat, dtype=float)
    nn = np.linalg.norm(n)
    nh = np.linalg.norm(n_hat)
    if nn < 1e-12 or nh < 1e-12:
        raise DegenerateInputError("zero-length normal in discrepancy computation")
    u = n / nn
    v = n_hat / nh
    return math.atan2(np.linalg.norm(np.cross(u, v)), abs(float(u @ v))) / (math.pi / 2.0)


def normal_confidence(d_n: float, sigma_n: float) -> float:
    if sigma_n <= 0.0:
        raise ParameterError(f"sigma_n must be positive, got {sigma_n}")
    if not 0.0 <= d_n <= 1.0:
        raise ParameterError(f"normal discrepancy must lie in [0, 1], got {d_n}")
    return math.exp(-d_n / sigma_n)


def annotate_dataset(
    noisy: PointCloud,
    clean: PointCloud,
    sigma_s: float = SIGMA_SURFACE,
    sigma_n: float = SIGMA_NORMAL,
    *,
    with_normal: bool = True,
    surface_out=None,
    normal_out=None,
) -> list[ConfidenceRecord]:
    """Confidence record per noisy point, associated by nearest clean point.

    The clouds need not be row-aligned. `with_normal=False` skips the
    normal-discrepancy channel (fields set to nan) for clouds without
    annotated normals. Optionally writes .conf files.
    """
    if clean.normals is None and with_normal:
        raise MissingDataError("clean cloud carries no normals")
    if noisy.normals is None and with_normal:
        raise MissingDataError("noisy cloud carries no annotated normals")
    clean_index = KdIndex(clean)
    records = []
    for i in range(noisy.n):
        p = noisy.points[i]
        idx, d_s = clean_index.nearest(p)
        c_s = surface_confidence(d_s, noisy.scale_s, sigma_s)
        if with_normal:
            d_n = normal_discrepancy(noisy.normals[i], clean.normals[idx])
            c_n = normal_confidence(d_n, sigma_n)
        else:
            d_n = math.nan
            c_n = math.nan
        records.append(ConfidenceRecord(i, d_s, d_n, c_s, c_n))
    if surface_out is not None:
        save_conf(surface_out, [rec.c_surface for rec in records])
    if normal_out is not None:
        if not with_normal:
            raise MissingDataError("normal confidences were not computed")
        save_conf(normal_out, [rec.c_normal for rec in records])
    return records
