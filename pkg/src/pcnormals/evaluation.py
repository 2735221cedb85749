"""Angular error metrics and report emission.

Unoriented errors use the absolute inner product (range [0, 90] degrees);
oriented errors use the signed product (range [0, 180]). PGP(tau) is the
fraction of points with error strictly below tau for integer thresholds
0..90, and AUC is the trapezoidal mean of that curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, EmptyInputError, ParameterError, SizeError

PGP_THRESHOLDS = np.arange(91)

MODES = ("unoriented", "oriented")


@dataclass(frozen=True)
class EvalReport:
    name: str
    category: str
    mode: str
    per_point_errors: np.ndarray
    rmse: float
    pgp_curve: np.ndarray
    auc: float


def _unit_rows(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise SizeError(f"{what} must be an (n, 3) array, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if (norms < 1e-12).any():
        raise DegenerateInputError(f"{what} contains a zero vector")
    return arr / norms[:, None]


def angle_errors(pred, gt, mode: str = "unoriented") -> np.ndarray:
    """Per-point angular error in degrees."""
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    pred = _unit_rows(pred, "predictions")
    gt = _unit_rows(gt, "ground truth")
    if pred.shape != gt.shape:
        raise SizeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    dots = (pred * gt).sum(axis=1)
    if mode == "unoriented":
        dots = np.abs(dots)
    return np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))


def angle_error(n_a, n_b, mode: str = "unoriented") -> float:
    """Angular error between a single pair of directions, in degrees."""
    a = np.asarray(n_a, dtype=float).reshape(1, 3)
    b = np.asarray(n_b, dtype=float).reshape(1, 3)
    return float(angle_errors(a, b, mode)[0])


def rmse(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EmptyInputError("no errors to aggregate")
    return float(np.sqrt(np.mean(errors * errors)))


def category_rmse(per_shape_rmses) -> float:
    """Category score: mean of per-shape RMSEs."""
    values = np.asarray(list(per_shape_rmses), dtype=float)
    if values.size == 0:
        raise EmptyInputError("no shapes in category")
    return float(values.mean())


def pgp_auc(errors) -> tuple[np.ndarray, float]:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EmptyInputError("no errors to aggregate")
    curve = (errors[None, :] < PGP_THRESHOLDS[:, None]).mean(axis=1)
    auc = float(np.trapezoid(curve, PGP_THRESHOLDS) / 90.0)
    return curve, auc


def evaluate(pred, gt, mode: str = "unoriented", name: str = "", category: str = "") -> EvalReport:
    errors = angle_errors(pred, gt, mode)
    curve, auc = pgp_auc(errors)
    return EvalReport(
        name=name,
        category=category,
        mode=mode,
        per_point_errors=errors,
        rmse=rmse(errors),
        pgp_curve=curve,
        auc=auc,
    )


def write_report_csv(path, reports: list[EvalReport], include_category_mean: bool = True) -> None:
    """One row per shape plus an optional mean row per category."""
    path = Path(path)
    with path.open("w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape", "category", "mode", "rmse", "auc"])
        for rep in reports:
            writer.writerow([rep.name, rep.category, rep.mode, "%.17g" % rep.rmse, "%.17g" % rep.auc])
        if include_category_mean and len(reports) > 1:
            by_category: dict[tuple, list[EvalReport]] = {}
            for rep in reports:
                by_category.setdefault((rep.category, rep.mode), []).append(rep)
            for (cat, mode), reps in by_category.items():
                mean_rmse = category_rmse([r.rmse for r in reps])
                mean_auc = float(np.mean([r.auc for r in reps]))
                writer.writerow(["__mean__", cat, mode, "%.17g" % mean_rmse, "%.17g" % mean_auc])


def write_error_file(path, errors) -> None:
    """Per-point error file: one degree value per line (heatmap fodder)."""
    path = Path(path)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        for value in np.asarray(errors, dtype=float):
            fh.write("%.17g\n" % value)
