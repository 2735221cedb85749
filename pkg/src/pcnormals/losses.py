"""Training objective: two rotation regularizers plus three
confidence-reweighted data terms.

All five terms are non-negative scalars on the same graph:
  l1  rotation orthonormality  ||I - R R^T||_F^2
  l2  z-alignment              ||(n_gt R) x z||       (row-vector ordering)
  l3  center sine loss         c * ||n_pred x n_gt||
  l4  weight constraint        c * mean_k (w_pred_k - w_gt_k)^2
  l5  neighbor consistency     c * sum_k w_pred_k * min(||dn||^2, ||dn_flip||^2)

The confidence c gates only the data terms. The neighbor term defaults to
the flip-invariant form (min over the sign of the target); the raw squared
difference stays available behind a flag since the rest of the pipeline is
sign-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, ParameterError, ShapeError, SizeError

DEFAULT_LAMBDAS = (0.1, 0.5, 0.1, 1.0, 0.25)
WEIGHT_DELTA_FLOOR = 0.05**2
WEIGHT_DELTA_SCALE = 0.3


@dataclass(frozen=True)
class SampleTarget:
    """Per-sample ground truth in the patch (pre-rotation) frame.

    The loss builder rotates these into the predicted frame alongside the
    network output. `patch_points_M` are the M query-nearest patch positions
    at unit patch scale, used to derive the weight-constraint targets.
    """

    n_gt: np.ndarray
    neighbor_gt: np.ndarray
    c_i: float
    patch_points_M: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    l1: Tensor
    l2: Tensor
    l3: Tensor
    l4: Tensor
    l5: Tensor
    total: Tensor
    lambdas: tuple

    def as_floats(self) -> tuple:
        return (
            self.l1.item(),
            self.l2.item(),
            self.l3.item(),
            self.l4.item(),
            self.l5.item(),
            self.total.item(),
        )


def _check_confidence(c_i: float) -> float:
    c_i = float(c_i)
    if not 0.0 <= c_i <= 1.0:
        raise ParameterError(f"confidence must lie in [0, 1], got {c_i}")
    return c_i


def _unit_row(v, what: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ShapeError(f"{what} must be a 3-vector")
    norm = np.linalg.norm(arr)
    if norm < 1e-12:
        raise DegenerateInputError(f"{what} is degenerate (zero length)")
    return (arr / norm).reshape(1, 3)


def _as_row_tensor(v, what: str) -> Tensor:
    if isinstance(v, Tensor):
        if v.size != 3:
            raise ShapeError(f"{what} must be a 3-vector")
        return v if v.values.ndim == 2 else ad.reshape(v, (1, 3))
    return Tensor(_unit_row(v, what))


def loss_rotation_reg(rot: Tensor) -> Tensor:
    """||I - R R^T||_F^2; zero exactly when R is orthonormal."""
    rot = ad.as_tensor(rot)
    if rot.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {rot.shape}")
    gap = ad.sub(Tensor(np.eye(3)), ad.matmul(rot, ad.transpose(rot)))
    return ad.reduce_sum(ad.square(gap))


def loss_z_align(n_gt, rot: Tensor) -> Tensor:
    """||(n_gt R) x z|| with n_gt applied as a row vector."""
    rot = ad.as_tensor(rot)
    if rot.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {rot.shape}")
    row = _as_row_tensor(n_gt, "ground-truth normal")
    rotated = ad.matmul(row, rot)
    z = Tensor(np.array([[0.0, 0.0, 1.0]]))
    return ad.reshape(ad.l2norm_rows(ad.cross3(rotated, z)), ())


def loss_center(n_pred: Tensor, n_gt, c_i: float) -> Tensor:
    """Confidence-weighted sine distance between predicted and target normal."""
    c_i = _check_confidence(c_i)
    pred = _as_row_tensor(n_pred, "predicted normal")
    gt = _as_row_tensor(n_gt, "ground-truth normal")
    sine = ad.reshape(ad.l2norm_rows(ad.cross3(pred, gt)), ())
    return ad.scalar_mul(sine, c_i)


def weight_targets(patch_points_M: np.ndarray, n_gt: np.ndarray, *, delta_squared_in_max: bool = False) -> np.ndarray:
    """Soft inlier targets from tangent-plane offsets of the M patch points.

    w_k = exp(-(p_k . n)^2 / delta^2) with delta = max(0.05^2, 0.3 * mean_k
    (p_k . n)^2). `delta_squared_in_max` reads the max as producing delta^2
    instead of delta (the dimensionally consistent variant).
    """
    pts = np.asarray(patch_points_M, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise SizeError(f"expected (M, 3) patch points, got shape {pts.shape}")
    n = np.asarray(n_gt, dtype=float).reshape(3)
    n = n / np.linalg.norm(n)
    offsets_sq = (pts @ n) ** 2
    pooled = WEIGHT_DELTA_SCALE * offsets_sq.mean()
    if delta_squared_in_max:
        delta_sq = max(WEIGHT_DELTA_FLOOR, pooled)
    else:
        delta = max(WEIGHT_DELTA_FLOOR, pooled)
        delta_sq = delta * delta
    return np.exp(-offsets_sq / delta_sq)


def loss_weight(
    w_pred: Tensor,
    patch_points_M,
    n_gt,
    c_i: float,
    *,
    delta_squared_in_max: bool = False,
) -> Tensor:
    """Confidence-weighted mean squared error against the soft inlier targets."""
    c_i = _check_confidence(c_i)
    w_pred = ad.as_tensor(w_pred)
    if w_pred.values.ndim != 1 or w_pred.size < 1:
        raise SizeError(f"expected a non-empty weight vector, got shape {w_pred.shape}")
    w_gt = weight_targets(patch_points_M, n_gt, delta_squared_in_max=delta_squared_in_max)
    if w_gt.shape != w_pred.shape:
        raise SizeError(f"weights {w_pred.shape} vs patch points {w_gt.shape} disagree")
    return ad.scalar_mul(ad.reduce_mean(ad.square(ad.sub(w_pred, Tensor(w_gt)))), c_i)


def loss_neighbor(
    neighbor_pred: Tensor,
    neighbor_gt,
    w_pred: Tensor,
    c_i: float,
    *,
    flip_invariant: bool = True,
) -> Tensor:
    """Weighted per-neighbor normal consistency, flip-invariant by default."""
    c_i = _check_confidence(c_i)
    pred = ad.as_tensor(neighbor_pred)
    gt = ad.as_tensor(neighbor_gt)
    w_pred = ad.as_tensor(w_pred)
    if pred.values.ndim != 2 or pred.shape[1] != 3:
        raise ShapeError(f"neighbor predictions must be (M, 3), got {pred.shape}")
    if gt.shape != pred.shape:
        raise SizeError(f"neighbor target shape {gt.shape} != prediction shape {pred.shape}")
    if w_pred.shape != (pred.shape[0],):
        raise SizeError(f"weight vector shape {w_pred.shape} does not match M={pred.shape[0]}")
    diff = ad.sub(pred, gt)
    sq = ad.dot_rows(diff, diff)
    if flip_invariant:
        summed = ad.add(pred, gt)
        sq = ad.minimum(sq, ad.dot_rows(summed, summed))
    return ad.scalar_mul(ad.reduce_sum(ad.mul(w_pred, sq)), c_i)


def total_loss(l1, l2, l3, l4, l5, lambdas=DEFAULT_LAMBDAS) -> LossBreakdown:
    """Weighted sum of the five terms (confidence already inside l3..l5)."""
    lambdas = tuple(float(v) for v in lambdas)
    if len(lambdas) != 5:
        raise ParameterError(f"expected 5 lambda factors, got {len(lambdas)}")
    terms = [ad.as_tensor(t) for t in (l1, l2, l3, l4, l5)]
    total = ad.scalar_mul(terms[0], lambdas[0])
    for lam, term in zip(lambdas[1:], terms[1:]):
        total = ad.add(total, ad.scalar_mul(term, lam))
    return LossBreakdown(*terms, total=total, lambdas=lambdas)


def sample_loss(
    output,
    target: SampleTarget,
    lambdas=DEFAULT_LAMBDAS,
    *,
    flip_invariant_neighbor: bool = True,
    delta_squared_in_max: bool = False,
) -> LossBreakdown:
    """Full objective for one model output against its target.

    `output` is a model forward result carrying graph handles (rot_t,
    n_pred_t, neighbor_t, weights_t). Targets stored in the patch frame are
    rotated into the predicted frame on the graph so both sides live in the
    same coordinates.
    """
    rot_t = output.rot_t
    rot_inv = ad.transpose(rot_t)
    gt_row = Tensor(_unit_row(target.n_gt, "ground-truth normal"))
    gt_rotated = ad.matmul(gt_row, rot_inv)
    neighbor_gt = np.asarray(target.neighbor_gt, dtype=float)
    neighbor_rotated = ad.matmul(Tensor(neighbor_gt), rot_inv)

    l1 = loss_rotation_reg(rot_t)
    l2 = loss_z_align(gt_row, rot_t)
    l3 = loss_center(output.n_pred_t, gt_rotated, target.c_i)
    l4 = loss_weight(
        output.weights_t,
        target.patch_points_M,
        target.n_gt,
        target.c_i,
        delta_squared_in_max=delta_squared_in_max,
    )
    l5 = loss_neighbor(
        output.neighbor_t,
        neighbor_rotated,
        output.weights_t,
        target.c_i,
        flip_invariant=flip_invariant_neighbor,
    )
    return total_loss(l1, l2, l3, l4, l5, lambdas)
