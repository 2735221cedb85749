"""End-to-end gradient verification against central finite differences.

The micro check builds the smallest full pipeline (tiny widths, 8-point
patch and global set), then finite-difference-checks the total objective
with respect to every parameter tensor and both point inputs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor, grad_check
from .cloud import PointCloud
from .model import ModelConfig, forward, init_params
from .sampling import sample_global, sample_local_patch

MICRO_CONFIG = ModelConfig(r=8, r_prime=8, k_group=4, m_weight=4, widths="micro", seed=0)


def _micro_problem(seed: int):
    """One sample (patch, global set, target) from a small random surface."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1.0, 1.0, size=(64, 2))
    z = 0.3 * xy[:, 0] ** 2 - 0.2 * xy[:, 1] ** 2 + 0.05 * rng.standard_normal(64)
    pts = np.column_stack([xy, z])
    grads = np.column_stack([-0.6 * xy[:, 0], 0.4 * xy[:, 1], np.ones(64)])
    cloud = PointCloud(pts, normals=grads / np.linalg.norm(grads, axis=1)[:, None])

    qi = int(rng.integers(cloud.n))
    patch = sample_local_patch(cloud, qi, MICRO_CONFIG.r)
    gset = sample_global(cloud, qi, MICRO_CONFIG.r_prime, rng)
    rot = patch.align_rot_A
    m = MICRO_CONFIG.m_weight
    target = losses.SampleTarget(
        n_gt=cloud.normals[qi] @ rot.T,
        neighbor_gt=cloud.normals[patch.neighbor_indices[:m]] @ rot.T,
        c_i=float(rng.uniform(0.3, 1.0)),
        patch_points_M=patch.local_points[:m],
    )
    return patch, gset, target


def micro_gradcheck(eps: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per tensor for the full model + objective.

    Keys are parameter names plus 'input.local' and 'input.global'; the
    overall maximum is stored under 'max'.
    """
    patch, gset, target = _micro_problem(seed)
    params = init_params(MICRO_CONFIG)
    # break the symmetry of the zero-initialized quaternion head so its
    # gradient is exercised away from the identity rotation
    rng = np.random.default_rng(seed + 1)
    params["qstn.fc2.W"] = Tensor(0.05 * rng.standard_normal((params["qstn.fc2.W"].shape[0], 4)), requires_grad=True)

    global_aligned = gset.points @ patch.align_rot_A.T

    def objective(p, local_t=None, global_t=None):
        out = forward(patch, gset, p, MICRO_CONFIG, local_t=local_t, global_t=global_t)
        return losses.sample_loss(out, target, losses.DEFAULT_LAMBDAS).total

    results: dict[str, float] = {}
    for name in params:
        def f(t: Tensor, _name=name):
            probe = dict(params)
            probe[_name] = t
            return objective(probe)

        results[name] = grad_check(f, params[name], eps=eps)

    results["input.local"] = grad_check(
        lambda t: objective(params, local_t=t), Tensor(patch.local_points), eps=eps
    )
    results["input.global"] = grad_check(
        lambda t: objective(params, global_t=t), Tensor(global_aligned), eps=eps
    )
    results["max"] = max(results.values())
    return results


def op_suite_check(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of each op on small random inputs."""
    rng = np.random.default_rng(seed)

    def mat(*shape):
        return rng.standard_normal(shape)

    # operands other than the checked tensor must be fixed, or the function
    # changes between the repeated evaluations grad_check performs
    a55, b55 = mat(5, 5), mat(5, 5)
    a53, c53 = mat(5, 3), mat(5, 3)
    m43, m52, m15, m33 = mat(4, 3), mat(5, 2), mat(1, 5), mat(3, 3)
    b55_t, c53_t = Tensor(b55), Tensor(c53)
    cases = {
        "matmul": (lambda t: ad.reduce_sum(ad.matmul(t, Tensor(m43))), mat(5, 4)),
        "add": (lambda t: ad.reduce_sum(ad.add(t, Tensor(b55))), a55.copy()),
        "add_bias": (lambda t: ad.reduce_sum(ad.add(Tensor(a55), t)), mat(5)),
        "sub": (lambda t: ad.reduce_sum(ad.sub(Tensor(b55), t)), a55.copy()),
        "mul": (lambda t: ad.reduce_sum(ad.mul(t, b55_t)), a55.copy()),
        "mul_col": (lambda t: ad.reduce_sum(ad.mul(Tensor(a55), t)), mat(5, 1)),
        "scalar_mul": (lambda t: ad.reduce_sum(ad.scalar_mul(t, -1.7)), a55.copy()),
        "minimum": (lambda t: ad.reduce_sum(ad.minimum(t, b55_t)), a55.copy()),
        "relu": (lambda t: ad.reduce_sum(ad.relu(t)), a55.copy()),
        "leaky_relu": (lambda t: ad.reduce_sum(ad.leaky_relu(t, 0.01)), a55.copy()),
        "sigmoid": (lambda t: ad.reduce_sum(ad.sigmoid(t)), a55.copy()),
        "exp": (lambda t: ad.reduce_sum(ad.exp(t)), 0.5 * a55.copy()),
        "sqrt": (lambda t: ad.reduce_sum(ad.sqrt(t)), np.abs(a55) + 0.5),
        "square": (lambda t: ad.reduce_sum(ad.square(t)), a55.copy()),
        "mean": (lambda t: ad.reduce_mean(t), a55.copy()),
        "max_pool_rows": (
            lambda t: ad.reduce_sum(ad.mul(ad.reshape(ad.max_pool_rows(t), (1, 5)), Tensor(m15))),
            a55.copy(),
        ),
        "group_max_pool": (lambda t: ad.reduce_sum(ad.square(ad.group_max_pool(t, 3))), mat(12, 4)),
        "concat_cols": (lambda t: ad.reduce_sum(ad.square(ad.concat_cols(t, Tensor(m52)))), a53.copy()),
        "transpose": (lambda t: ad.reduce_sum(ad.matmul(ad.transpose(t), Tensor(m52))), mat(5, 3)),
        "reshape": (lambda t: ad.reduce_sum(ad.square(ad.reshape(t, (3, 5)))), mat(5, 3)),
        "gather_rows": (lambda t: ad.reduce_sum(ad.square(ad.gather_rows(t, [0, 2, 2, 4]))), a53.copy()),
        "repeat_row": (lambda t: ad.reduce_sum(ad.square(ad.repeat_row(t, 4))), mat(3)),
        "l2norm_rows": (lambda t: ad.reduce_sum(ad.l2norm_rows(t)), a53 + 2.0),
        "normalize_rows": (
            lambda t: ad.reduce_sum(ad.mul(ad.normalize_rows(t), c53_t)),
            a53 + 2.0,
        ),
        "cross3": (lambda t: ad.reduce_sum(ad.l2norm_rows(ad.cross3(t, c53_t))), a53.copy()),
        "dot_rows": (lambda t: ad.reduce_sum(ad.square(ad.dot_rows(t, c53_t))), a53.copy()),
        "softmax_rows": (
            lambda t: ad.reduce_sum(ad.mul(ad.softmax_rows(t), c53_t)),
            a53.copy(),
        ),
        "quat_to_rot": (
            lambda t: ad.reduce_sum(ad.mul(ad.quat_to_rot(t), Tensor(m33))),
            rng.standard_normal(4) + np.array([1.5, 0, 0, 0]),
        ),
    }
    results = {}
    for name, (fn, x) in cases.items():
        results[name] = grad_check(fn, Tensor(x), eps=eps)
    results["max"] = max(results.values())
    return results
