import numpy as np
import pytest

from pcnormals import autodiff as ad
from pcnormals import losses
from pcnormals.autodiff import Tensor, backward, grad_check
from pcnormals.errors import ParameterError, SizeError


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestRotationReg:
    def test_identity_zero(self):
        assert losses.loss_rotation_reg(Tensor(np.eye(3))).item() == 0.0

    def test_double_identity(self):
        assert losses.loss_rotation_reg(Tensor(2.0 * np.eye(3))).item() == pytest.approx(27.0)

    def test_matches_elementwise_oracle(self, rng):
        r = rng.standard_normal((3, 3))
        expected = ((np.eye(3) - r @ r.T) ** 2).sum()
        assert losses.loss_rotation_reg(Tensor(r)).item() == pytest.approx(expected, rel=1e-12)


class TestZAlign:
    def test_aligned_zero(self):
        assert losses.loss_z_align([0, 0, 1], Tensor(np.eye(3))).item() == 0.0

    def test_x_axis_one(self):
        assert losses.loss_z_align([1, 0, 0], Tensor(np.eye(3))).item() == pytest.approx(1.0)

    def test_45_degrees(self):
        n = unit([1, 0, 1])
        assert losses.loss_z_align(n, Tensor(np.eye(3))).item() == pytest.approx(np.sin(np.pi / 4))

    def test_row_vector_ordering(self, rng):
        # n R, not R n: compare against the literal row product
        n = unit(rng.standard_normal(3))
        r = rng.standard_normal((3, 3))
        expected = np.linalg.norm(np.cross(n @ r, [0, 0, 1]))
        assert losses.loss_z_align(n, Tensor(r)).item() == pytest.approx(expected, rel=1e-12)


class TestCenterLoss:
    def test_equal_zero(self):
        n = unit([1, 2, 3])
        assert losses.loss_center(Tensor(n.reshape(1, 3)), n, 0.7).item() == pytest.approx(0.0, abs=1e-15)

    def test_perpendicular(self):
        assert losses.loss_center(Tensor([[1.0, 0, 0]]), [0, 0, 1], 1.0).item() == pytest.approx(1.0)

    def test_half_confidence_30_degrees(self):
        pred = np.array([[np.sin(np.pi / 6), 0.0, np.cos(np.pi / 6)]])
        assert losses.loss_center(Tensor(pred), [0, 0, 1], 0.5).item() == pytest.approx(0.25)

    def test_flip_invariant_in_gt(self, rng):
        pred = Tensor(unit(rng.standard_normal(3)).reshape(1, 3))
        gt = unit(rng.standard_normal(3))
        a = losses.loss_center(pred, gt, 1.0).item()
        b = losses.loss_center(pred, -gt, 1.0).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestWeightLoss:
    def test_tangent_plane_targets_one(self):
        pts = np.array([[0.3, -0.1, 0.0], [0.5, 0.2, 0.0], [-0.7, 0.1, 0.0]])
        w_gt = losses.weight_targets(pts, [0, 0, 1])
        np.testing.assert_array_equal(w_gt, [1.0, 1.0, 1.0])
        loss = losses.loss_weight(Tensor(np.ones(3)), pts, [0, 0, 1], 0.9)
        assert loss.item() == 0.0

    def test_formula_as_printed(self):
        # M=1, p.n = 0.05: delta = max(0.0025, 0.3*0.0025) = 0.0025,
        # w_gt = exp(-(0.05)^2 / 0.0025^2) = exp(-400)
        pts = np.array([[0.0, 0.0, 0.05]])
        w_gt = losses.weight_targets(pts, [0, 0, 1])
        assert w_gt[0] == pytest.approx(np.exp(-400.0))

    def test_delta_squared_variant(self):
        pts = np.array([[0.0, 0.0, 0.05]])
        w_gt = losses.weight_targets(pts, [0, 0, 1], delta_squared_in_max=True)
        assert w_gt[0] == pytest.approx(np.exp(-(0.05**2) / 0.0025))

    def test_exact_targets_zero_loss(self, rng):
        pts = rng.standard_normal((8, 3)) * 0.3
        w_gt = losses.weight_targets(pts, [0, 0, 1])
        for c in (0.2, 1.0):
            assert losses.loss_weight(Tensor(w_gt), pts, [0, 0, 1], c).item() == 0.0

    def test_mean_squared_form(self, rng):
        pts = rng.standard_normal((6, 3)) * 0.2
        w_pred = rng.random(6)
        w_gt = losses.weight_targets(pts, [0, 0, 1])
        expected = 0.5 * np.mean((w_pred - w_gt) ** 2)
        assert losses.loss_weight(Tensor(w_pred), pts, [0, 0, 1], 0.5).item() == pytest.approx(expected, rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(SizeError):
            losses.loss_weight(Tensor(np.ones(0)), np.zeros((0, 3)), [0, 0, 1], 1.0)


class TestNeighborLoss:
    def test_equal_zero(self, rng):
        gt = np.array([unit(rng.standard_normal(3)) for _ in range(5)])
        loss = losses.loss_neighbor(Tensor(gt.copy()), gt, Tensor(np.ones(5)), 1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_flipped_zero_with_min_form(self, rng):
        gt = np.array([unit(rng.standard_normal(3)) for _ in range(5)])
        loss = losses.loss_neighbor(Tensor(-gt), gt, Tensor(np.ones(5)), 1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_flipped_nonzero_with_literal_form(self, rng):
        gt = np.array([unit(rng.standard_normal(3)) for _ in range(5)])
        loss = losses.loss_neighbor(Tensor(-gt), gt, Tensor(np.ones(5)), 1.0, flip_invariant=False)
        assert loss.item() == pytest.approx(4.0 * 5)  # ||2 gt||^2 per row

    def test_single_90_degree_neighbor(self):
        pred = np.array([[1.0, 0.0, 0.0]])
        gt = np.array([[0.0, 0.0, 1.0]])
        loss = losses.loss_neighbor(Tensor(pred), gt, Tensor(np.ones(1)), 1.0)
        assert loss.item() == pytest.approx(2.0)

    def test_size_mismatch(self):
        with pytest.raises(SizeError):
            losses.loss_neighbor(Tensor(np.ones((3, 3))), np.ones((2, 3)), Tensor(np.ones(3)), 1.0)


class TestTotalLoss:
    def test_all_zero(self):
        zeros = [Tensor(0.0) for _ in range(5)]
        assert losses.total_loss(*zeros).total.item() == 0.0

    def test_lambda_sum(self):
        ones = [Tensor(1.0) for _ in range(5)]
        assert losses.total_loss(*ones).total.item() == pytest.approx(1.95)

    def test_zero_confidence_gates_data_terms(self, rng):
        # with c = 0, only the two regularizers survive
        r = Tensor(rng.standard_normal((3, 3)))
        n_gt = unit(rng.standard_normal(3))
        l1 = losses.loss_rotation_reg(r)
        l2 = losses.loss_z_align(n_gt, r)
        l3 = losses.loss_center(Tensor([[0.0, 1.0, 0.0]]), n_gt, 0.0)
        l4 = losses.loss_weight(Tensor(rng.random(4)), rng.standard_normal((4, 3)), n_gt, 0.0)
        l5 = losses.loss_neighbor(
            Tensor(np.tile([[0.0, 0.0, 1.0]], (4, 1))), np.tile(n_gt, (4, 1)), Tensor(np.ones(4)), 0.0
        )
        total = losses.total_loss(l1, l2, l3, l4, l5)
        assert total.total.item() == pytest.approx(0.1 * l1.item() + 0.5 * l2.item(), rel=1e-12)

    def test_confidence_scales_data_terms_linearly(self, rng):
        pred = Tensor(unit(rng.standard_normal(3)).reshape(1, 3))
        gt = unit(rng.standard_normal(3))
        base = losses.loss_center(pred, gt, 1.0).item()
        for t in (0.25, 0.5, 0.75):
            assert losses.loss_center(pred, gt, t).item() == pytest.approx(t * base, rel=1e-12)

    def test_confidence_out_of_range(self):
        with pytest.raises(ParameterError):
            losses.loss_center(Tensor([[0, 0, 1.0]]), [0, 0, 1], 1.5)

    def test_wrong_lambda_count(self):
        with pytest.raises(ParameterError):
            losses.total_loss(*[Tensor(0.0)] * 5, lambdas=(1, 2, 3))


class TestLossGradients:
    def test_all_terms_differentiable(self, rng):
        # grad check each term at a random non-kink point
        r0 = rng.standard_normal((3, 3)) + np.eye(3)
        n_gt = unit(rng.standard_normal(3))
        pts = rng.standard_normal((4, 3)) * 0.3

        assert grad_check(lambda t: losses.loss_rotation_reg(t), Tensor(r0), eps=1e-5) <= 1e-6
        assert grad_check(lambda t: losses.loss_z_align(n_gt, t), Tensor(r0), eps=1e-5) <= 1e-6
        assert (
            grad_check(
                lambda t: losses.loss_center(ad.reshape(t, (1, 3)), n_gt, 0.8),
                Tensor(unit(rng.standard_normal(3))),
                eps=1e-5,
            )
            <= 1e-6
        )
        assert (
            grad_check(lambda t: losses.loss_weight(t, pts, n_gt, 0.8), Tensor(rng.random(4)), eps=1e-5)
            <= 1e-6
        )
        gt = np.array([unit(rng.standard_normal(3)) for _ in range(4)])
        w_fixed = Tensor(rng.random(4))
        assert (
            grad_check(
                lambda t: losses.loss_neighbor(t, gt, w_fixed, 0.8),
                Tensor(gt + 0.3 * rng.standard_normal((4, 3))),
                eps=1e-5,
            )
            <= 1e-6
        )

    def test_nonnegative_terms(self, rng):
        for _ in range(20):
            r = Tensor(rng.standard_normal((3, 3)))
            assert losses.loss_rotation_reg(r).item() >= 0.0
            n = unit(rng.standard_normal(3))
            assert losses.loss_z_align(n, Tensor(rng.standard_normal((3, 3)))).item() >= 0.0
