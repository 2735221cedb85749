import numpy as np
import pytest

from pcnormals.cloud import PointCloud, save_normals
from pcnormals.datagen import ShapeSpec, gen_shape
from pcnormals.errors import MissingDataError, ParameterError, SizeError
from pcnormals.evaluation import angle_errors, rmse
from pcnormals.orientation import OrientedField, load_reference_field, mst_orient, sign_correct


def agreement_up_to_global_flip(normals, reference):
    dots = (normals * reference).sum(axis=1)
    agree = (dots > 0).mean()
    return max(agree, 1.0 - agree)


class TestMstOrient:
    def test_single_edge_propagation(self):
        cloud = PointCloud(
            [[0, 0, 0], [0.1, 0, 0]], normals=[[0, 0, 1], [0, 0, -1]]
        )
        field = mst_orient(cloud, k=2)
        np.testing.assert_allclose(field.normals[0], [0, 0, 1])
        np.testing.assert_allclose(field.normals[1], [0, 0, 1])
        assert field.source == "mst"

    def test_sphere_random_flips_recovered(self):
        cloud = gen_shape(ShapeSpec(kind="sphere", n_points=2000, seed=13))
        rng = np.random.default_rng(5)
        signs = np.where(rng.random(cloud.n) < 0.5, 1.0, -1.0)
        flipped = PointCloud(cloud.points, normals=cloud.normals * signs[:, None])
        field = mst_orient(flipped, k=10)
        assert agreement_up_to_global_flip(field.normals, cloud.normals) >= 0.99

    def test_consistent_field_unchanged_up_to_root_flip(self):
        cloud = gen_shape(ShapeSpec(kind="sphere", n_points=500, seed=14))
        field = mst_orient(cloud, k=10)
        dots = (field.normals * cloud.normals).sum(axis=1)
        assert (dots > 0.999999).all() or (dots < -0.999999).all()

    def test_invariant_to_initial_signs(self):
        cloud = gen_shape(ShapeSpec(kind="sphere", n_points=600, seed=15))
        rng = np.random.default_rng(6)
        out = []
        for trial in range(2):
            signs = np.where(rng.random(cloud.n) < 0.5, 1.0, -1.0)
            flipped = PointCloud(cloud.points, normals=cloud.normals * signs[:, None])
            out.append(mst_orient(flipped, k=10).normals)
        dots = (out[0] * out[1]).sum(axis=1)
        assert (dots > 0.999).mean() >= 0.99 or (dots < -0.999).mean() >= 0.99

    def test_missing_normals(self, random_cloud):
        with pytest.raises(MissingDataError):
            mst_orient(random_cloud, k=5)

    def test_bad_degree(self, sphere_cloud):
        with pytest.raises(ParameterError):
            mst_orient(sphere_cloud, k=1)

    def test_disconnected_components_warn(self):
        rng = np.random.default_rng(7)
        a = rng.normal(scale=0.01, size=(30, 3))
        b = rng.normal(scale=0.01, size=(30, 3)) + np.array([100.0, 0, 0])
        normals = np.tile([0.0, 0.0, 1.0], (60, 1))
        signs = np.where(rng.random(60) < 0.5, 1.0, -1.0)
        cloud = PointCloud(np.vstack([a, b]), normals=normals * signs[:, None])
        with pytest.warns(UserWarning):
            field = mst_orient(cloud, k=3)
        # each component internally consistent
        assert np.abs((field.normals[:30] * field.normals[0]).sum(axis=1)).min() > 0.99
        assert np.abs((field.normals[30:] * field.normals[30]).sum(axis=1)).min() > 0.99


class TestSignCorrect:
    def test_positive_dot_unchanged(self):
        pred = np.array([[0.0, 0.0, 1.0]])
        ref = np.array([[0.0, 0.6, 0.8]])
        np.testing.assert_array_equal(sign_correct(pred, ref), pred)

    def test_negative_dot_negated(self):
        pred = np.array([[0.0, 0.0, -1.0]])
        ref = np.array([[0.0, 0.6, 0.8]])
        np.testing.assert_array_equal(sign_correct(pred, ref), -pred)

    def test_zero_dot_counts_positive(self):
        pred = np.array([[1.0, 0.0, 0.0]])
        ref = np.array([[0.0, 0.0, 1.0]])
        np.testing.assert_array_equal(sign_correct(pred, ref), pred)

    def test_idempotent(self, rng):
        pred = rng.standard_normal((50, 3))
        pred /= np.linalg.norm(pred, axis=1)[:, None]
        ref = rng.standard_normal((50, 3))
        ref /= np.linalg.norm(ref, axis=1)[:, None]
        once = sign_correct(pred, ref)
        twice = sign_correct(once, ref)
        np.testing.assert_array_equal(once, twice)

    def test_output_agrees_with_reference(self, rng):
        pred = rng.standard_normal((50, 3))
        ref = rng.standard_normal((50, 3))
        out = sign_correct(pred, ref)
        assert ((out * ref).sum(axis=1) >= 0).all()

    def test_unoriented_error_bit_identical(self, rng, sphere_cloud):
        pred = rng.standard_normal((sphere_cloud.n, 3))
        pred /= np.linalg.norm(pred, axis=1)[:, None]
        corrected = sign_correct(pred, sphere_cloud.normals)
        before = angle_errors(pred, sphere_cloud.normals, "unoriented")
        after = angle_errors(corrected, sphere_cloud.normals, "unoriented")
        np.testing.assert_array_equal(before, after)
        assert rmse(before) == rmse(after)

    def test_size_mismatch(self):
        with pytest.raises(SizeError):
            sign_correct(np.ones((3, 3)), np.ones((4, 3)))


class TestLoadReferenceField:
    def test_loads_and_normalizes(self, tmp_path, sphere_cloud):
        save_normals(tmp_path / "f.normals", 2.0 * sphere_cloud.normals)
        field = load_reference_field(tmp_path / "f.normals", sphere_cloud)
        assert field.source == "external_file"
        np.testing.assert_allclose(np.linalg.norm(field.normals, axis=1), 1.0, atol=1e-12)

    def test_short_file_rejected(self, tmp_path, sphere_cloud):
        save_normals(tmp_path / "f.normals", sphere_cloud.normals[:-1])
        with pytest.raises(SizeError):
            load_reference_field(tmp_path / "f.normals", sphere_cloud)

    def test_analytic_reference_keeps_unoriented_rmse(self, tmp_path, rng, sphere_cloud):
        # downstream oriented RMSE equals unoriented RMSE when the reference
        # field is the ground truth orientation itself
        signs = np.where(rng.random(sphere_cloud.n) < 0.5, 1.0, -1.0)
        pred = sphere_cloud.normals * signs[:, None]
        save_normals(tmp_path / "ref.normals", sphere_cloud.normals)
        field = load_reference_field(tmp_path / "ref.normals", sphere_cloud)
        corrected = sign_correct(pred, field)
        oriented = rmse(angle_errors(corrected, sphere_cloud.normals, "oriented"))
        unoriented = rmse(angle_errors(pred, sphere_cloud.normals, "unoriented"))
        assert oriented == pytest.approx(unoriented, abs=1e-12)


class TestOrientedField:
    def test_zero_normal_rejected(self):
        with pytest.raises(ValueError):
            OrientedField(normals=np.zeros((3, 3)), source="mst")
