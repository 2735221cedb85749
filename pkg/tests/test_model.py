import numpy as np
import pytest

from pcnormals import datagen, trainer
from pcnormals.autodiff import Tensor
from pcnormals.cloud import PointCloud
from pcnormals.errors import ParameterError, ShapeError
from pcnormals.model import (
    ModelConfig,
    forward,
    infer_cloud,
    infer_normal,
    init_params,
    load_checkpoint,
    param_count,
    qstn,
    save_checkpoint,
    to_world_frame,
)
from pcnormals.sampling import GlobalSet, Patch, sample_global, sample_local_patch

MINI = ModelConfig(r=24, r_prime=32, k_group=8, m_weight=12, widths="mini", seed=3)


@pytest.fixture(scope="module")
def mini_sample():
    cloud = datagen.gen_shape(datagen.ShapeSpec(kind="saddle", n_points=800, seed=6))
    patch = sample_local_patch(cloud, 10, MINI.r)
    gset = sample_global(cloud, 10, MINI.r_prime, np.random.default_rng(2))
    return cloud, patch, gset


@pytest.fixture(scope="module")
def trained_mini():
    """Briefly trained mini model shared by the behavioral tests."""
    datagen.generate_dataset(
        "/tmp/pcn_test_mini_ds", shapes=("sphere", "saddle"), n_points=1500,
        noise_levels=(0.0,), seed=21,
    )
    cfg = trainer.TrainConfig(
        epochs=10, batch=8, queries_per_shape=40, confidence_mode="off", seed=4, model=MINI
    )
    samples = trainer.build_samples("/tmp/pcn_test_mini_ds/manifest.txt", cfg)
    return trainer.train(cfg, samples).params


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.r == 64 and cfg.r_prime == 128 and cfg.k_group == 16 and cfg.m_weight == 32

    def test_m_weight_bound(self):
        with pytest.raises(ParameterError):
            ModelConfig(r=16, m_weight=17)

    def test_k_group_bound(self):
        with pytest.raises(ParameterError):
            ModelConfig(r=8, k_group=9, m_weight=4)

    def test_unknown_widths(self):
        with pytest.raises(ParameterError):
            ModelConfig(widths="huge")


class TestQstn:
    def test_identity_at_init(self, mini_sample):
        _, patch, _ = mini_sample
        params = init_params(MINI)
        rot = qstn(Tensor(patch.local_points), params)
        np.testing.assert_allclose(rot.values, np.eye(3), atol=1e-15)

    def test_rotation_orthonormal_after_perturbation(self, mini_sample, rng):
        _, patch, _ = mini_sample
        params = init_params(MINI)
        params["qstn.fc2.W"] = Tensor(0.3 * rng.standard_normal(params["qstn.fc2.W"].shape), requires_grad=True)
        rot = qstn(Tensor(patch.local_points), params).values
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)

    def test_too_few_points(self):
        params = init_params(MINI)
        with pytest.raises(ShapeError):
            qstn(Tensor(np.zeros((3, 3))), params)


class TestForward:
    def test_output_contracts(self, mini_sample):
        _, patch, gset = mini_sample
        params = init_params(MINI)
        out = forward(patch, gset, params, MINI)
        assert np.linalg.norm(out.n_pred) == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(np.linalg.norm(out.neighbor_normals, axis=1), 1.0, atol=1e-9)
        assert ((out.point_weights > 0) & (out.point_weights < 1)).all()
        assert out.rot_R.shape == (3, 3)
        assert out.m_indices.shape == (MINI.m_weight,)

    def test_duplicate_global_points_identical(self, mini_sample):
        _, patch, gset = mini_sample
        params = init_params(MINI)
        out_a = forward(patch, gset, params, MINI)
        doubled = GlobalSet(
            points=np.vstack([gset.points, gset.points]),
            source_indices=np.concatenate([gset.source_indices, gset.source_indices]),
            weights_used=np.concatenate([gset.weights_used, gset.weights_used]),
        )
        cfg2 = ModelConfig(r=MINI.r, r_prime=2 * MINI.r_prime, k_group=MINI.k_group,
                           m_weight=MINI.m_weight, widths=MINI.widths, seed=MINI.seed)
        out_b = forward(patch, doubled, params, cfg2)
        np.testing.assert_array_equal(out_a.n_pred, out_b.n_pred)

    def test_non_query_permutation_invariance(self, mini_sample, rng):
        _, patch, gset = mini_sample
        params = init_params(MINI)
        params["qstn.fc2.W"] = Tensor(0.1 * rng.standard_normal(params["qstn.fc2.W"].shape), requires_grad=True)
        out_a = forward(patch, gset, params, MINI)
        perm = np.concatenate([[0], 1 + rng.permutation(MINI.r - 1)])
        permuted = Patch(
            query_index=patch.query_index,
            local_points=patch.local_points[perm],
            align_rot_A=patch.align_rot_A,
            radius=patch.radius,
            neighbor_indices=patch.neighbor_indices[perm],
        )
        out_b = forward(permuted, gset, params, MINI)
        assert np.abs(out_a.n_pred - out_b.n_pred).max() < 1e-9

    def test_shape_mismatch(self, mini_sample):
        _, patch, gset = mini_sample
        params = init_params(MINI)
        wrong = ModelConfig(r=16, r_prime=32, k_group=8, m_weight=8, widths="mini")
        with pytest.raises(ShapeError):
            forward(patch, gset, params, wrong)


class TestWorldFrame:
    def test_identity_rotations(self):
        n = np.array([0.0, 0.6, 0.8])
        np.testing.assert_allclose(to_world_frame(n, np.eye(3), np.eye(3)), n, atol=1e-15)

    def test_infer_identity_frames(self, mini_sample):
        cloud, patch, gset = mini_sample
        params = init_params(MINI)
        out = forward(patch, gset, params, MINI)
        world = to_world_frame(out.n_pred, out.rot_R, patch.align_rot_A)
        expected = patch.align_rot_A.T @ (out.rot_R.T @ out.n_pred)
        np.testing.assert_allclose(world, expected / np.linalg.norm(expected), atol=1e-12)


class TestEquivariance:
    def test_rigid_rotation_of_cloud(self, trained_mini, rng):
        cloud = datagen.gen_shape(datagen.ShapeSpec(kind="sphere", n_points=900, seed=31))
        angle = 0.8
        axis = np.array([1.0, 2.0, 0.5])
        axis /= np.linalg.norm(axis)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
        rotated = PointCloud(cloud.points @ rot.T)
        queries = np.arange(0, 900, 30)
        pred = infer_cloud(cloud, trained_mini, MINI, seed=17, queries=queries)
        pred_rot = infer_cloud(rotated, trained_mini, MINI, seed=17, queries=queries)
        dots = np.abs(((pred @ rot.T) * pred_rot).sum(axis=1))
        angles = np.degrees(np.arccos(np.clip(dots, -1, 1)))
        assert np.mean(angles) < 5.0

    def test_trained_predictions_match_analytic(self, trained_mini):
        cloud = datagen.gen_shape(datagen.ShapeSpec(kind="sphere", n_points=900, seed=32))
        queries = np.arange(0, 900, 20)
        pred = infer_cloud(cloud, trained_mini, MINI, seed=3, queries=queries)
        dots = np.abs((pred * cloud.normals[queries]).sum(axis=1))
        angles = np.degrees(np.arccos(np.clip(dots, -1, 1)))
        assert np.mean(angles) < 10.0


class TestInferDeterminism:
    def test_same_seed_same_output(self, mini_sample):
        cloud, _, _ = mini_sample
        params = init_params(MINI)
        a = infer_normal(cloud, 5, params, MINI, seed=11)
        b = infer_normal(cloud, 5, params, MINI, seed=11)
        np.testing.assert_array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        params = init_params(MINI)
        # dirty the parameters so values are non-trivial
        for t in params.values():
            t.values = t.values + 0.001 * rng.standard_normal(t.values.shape)
        save_checkpoint(tmp_path / "ck.txt", params, MINI)
        loaded, cfg = load_checkpoint(tmp_path / "ck.txt")
        assert cfg == MINI
        assert set(loaded) == set(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name].values, params[name].values)

    def test_save_is_deterministic(self, tmp_path):
        params = init_params(MINI)
        save_checkpoint(tmp_path / "a.txt", params, MINI)
        save_checkpoint(tmp_path / "b.txt", params, MINI)
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_param_count(self):
        params = init_params(ModelConfig())
        assert param_count(params) == sum(t.size for t in params.values())
        assert param_count(params) > 10000
