import numpy as np
import pytest

from pcnormals import datagen, trainer
from pcnormals.cli import main
from pcnormals.cloud import load_conf, load_normals, load_pidx, save_normals, save_pidx, save_xyz
from pcnormals.model import ModelConfig, init_params, save_checkpoint


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    code = main(
        [
            "synth", "--out", str(root), "--shapes", "sphere,saddle",
            "--points", "600", "--noise", "0", "--noise", "0.012", "--seed", "3",
        ]
    )
    assert code == 0
    return root


@pytest.fixture(scope="module")
def mini_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    config = ModelConfig(r=16, r_prime=24, k_group=6, m_weight=8, widths="micro", seed=1)
    save_checkpoint(out / "checkpoint.txt", init_params(config), config)
    return out / "checkpoint.txt"


class TestDispatch:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_flag(self, capsys):
        assert main(["synth", "--wat"]) == 1

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_missing_file_is_user_error(self, tmp_path, capsys):
        code = main(["eval", "--pred", str(tmp_path / "nope.normals"), "--gt", str(tmp_path / "x")])
        assert code == 1
        assert "error" in capsys.readouterr().err.lower()

    def test_train_missing_config(self, tmp_path, capsys):
        code = main(
            ["train", "--config", str(tmp_path / "missing.cfg"),
             "--manifest", str(tmp_path / "m.txt"), "--out-dir", str(tmp_path)]
        )
        assert code == 1
        assert capsys.readouterr().err.strip()


class TestSynth:
    def test_writes_manifest_and_files(self, dataset_dir):
        entries = datagen.read_manifest(dataset_dir / "manifest.txt")
        assert len(entries) == 4
        for entry in entries:
            assert (dataset_dir / entry.xyz).exists()
            assert (dataset_dir / entry.normals).exists()

    def test_rerun_byte_identical(self, tmp_path):
        args = ["synth", "--out", None, "--shapes", "sphere", "--points", "300", "--seed", "5"]
        for out in ("a", "b"):
            args[2] = str(tmp_path / out)
            assert main(args) == 0
        for name in ("sphere_clean.xyz", "sphere_n0.006.normals", "manifest.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestConfidence:
    def test_both_modes_write_files(self, dataset_dir, tmp_path):
        code = main(
            [
                "confidence",
                "--noisy", str(dataset_dir / "sphere_n0.012.xyz"),
                "--noisy-normals", str(dataset_dir / "sphere_n0.012.normals"),
                "--clean", str(dataset_dir / "sphere_clean.xyz"),
                "--clean-normals", str(dataset_dir / "sphere_clean.normals"),
                "--mode", "both",
                "--out-prefix", str(tmp_path / "sphere"),
            ]
        )
        assert code == 0
        s = load_conf(tmp_path / "sphere.surface.conf")
        n = load_conf(tmp_path / "sphere.normal.conf")
        assert s.shape == n.shape == (600,)

    def test_surface_mode_needs_no_noisy_normals(self, dataset_dir, tmp_path):
        code = main(
            [
                "confidence",
                "--noisy", str(dataset_dir / "sphere_n0.012.xyz"),
                "--clean", str(dataset_dir / "sphere_clean.xyz"),
                "--clean-normals", str(dataset_dir / "sphere_clean.normals"),
                "--mode", "surface",
                "--out-prefix", str(tmp_path / "s"),
            ]
        )
        assert code == 0
        assert (tmp_path / "s.surface.conf").exists()
        assert not (tmp_path / "s.normal.conf").exists()


class TestTrainInferEval:
    def test_full_pipeline(self, dataset_dir, tmp_path):
        cfg_path = tmp_path / "train.cfg"
        cfg = trainer.TrainConfig(
            epochs=2, batch=8, queries_per_shape=12, confidence_mode="surface", seed=2,
            model=ModelConfig(r=16, r_prime=24, k_group=6, m_weight=8, widths="micro", seed=2),
        )
        trainer.save_train_config(cfg_path, cfg)
        out_dir = tmp_path / "run"
        code = main(
            ["train", "--config", str(cfg_path), "--manifest", str(dataset_dir / "manifest.txt"),
             "--out-dir", str(out_dir), "--set", "epochs=1"]
        )
        assert code == 0
        assert (out_dir / "checkpoint.txt").exists()
        assert (out_dir / "train_log.csv").exists()
        assert (out_dir / "loss_curve.png").exists()

        pred_path = tmp_path / "pred.normals"
        code = main(
            ["infer", "--input", str(dataset_dir / "sphere_clean.xyz"),
             "--checkpoint", str(out_dir / "checkpoint.txt"),
             "--out", str(pred_path), "--seed", "4"]
        )
        assert code == 0
        pred = load_normals(pred_path, expected_count=600)
        np.testing.assert_allclose(np.linalg.norm(pred, axis=1), 1.0, atol=1e-9)

        eval_dir = tmp_path / "eval"
        code = main(
            ["eval", "--pred", str(pred_path), "--gt", str(dataset_dir / "sphere_clean.normals"),
             "--mode", "unoriented", "--out-dir", str(eval_dir)]
        )
        assert code == 0
        report = (eval_dir / "report.csv").read_text()
        assert report.splitlines()[0] == "shape,category,mode,rmse,auc"
        assert (eval_dir / "pgp_curve.png").exists()

    def test_infer_pidx_subset(self, dataset_dir, mini_checkpoint, tmp_path):
        pidx = tmp_path / "q.pidx"
        save_pidx(pidx, [3, 50, 200])
        out = tmp_path / "subset.normals"
        code = main(
            ["infer", "--input", str(dataset_dir / "sphere_clean.xyz"),
             "--checkpoint", str(mini_checkpoint), "--pidx", str(pidx), "--out", str(out)]
        )
        assert code == 0
        assert load_normals(out).shape == (3, 3)

    def test_infer_jobs_match_serial(self, dataset_dir, mini_checkpoint, tmp_path):
        outs = []
        for jobs, name in (("1", "serial.normals"), ("2", "par.normals")):
            out = tmp_path / name
            code = main(
                ["infer", "--input", str(dataset_dir / "saddle_clean.xyz"),
                 "--checkpoint", str(mini_checkpoint), "--out", str(out),
                 "--seed", "6", "--jobs", jobs]
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_eval_identical_files_rmse_zero(self, dataset_dir, capsys):
        gt = str(dataset_dir / "sphere_clean.normals")
        code = main(["eval", "--pred", gt, "--gt", gt, "--mode", "unoriented"])
        assert code == 0
        out = capsys.readouterr().out
        assert "rmse=0.000000" in out


class TestBaselineOrient:
    def test_baseline_pca(self, dataset_dir, tmp_path):
        out = tmp_path / "pca.normals"
        code = main(
            ["baseline", "pca", "--input", str(dataset_dir / "sphere_clean.xyz"),
             "--k", "16", "--out", str(out)]
        )
        assert code == 0
        assert load_normals(out).shape == (600, 3)

    def test_baseline_jet_jobs(self, dataset_dir, tmp_path):
        outs = []
        for jobs, name in (("1", "a.normals"), ("2", "b.normals")):
            out = tmp_path / name
            code = main(
                ["baseline", "jet", "--input", str(dataset_dir / "sphere_clean.xyz"),
                 "--k", "24", "--out", str(out), "--jobs", jobs]
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_orient_mst_then_correct(self, dataset_dir, tmp_path):
        rng = np.random.default_rng(8)
        gt = load_normals(dataset_dir / "sphere_clean.normals")
        signs = np.where(rng.random(len(gt)) < 0.5, 1.0, -1.0)
        flipped = tmp_path / "flipped.normals"
        save_normals(flipped, gt * signs[:, None])
        oriented = tmp_path / "oriented.normals"
        code = main(
            ["orient", "mst", "--input", str(dataset_dir / "sphere_clean.xyz"),
             "--normals", str(flipped), "--k", "10", "--out", str(oriented)]
        )
        assert code == 0
        out = load_normals(oriented)
        dots = (out * gt).sum(axis=1)
        agree = max((dots > 0).mean(), (dots < 0).mean())
        assert agree >= 0.99

        corrected = tmp_path / "corrected.normals"
        code = main(
            ["orient", "correct", "--pred", str(flipped), "--ref", str(oriented),
             "--out", str(corrected)]
        )
        assert code == 0
        fixed = load_normals(corrected)
        assert ((fixed * out).sum(axis=1) >= 0).all()


class TestGradcheckCommand:
    def test_op_suite_passes(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        assert "max rel err" in capsys.readouterr().out
