import json
import subprocess
import sys

import numpy as np
import pytest

from rank_odo.cli import fraction_subset, main
from rank_odo.net import infer, model_from_json
from rank_odo.pose import RigidTransform, Trajectory, accumulate, write_kitti_poses
from rank_odo.synth import load_dataset, read_flo

TINY = {"focal_length": 4.0, "principal_point": [1.5, 1.0], "plane_depth": 5.0, "width": 4, "height": 3}
SMALL_TRAIN = {"batch_n": 4, "epochs": 2, "feature_dim": 4, "encoder_hidden": [8], "decoder_hidden": [4, 4]}


def write_config(tmp_path, **sections):
    cfg = {"version": 1, "scene": TINY, "train": SMALL_TRAIN, **sections}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGen:
    def test_minimal_zero_sample(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 1, "n_test": 0, "state_ranges": {}})
        assert main(["gen", "--config", cfg]) == 0
        (sample,) = load_dataset(tmp_path / "data" / "train")
        assert np.all(sample.flow.data == 0)
        assert not (tmp_path / "data" / "test").exists()

    def test_idempotent_bytes(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 6, "n_test": 3})
        assert main(["gen", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["gen", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and len(a) == 2 + 2 * (6 + 3)  # two manifests plus a .flo pair per sample

    def test_manifest_of_100(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 100, "n_test": 0})
        assert main(["gen", "--config", cfg]) == 0
        root = tmp_path / "data" / "train"
        rows = json.loads((root / "manifest.json").read_text())
        assert len(rows) == 100
        for row in rows:
            assert read_flo((root / row["flow_file"]).read_bytes()).data.shape == (3, 4, 2)
            read_flo((root / row["aug_flow_file"]).read_bytes())


class TestTrain:
    def test_degenerate_dataset_gives_zero_trace(self, tmp_path):
        train = {**SMALL_TRAIN, "batch_n": 1, "zero_head": True}
        cfg = write_config(tmp_path, data={"n_train": 4, "n_test": 0, "state_ranges": {}}, train=train)
        assert main(["gen", "--config", cfg]) == 0
        assert main(["train", "--config", cfg]) == 0
        lines = (tmp_path / "checkpoints" / "loss_trace_z.csv").read_text().splitlines()
        assert lines[0] == "step,loss" and len(lines) == 1 + 8
        assert all(line.split(",")[1] == "0.0" for line in lines[1:])

    def test_rerun_identical(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 12, "n_test": 0})
        assert main(["gen", "--config", cfg]) == 0
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_dof_selection(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 8, "n_test": 0})
        main(["gen", "--config", cfg])
        assert main(["train", "--config", cfg, "--dof", "yaw"]) == 0
        assert (tmp_path / "checkpoints" / "model_yaw.json").is_file()
        assert main(["train", "--config", cfg, "--dof", "7"]) == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--config", write_config(tmp_path)]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_exit_code(self, tmp_path):
        train = {**SMALL_TRAIN, "learning_rate": 1e300, "grad_clip": 1e300, "epochs": 50}
        cfg = write_config(tmp_path, data={"n_train": 8, "n_test": 0}, train=train)
        main(["gen", "--config", cfg])
        assert main(["train", "--config", cfg]) == 2


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, data={"n_trian": 5})
        assert main(["gen", "--config", cfg]) == 1
        assert "data.n_trian" in capsys.readouterr().err

    def test_bad_version(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"version": 2}')
        assert main(["gen", "--config", str(path)]) == 1

    def test_missing_file_and_usage(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.json")]) == 1
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_example_config_valid(self):
        from pathlib import Path

        from rank_odo.config import load_config

        cfg, _ = load_config(Path(__file__).parent.parent / "configs" / "z_only.json")
        assert cfg.train.tau == 2.0 and cfg.data.n_train == 512


class TestEval:
    def test_pose_files_self(self, tmp_path):
        traj = accumulate([RigidTransform.from_translation(0, 0, 1.0)] * 300)
        (tmp_path / "gt.txt").write_text(write_kitti_poses(traj))
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg, "--gt-poses", str(tmp_path / "gt.txt"),
                     "--pred-poses", str(tmp_path / "gt.txt")]) == 0
        last = (tmp_path / "reports" / "drift.csv").read_text().splitlines()[-1]
        assert last.startswith("all,0,0,")

    def test_pose_files_scaled(self, tmp_path):
        gt = accumulate([RigidTransform.from_translation(0, 0, 1.0)] * 300)
        pred = accumulate([RigidTransform.from_translation(0, 0, 1.01)] * 300)
        (tmp_path / "gt.txt").write_text(write_kitti_poses(gt))
        (tmp_path / "pred.txt").write_text(write_kitti_poses(pred))
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg, "--gt-poses", str(tmp_path / "gt.txt"),
                     "--pred-poses", str(tmp_path / "pred.txt")]) == 0
        t_rel = float((tmp_path / "reports" / "drift.csv").read_text().splitlines()[-1].split(",")[1])
        assert t_rel == pytest.approx(1.0, abs=1e-9)

    def test_pose_length_mismatch(self, tmp_path, capsys):
        (tmp_path / "a.txt").write_text(write_kitti_poses(accumulate([RigidTransform.identity()] * 3)))
        (tmp_path / "b.txt").write_text(write_kitti_poses(Trajectory((RigidTransform.identity(),))))
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg, "--gt-poses", str(tmp_path / "a.txt"),
                     "--pred-poses", str(tmp_path / "b.txt")]) == 1
        assert "b.txt" in capsys.readouterr().err

    def test_model_eval_and_latent(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 12, "n_test": 7}, eval={"lengths": [1.0, 2.0], "stride": 1})
        assert main(["gen", "--config", cfg]) == 0
        assert main(["train", "--config", cfg]) == 0
        assert main(["eval", "--config", cfg]) == 0
        reports = tmp_path / "reports"
        rows = (reports / "correlations.csv").read_text().splitlines()
        assert rows[0] == "dof,r_s,r_k,n" and rows[1].startswith("z,") and rows[1].endswith(",7")
        assert len((reports / "gt_poses.txt").read_text().splitlines()) == 8
        assert main(["latent", "--config", cfg]) == 0
        lines = (reports / "latent_z.csv").read_text().splitlines()
        assert len(lines) == 1 + 7 and lines[0].split(",")[-2:] == ["label", "prediction"]
        model = model_from_json((tmp_path / "checkpoints" / "model_z.json").read_text())
        test = load_dataset(tmp_path / "data" / "test")
        for line, sample in zip(lines[1:], test):
            assert float(line.split(",")[-1]) == pytest.approx(infer(model, sample.flow), abs=1e-12)

    def test_eval_without_checkpoints(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 4, "n_test": 4})
        main(["gen", "--config", cfg])
        assert main(["eval", "--config", cfg]) == 1


class TestSweep:
    def test_fraction_subset(self):
        a = fraction_subset(100, 0.2, 3)
        assert len(a) == 20 and np.all(np.diff(a) > 0)
        assert np.array_equal(a, fraction_subset(100, 0.2, 3))
        assert not np.array_equal(a, fraction_subset(100, 0.2, 4))
        assert np.array_equal(fraction_subset(100, 1.0, 3), np.arange(100))

    def test_sweep_rows_deterministic(self, tmp_path):
        cfg = write_config(tmp_path, data={"n_train": 12, "n_test": 6}, sweep={"fractions": [0.5, 1.0]},
                           eval={"lengths": [1.0], "stride": 1})
        main(["gen", "--config", cfg])
        assert main(["scale-sweep", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["scale-sweep", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        text = (tmp_path / "a" / "scale_sweep.csv").read_text()
        assert text == (tmp_path / "b" / "scale_sweep.csv").read_text()
        lines = text.splitlines()
        assert lines[0] == "fraction,n_train,r_s_z,r_k_z,t_rel,r_rel"
        assert [l.split(",")[:2] for l in lines[1:]] == [["0.5", "6"], ["1", "12"]]


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "rank_odo.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "scale-sweep" in out.stdout
