import json
import os

import numpy as np
import pytest

from clinmtl import cli
from clinmtl import data as D
from clinmtl.rlar import RlarConfig


CONFIG_TEXT = """\
# smoke training configuration
epochs = 1
lr = 1e-3
seed = 5
folds = 5
lambda_adv = 0.1
hook_mode = bottleneck
"""


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    D.save_dataset(D.gen_synthetic(40, 32, seed=9), out)
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset_dir):
    base = tmp_path_factory.mktemp("cli_run")
    cfg = base / "train.cfg"
    cfg.write_text(CONFIG_TEXT)
    out = str(base / "run")
    rc = cli.main(["train", "--config", str(cfg), "--out", out,
                   "--data", dataset_dir])
    assert rc == 0
    return out


class TestConfigParsing:
    def test_comments_and_whitespace(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs = 3  # inline comment\n\n# full line\nlr=1e-2\n")
        values = cli.parse_config_file(str(p))
        assert values == {"epochs": 3, "lr": 1e-2}

    def test_unknown_key_names_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs = 3\nlearning_rate = 1\n")
        with pytest.raises(Exception) as exc:
            cli.parse_config_file(str(p))
        assert "line 2" in str(exc.value)
        assert "learning_rate" in str(exc.value)

    def test_bad_value_type(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs = soon\n")
        with pytest.raises(Exception) as exc:
            cli.parse_config_file(str(p))
        assert "epochs" in str(exc.value)

    def test_rlar_keys_route_to_rlar_config(self):
        cfg = cli.config_from_values(
            {"lambda_adv": 0.2, "epsilon": 2.0, "epochs": 4,
             "tasks": "seg,cls"})
        assert cfg.rlar == RlarConfig(lambda_adv=0.2, epsilon=2.0,
                                      tasks=("seg", "cls"))
        assert cfg.epochs == 4

    def test_missing_file(self):
        with pytest.raises(Exception) as exc:
            cli.parse_config_file("/nonexistent/train.cfg")
        assert "not found" in str(exc.value)


class TestGenData:
    def test_creates_layout(self, tmp_path, capsys):
        out = str(tmp_path / "ds")
        rc = cli.main(["gen-data", "--out", out, "--n", "12", "--size", "32",
                       "--seed", "3"])
        assert rc == 0
        assert os.path.isfile(os.path.join(out, "labels.csv"))
        assert len(os.listdir(os.path.join(out, "images"))) == 12
        assert len(os.listdir(os.path.join(out, "masks"))) == 12
        assert "12 samples" in capsys.readouterr().out

    def test_bad_size_exits_1(self, tmp_path):
        rc = cli.main(["gen-data", "--out", str(tmp_path / "x"), "--n", "12",
                       "--size", "30"])
        assert rc == 1


class TestFeaturesCommand:
    def test_json_output(self, dataset_dir, capsys):
        fname = sorted(os.listdir(os.path.join(dataset_dir, "images")))[0]
        rc = cli.main(["features",
                       "--image", os.path.join(dataset_dir, "images", fname),
                       "--mask", os.path.join(dataset_dir, "masks", fname),
                       "--json"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload) == 13
        assert "circularity" in payload

    def test_csv_output_parses(self, dataset_dir, capsys):
        fname = sorted(os.listdir(os.path.join(dataset_dir, "images")))[0]
        rc = cli.main(["features",
                       "--image", os.path.join(dataset_dir, "images", fname),
                       "--mask", os.path.join(dataset_dir, "masks", fname)])
        assert rc == 0
        header, values = capsys.readouterr().out.strip().splitlines()
        assert len(header.split(",")) == 13
        assert all(np.isfinite(float(v)) for v in values.split(","))

    def test_missing_image_exits_1(self, dataset_dir):
        rc = cli.main(["features", "--image", "/nope.pgm",
                       "--mask", "/nope.pgm"])
        assert rc == 1


class TestTrainEvalAblate:
    def test_train_artifacts(self, run_dir):
        for fname in ("checkpoint.ckpt", "run.json", "train_log.csv"):
            assert os.path.isfile(os.path.join(run_dir, fname))

    def test_eval_writes_metrics(self, run_dir, dataset_dir, capsys):
        rc = cli.main(["eval", "--run", run_dir, "--data", dataset_dir])
        assert rc == 0
        with open(os.path.join(run_dir, "metrics.json")) as f:
            report = json.load(f)
        assert set(report) >= {"dice", "iou", "hd95", "f1_macro"}

    def test_ablate_writes_table(self, run_dir, dataset_dir):
        rc = cli.main(["ablate-features", "--run", run_dir,
                       "--data", dataset_dir])
        assert rc == 0
        path = os.path.join(run_dir, "feature_ablation.csv")
        with open(path) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "feature,delta_precision,delta_recall,delta_f1"
        assert len(lines) == 14  # header + 13 features

    def test_conflict_report(self, run_dir, capsys):
        rc = cli.main(["conflict-report", "--run", run_dir])
        assert rc == 0
        out = capsys.readouterr().out
        assert "cos_seg_cls" in out

    def test_train_without_dataset_exits_1(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs = 1\n")
        rc = cli.main(["train", "--config", str(cfg),
                       "--out", str(tmp_path / "r")])
        assert rc == 1

    def test_eval_missing_run_exits_1(self, dataset_dir, tmp_path):
        rc = cli.main(["eval", "--run", str(tmp_path), "--data", dataset_dir])
        assert rc == 1


class TestExitCodes:
    def test_unknown_command_exits_1(self):
        assert cli.main(["frobnicate"]) == 1

    def test_missing_required_arg_exits_1(self):
        assert cli.main(["train"]) == 1

    def test_gradcheck_small_passes(self, capsys):
        rc = cli.main(["gradcheck", "--seed", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
