import json
from dataclasses import replace

import pytest
from typer.testing import CliRunner

from cmlpe import GenerationPair
from harness import load_checkpoint, preset, save_checkpoint
from handcraft_cli import app, cli
from numcore import HandcraftError
from posedata import load_dataset
from recognizers import Classifier

runner = CliRunner()


@pytest.fixture
def quick_config(tmp_path):
    cfg = preset("toy", "transformer-sl", total_steps=6, synthetic_pretrain_steps=1, batch_size=4,
                 generator={"batch_size": 4, "num_blocks": 2, "embed_dim": 4, "train_steps": 3})
    path = tmp_path / "exp.json"
    path.write_text(cfg.to_json(), encoding="utf-8")
    return path


def test_missing_dataset_is_a_usage_error(capsys):
    assert cli(["eval", "--model", "m.hckp"]) == 2
    assert cli(["frobnicate"]) == 2
    assert cli(["train-slr", "--dataset", "x", "--out", "y", "--bogus"]) == 2
    assert cli(["preprocess", "--dataset", "x", "--out", "y", "--config", "exp.json"]) == 2
    assert "--config" in capsys.readouterr().err
    assert cli(["--help"]) == 0


def test_toolkit_errors_exit_1(tmp_path, capsys):
    assert cli(["eval", "--dataset", str(tmp_path / "nowhere"), "--model", "m.hckp"]) == 1
    assert "❌" in capsys.readouterr().err


def test_toolkit_errors_exit_1_inside_the_app(tmp_path):
    result = runner.invoke(app, ["eval", "--dataset", str(tmp_path / "nowhere"), "--model", "m.hckp"])
    assert result.exit_code == 1
    assert "❌" in result.output
    assert not isinstance(result.exception, HandcraftError)


def test_preprocess_writes_a_loadable_dataset(tmp_path, toy_dir):
    out = tmp_path / "clean"
    result = runner.invoke(app, ["preprocess", "--dataset", str(toy_dir), "--out", str(out),
                                 "--val-fraction", "0.25"])
    assert result.exit_code == 0, result.output
    cleaned = load_dataset(out)
    original = load_dataset(toy_dir)
    assert len(cleaned.samples) == len(original.samples)
    assert len(cleaned.splits["val"]) > len(original.splits["val"])


def test_generator_then_synth(tmp_path, toy_dir, quick_config):
    gen = tmp_path / "gen.hckp"
    result = runner.invoke(app, ["train-gen", "--dataset", str(toy_dir), "--out", str(gen),
                                 "--config", str(quick_config), "--seed", "1"])
    assert result.exit_code == 0, result.output
    assert isinstance(load_checkpoint(gen), GenerationPair)

    syn = tmp_path / "syn"
    result = runner.invoke(app, ["synth", "--dataset", str(toy_dir), "--out", str(syn),
                                 "--generator", str(gen), "--n-per-class", "5"])
    assert result.exit_code == 0, result.output
    synthetic = load_dataset(syn)
    assert len(synthetic.samples) == 15
    assert synthetic.synthetic
    assert sorted(synthetic.class_counts().tolist()) == [5, 5, 5]

    report = tmp_path / "gen.json"
    result = runner.invoke(app, ["eval", "--dataset", str(toy_dir), "--model", str(gen), "--out", str(report)])
    assert result.exit_code == 0, result.output
    assert "forward MPJPE" in result.output
    assert json.loads(report.read_text(encoding="utf-8"))["forward_mpjpe"] >= 0.0


def test_train_and_eval_classifier(tmp_path, toy_dir, quick_config):
    model = tmp_path / "slr.hckp"
    log = tmp_path / "slr.jsonl"
    result = runner.invoke(app, ["train-slr", "--dataset", str(toy_dir), "--out", str(model),
                                 "--config", str(quick_config), "--log", str(log)])
    assert result.exit_code == 0, result.output
    assert isinstance(load_checkpoint(model), Classifier)
    assert len([line for line in log.read_text(encoding="utf-8").splitlines() if '"loss"' in line]) == 6

    result = runner.invoke(app, ["eval", "--dataset", str(toy_dir), "--model", str(model)])
    assert result.exit_code == 0, result.output
    accuracy = float(result.output.strip().splitlines()[-1])
    assert 0.0 <= accuracy <= 1.0


def test_eval_rejects_unknown_split(tmp_path, toy_dir):
    result = runner.invoke(app, ["eval", "--dataset", str(toy_dir), "--model", "m.hckp", "--split", "dev"])
    assert result.exit_code == 2


def test_synth_rejects_classifier_checkpoint(tmp_path, toy_dir, capsys):
    path = save_checkpoint(Classifier.init(
        replace(preset("toy").model_config(3), dropout=0.0)), tmp_path / "slr.hckp")
    code = cli(["synth", "--dataset", str(toy_dir), "--out", str(tmp_path / "s"), "--generator", str(path)])
    assert code == 1
    assert "not a generator pair" in capsys.readouterr().err


def test_gradcheck_command():
    result = runner.invoke(app, ["gradcheck", "--samples-per-param", "2"])
    assert result.exit_code == 0, result.output
    assert "selective_scan" in result.output
    assert "FAIL" not in result.output
