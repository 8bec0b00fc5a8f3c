import json
import subprocess
import sys

import pytest

from czt3d.cli import main
from czt3d.errors import GRADCHECK_FAILED, IO_ERROR, ConfigError, FormatError, MissingGroundTruth, VersionError

GEN = {
    "grid": {"M": 2, "N": 2, "P": 10, "T": 8},
    "injections": [[[0, 1, 4]], [[1, 1, 6]]],
    "seed": 3,
}


@pytest.fixture
def gen_config(tmp_path):
    p = tmp_path / "gen.json"
    p.write_text(json.dumps(GEN))
    return p


@pytest.fixture
def dataset(tmp_path, gen_config):
    out = tmp_path / "ds"
    assert main(["gen", "--config", str(gen_config), "--out", str(out)]) == 0
    return out


def test_gen_writes_dataset_and_summary(dataset, capsys):
    assert (dataset / "manifest.json").exists()
    text = (dataset / "summary.txt").read_text()
    assert "injections: 2" in text and "seed: 3" in text


def test_gen_keep_fine(tmp_path):
    cfg = dict(GEN, grid={"M": 4, "N": 4, "P": 6, "T": 3}, injections=[[[0, 0, 3], [1, 1, 3]]], factor=2, block=2)
    p = tmp_path / "g.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "c"
    assert main(["gen", "--config", str(p), "--out", str(out), "--keep-fine"]) == 0
    assert json.loads((out / "manifest.json").read_text())["grid"]["M"] == 2
    assert json.loads((out / "fine" / "manifest.json").read_text())["grid"]["M"] == 4


def test_train_epochs_zero(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", str(dataset), "--epochs", "0", "--out", str(out)]) == 0
    lines = (out / "loss.csv").read_text().splitlines()
    assert len(lines) == 2
    assert (out / "checkpoint" / "checkpoint.json").exists()
    assert (out / "err_report.csv").exists()


def test_train_resume_continues_epochs(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", str(dataset), "--epochs", "3", "--out", str(out)]) == 0
    assert main(["train", str(dataset), "--epochs", "5", "--resume", str(out / "checkpoint"), "--out", str(out)]) == 0
    epochs = [int(line.split(",")[0]) for line in (out / "loss.csv").read_text().splitlines()[1:]]
    assert epochs == list(range(6))


def test_eval_at_truth_gives_zero_err(dataset, tmp_path):
    # a zero-epoch run started from the ground truth stores the truth as weights
    from czt3d.dataset import load
    from czt3d.trainer import TrainConfig, TrainableWeights, initial_state, save_checkpoint

    ds = load(dataset)
    save_checkpoint(initial_state(ds, TrainConfig(), TrainableWeights.from_truth(ds)), tmp_path / "ck")
    out = tmp_path / "ev"
    assert main(["eval", str(tmp_path / "ck"), str(dataset), "--out", str(out)]) == 0
    mean = [line for line in (out / "summary.txt").read_text().splitlines() if line.startswith("mean")][0]
    assert float(mean.split()[-1]) == 0.0
    assert (out / "profiles" / "eDrift.csv").exists()


def test_eval_without_truth(dataset, tmp_path):
    assert main(["train", str(dataset), "--epochs", "0", "--out", str(tmp_path / "r")]) == 0
    (dataset / "truth.json").unlink()
    with pytest.warns(UserWarning):
        code = main(["eval", str(tmp_path / "r" / "checkpoint"), str(dataset)])
    assert code == MissingGroundTruth.code


def test_gradcheck_pass_and_negative_control(capsys):
    assert main(["gradcheck", "--size", "2", "2", "5", "--steps", "6", "--draws", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
    code = main(["gradcheck", "--size", "2", "2", "5", "--steps", "6", "--draws", "1", "--corrupt-adjoint", "1e-3"])
    assert code == GRADCHECK_FAILED
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_sweep(tmp_path):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--size", "1", "2", "4", "--steps", "4", "--draws", "1", "--sweep", "--out", str(out)]) == 0
    assert "eps sweep" in (out / "summary.txt").read_text()


def test_error_exit_codes(tmp_path, gen_config, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["gen", "--config", str(bad)]) == ConfigError.code
    bad.write_text(json.dumps(dict(GEN, extra=1)))
    assert main(["gen", "--config", str(bad)]) == ConfigError.code
    assert main(["train", str(tmp_path / "nowhere")]) == FormatError.code
    assert main(["gen", "--config", str(tmp_path / "missing.json")]) == IO_ERROR
    assert "error" in capsys.readouterr().err


def test_version_error_exit_code(dataset):
    man = json.loads((dataset / "manifest.json").read_text())
    man["version"] = 2
    (dataset / "manifest.json").write_text(json.dumps(man))
    assert main(["train", str(dataset), "--epochs", "0"]) == VersionError.code


def test_usage_error_and_module_entry():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    r = subprocess.run([sys.executable, "-m", "czt3d", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()


def test_unknown_preset_rejected_by_parser():
    with pytest.raises(SystemExit) as exc:
        main(["experiment", "no-such-preset"])
    assert exc.value.code == 2
