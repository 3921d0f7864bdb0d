import json
import subprocess
import sys

import pytest

from csitwin.cli import main
from csitwin.pipeline import load_dataset
from csitwin.scene import load_scene


def test_scene_commands(tmp_path, capsys):
    f = tmp_path / "target.json"
    assert main(["scene", "builtin", "target", "-o", str(f)]) == 0
    assert main(["scene", "validate", str(f)]) == 0
    assert "ok" in capsys.readouterr().out
    twin = tmp_path / "twin.json"
    assert main(["scene", "derive-twin", str(f), "-o", str(twin)]) == 0
    assert load_scene(twin).foliage == ()


def test_scene_validate_rejects_bad_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scene_format_version": 1, "name": "x"}))
    assert main(["scene", "validate", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["scene", "validate", str(tmp_path / "nope.json")]) == 2


def test_dataset_generate_and_split(tmp_path):
    out = tmp_path / "tw.csid"
    assert main(["dataset", "generate", "--scene", "builtin:target-twin", "--count", "10",
                 "--seed", "3", "-o", str(out)]) == 0
    ds = load_dataset(out)
    assert len(ds) == 10 and ds.scenario == "twin"
    assert main(["dataset", "split", str(out), "--frac", "0.8", "--seed", "1"]) == 0
    tr = load_dataset(tmp_path / "tw.train.csid")
    te = load_dataset(tmp_path / "tw.test.csid")
    assert (len(tr), len(te)) == (8, 2)
    assert tr.split_seed == 1


def test_exp_init_spec(tmp_path):
    f = tmp_path / "spec.json"
    assert main(["exp", "init-spec", "-o", str(f)]) == 0
    d = json.loads(f.read_text())
    assert d["train_sizes"] == [160, 640, 1280, 2560]


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "csitwin.cli", "exp", "--help"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "direct-gen" in r.stdout and "corr-cdf" in r.stdout


def test_exp_exit_code_reflects_checks(tmp_path):
    spec = {"spec_format_version": 1, "output_dir": "out", "pool_count": 200,
            "train_sizes": [20], "refine_sizes": [5], "steps_per_cell": 2,
            "pretrain_epochs": 1, "eval_count": 20, "sum_rate_count": 2, "acceptance_size": 20}
    f = tmp_path / "spec.json"
    f.write_text(json.dumps(spec))
    code = main(["exp", "direct-gen", "--spec", str(f)])
    # an untrained codec cannot separate twin from baseline, so a check fails
    assert code == 1
    assert (tmp_path / "out" / "summary.txt").exists()
