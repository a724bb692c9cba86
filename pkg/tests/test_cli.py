import json
import subprocess
import sys

import pytest

from cli_pipeline import run_pipeline, tree_bytes
from cslicegen.cli import load_settings, run
from cslicegen.errors import ConfigError


def test_phantom_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(["phantom-gen", "--out", str(tmp_path / name), "--subjects", "2",
                    "--n-slices", "8", "--seed", "5"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "phantom-gen" and man["seed"] == 5
    assert len(man["outputs"]) == 5


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run(["no-such-command"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        run(["train", "--out", str(tmp_path)])  # missing --data/--seed
    assert e.value.code == 1


def test_unknown_config_key_exits_1(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlearning_rat = 0.1\n")
    code = run(["phantom-gen", "--out", str(tmp_path / "o"), "--subjects", "1", "--seed", "0",
                "--config", str(cfg)])
    assert code == 1
    cfg.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_settings(cfg, environ={})


def test_missing_data_exits_1(tmp_path):
    code = run(["train", "--out", str(tmp_path / "o"), "--data", str(tmp_path / "none"),
                "--seed", "0"])
    assert code == 1


def test_environment_override(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nbatch_size = 4\n")
    s = load_settings(cfg, environ={"CSLICEGEN_TRAIN_BATCH_SIZE": "6",
                                    "CSLICEGEN_ABLATION_BETAS": "0,0.1"})
    assert s["train"]["batch_size"] == 6 and s["ablation"]["betas"] == (0.0, 0.1)
    with pytest.raises(ConfigError):
        load_settings(None, environ={"CSLICEGEN_TRAIN_NOPE": "1"})
    with pytest.raises(ConfigError):
        load_settings(None, environ={"CSLICEGEN_TRAIN_BATCH_SIZE": "many"})


def test_version_flag():
    out = subprocess.run([sys.executable, "-m", "cslicegen.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    import warnings
    roots = [tmp_path_factory.mktemp(f"run{i}") for i in range(2)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dirs = [run_pipeline(r) for r in roots]
    return roots, dirs


def test_pipeline_byte_identical(pipeline_runs):
    (a, b), _ = pipeline_runs
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert ta.keys() == tb.keys()
    assert [k for k in ta if ta[k] != tb[k]] == []


def test_pipeline_writes_only_under_out(pipeline_runs):
    (root, _), (dirs, _) = pipeline_runs
    expected = {p.name for p in dirs.values()} | {"tiny.ini"}
    assert {p.name for p in root.iterdir()} == expected
    for d in dirs.values():
        man = json.loads((d / "manifest.json").read_text())
        for entry in man["outputs"]:
            assert (d / entry["path"]).is_file()


def test_pipeline_outputs(pipeline_runs):
    _, (dirs, _) = pipeline_runs
    lines = (dirs["evaluate"] / "metrics.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["subject_id", "metric", "value"]
    assert {ln.split("\t")[1] for ln in lines[1:]} >= {"SSIM", "PSNR"}
    rows = (dirs["ablate_beta"] / "ablation_beta.tsv").read_text().splitlines()
    assert len(rows) > 1
    assert (dirs["targets"] / "targets.tsv").exists()
    assert (dirs["harmonize"] / "grids").is_dir()
