import copy
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from rejectkit.cli import main
from rejectkit.config import OUTPUT_ENV, load_config, parse_config
from rejectkit.errors import ConfigError
from rejectkit.pipeline import EXIT_INVALID, EXIT_OK, EXIT_STAGE_FAILED, run_experiment

SMALL = {
    "name": "small",
    "seed": 3,
    "output_dir": "out",
    "dataset": {"source": "blobs", "spread": 0.08, "per_class": 40, "clip": [0.0, 1.0]},
    "splits": {"backbone": [0, 40], "detector": [40, 90], "calibration": [90, 105], "test": [105, 120]},
    "backbone": {"sizes": [2, 8, 8, 3], "taps": {1: "h1", 2: "h2"},
                 "train": {"learning_rate": 0.1, "momentum": 0.9, "batch_size": 16, "epochs": 20}},
    "defenses": [
        {"name": "NR", "taps": ["input"], "detectors": [{"kind": "svm", "C": 1.0, "gamma": 1.0}]},
        {"name": "NR-RBF", "taps": ["input"], "detectors": [{"kind": "rbfnet", "r": 3, "epochs": 20}],
         "reference": "NR"},
    ],
    "attack": {"max_outer_iters": 20},
    "evaluation": {"grid": [0.0, 0.3], "runs": 2, "samples_per_run": 8, "settings": ["white_box"]},
    "benchmark": {"repeats": 5, "timing": False},
    "figures": False,
}


def _write(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def _mutate(**changes):
    raw = copy.deepcopy(SMALL)
    for dotted, value in changes.items():
        node = raw
        keys = dotted.split("__")
        for k in keys[:-1]:
            node = node[int(k)] if isinstance(node, list) else node[k]
        node[keys[-1]] = value
    return raw


def test_parse_defaults(tmp_path):
    cfg = parse_config(SMALL, tmp_path)
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.surrogate_seed == 4
    assert cfg.split_range("calibration") == (90, 105)
    np.testing.assert_array_equal(cfg.grid, [0.0, 0.3])
    assert [l.tap_id for l in cfg.arch if l.tap_id] == ["h1", "h2"]


def test_grid_range_form(tmp_path):
    cfg = parse_config(_mutate(evaluation__grid={"start": 0, "stop": 5, "step": 0.5}), tmp_path)
    assert len(cfg.grid) == 11 and cfg.grid[-1] == 5.0


def test_calibration_defaults_to_detector(tmp_path):
    raw = copy.deepcopy(SMALL)
    del raw["splits"]["calibration"]
    assert parse_config(raw, tmp_path).split_range("calibration") == (40, 90)


def test_hash_ignores_output_dir(tmp_path):
    a = parse_config(SMALL, tmp_path).config_hash()
    b = parse_config(_mutate(output_dir="elsewhere"), tmp_path).config_hash()
    c = parse_config(_mutate(seed=4), tmp_path).config_hash()
    assert a == b != c


@pytest.mark.parametrize("changes, msg", [
    ({"splits__test": [100, 120]}, "overlap"),
    ({"splits__test": [105, 500]}, "dataset has 120"),
    ({"defenses__0__taps": ["h9"]}, "unknown tap"),
    ({"defenses__1__name": "NR"}, "duplicate"),
    ({"defenses__0__detectors": [{"kind": "forest"}]}, "kind"),
    ({"defenses__1__reference": "missing"}, "unknown reference"),
    ({"defenses__0__taps": ["h1", "h2"]}, "one detector per tap"),
    ({"evaluation__grid": [0.1, 0.2]}, "grid"),
    ({"evaluation__runs": 0}, "runs"),
    ({"backbone__train": {"lr": 0.1}}, "unknown keys"),
    ({"backbone__train": {"learning_rate": -1}}, "learning_rate"),
    ({"attack": {"norm": "l3"}}, "attack"),
    ({"calibration": {"target": 1.5}}, "target"),
    ({"dataset": {"source": "idx", "images": "nope.idx", "labels": "nope2.idx"}}, "not found"),
    ({"dataset": {"source": "parquet"}}, "dataset.source"),
    ({"bogus": 1}, "unknown top-level"),
])
def test_validation_errors(tmp_path, changes, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(_mutate(**changes), tmp_path)


def test_multitap_needs_combiner(tmp_path):
    raw = _mutate(defenses__0__taps=["h1", "h2"],
                  defenses__0__detectors=[{"kind": "svm"}, {"kind": "svm"}])
    with pytest.raises(ConfigError, match="combiner"):
        parse_config(raw, tmp_path)


def test_joint_needs_rbf(tmp_path):
    raw = _mutate(defenses__0__joint_epochs=2)
    with pytest.raises(ConfigError, match="joint"):
        parse_config(raw, tmp_path)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)


def test_env_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env_out"))
    assert load_config(_write(tmp_path, SMALL)).output_dir == tmp_path / "env_out"


def test_pipeline_writes_artifacts(tmp_path):
    path = _write(tmp_path, SMALL)
    assert run_experiment(path) == EXIT_OK
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["stages"] == ["data", "backbone", "defenses", "calibrate", "curves", "benchmark"]
    for rel in ("curves_white_box.csv", "benchmark.csv", "models/NR.bundle.json",
                "attack_logs/white_box_NR-RBF.csv", "attack_logs/white_box_undefended.csv"):
        assert (out / rel).exists()
        assert rel in manifest["artifacts"]
    assert manifest["config_hash"] == load_config(path).config_hash()


def test_stage_failure_keeps_partial_artifacts(tmp_path):
    raw = _mutate(defenses=[{"name": "KNN", "taps": ["input"], "detectors": [{"kind": "knn", "k": 3}]}])
    assert run_experiment(_write(tmp_path, raw)) == EXIT_STAGE_FAILED
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["failed_stage"] == "curves"
    assert "NotDifferentiableError" in manifest["error"]
    assert (out / "models" / "KNN.bundle.json").exists()
    assert not (out / "curves_white_box.csv").exists()


def test_invalid_config_exit_code(tmp_path):
    path = _write(tmp_path, _mutate(splits__test=[0, 10]))
    assert run_experiment(path) == EXIT_INVALID
    assert main(["run", "--config", str(path)]) == EXIT_INVALID
    assert main(["run"]) == EXIT_INVALID
    assert main(["nonsense"]) == EXIT_INVALID


def test_cli_stepwise(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    c = str(cfg)
    bb = tmp_path / "bb.bin"
    assert main(["train-backbone", "--config", c, "--out", str(bb), "--binary"]) == EXIT_OK
    models = tmp_path / "models"
    for name in ("NR", "NR-RBF"):
        assert main(["fit-detector", "--config", c, "--defense", name, "--backbone", str(bb),
                     "--out-dir", str(models)]) == EXIT_OK
        assert main(["calibrate", "--config", c, "--bundle", str(models / f"{name}.bundle.json")]) == EXIT_OK
    bundles = [str(models / "NR.bundle.json"), str(models / "NR-RBF.bundle.json")]
    assert main(["attack", "--config", c, "--bundle", bundles[1], "--epsilon", "0.2", "--samples", "5",
                 "--log", str(tmp_path / "a.csv")]) == EXIT_OK
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 6
    assert main(["curve", "--config", c, "--bundle", bundles[0], "--bundle", bundles[1],
                 "--out", str(tmp_path / "c.csv")]) == EXIT_OK
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 5
    assert main(["benchmark", "--config", c, "--bundle", bundles[0], "--bundle", bundles[1],
                 "--reference", "NR-RBF=NR", "--no-timing", "--out", str(tmp_path / "b.csv")]) == EXIT_OK
    assert main(["fit-detector", "--config", c, "--defense", "nope", "--backbone", str(bb),
                 "--out-dir", str(models)]) == EXIT_INVALID
    assert main(["benchmark", "--config", c, "--bundle", bundles[0], "--reference", "X=NR",
                 "--out", str(tmp_path / "b2.csv")]) == EXIT_INVALID
    assert main(["calibrate", "--config", c, "--bundle", str(tmp_path / "missing.json")]) == EXIT_STAGE_FAILED


def test_module_entry_point(tmp_path):
    out = tmp_path / "cli_out"
    proc = subprocess.run([sys.executable, "-m", "rejectkit", "run", "--config", str(_write(tmp_path, SMALL)),
                           "--output-dir", str(out)], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    assert (out / "manifest.json").exists()
