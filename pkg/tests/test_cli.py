import csv
import json

import pytest

from subcam.cli import main
from subcam.config import RunConfig, load_benchmark, load_run_config
from subcam.train import ConfigError

from conftest import TINY_ARCH

TINY = {
    "data": {"n_train": 16, "n_eval": 6, "image_size": 32, "seed": 3},
    "train": {"k": 2, "rounds": 1, "epochs": 1, "batch_size": 8, "kmeans_restarts": 2, "seed": 1,
              "architecture": {k: list(v) if isinstance(v, tuple) else v for k, v in TINY_ARCH.items()}},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY, indent=2))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_generate_writes_manifest_and_splits(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["splits"] == {"train": 16, "eval": 6}
    assert len(list((workspace / "data" / "train" / "images").glob("*.png"))) == 16


def test_generate_refuses_non_empty_dir_and_force_is_bit_identical(workspace, capsys):
    cfg = str(workspace / "run.json")
    out = workspace / "data"
    before = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--config", cfg, "--out", str(out), "--force"]) == 0
    after = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert before == after


def test_malformed_config_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "data": {"seed": 1,}\n}')
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_unknown_field_is_named(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"n_trian": 5}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "n_trian" in capsys.readouterr().err
    bad.write_text(json.dumps({"trian": {}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "trian" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main(["train"]) == 1  # no configuration
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1


def test_train_writes_every_round(workspace):
    run = workspace / "run"
    for r in (0, 1):
        assert (run / f"round-{r}" / "checkpoint.json").is_file()
        assert json.loads((run / f"round-{r}" / "metrics.json").read_text())["round"] == r
    assert (run / "round-1" / "clusters.json").is_file()
    with open(run / "round-1" / "assignments.csv") as fh:
        assert next(csv.reader(fh)) == ["id", "category", "cluster"]


def test_train_is_deterministic_and_config_json_reproduces(workspace):
    run = workspace / "run"
    again = workspace / "again"
    assert main(["train", "--config", str(run / "config.json"), "--out", str(again)]) == 0
    for name in ("round-0/metrics.json", "round-1/metrics.json", "log.csv"):
        assert (run / name).read_bytes() == (again / name).read_bytes(), name


def test_train_missing_dataset(tmp_path, workspace, capsys):
    code = main(["train", "--config", str(workspace / "run.json"), "--dataset", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "r")])
    assert code == 1 and "dataset not found" in capsys.readouterr().err


def test_rounds_zero_is_baseline_only(tmp_path, workspace):
    out = tmp_path / "base"
    assert main(["train", "--config", str(workspace / "run.json"), "--dataset", str(workspace / "data"),
                 "--out", str(out), "--rounds", "0"]) == 0
    assert (out / "round-0").is_dir() and not (out / "round-1").exists()
    assert json.loads((out / "config.json").read_text())["train"]["rounds"] == 0


def test_eval_and_cam(tmp_path, workspace, capsys):
    ckpt = workspace / "run" / "round-1" / "checkpoint.json"
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(workspace / "data"), "--out", str(out),
                 "--heatmaps", "2"]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["round"] == 1 and m["threshold"] == 0.3 and 0.0 <= m["miou"] <= 1.0
    assert list((out / "heatmaps").glob("*_mask.png"))
    # the round-1 evaluation matches what training recorded
    trained = json.loads((workspace / "run" / "round-1" / "metrics.json").read_text())
    assert trained["miou"] == m["miou"]

    cam_out = tmp_path / "cam"
    assert main(["cam", "--checkpoint", str(ckpt), "--dataset", str(workspace / "data"), "--ids", "eval-00000",
                 "--out", str(cam_out)]) == 0
    assert (cam_out / "eval-00000_mask.png").is_file()
    assert main(["cam", "--checkpoint", str(ckpt), "--dataset", str(workspace / "data"), "--ids", "eval-99999",
                 "--out", str(tmp_path / "cam2")]) == 1
    assert "eval-99999" in capsys.readouterr().err


def test_missing_checkpoint_is_named(tmp_path, workspace, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "missing.json"), "--dataset", str(workspace / "data"),
                 "--out", str(tmp_path / "e")])
    assert code == 1 and "missing.json" in capsys.readouterr().err


def test_sweep_k(tmp_path, workspace):
    out = tmp_path / "sweep"
    assert main(["sweep-k", "--config", str(workspace / "run.json"), "--dataset", str(workspace / "data"),
                 "--out", str(out), "--k-values", "1", "2", "2"]) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [int(r["k"]) for r in rows] == [1, 2]
    assert main(["sweep-k", "--config", str(workspace / "run.json"), "--dataset", str(workspace / "data"),
                 "--out", str(tmp_path / "s2"), "--k-values", "3"]) == 1


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict(TINY)
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    assert load_run_config(p).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({**TINY, "extra": 1})


def test_bench_v1_definition():
    cfg = load_benchmark("bench-v1")
    d = cfg.data
    assert (d.num_categories, d.subtypes_per_category, d.n_train, d.n_eval, d.image_size) == (3, 4, 2000, 400, 64)
    with pytest.raises(ConfigError, match="unknown benchmark"):
        load_benchmark("bench-v0")
