import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from dqkit.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def _gen(runner, root, seed=0, train=8, dev=2, test=4):
    data = root / "data"
    res = runner.invoke(main, ["gen-data", "--out", str(data), "--seed",
                               str(seed), "--train", str(train), "--dev",
                               str(dev), "--test", str(test)])
    assert res.exit_code == 0, res.output
    return data


def _teacher(runner, root, data, seed=0, epochs=2):
    out = root / "teacher"
    res = runner.invoke(main, ["train-teacher", "--data", str(data), "--out",
                               str(out), "--seed", str(seed), "--epochs",
                               str(epochs), "--warmup", "4"])
    assert res.exit_code == 0, res.output
    return out / "teacher.dqwc"


def test_gen_data_writes_files_and_is_deterministic(runner, tmp_path):
    a = _gen(runner, tmp_path / "a", seed=7)
    b = _gen(runner, tmp_path / "b", seed=7)
    for name in ("train.tsv", "dev.tsv", "test.tsv", "corpus.json"):
        assert (a / name).exists()
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = _gen(runner, tmp_path / "c", seed=8)
    assert (a / "train.tsv").read_bytes() != (c / "train.tsv").read_bytes()


def test_manifest_echoes_effective_config(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=5, train=6)
    manifest = json.loads((data / "manifest.json").read_text())
    run = manifest["runs"][0]
    assert run["command"] == "gen-data"
    assert run["config"]["seed"] == 5
    assert run["config"]["sizes"]["train"] == 6


def test_seed_precedence_env_config_flag(runner, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 11}))
    env = {"DQ_SEED": "22"}

    out = tmp_path / "env_only"
    res = runner.invoke(main, ["gen-data", "--out", str(out), "--train", "2",
                               "--dev", "1", "--test", "1"], env=env)
    assert res.exit_code == 0
    assert json.loads((out / "manifest.json").read_text())["runs"][0]["config"]["seed"] == 22

    out = tmp_path / "config_beats_env"
    res = runner.invoke(main, ["gen-data", "--config", str(cfg), "--out",
                               str(out), "--train", "2", "--dev", "1",
                               "--test", "1"], env=env)
    assert res.exit_code == 0
    assert json.loads((out / "manifest.json").read_text())["runs"][0]["config"]["seed"] == 11

    out = tmp_path / "flag_beats_all"
    res = runner.invoke(main, ["gen-data", "--config", str(cfg), "--seed", "33",
                               "--out", str(out), "--train", "2", "--dev", "1",
                               "--test", "1"], env=env)
    assert res.exit_code == 0
    assert json.loads((out / "manifest.json").read_text())["runs"][0]["config"]["seed"] == 33


def test_pipeline_and_run_determinism(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=1)
    teacher = _teacher(runner, tmp_path, data, seed=1)

    def distill(tag):
        out = tmp_path / tag
        res = runner.invoke(main, ["distill", "--data", str(data), "--teacher",
                                   str(teacher), "--out", str(out),
                                   "--strategy", "rdm", "--epochs", "2",
                                   "--seed", "3"])
        assert res.exit_code == 0, res.output
        return out

    r1, r2 = distill("run1"), distill("run2")
    for name in ("student.dqwc", "results.csv", "metrics.csv", "plans.csv",
                 "eval.json"):
        assert (r1 / name).read_bytes() == (r2 / name).read_bytes(), name
    results = (r1 / "results.csv").read_text().splitlines()
    assert len(results) == 2  # header + one row
    assert "rdm" in results[1]


def test_dq_distill_writes_quantized_student(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=2, train=4, dev=1, test=2)
    teacher = _teacher(runner, tmp_path, data, seed=2, epochs=1)
    out = tmp_path / "dq"
    res = runner.invoke(main, ["distill", "--data", str(data), "--teacher",
                               str(teacher), "--out", str(out), "--strategy",
                               "dq", "--bits", "8", "--epochs", "1",
                               "--seed", "2"])
    assert res.exit_code == 0, res.output
    report = json.loads((out / "eval.json").read_text())
    assert report["bits"] == 8
    # quantized student is much smaller than the float teacher
    assert (out / "student.dqwc").stat().st_size < teacher.stat().st_size
    assert report["ratio"] > 1.0


def test_quantize_then_evaluate_then_report(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=4, train=4, dev=1, test=2)
    teacher_dir = tmp_path / "teacher"
    teacher = _teacher(runner, tmp_path, data, seed=4, epochs=1)
    out = tmp_path / "none"
    res = runner.invoke(main, ["distill", "--data", str(data), "--out",
                               str(out), "--strategy", "none", "--epochs", "1",
                               "--seed", "4"])
    assert res.exit_code == 0, res.output

    q_out = tmp_path / "ptq"
    res = runner.invoke(main, ["quantize", "--model",
                               str(out / "student.dqwc"), "--bits", "8",
                               "--data", str(data), "--out", str(q_out)])
    assert res.exit_code == 0, res.output
    assert (q_out / "quantized.dqwc").exists()
    rows = (q_out / "results.csv").read_text().splitlines()
    assert "none+ptq" in rows[1]

    e_out = tmp_path / "eval"
    res = runner.invoke(main, ["evaluate", "--model",
                               str(q_out / "quantized.dqwc"), "--data",
                               str(data), "--out", str(e_out),
                               "--reference-bytes",
                               str(teacher.stat().st_size)])
    assert res.exit_code == 0, res.output
    report = json.loads((e_out / "eval.json").read_text())
    assert report["strategy"] == "none+ptq"
    assert report["ratio"] > 1.0

    r_out = tmp_path / "report"
    res = runner.invoke(main, ["report", "--results", str(teacher_dir),
                               "--results", str(out), "--results", str(q_out),
                               "--out", str(r_out)])
    assert res.exit_code == 0, res.output
    lines = (r_out / "report.csv").read_text().splitlines()
    assert lines[0].startswith("strategy,")
    assert len(lines) == 4  # header + teacher + none + none+ptq


def test_distill_without_teacher_fails(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=0, train=2, dev=1, test=1)
    res = runner.invoke(main, ["distill", "--data", str(data), "--out",
                               str(tmp_path / "x"), "--strategy", "logits",
                               "--epochs", "1"])
    assert res.exit_code != 0
    assert "teacher" in res.output


def test_unknown_strategy_is_usage_error(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=0, train=2, dev=1, test=1)
    res = runner.invoke(main, ["distill", "--data", str(data), "--out",
                               str(tmp_path / "x"), "--strategy", "magic"])
    assert res.exit_code == 2


def test_results_lockfile_fails_fast(runner, tmp_path):
    data_root = tmp_path / "d"
    data = _gen(runner, data_root, seed=0, train=2, dev=1, test=1)
    out = tmp_path / "run"
    out.mkdir()
    (out / "results.csv.lock").touch()
    res = runner.invoke(main, ["distill", "--data", str(data), "--out",
                               str(out), "--strategy", "none", "--epochs", "1"])
    assert res.exit_code != 0
    assert "locked" in res.output


def test_results_csv_appends(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=0, train=2, dev=1, test=1)
    out = tmp_path / "run"
    for seed in ("1", "2"):
        res = runner.invoke(main, ["distill", "--data", str(data), "--out",
                                   str(out), "--strategy", "none", "--epochs",
                                   "1", "--seed", seed])
        assert res.exit_code == 0, res.output
    lines = (out / "results.csv").read_text().splitlines()
    assert len(lines) == 3  # header + two rows


def test_config_file_overridden_by_flags(runner, tmp_path):
    data = _gen(runner, tmp_path, seed=0, train=4, dev=1, test=1)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "alpha": 0.25, "strategy": "none"}))
    out = tmp_path / "run"
    res = runner.invoke(main, ["distill", "--config", str(cfg), "--data",
                               str(data), "--out", str(out), "--alpha", "0.75",
                               "--seed", "0"])
    assert res.exit_code == 0, res.output
    manifest = json.loads((out / "manifest.json").read_text())
    run = manifest["runs"][-1]["config"]
    assert run["alpha"] == 0.75
    assert run["strategy"] == "none"
