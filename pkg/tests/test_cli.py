import json
import subprocess
import sys

import pytest

from adhere_ml import cli

SMALL = ["--n-subjects", "8", "--n-days", "100", "--k", "3", "--max-epochs", "3", "--n-explain", "20",
         "--n-background", "20", "--n-baselines", "8"]
CHAIN = ["simulate", "label", "featurize", "evaluate", "train-final", "explain", "report"]


@pytest.fixture
def grid_file(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text(json.dumps({"lstm_hidden": [4], "fnn_hidden": [4], "final_hidden": [4],
                                "dropout_rate": [0.2], "learning_rate": [0.01]}))
    return str(path)


def run_chain(out, grid, seed="7", extra=()):
    for cmd in CHAIN:
        code = cli.main([cmd, "--out-dir", str(out), "--seed", seed, "--grid", grid, *SMALL, *extra])
        assert code == 0, cmd


def test_help_lists_flags_with_defaults(capsys):
    with pytest.raises(SystemExit) as exit_:
        cli.main(["evaluate", "--help"])
    assert exit_.value.code == 0
    text = capsys.readouterr().out
    for flag, default in [
        ("--task", "daily"), ("--daily-lags", "7"), ("--weekly-lags", "4"), ("--burn-in-days", "30"),
        ("--interval-window", "18 30"), ("--weekly-threshold", "0.8"), ("--availability", "0.6"),
        ("--k", "5"), ("--seed", "ADHERE_ML_SEED"), ("--grid", "24-point"), ("--out-dir", "run"),
        ("--config", None), ("--events", None), ("--surveys", None),
    ]:
        assert flag in text
        if default:
            assert default in text


def test_top_level_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for cmd in CHAIN:
        assert cmd in text


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exit_:
        cli.main(["bogus"])
    assert exit_.value.code == 1
    with pytest.raises(SystemExit) as exit_:
        cli.main(["label", "--k", "many"])
    assert exit_.value.code == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert cli.main(["label", "--config", str(cfg)]) == 1
    assert "colour" in capsys.readouterr().err


def test_missing_events_exit_2_with_path(tmp_path, capsys):
    missing = tmp_path / "nope" / "events.csv"
    assert cli.main(["label", "--events", str(missing), "--out-dir", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_stage_order_violation_names_artifact(tmp_path, capsys):
    assert cli.main(["evaluate", "--out-dir", str(tmp_path)]) == 2
    assert "daily_features.json" in capsys.readouterr().err
    assert cli.main(["report", "--out-dir", str(tmp_path)]) == 2


def test_malformed_events_exit_2(tmp_path, capsys):
    bad = tmp_path / "events.csv"
    bad.write_text("subject_id,timestamp\nA,not-a-time\n")
    assert cli.main(["label", "--out-dir", str(tmp_path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out_dir": str(tmp_path / "a"), "seed": 3, "n_subjects": 2, "n_days": 60}))
    assert cli.main(["simulate", "--config", str(cfg)]) == 0
    assert cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "b"), "--seed", "4"]) == 0
    truth_a = json.loads((tmp_path / "a" / "ground_truth.json").read_text())
    truth_b = json.loads((tmp_path / "b" / "ground_truth.json").read_text())
    assert truth_a["spec"]["seed"] == 3 and truth_b["spec"]["seed"] == 4
    assert len(truth_a["subjects"]) == 2


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")
    assert cli.main(["simulate", "--out-dir", str(tmp_path / "env"), "--n-subjects", "2", "--n-days", "60"]) == 0
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.main(["simulate", "--out-dir", str(tmp_path / "flag"), "--seed", "11", "--n-subjects", "2",
                     "--n-days", "60"]) == 0
    assert (tmp_path / "env" / "events.csv").read_bytes() == (tmp_path / "flag" / "events.csv").read_bytes()
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert cli.main(["simulate", "--out-dir", str(tmp_path / "bad")]) == 1


def test_full_chain_produces_every_artifact(tmp_path, grid_file):
    out = tmp_path / "run"
    run_chain(out, grid_file)
    for name in ["events.csv", "surveys.csv", "ground_truth.json", "day_labels.csv", "week_labels.csv",
                 "daily_samples.csv", "daily_features.json", "daily_cv_report.csv", "daily_cv_report.json",
                 "daily_model.json", "daily_plan.json", "daily_importance.csv", "daily_importance.json",
                 "daily_importance.svg", "report.md"]:
        assert (out / name).exists(), name
    report = (out / "report.md").read_text()
    assert "Our Approach" in report and "Logistic Regression" in report and "±" in report


def test_weekly_task(tmp_path, grid_file):
    out = tmp_path / "run"
    for cmd in ["simulate", "label", "featurize", "evaluate"]:
        args = [cmd, "--out-dir", str(out), "--task", "weekly", "--grid", grid_file, *SMALL]
        args[args.index("--n-subjects") + 1] = "12"
        args[args.index("--n-days") + 1] = "180"
        assert cli.main(args) == 0
    assert (out / "weekly_cv_report.json").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adhere_ml", "simulate", "--out-dir", str(tmp_path),
                           "--n-subjects", "2", "--n-days", "60"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "events.csv").exists()
