import json

import pandas as pd
import pytest
from click.testing import CliRunner

from cli import cli, parse_overrides


def last_json(result):
    return json.loads(result.output.strip().splitlines()[-1])


def test_parse_overrides():
    assert parse_overrides(["--beta", "0.01", "--loss-mode=kd"]) == {"beta": "0.01", "loss-mode": "kd"}


def test_distill_is_byte_reproducible(tiny_config_file, tmp_path):
    runner = CliRunner()
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(
            cli, ["--quiet", "distill", "--config", tiny_config_file, "--seed", "7", "--output-dir", str(out)]
        )
        assert result.exit_code == 0, result.output
        outputs.append((out / "metrics.jsonl").read_bytes())
    assert outputs[0] == outputs[1]
    assert len(outputs[0].splitlines()) == 2


def test_train_teacher_then_distill_from_checkpoint(tiny_config_file, tmp_path):
    runner = CliRunner()
    out = str(tmp_path / "run")
    result = runner.invoke(cli, ["--quiet", "train-teacher", "--config", tiny_config_file, "--output-dir", out])
    assert result.exit_code == 0, result.output
    assert 0.0 <= last_json(result)["test_top1"] <= 1.0

    teacher = str(tmp_path / "run" / "teacher.json")
    result = runner.invoke(
        cli, ["--quiet", "distill", "--config", tiny_config_file, "--teacher", teacher, "--output-dir", out, "--loss-mode", "kd"]
    )
    assert result.exit_code == 0, result.output
    assert "heldout_cc" in last_json(result)


def test_eval_and_analyze(tiny_config_file, tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    assert runner.invoke(cli, ["--quiet", "distill", "--config", tiny_config_file, "--output-dir", str(out)]).exit_code == 0
    student = str(out / "student.json")

    result = runner.invoke(cli, ["--quiet", "eval", "--config", tiny_config_file, "--checkpoint", student])
    assert result.exit_code == 0, result.output
    accuracy = last_json(result)
    assert 0.0 <= accuracy["top1"] <= 1.0
    assert accuracy["top5"] is None

    result = runner.invoke(
        cli,
        ["--quiet", "analyze", "--config", tiny_config_file, "--checkpoint", student,
         "--classes", "0,1", "--per-class", "3", "--output-dir", str(out / "analysis")],
    )
    assert result.exit_code == 0, result.output
    stats = json.loads((out / "analysis" / "similarity_stats.json").read_text())
    assert -1.0 <= stats["mean_intra"] <= 1.0
    heatmap = pd.read_csv(out / "analysis" / "heatmap.csv")
    assert heatmap.shape == (6, 6)


def test_sweep_writes_curves_and_summary(tiny_config_file, tmp_path):
    runner = CliRunner()
    out = tmp_path / "sweep-root"
    result = runner.invoke(
        cli,
        ["--quiet", "sweep", "--config", tiny_config_file, "--seeds", "0,1", "--modes", "kd,cckd",
         "--axis", "order=1,2", "--output-dir", str(out)],
    )
    assert result.exit_code == 0, result.output
    curves = pd.read_csv(out / "sweep" / "curves.csv")
    assert len(curves) == 2 * 2 * 2 * 2
    summary = pd.read_csv(out / "sweep" / "summary.csv")
    assert sorted(zip(summary["order"], summary["loss_mode"])) == [(1, "cckd"), (1, "kd"), (2, "cckd"), (2, "kd")]

    teachers = sorted(p.parent.name for p in (out / "sweep" / "teachers").glob("*/teacher.json"))
    assert teachers == ["00-seed0", "01-seed1"]
    assert not list((out / "sweep").glob("order=*/teacher.json"))

    single = tmp_path / "single"
    result = runner.invoke(
        cli,
        ["--quiet", "distill", "--config", tiny_config_file, "--seed", "1", "--loss-mode", "cckd", "--order", "2",
         "--output-dir", str(single)],
    )
    assert result.exit_code == 0, result.output
    shared = out / "sweep" / "order=2-cckd-seed1" / "metrics.jsonl"
    assert shared.read_bytes() == (single / "metrics.jsonl").read_bytes()


def test_errors_become_diagnostics(tiny_config_file):
    result = CliRunner().invoke(cli, ["--quiet", "distill", "--config", tiny_config_file, "--loss-mode", "adversarial"])
    assert result.exit_code != 0
    assert "Unknown loss_mode" in result.output


def test_unknown_override_key(tiny_config_file):
    result = CliRunner().invoke(cli, ["--quiet", "eval", "--config", tiny_config_file, "--checkpoint", tiny_config_file, "--bogus", "1"])
    assert result.exit_code != 0
    assert "Unknown config key" in result.output


@pytest.mark.parametrize("command", ["distill", "train-teacher"])
def test_unwritable_output_dir_is_a_diagnostic(tiny_config_file, tmp_path, command):
    blocker = tmp_path / "file"
    blocker.write_text("")
    result = CliRunner().invoke(
        cli, ["--quiet", command, "--config", tiny_config_file, "--output-dir", str(blocker / "run")]
    )
    assert result.exit_code == 1
    assert isinstance(result.exception, SystemExit)
    assert "Cannot" in result.output
    assert str(blocker / "run") in result.output
