import json

import click
import pytest
from click.testing import CliRunner

from bssdistill import cli
from bssdistill import experiments as E

SMALL = [
    "--dataset", "gaussians", "--samples-per-class", "30", "--test-per-class", "20",
    "--teacher-hidden", "8", "--teacher-epochs", "5", "--student-hidden", "4",
    "--epochs", "2", "--batch-size", "16", "--num-base", "2", "--lr", "0.05",
]


@pytest.fixture
def run(tmp_path):
    runner = CliRunner()

    def _run(*args):
        return runner.invoke(cli.main, [*args, "--teacher-cache", str(tmp_path / "cache")], catch_exceptions=False)

    return _run


def test_help_lists_commands():
    out = CliRunner().invoke(cli.main, ["--help"]).output
    for name in ("train-teacher", "distill", "sweep", "compare-attacks", "ablate", "similarity", "grid-dump"):
        assert name in out


def test_train_teacher_then_distill(run, tmp_path):
    r = run("train-teacher", *SMALL, "--out", str(tmp_path / "t.npz"))
    assert r.exit_code == 0, r.output
    assert (tmp_path / "t.npz").exists()
    r = run("distill", *SMALL, "--method", "bss", "--seed", "1", "--out-dir", str(tmp_path / "runs"))
    assert r.exit_code == 0, r.output
    assert {p.name for p in (tmp_path / "runs").iterdir()} == {"bss-seed1.json", "bss-seed1-epochs.csv", "bss-seed1.npz"}
    row = E.read_results_json(tmp_path / "runs" / "bss-seed1.json")[0]
    assert row["config"]["distill"]["num_base"] == 2


def test_sweep_writes_aggregate(run, tmp_path):
    out = tmp_path / "s.json"
    r = run("sweep", *SMALL, "--methods", "original,hinton", "--seeds", "0,1", "--fractions", "1.0,0.5",
            "--out", str(out))
    assert r.exit_code == 0, r.output
    summary = json.loads(r.output[r.output.index("{"):])
    assert summary["test_accuracy"]["0.5"]["hinton"]["n"] == 2


def test_similarity_two_models(run, tmp_path):
    for name, seed in (("a", "1"), ("b", "2")):
        assert run("train-teacher", *SMALL, "--teacher-seed", seed, "--out", str(tmp_path / f"{name}.npz")).exit_code == 0
    r = run("similarity", *SMALL, "--models", str(tmp_path / "a.npz"), str(tmp_path / "b.npz"),
            "--samples", "10", "--pairs-csv", str(tmp_path / "p.csv"))
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["pairs_attempted"] == len((tmp_path / "p.csv").read_text().splitlines()) - 1


def test_validation_errors_exit_nonzero(run):
    r = run("distill", *SMALL, "--method", "nope")
    assert r.exit_code != 0
    r = run("distill", *SMALL, "--temperature", "-1")
    assert r.exit_code == 1 and "Error" in r.output
    r = run("distill", *SMALL, "--fraction", "0")
    assert r.exit_code == 1


def test_desk_preset_respects_explicit_flags():
    ctx = click.Context(cli.distill)
    args = ctx.command.make_context("distill", ["--preset", "desk", "--epochs", "7"])
    cfg = cli.build_config(args, dict(args.params))
    assert cfg.distill.epochs == 7
    assert cfg.distill.num_base == E.ExperimentConfig().distill.num_base
    assert cfg.attack_lr_ratio == 0.5 and cfg.scale_epochs
    ref = ctx.command.make_context("distill", [])
    assert cli.build_config(ref, dict(ref.params)).attack_lr_ratio is None
