#!/usr/bin/env python3
"""
End-to-end tests for the umbd command line
"""

import argparse
import shutil

import numpy as np
import pytest

from umbd import cli
from umbd.cli import main, parse_steps
from umbd.config import RunLayout, load_run_config, save_run_config
from umbd.datagen import read_mask, write_mask
from umbd.reporting import read_csv

from tests.conftest import tiny_run_config

METRICS = ("mae", "f_beta_w", "e_phi", "s_alpha")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A generated corpus and a run trained through every stage by the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    config = save_run_config(tiny_run_config(), root / "tiny.json")
    assert main(["gen-data", "--out", str(data), "--train", "8", "--test", "4", "--size", "32"]) == 0
    assert main(["train", "--data", str(data), "--run", str(run), "--config", str(config)]) == 0
    return data, run


def test_parse_steps():
    assert parse_steps("1..4") == [1, 2, 3, 4]
    assert parse_steps("1,3,10") == [1, 3, 10]
    for bad in ("", "0..3", "a,b"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_steps(bad)


def test_usage_errors_exit_with_two():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_missing_run_is_a_checkpoint_error(tmp_path, trained):
    data, _ = trained
    assert main(["eval", "--run", str(tmp_path / "absent"), "--data", str(data)]) == 3


def test_missing_dataset_is_a_dataset_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--run", str(tmp_path / "run")]) == 3


def test_train_writes_a_complete_run(trained):
    _, run = trained
    layout = RunLayout.at(run)
    for path in (layout.config, layout.prior_checkpoint, layout.huqnet_checkpoint, layout.denoiser_checkpoint,
                 layout.logs):
        assert path.is_file(), path


def test_single_stages_retrain_on_an_existing_run(tmp_path, trained):
    """Reopened checkpoints train again, with the run's stored config"""
    data, run = trained
    copy = shutil.copytree(run, tmp_path / "run")
    layout = RunLayout.at(copy)
    huqnet_before = layout.huqnet_checkpoint.read_bytes()
    assert main(["train", "--data", str(data), "--run", str(copy), "--stage", "1"]) == 0
    assert layout.huqnet_checkpoint.read_bytes() != huqnet_before
    assert main(["train", "--data", str(data), "--run", str(copy), "--stage", "2"]) == 0
    config = load_run_config(layout.config)
    assert config.train.T_train == tiny_run_config().train.T_train
    assert config.denoiser.base_channels == tiny_run_config().denoiser.base_channels


def test_refine_with_zero_uncertainty_keeps_the_coarse_mask(tmp_path, trained):
    data, run = trained
    coarse = np.linspace(0, 1, 32 * 32, dtype=np.float32).reshape(32, 32)
    coarse_path = write_mask(coarse, tmp_path / "coarse.png")
    out = tmp_path / "refined.png"
    code = main(["refine", "--run", str(run), "--input", str(data / "test" / "images" / "test_00000.png"),
                 "--coarse", str(coarse_path), "--out", str(out), "--uncertainty", "zeros"])
    assert code == 0
    assert np.array_equal(read_mask(out, binarize=False), read_mask(coarse_path, binarize=False))


def test_refine_writes_a_trace(tmp_path, trained):
    data, run = trained
    trace = tmp_path / "trace"
    code = main(["refine", "--run", str(run), "--input", str(data / "test" / "images" / "test_00001.png"),
                 "--out", str(tmp_path / "refined.png"), "--trace", str(trace), "--steps", "2",
                 "--sampler", "ddpm"])
    assert code == 0
    names = sorted(p.name for p in trace.glob("*.png"))
    assert "uncertainty.png" in names
    assert "y_0000.png" in names
    assert len(names) == 2 + 1 + 1


def test_eval_with_zero_uncertainty_leaves_scores_unchanged(trained):
    data, run = trained
    assert main(["eval", "--run", str(run), "--data", str(data), "--uncertainty", "zeros", "--seeds", "2"]) == 0
    rows = read_csv(RunLayout.at(run).eval)
    assert [r["refined"] for r in rows] == ["0", "1"]
    for name in METRICS:
        assert rows[0][name] == rows[1][name]
    samples = read_csv(RunLayout.at(run).eval_samples)
    assert len(samples) == 2 * 2 * 4


def test_ablations_and_report(trained):
    data, run = trained
    layout = RunLayout.at(run)
    assert main(["eval", "--run", str(run), "--data", str(data)]) == 0
    assert main(["ablate-steps", "--run", str(run), "--data", str(data), "--steps", "1,2"]) == 0
    assert [r["T_infer"] for r in read_csv(layout.ablate_steps)] == ["1", "2"]

    assert main(["ablate-uncertainty", "--run", str(run), "--data", str(data)]) == 0
    sources = [r["source"] for r in read_csv(layout.ablate_uncertainty)]
    assert sources == ["coarse", "ones", "entropy", "huqnet"]

    assert main(["report", "--run", str(run)]) == 0
    for name in ("metric_deltas.png", "loss_curves.png", "step_ablation.png"):
        assert (layout.figures / name).is_file(), name


def test_report_without_evaluation_fails(tmp_path):
    assert main(["report", "--run", str(tmp_path / "empty")]) == 3


def test_runtime_failures_exit_with_four(monkeypatch, tmp_path):
    def broken(args):
        raise RuntimeError("device-side assert triggered")

    monkeypatch.setattr(cli, "cmd_report", broken)
    assert main(["report", "--run", str(tmp_path)]) == 4
