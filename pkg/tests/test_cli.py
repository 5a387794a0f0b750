"""End-to-end CLI pipeline on a miniature configuration."""

import os

import numpy as np
import pytest
from click.testing import CliRunner

from pairrank.cli import main

TINY_INI = """\
[synth]
n_families = 5
antigens_per_family = 2
antibodies_per_antigen = 8
ab_len_min = 10
ab_len_max = 16
ag_len_min = 20
ag_len_max = 30
labeled_fraction = 0.9

[pretrain]
epochs = 2
warmup_epochs = 1
batch_size = 16
meta_batch_cap = 8

[rank]
epochs = 2
batch_size = 4
weight_decay = 0.0

[sample]
k = 4
n_train_lists = 12
n_test_lists = 6
"""


def run_cli(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen -> pretrain -> sample -> finetune artifacts shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_INI)
    base = ["--config", str(cfg), "--seed", "1"]
    steps = [
        ["gen", *base, "--out", str(root / "data.tsv")],
        ["pretrain", *base, "--dataset", str(root / "data.tsv"),
         "--out", str(root / "pre.ckpt"), "--log", str(root / "pre.log")],
        ["sample", *base, "--dataset", str(root / "data.tsv"),
         "--split", "train", "--out", str(root / "train.lists")],
        ["sample", *base, "--dataset", str(root / "data.tsv"),
         "--split", "test", "--out", str(root / "test.lists")],
        ["finetune", *base, "--dataset", str(root / "data.tsv"),
         "--lists", str(root / "train.lists"), "--init", str(root / "pre.ckpt"),
         "--out", str(root / "rank.ckpt"), "--log", str(root / "rank.log")],
    ]
    for args in steps:
        result = run_cli(args)
        assert result.exit_code == 0, f"{args[0]}: {result.output}"
    return root, base


def test_gen_is_deterministic(workdir, tmp_path):
    root, base = workdir
    out = tmp_path / "again.tsv"
    assert run_cli(["gen", *base, "--out", str(out)]).exit_code == 0
    assert out.read_bytes() == (root / "data.tsv").read_bytes()


def test_pretrain_log_reproducible(workdir, tmp_path):
    root, base = workdir
    ck = tmp_path / "re.ckpt"
    log = tmp_path / "re.log"
    result = run_cli(["pretrain", *base, "--dataset", str(root / "data.tsv"),
                      "--out", str(ck), "--log", str(log)])
    assert result.exit_code == 0
    assert log.read_bytes() == (root / "pre.log").read_bytes()
    assert ck.read_bytes() == (root / "pre.ckpt").read_bytes()
    lines = log.read_text().splitlines()
    assert len(lines) == 2  # one row per epoch: epoch, CE, Ins, Clus, acc
    assert all(len(line.split("\t")) == 5 for line in lines)


def test_evaluate_reports_and_figures(workdir, tmp_path):
    root, base = workdir
    report = tmp_path / "report.tsv"
    figs = tmp_path / "figs"
    result = run_cli(["evaluate", *base, "--ckpt", str(root / "rank.ckpt"),
                      "--dataset", str(root / "data.tsv"),
                      "--lists", str(root / "test.lists"),
                      "--out", str(report), "--figures", str(figs),
                      "--scores", str(tmp_path / "scores.tsv"),
                      "--screen-top-m", "3"])
    assert result.exit_code == 0, result.output
    head, vals = report.read_text().splitlines()
    assert head.split("\t") == ["n_lists", "FRA", "Ktau", "PRA", "PAU", "P@1"]
    assert len(vals.split("\t")) == 6
    for name in ("metrics.png", "kendall_hist.png", "screening_curves.png"):
        assert (figs / name).stat().st_size > 0
    screening = (str(report) + ".screening.tsv")
    rows = open(screening).read().splitlines()
    assert rows[0] == "n\thit_rate\trecall"
    assert len(rows) > 1


def test_evaluate_jobs_fanout_matches_serial(workdir, tmp_path):
    root, base = workdir
    outs = []
    for jobs in ("1", "3"):
        out = tmp_path / f"r{jobs}.tsv"
        result = run_cli(["evaluate", *base, "--ckpt", str(root / "rank.ckpt"),
                          "--dataset", str(root / "data.tsv"),
                          "--lists", str(root / "test.lists"),
                          "--out", str(out), "--jobs", jobs])
        assert result.exit_code == 0, result.output
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_checkpoint_round_trip_preserves_evaluation(workdir, tmp_path):
    """Load + re-save the rank checkpoint; evaluation output is byte-equal."""
    from pairrank import checkpoint as ckpt
    root, base = workdir
    stage, params, rng_state = ckpt.load_checkpoint(root / "rank.ckpt")
    resaved = tmp_path / "resaved.ckpt"
    digest = _digest_of(root)
    ckpt.save_checkpoint(resaved, stage, params, digest, rng_state)
    reports = []
    for ck in (root / "rank.ckpt", resaved):
        out = tmp_path / (ck.stem + ".report")
        result = run_cli(["evaluate", *base, "--ckpt", str(ck),
                          "--dataset", str(root / "data.tsv"),
                          "--lists", str(root / "test.lists"),
                          "--out", str(out)])
        assert result.exit_code == 0, result.output
        reports.append(out.read_bytes())
    assert reports[0] == reports[1]


def _digest_of(root):
    from pairrank.config import RunConfig
    return RunConfig.from_preset("desk-small", root / "tiny.ini").digest()


def test_ablate_variants(workdir, tmp_path):
    root, base = workdir
    for variant in ("mse", "no-pu", "abrank-sampling"):
        out = tmp_path / f"{variant}.tsv"
        result = run_cli(["ablate", *base, "--variant", variant,
                          "--dataset", str(root / "data.tsv"),
                          "--train-lists", str(root / "train.lists"),
                          "--test-lists", str(root / "test.lists"),
                          "--init", str(root / "pre.ckpt"),
                          "--out", str(out)])
        assert result.exit_code == 0, f"{variant}: {result.output}"
        lines = out.read_text().splitlines()
        assert lines[0] == f"variant\t{variant}"


def test_missing_file_is_one_line_error(workdir):
    _, base = workdir
    result = run_cli(["pretrain", *base, "--dataset", "/nonexistent.tsv",
                      "--out", "/tmp/x.ckpt"])
    assert result.exit_code != 0
    err = result.output.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:")


def test_config_violation_is_one_line_error(workdir, tmp_path):
    root, _ = workdir
    bad = tmp_path / "bad.ini"
    bad.write_text("[rank]\nepochs = -2\n")
    result = run_cli(["gen", "--config", str(bad), "--out", str(tmp_path / "d.tsv")])
    assert result.exit_code != 0
    assert result.output.strip().startswith("error: config:")


def test_checkpoint_config_mismatch_rejected(workdir, tmp_path):
    root, _ = workdir
    other = tmp_path / "other.ini"
    other.write_text(TINY_INI.replace("epochs = 2", "epochs = 3", 1))
    result = run_cli(["finetune", "--config", str(other), "--seed", "1",
                      "--dataset", str(root / "data.tsv"),
                      "--lists", str(root / "train.lists"),
                      "--init", str(root / "pre.ckpt"),
                      "--out", str(tmp_path / "x.ckpt")])
    assert result.exit_code != 0
    assert "error: checkpoint:" in result.output


def test_wrong_stage_checkpoint_rejected(workdir, tmp_path):
    root, base = workdir
    result = run_cli(["evaluate", *base, "--ckpt", str(root / "pre.ckpt"),
                      "--dataset", str(root / "data.tsv"),
                      "--lists", str(root / "test.lists"),
                      "--out", str(tmp_path / "r.tsv")])
    assert result.exit_code != 0
    assert "error: checkpoint:" in result.output


def test_insufficient_sampling_is_clean_error(workdir, tmp_path):
    root, _ = workdir
    strict = tmp_path / "strict.ini"
    strict.write_text(TINY_INI + "delta_seq = 1.0\n")
    # delta_seq belongs to [sample]; append inside that section instead
    strict.write_text(TINY_INI.replace("k = 4", "k = 4\ndelta_seq = 1.0"))
    result = run_cli(["sample", "--config", str(strict), "--seed", "1",
                      "--dataset", str(root / "data.tsv"),
                      "--split", "test", "--out", str(tmp_path / "l.tsv")])
    assert result.exit_code != 0
    assert result.output.strip().startswith("error: sampling:")
