"""Command-line entry points and run orchestration.

Subcommands cover the full pipeline: gen -> pretrain -> sample -> finetune
-> evaluate, plus ablate for the component-removal variants. All randomness
keys off one --seed flag; outputs are written atomically.
"""

from __future__ import annotations

import multiprocessing
import os
import sys
import tempfile

import click
import numpy as np

from . import checkpoint as ckpt
from . import listsample, metrics, plots, pretrain, ranker, synthdata
from .config import ConfigError, RunConfig
from .listsample import PoolRejection


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _load_config(preset, config_path):
    try:
        return RunConfig.from_preset(preset, config_path)
    except (ConfigError, OSError) as exc:
        _fail(f"config: {exc}")


def _load_dataset(path):
    try:
        return synthdata.load_dataset(path)
    except OSError as exc:
        _fail(f"dataset: {exc}")


def _load_lists(path, dataset):
    try:
        return listsample.load_lists(path, dataset)
    except (OSError, KeyError, ValueError) as exc:
        _fail(f"lists: {exc}")


@click.group()
def main():
    """Listwise binding-strength ranking pipeline on synthetic data."""


_common = [
    click.option("--preset", default="desk-small",
                 type=click.Choice(["desk-small", "paper-default"]),
                 show_default=True),
    click.option("--config", "config_path", default=None,
                 type=click.Path(), help="Optional config override file."),
    click.option("--seed", default=0, show_default=True, type=int),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@main.command()
@common_options
@click.option("--out", required=True, type=click.Path())
def gen(preset, config_path, seed, out):
    """Generate a synthetic dataset file."""
    cfg = _load_config(preset, config_path)
    dataset, _oracle = synthdata.gen_dataset(cfg.synth_config(seed))
    tmpdir = os.path.dirname(os.path.abspath(out))
    fd, tmp = tempfile.mkstemp(dir=tmpdir)
    os.close(fd)
    try:
        synthdata.save_dataset(dataset, tmp)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    click.echo(f"wrote {len(dataset)} pairs to {out}")


@main.command("pretrain")
@common_options
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--log", "log_path", default=None, type=click.Path())
def cmd_pretrain(preset, config_path, seed, dataset_path, out, log_path):
    """Run PU pre-training and write a checkpoint."""
    cfg = _load_config(preset, config_path)
    dataset = _load_dataset(dataset_path)
    if not dataset.labeled_indices:
        _fail("dataset has no labeled pairs")
    lines = []
    params, _state, _reports = pretrain.run_pretrain(
        dataset, cfg.pretrain_config(), seed, log_fn=lines.append)
    if log_path:
        _atomic_write(log_path, "".join(line + "\n" for line in lines))
    ckpt.save_checkpoint(out, "pretrain", params, cfg.digest(),
                         rng_state={"seed": seed})
    click.echo(f"wrote pretrain checkpoint to {out}")


@main.command("sample")
@common_options
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--split", default="train", show_default=True,
              type=click.Choice(["train", "test"]))
@click.option("--out", required=True, type=click.Path())
def cmd_sample(preset, config_path, seed, dataset_path, split, out):
    """Sample ranking lists for one side of the split."""
    cfg = _load_config(preset, config_path)
    dataset = _load_dataset(dataset_path)
    sp = cfg.values["split"]
    train_idx, test_idx = listsample.make_splits(
        dataset, sp["regime"], fold=sp["fold"], seed=seed,
        n_folds=sp["n_folds"], n_clusters=sp["n_clusters"])
    side = train_idx if split == "train" else test_idx
    labeled = [i for i in side if dataset.pairs[i].affinity is not None]
    n_lists = cfg.values["sample"]["n_train_lists" if split == "train"
                                   else "n_test_lists"]
    scfg = cfg.sampler_config(homologous_only=(split == "test"))
    rng = np.random.default_rng(seed + (0 if split == "train" else 1))
    try:
        lists = listsample.sample_epoch(dataset, labeled, scfg, n_lists, rng)
    except (PoolRejection, ValueError) as exc:
        _fail(f"sampling: {exc}")
    listsample.save_lists(lists, dataset, out)
    click.echo(f"wrote {len(lists)} lists to {out}")


@main.command("finetune")
@common_options
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--lists", "lists_path", required=True, type=click.Path())
@click.option("--init", "init_path", default=None, type=click.Path(),
              help="Pre-training checkpoint (omit for random init).")
@click.option("--variant", default="full", show_default=True,
              type=click.Choice(["full", "mse", "mlp"]))
@click.option("--out", required=True, type=click.Path())
@click.option("--log", "log_path", default=None, type=click.Path())
def cmd_finetune(preset, config_path, seed, dataset_path, lists_path,
                 init_path, variant, out, log_path):
    """Fine-tune the listwise ranker from a pre-trained encoder."""
    cfg = _load_config(preset, config_path)
    dataset = _load_dataset(dataset_path)
    lists = _load_lists(lists_path, dataset)
    rng = np.random.default_rng(seed)
    if init_path is None:
        from . import encoder as enc
        enc_params = enc.init_encoder_params(rng)
    else:
        try:
            _stage, enc_params, _ = ckpt.load_checkpoint(
                init_path, expect_stage="pretrain", expect_digest=cfg.digest())
        except (ckpt.CheckpointError, OSError) as exc:
            _fail(f"checkpoint: {exc}")
    lines = []
    params, _losses = ranker.run_finetune(
        lists, dataset, enc_params, cfg.rank_config(variant), seed,
        log_fn=lines.append)
    if log_path:
        _atomic_write(log_path, "".join(line + "\n" for line in lines))
    ckpt.save_checkpoint(out, "rank", params, cfg.digest(),
                         rng_state={"seed": seed})
    click.echo(f"wrote ranking checkpoint to {out}")


_POOL_STATE = {}


def _pool_init(dataset, params, cfg):
    _POOL_STATE["args"] = (dataset, params, cfg)


def _pool_score(chunk):
    dataset, params, cfg = _POOL_STATE["args"]
    return ranker.score_lists(chunk, dataset, params, cfg)


def _score_all(lists, dataset, params, cfg, jobs):
    if jobs <= 1 or len(lists) < 2 * jobs:
        return ranker.score_lists(lists, dataset, params, cfg)
    chunks = [list(c) for c in np.array_split(np.array(lists, dtype=object), jobs)]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(jobs, initializer=_pool_init,
                  initargs=(dataset, params, cfg)) as pool:
        results = pool.map(_pool_score, chunks)
    return [s for chunk in results for s in chunk]


def _report_text(report):
    head = "\t".join(name for name, _ in report.summary_rows())
    vals = "\t".join(f"{v:.4f}" for _, v in report.summary_rows())
    return head + "\n" + vals + "\n"


def _detail_text(report):
    lines = ["list_id\ttau\tconcordant\tdiscordant\texact\ttop1\tpra\tpau"]
    for r in report.records:
        lines.append(f"{r.list_id}\t{r.tau:.4f}\t{r.concordant}"
                     f"\t{r.discordant}\t{int(r.exact_match)}\t{int(r.top1_hit)}"
                     f"\t{r.pairwise_accuracy:.4f}\t{r.pairwise_auc:.4f}")
    return "".join(line + "\n" for line in lines)


def _scored_lines(lists, scores):
    lines = []
    for rl, sc in zip(lists, scores):
        perm = metrics.predicted_permutation(sc)
        lines.append("\t".join([str(rl.list_id)]
                               + [repr(float(v)) for v in sc]
                               + [",".join(str(int(i)) for i in perm)]))
    return "".join(line + "\n" for line in lines)


@main.command("evaluate")
@common_options
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--lists", "lists_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(),
              help="Summary report (tab-separated).")
@click.option("--scores", "scores_path", default=None, type=click.Path(),
              help="Per-list score file.")
@click.option("--detail", "detail_path", default=None, type=click.Path())
@click.option("--figures", "figures_dir", default=None, type=click.Path())
@click.option("--screen-top-m", default=0, type=int,
              help="Also emit screening curves for the global ranking.")
@click.option("--jobs", default=1, show_default=True, type=int)
def cmd_evaluate(preset, config_path, seed, ckpt_path, dataset_path,
                 lists_path, out, scores_path, detail_path, figures_dir,
                 screen_top_m, jobs):
    """Score lists with a ranking checkpoint and report the five metrics."""
    cfg = _load_config(preset, config_path)
    dataset = _load_dataset(dataset_path)
    lists = _load_lists(lists_path, dataset)
    try:
        _stage, params, _ = ckpt.load_checkpoint(
            ckpt_path, expect_stage="rank", expect_digest=cfg.digest(),
            requires_grad=False)
    except (ckpt.CheckpointError, OSError) as exc:
        _fail(f"checkpoint: {exc}")
    rcfg = cfg.rank_config("mlp" if "rank.mlp.w1" in params else "full")
    scores = _score_all(lists, dataset, params, rcfg, jobs)
    strengths = [ranker.strength(rl.labels) for rl in lists]
    report = metrics.evaluate_lists([rl.list_id for rl in lists],
                                    scores, strengths)
    _atomic_write(out, _report_text(report))
    if scores_path:
        _atomic_write(scores_path, _scored_lines(lists, scores))
    if detail_path:
        _atomic_write(detail_path, _detail_text(report))
    if figures_dir:
        os.makedirs(figures_dir, exist_ok=True)
        plots.render_metric_bars(report, os.path.join(figures_dir, "metrics.png"))
        plots.render_tau_histogram(report, os.path.join(figures_dir,
                                                        "kendall_hist.png"))
    if screen_top_m > 0:
        scored = [( [dataset.pairs[i].pair_id for i in rl.members], sc)
                  for rl, sc in zip(lists, scores)]
        order, _means = ranker.aggregate_global_rank(scored)
        truth = {}
        for rl in lists:
            for i, y in zip(rl.members, rl.labels):
                truth[dataset.pairs[i].pair_id] = -float(y)
        if screen_top_m > len(order):
            _fail("screen-top-m exceeds the candidate count")
        hit, recall = metrics.screening_curves(order, truth, screen_top_m)
        rows = "".join(f"{n + 1}\t{hit[n]:.4f}\t{recall[n]:.4f}\n"
                       for n in range(len(hit)))
        _atomic_write(out + ".screening.tsv", "n\thit_rate\trecall\n" + rows)
        if figures_dir:
            plots.render_screening_curves(
                hit, recall, screen_top_m,
                os.path.join(figures_dir, "screening_curves.png"))
    click.echo(_report_text(report).rstrip("\n"))


@main.command("ablate")
@common_options
@click.option("--variant", required=True,
              type=click.Choice(["no-pu", "mse", "mlp", "abrank-sampling"]))
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--train-lists", "train_lists_path", required=True,
              type=click.Path())
@click.option("--test-lists", "test_lists_path", required=True,
              type=click.Path())
@click.option("--init", "init_path", default=None, type=click.Path(),
              help="Pre-training checkpoint (ignored for no-pu).")
@click.option("--out", required=True, type=click.Path())
def cmd_ablate(preset, config_path, seed, variant, dataset_path,
               train_lists_path, test_lists_path, init_path, out):
    """Train and evaluate one ablation variant, writing its report."""
    cfg = _load_config(preset, config_path)
    dataset = _load_dataset(dataset_path)
    test_lists = _load_lists(test_lists_path, dataset)
    rng = np.random.default_rng(seed)

    if variant == "abrank-sampling":
        # margin-only sampling: drop the homology requirement entirely
        scfg = cfg.sampler_config(homologous_only=True)
        scfg.delta_seq = 0.0
        labeled = [i for i in range(len(dataset))
                   if dataset.pairs[i].affinity is not None]
        n_lists = cfg.values["sample"]["n_train_lists"]
        train_lists = listsample.sample_epoch(dataset, labeled, scfg,
                                              n_lists, rng)
    else:
        train_lists = _load_lists(train_lists_path, dataset)

    if variant == "no-pu" or init_path is None:
        from . import encoder as enc
        enc_params = enc.init_encoder_params(rng)
    else:
        try:
            _stage, enc_params, _ = ckpt.load_checkpoint(
                init_path, expect_stage="pretrain", expect_digest=cfg.digest())
        except (ckpt.CheckpointError, OSError) as exc:
            _fail(f"checkpoint: {exc}")

    rank_variant = {"mse": "mse", "mlp": "mlp"}.get(variant, "full")
    params, _losses = ranker.run_finetune(
        train_lists, dataset, enc_params, cfg.rank_config(rank_variant), seed)
    rcfg = cfg.rank_config(rank_variant)
    scores = ranker.score_lists(test_lists, dataset, params, rcfg)
    strengths = [ranker.strength(rl.labels) for rl in test_lists]
    report = metrics.evaluate_lists([rl.list_id for rl in test_lists],
                                    scores, strengths)
    _atomic_write(out, f"variant\t{variant}\n" + _report_text(report))
    click.echo(f"{variant}: FRA={report.fra:.2f} Ktau={report.kendall:.2f} "
               f"P@1={report.p_at_1:.2f}")


if __name__ == "__main__":
    main()
