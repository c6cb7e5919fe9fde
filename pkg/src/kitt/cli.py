"""Command line interface.

Every command writes a fresh timestamped run directory (under ``--run-root``,
``$KITT_RUN_DIR`` or ``./runs``) holding ``config.txt``, ``run.log`` and its
reports.  Any command accepts ``--config FILE`` with flat ``key = value``
lines; explicit flags override file values, so re-running with a run's
``config.txt`` reproduces it.
"""

from __future__ import annotations

import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import io as kio
from .baselines import greedy_search
from .bench import caption_timing, ground_truth_accuracy
from .datagen import GenConfig, generate_shards, read_shard
from .gp import metrics
from .inference import fit_hyperparameters, mixture, predict_kernel
from .kernels import PRIMITIVES, KernelError, from_text
from .model import ArchitectureConfig, CheckpointError, KittModel, load_checkpoint
from .train import TrainConfig, train_captioner, train_classifier
from .vocab import SELF_PRODUCT_RULES, Vocabulary, build_vocabulary

log = logging.getLogger("kitt")


def _load_config(ctx, param, value):
    if value is None:
        return None
    values = kio.read_config(value)
    known = {p.name for p in ctx.command.params}
    unknown = sorted(set(values) - known)
    if unknown:
        raise click.BadParameter(f"unknown keys {unknown}", ctx, param)
    ctx.default_map = {**(ctx.default_map or {}), **values}
    return value


config_option = click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_load_config,
                             is_eager=True, expose_value=False, help="Flat key = value file; flags override it.")


def _int_list(ctx, param, value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    try:
        return [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers") from None


def _str_list(ctx, param, value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _start_run(ctx, command: str) -> Path:
    run = kio.make_run_dir(command, ctx.obj["run_root"])
    snapshot = {k: v for k, v in ctx.params.items()}
    kio.write_config(run / "config.txt", snapshot)
    handler = logging.FileHandler(run / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("kitt").addHandler(handler)
    ctx.call_on_close(lambda: (logging.getLogger("kitt").removeHandler(handler), handler.close()))
    click.echo(f"run directory: {run}")
    return run


def _fail(message: str):
    raise click.ClickException(message)


@click.group()
@click.version_option(__version__)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
              help="Cap on BLAS threads and worker processes.")
@click.option("--run-root", type=click.Path(file_okay=False), default=None,
              help=f"Root for run directories (default ${kio.RUN_DIR_ENV} or ./runs).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, threads, run_root, verbose):
    """Kernel selection for Gaussian processes with a trained set-to-caption transformer."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("kitt").setLevel(logging.INFO)
    ctx.obj = {"threads": threads, "run_root": run_root}
    ctx.with_resource(threadpool_limits(threads))


# ---------------------------------------------------------------------------
# data and training


@main.command("gen-data")
@config_option
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Shard directory (default: run dir).")
@click.option("--n-examples", type=click.IntRange(min=1), default=20000, show_default=True)
@click.option("--shard-size", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--n-points", type=click.IntRange(min=2), default=64, show_default=True)
@click.option("--n-dims", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--primitives", callback=_str_list, default=",".join(PRIMITIVES), show_default=True)
@click.option("--max-product-order", type=click.IntRange(1, 2), default=2, show_default=True)
@click.option("--self-product-rule", type=click.Choice(SELF_PRODUCT_RULES), default="exclude", show_default=True)
@click.option("--max-len", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.pass_context
def gen_data(ctx, out, n_examples, shard_size, n_points, n_dims, primitives, max_product_order,
             self_product_rule, max_len, seed, workers):
    """Generate labelled synthetic shards."""
    run = _start_run(ctx, "gen-data")
    try:
        vocab = build_vocabulary(primitives, max_product_order, self_product_rule, max_len)
    except (KernelError, ValueError) as exc:
        _fail(str(exc))
    out = Path(out) if out else run / "data"
    workers = min(workers, ctx.obj["threads"])
    t0 = time.perf_counter()
    paths = generate_shards(vocab, out, n_examples, shard_size, seed,
                            GenConfig(n_points=n_points, n_dims=n_dims, max_terms=max_len), workers)
    (out / "vocab.json").write_text(vocab.to_json())
    kio.write_json(run / "report.json", {
        "command": "gen-data", "shards": paths, "vocab_hash": vocab.hash, "n_tokens": len(vocab),
        "seconds": time.perf_counter() - t0,
    })
    click.echo(f"wrote {len(paths)} shards to {out} (vocab {vocab.hash}, {len(vocab)} tokens)")


def _shards(data_dir) -> list[Path]:
    paths = sorted(Path(data_dir).glob("shard-*.bin"))
    if not paths:
        _fail(f"no shard-*.bin files in {data_dir}")
    return paths


def _train_options(f):
    opts = [
        click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True),
        click.option("--embed-dim", type=click.IntRange(min=1), default=64, show_default=True),
        click.option("--heads", type=click.IntRange(min=1), default=4, show_default=True),
        click.option("--rff-hidden", type=click.IntRange(min=1), default=128, show_default=True),
        click.option("--sab-seq", type=click.IntRange(min=0), default=6, show_default=True),
        click.option("--sab-dim", type=click.IntRange(min=0), default=6, show_default=True),
        click.option("--decoder-blocks", type=click.IntRange(min=1), default=2, show_default=True),
        click.option("--dropout", type=click.FloatRange(0, 1, max_open=True), default=0.1, show_default=True),
        click.option("--batch-size", type=click.IntRange(min=1), default=128, show_default=True),
        click.option("--lr", type=float, default=1e-4, show_default=True),
        click.option("--decay-every", type=click.IntRange(min=1), default=50000, show_default=True),
        click.option("--decay-factor", type=float, default=0.1, show_default=True),
        click.option("--steps", type=click.IntRange(min=1), default=30000, show_default=True),
        click.option("--eval-every", type=click.IntRange(min=1), default=1000, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return config_option(f)


def _run_training(ctx, head, command, data_dir, embed_dim, heads, rff_hidden, sab_seq, sab_dim,
                  decoder_blocks, dropout, batch_size, lr, decay_every, decay_factor, steps, eval_every, seed):
    run = _start_run(ctx, command)
    paths = _shards(data_dir)
    manifest = read_shard(paths[0]).manifest
    vocab = Vocabulary(tuple(manifest["vocab"]), manifest["max_len"])
    if vocab.hash != manifest["vocab_hash"]:
        _fail(f"{paths[0]}: vocabulary does not match its hash")
    arch = ArchitectureConfig(embed_dim=embed_dim, n_heads=heads, rff_hidden=rff_hidden, n_sab_seq=sab_seq,
                              n_sab_dim=sab_dim, n_decoder_blocks=decoder_blocks, dropout_rate=dropout,
                              max_caption_len=vocab.max_len, head=head, seed=seed)
    model = KittModel(arch, vocab)
    cfg = TrainConfig(batch_size=batch_size, lr0=lr, decay_factor=decay_factor, decay_every=decay_every,
                      max_steps=steps, eval_every=eval_every, seed=seed)
    trainer = train_classifier if head == "classify" else train_captioner
    try:
        rows = trainer(model, paths, cfg, run)
    except ValueError as exc:
        _fail(str(exc))
    kio.write_json(run / "report.json", {"command": command, "final": rows[-1], "n_weights": model.n_weights(),
                                         "vocab_hash": vocab.hash, "checkpoint": run / "final.kitt"})
    click.echo(f"final eval_loss {rows[-1]['eval_loss']:.4f} eval_acc {rows[-1]['eval_acc']:.3f}; "
               f"checkpoint {run / 'final.kitt'}")


@main.command("train")
@_train_options
@click.pass_context
def train(ctx, **kw):
    """Train the captioner with teacher forcing."""
    _run_training(ctx, "caption", "train", **kw)


@main.command("train-classifier")
@_train_options
@click.pass_context
def train_classifier_cmd(ctx, **kw):
    """Train the single-step classifier variant."""
    _run_training(ctx, "classify", "train-classifier", **kw)


# ---------------------------------------------------------------------------
# kernel prediction and fitting


def _data_options(f):
    opts = [
        click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True),
        click.option("--target", default=None, help="Target column (default: last)."),
        click.option("--subsample", type=click.IntRange(min=2), default=kio.DEFAULT_SUBSAMPLE, show_default=True),
        click.option("--test-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True),
                     default=kio.TEST_FRACTION, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _ingest(data_path, target, seed, subsample, test_fraction) -> kio.Dataset:
    try:
        return kio.ingest(data_path, target, seed, subsample, test_fraction)
    except kio.IngestError as exc:
        _fail(str(exc))


def _evaluate(candidates, weights, data: kio.Dataset) -> dict:
    """NLPD and RMSE in original units for the mixture and each candidate."""
    preds = [c.predict(data.X_train, data.y_train, data.X_test) for c in candidates]
    y_raw = data.y_test_raw
    norm = data.norm
    out = {"mixture": metrics(mixture(preds, weights).denormalize(norm.y_mean, norm.y_std), y_raw)}
    out["candidates"] = [metrics(p.denormalize(norm.y_mean, norm.y_std), y_raw) for p in preds]
    return out


def _finish_fit(run, command, candidates, weights, data, ingest_args, extra=None):
    result = _evaluate(candidates, weights, data) if len(data.y_test) else {}
    report = {"command": command, "candidates": [c.to_dict() for c in candidates], "weights": weights,
              "test_metrics": result, "n_train": len(data.y_train), "n_test": len(data.y_test),
              "normalization": data.norm.to_dict(), **(extra or {})}
    kio.write_json(run / "report.json", report)
    kio.save_fitted(run / "fitted.json", candidates, weights, data, {"ingest": ingest_args})
    kio.write_table(run / "candidates.tsv", ["expression", "caption_log_prob", "lml", "bic", "weight"],
                    [[c.text, c.caption_log_prob, c.lml, c.bic, w] for c, w in zip(candidates, weights)])
    for c, w in zip(candidates, weights):
        click.echo(f"{w:8.4f}  {c.text:<32} lml={c.lml:.3f} bic={c.bic:.3f}")
    if result:
        m = result["mixture"]
        click.echo(f"test nlpd {m['nlpd']:.4f} rmse {m['rmse']:.4f}")


@main.command("predict-kernel")
@config_option
@_data_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--samples", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--top-k", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--weighting", type=click.Choice(["network", "bic", "uniform"]), default="network", show_default=True)
@click.option("--n-init", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--vocab-hash", default=None, help="Refuse checkpoints with a different vocabulary.")
@click.pass_context
def predict_kernel_cmd(ctx, data_path, target, subsample, test_fraction, seed, checkpoint, samples, top_k,
                       weighting, n_init, vocab_hash):
    """Caption a CSV dataset, fit the top candidates and report the weighted mixture."""
    if samples < top_k:
        raise click.UsageError("--samples must be at least --top-k")
    run = _start_run(ctx, "predict-kernel")
    try:
        model, _ = load_checkpoint(checkpoint, vocab_hash)
    except CheckpointError as exc:
        _fail(str(exc))
    if model.config.head != "caption":
        _fail("predict-kernel needs a caption checkpoint")
    data = _ingest(data_path, target, seed, subsample, test_fraction)
    res = predict_kernel(model, data.X_train, data.y_train, samples, top_k, weighting, n_init, seed)
    ingest_args = dict(data=str(data_path), target=data.target, seed=seed, subsample=subsample,
                       test_fraction=test_fraction)
    _finish_fit(run, "predict-kernel", res.candidates, res.weights, data, ingest_args,
                {"timings": res.timings, "weighting": weighting, "checkpoint": checkpoint})


@main.command("fit")
@config_option
@_data_options
@click.option("--kernel", "kernel_text", required=True, help='Expression such as "RBF + LIN*NOISE".')
@click.option("--n-init", type=click.IntRange(min=1), default=1000, show_default=True)
@click.pass_context
def fit_cmd(ctx, data_path, target, subsample, test_fraction, seed, kernel_text, n_init):
    """Fit the hyperparameters of one kernel expression."""
    run = _start_run(ctx, "fit")
    data = _ingest(data_path, target, seed, subsample, test_fraction)
    try:
        expr = from_text(kernel_text, n_dims=data.X_train.shape[1])
    except (KernelError, KeyError) as exc:
        _fail(f"bad kernel expression {kernel_text!r}: {exc}")
    t0 = time.perf_counter()
    cand = fit_hyperparameters(data.X_train, data.y_train, expr, n_init, seed)
    ingest_args = dict(data=str(data_path), target=data.target, seed=seed, subsample=subsample,
                       test_fraction=test_fraction)
    _finish_fit(run, "fit", [cand], np.ones(1), data, ingest_args,
                {"timings": {"hyperparameter_fit": time.perf_counter() - t0}})


@main.command("search")
@config_option
@_data_options
@click.option("--max-depth", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--n-init", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--final-n-init", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--primitives", callback=_str_list, default=",".join(PRIMITIVES), show_default=True)
@click.option("--max-product-order", type=click.IntRange(1, 2), default=2, show_default=True)
@click.pass_context
def search_cmd(ctx, data_path, target, subsample, test_fraction, seed, max_depth, n_init, final_n_init,
               primitives, max_product_order):
    """Greedy additive kernel search scored by BIC."""
    run = _start_run(ctx, "search")
    data = _ingest(data_path, target, seed, subsample, test_fraction)
    vocab = build_vocabulary(primitives, max_product_order)
    t0 = time.perf_counter()
    best, trace = greedy_search(data.X_train, data.y_train, vocab, max_depth, n_init, final_n_init, seed)
    seconds = time.perf_counter() - t0
    kio.write_table(run / "trace.tsv", ["depth", "expression", "bic", "lml"],
                    [[t["depth"], t["expression"], t["bic"], t["lml"]] for t in trace])
    ingest_args = dict(data=str(data_path), target=data.target, seed=seed, subsample=subsample,
                       test_fraction=test_fraction)
    _finish_fit(run, "search", [best], np.ones(1), data, ingest_args,
                {"trace": trace, "timings": {"search": seconds}})


@main.command("evaluate")
@config_option
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="fitted.json from fit, search or predict-kernel.")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="CSV to score; default re-creates the original test split.")
@click.option("--all-rows", is_flag=True, help="Score every row of --data instead of its test split.")
@click.pass_context
def evaluate_cmd(ctx, model_path, data_path, all_rows):
    """Report NLPD and RMSE of a fitted model in original units."""
    if all_rows and data_path is None:
        raise click.UsageError("--all-rows needs --data")
    run = _start_run(ctx, "evaluate")
    cands, weights, norm, X_train, y_train, meta = kio.load_fitted(model_path)
    ing = meta["extra"]["ingest"]
    path = data_path or ing["data"]
    if all_rows:
        header, raw = kio.read_csv(path)
        if ing["target"] not in header:
            _fail(f"target column {ing['target']!r} missing from {path}")
        t = header.index(ing["target"])
        X_raw, y_raw = np.delete(raw, t, axis=1), raw[:, t]
    else:
        ds = _ingest(path, ing["target"], ing["seed"], ing["subsample"], ing["test_fraction"])
        X_raw, y_raw = ds.norm.inverse_x(ds.X_test), ds.y_test_raw
    if X_raw.shape[1] != X_train.shape[1]:
        _fail(f"expected {X_train.shape[1]} input columns, got {X_raw.shape[1]}")
    X_test = norm.transform_x(X_raw)
    preds = [c.predict(X_train, y_train, X_test) for c in cands]
    result = metrics(mixture(preds, weights).denormalize(norm.y_mean, norm.y_std), y_raw)
    kio.write_json(run / "report.json", {"command": "evaluate", "model": model_path, "data": path,
                                         "n_test": len(y_raw), "metrics": result})
    click.echo(f"nlpd {result['nlpd']:.4f} rmse {result['rmse']:.4f} (n={len(y_raw)})")


# ---------------------------------------------------------------------------
# benchmarks and reports


@main.command("benchmark")
@config_option
@click.option("--suite", type=click.Choice(["synthetic-gtr", "timing"]), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--sizes", callback=_int_list, default="64,256,1024", show_default=True)
@click.option("--dims", callback=_int_list, default="4", show_default=True)
@click.option("--samples-per-cell", type=click.IntRange(min=1), default=300, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def benchmark_cmd(ctx, suite, checkpoint, sizes, dims, samples_per_cell, seed):
    """Ground-truth recovery accuracy or prediction timing against dataset size."""
    if suite == "synthetic-gtr" and len(dims) != 1:
        raise click.UsageError("synthetic-gtr takes a single --dims value")
    run = _start_run(ctx, "benchmark")
    try:
        model, _ = load_checkpoint(checkpoint)
    except CheckpointError as exc:
        _fail(str(exc))
    if suite == "synthetic-gtr":
        rows = ground_truth_accuracy(model, sizes, samples_per_cell, dims[0], seed)
        kio.write_table(run / "accuracy.tsv", ["n_points", "accuracy", "se", "n_samples", "chance"],
                        [[r[k] for k in ("n_points", "accuracy", "se", "n_samples", "chance")] for r in rows])
        for r in rows:
            click.echo(f"N={r['n_points']:5d}  acc={r['accuracy']:.3f} ± {r['se']:.3f}  (chance {r['chance']:.3f})")
    else:
        rows = caption_timing(model, sizes, dims, seed)
        kio.write_table(run / "timing.tsv", ["n_points", "n_dims", "seconds"],
                        [[r["n_points"], r["n_dims"], r["seconds"]] for r in rows])
        for r in rows:
            click.echo(f"N={r['n_points']:5d} D={r['n_dims']:3d}  {r['seconds']:.4f}s")
    kio.write_json(run / "report.json", {"command": "benchmark", "suite": suite, "rows": rows,
                                         "checkpoint": checkpoint})


@main.command("report")
@config_option
@click.option("--runs", "run_dirs", multiple=True, type=click.Path(exists=True, file_okay=False), required=True)
@click.pass_context
def report_cmd(ctx, run_dirs):
    """Collect run outputs into two-column plot-data series."""
    run = _start_run(ctx, "report")
    written = []
    nlpd_labels, nlpd_values = [], []
    for rd in map(Path, run_dirs):
        rep_path = rd / "report.json"
        rep = kio.read_json(rep_path) if rep_path.exists() else {}
        name = rd.name
        if rep.get("suite") == "synthetic-gtr":
            rows = rep["rows"]
            kio.write_series(run / f"accuracy_vs_n.{name}.txt", [r["n_points"] for r in rows],
                             [r["accuracy"] for r in rows])
            written.append(f"accuracy_vs_n.{name}.txt")
        elif rep.get("suite") == "timing":
            for d in sorted({r["n_dims"] for r in rep["rows"]}):
                rows = [r for r in rep["rows"] if r["n_dims"] == d]
                fname = f"timing_vs_n.D{d}.{name}.txt"
                kio.write_series(run / fname, [r["n_points"] for r in rows], [r["seconds"] for r in rows])
                written.append(fname)
        elif rep.get("test_metrics"):
            nlpd_labels.append(f"{rep['command']}:{name}")
            nlpd_values.append(rep["test_metrics"]["mixture"]["nlpd"])
        metrics_path = rd / "metrics.tsv"
        if metrics_path.exists():
            table = np.genfromtxt(metrics_path, names=True, delimiter="\t")
            table = np.atleast_1d(table)
            for col in ("eval_loss", "eval_acc"):
                fname = f"{col}_vs_step.{name}.txt"
                kio.write_series(run / fname, table["step"].astype(int), table[col])
                written.append(fname)
    if nlpd_labels:
        kio.write_series(run / "nlpd_bars.txt", nlpd_labels, nlpd_values)
        written.append("nlpd_bars.txt")
    if not written:
        _fail("no recognizable outputs in the given run directories")
    kio.write_json(run / "report.json", {"command": "report", "sources": list(run_dirs), "series": written})
    for w in written:
        click.echo(run / w)


if __name__ == "__main__":
    main()
