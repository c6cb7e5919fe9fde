import json
import re

import numpy as np
import pytest
from click.testing import CliRunner

from kitt.cli import main
from kitt.io import read_config


@pytest.fixture
def runner():
    return CliRunner()


def run(runner, root, *args):
    res = runner.invoke(main, ["--run-root", str(root), *map(str, args)], catch_exceptions=False)
    return res


def only_run(root, command):
    """Latest run directory of ``command`` (names are ``<command>-<date>-<time>[-n]``)."""
    pattern = re.compile(rf"{re.escape(command)}-\d{{8}}-\d{{6}}(-\d+)?$")
    return sorted(p for p in root.iterdir() if pattern.match(p.name))[-1]


@pytest.fixture
def csv_path(tmp_path):
    rng = np.random.default_rng(0)
    x1, x2 = rng.uniform(0, 10, 60), rng.uniform(-3, 3, 60)
    y = np.sin(x1) + 0.5 * x2 + 0.05 * rng.normal(size=60) + 100
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,y\n" + "\n".join(f"{a},{b},{c}" for a, b, c in zip(x1, x2, y)) + "\n")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Tiny shards and a tiny captioner checkpoint produced through the CLI."""
    root = tmp_path_factory.mktemp("runs")
    r = CliRunner()
    res = run(r, root, "gen-data", "--n-examples", 40, "--shard-size", 20, "--n-points", 8, "--n-dims", 2,
              "--seed", 3)
    assert res.exit_code == 0, res.output
    data = only_run(root, "gen-data") / "data"
    args = ["--data", data, "--embed-dim", 8, "--heads", 2, "--rff-hidden", 8, "--sab-seq", 1, "--sab-dim", 1,
            "--decoder-blocks", 1, "--batch-size", 4, "--steps", 3, "--eval-every", 2]
    res = run(r, root, "train", *args)
    assert res.exit_code == 0, res.output
    res = run(r, root, "train-classifier", *args)
    assert res.exit_code == 0, res.output
    return root, data


def test_help_lists_commands(runner):
    res = runner.invoke(main, ["--help"])
    for cmd in ("gen-data", "train", "train-classifier", "predict-kernel", "fit", "evaluate", "search",
                "benchmark", "report"):
        assert cmd in res.output


def test_gen_data_and_train_outputs(trained):
    root, data = trained
    assert len(list(data.glob("shard-*.bin"))) == 2
    assert json.loads((data / "vocab.json").read_text())[-1] == "STOP"
    train_dir = only_run(root, "train")
    for name in ("config.txt", "run.log", "metrics.tsv", "timing.tsv", "final.kitt", "report.json"):
        assert (train_dir / name).exists(), name
    cfg = read_config(train_dir / "config.txt")
    assert cfg["steps"] == "3" and cfg["embed_dim"] == "8"
    assert "wallclock" not in (train_dir / "metrics.tsv").read_text()


def test_gen_data_is_byte_identical(runner, tmp_path):
    outs = []
    for name in ("a", "b"):
        res = run(runner, tmp_path / "runs", "gen-data", "--out", tmp_path / name, "--n-examples", 10,
                  "--n-points", 4, "--n-dims", 1, "--seed", 11)
        assert res.exit_code == 0, res.output
        outs.append((tmp_path / name / "shard-00000.bin").read_bytes())
    assert outs[0] == outs[1]


def test_config_file_and_flag_override(runner, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("n-examples = 7\nn_points = 4\nn_dims = 1\nseed = 2\n")
    res = run(runner, tmp_path / "runs", "gen-data", "--config", cfg, "--seed", 5)
    assert res.exit_code == 0, res.output
    snap = read_config(only_run(tmp_path / "runs", "gen-data") / "config.txt")
    assert snap["n_examples"] == "7" and snap["seed"] == "5"
    # the snapshot reproduces the run
    res = run(runner, tmp_path / "runs2", "gen-data", "--config",
              only_run(tmp_path / "runs", "gen-data") / "config.txt", "--out", tmp_path / "again")
    assert res.exit_code == 0, res.output
    first = only_run(tmp_path / "runs", "gen-data") / "data" / "shard-00000.bin"
    assert (tmp_path / "again" / "shard-00000.bin").read_bytes() == first.read_bytes()
    cfg.write_text("bogus = 1\n")
    res = runner.invoke(main, ["--run-root", str(tmp_path / "r"), "gen-data", "--config", str(cfg)])
    assert res.exit_code != 0 and "unknown keys" in res.output


def test_fit_evaluate_and_report(runner, tmp_path, csv_path):
    root = tmp_path / "runs"
    res = run(runner, root, "fit", "--data", csv_path, "--kernel", "RBF + LIN", "--n-init", 10)
    assert res.exit_code == 0, res.output
    fit_dir = only_run(root, "fit")
    rep = json.loads((fit_dir / "report.json").read_text())
    m = rep["test_metrics"]["mixture"]
    assert rep["n_test"] == 6 and np.isfinite(m["nlpd"])
    assert m["rmse"] < 1.0  # original units: a target offset of 100 would dominate otherwise
    res = run(runner, root, "evaluate", "--model", fit_dir / "fitted.json")
    assert res.exit_code == 0, res.output
    ev = json.loads((only_run(root, "evaluate") / "report.json").read_text())
    assert ev["metrics"]["nlpd"] == pytest.approx(m["nlpd"], rel=1e-9)
    res = run(runner, root, "evaluate", "--model", fit_dir / "fitted.json", "--data", csv_path, "--all-rows")
    assert res.exit_code == 0 and "n=60" in res.output
    res = run(runner, root, "report", "--runs", fit_dir)
    assert res.exit_code == 0, res.output
    assert (only_run(root, "report") / "nlpd_bars.txt").read_text().startswith("fit:")


def test_fit_errors(runner, tmp_path, csv_path):
    res = runner.invoke(main, ["--run-root", str(tmp_path), "fit", "--data", str(csv_path), "--kernel", "FOO"])
    assert res.exit_code != 0 and "bad kernel" in res.output
    res = runner.invoke(main, ["--run-root", str(tmp_path), "fit", "--data", str(csv_path), "--kernel", "RBF",
                               "--target", "nope"])
    assert res.exit_code != 0 and "target column" in res.output
    res = runner.invoke(main, ["--run-root", str(tmp_path), "evaluate", "--model", str(csv_path), "--all-rows"])
    assert res.exit_code != 0


def test_search_writes_trace(runner, tmp_path, csv_path):
    root = tmp_path / "runs"
    res = run(runner, root, "search", "--data", csv_path, "--max-depth", 1, "--n-init", 3, "--final-n-init", 3,
              "--primitives", "RBF,LIN", "--max-product-order", 1)
    assert res.exit_code == 0, res.output
    trace = (only_run(root, "search") / "trace.tsv").read_text().splitlines()
    assert trace[0] == "depth\texpression\tbic\tlml" and len(trace) == 3


def test_predict_kernel(runner, trained, csv_path, tmp_path):
    root, _ = trained
    ckpt = only_run(root, "train") / "final.kitt"
    out = tmp_path / "runs"
    res = run(runner, out, "predict-kernel", "--data", csv_path, "--checkpoint", ckpt, "--samples", 16,
              "--n-init", 5)
    assert res.exit_code == 0, res.output
    rep = json.loads((only_run(out, "predict-kernel") / "report.json").read_text())
    assert 1 <= len(rep["candidates"]) <= 3
    assert sum(rep["weights"]) == pytest.approx(1.0)
    assert set(rep["timings"]) == {"kernel_prediction", "hyperparameter_fit", "total"}
    res = runner.invoke(main, ["--run-root", str(out), "predict-kernel", "--data", str(csv_path), "--checkpoint",
                               str(ckpt), "--samples", "2"])
    assert res.exit_code == 2 and "--samples" in res.output
    res = runner.invoke(main, ["--run-root", str(out), "predict-kernel", "--data", str(csv_path), "--checkpoint",
                               str(ckpt), "--vocab-hash", "0" * 16])
    assert res.exit_code != 0 and "hash" in res.output
    cls = only_run(root, "train-classifier") / "final.kitt"
    res = runner.invoke(main, ["--run-root", str(out), "predict-kernel", "--data", str(csv_path), "--checkpoint",
                               str(cls)])
    assert res.exit_code != 0 and "caption checkpoint" in res.output


def test_benchmark_and_report(runner, trained, tmp_path):
    root, _ = trained
    out = tmp_path / "runs"
    cls = only_run(root, "train-classifier") / "final.kitt"
    res = run(runner, out, "benchmark", "--suite", "synthetic-gtr", "--checkpoint", cls, "--sizes", "8,16",
              "--dims", 2, "--samples-per-cell", 5)
    assert res.exit_code == 0, res.output
    gtr = only_run(out, "benchmark")
    assert (gtr / "accuracy.tsv").read_text().splitlines()[0] == "n_points\taccuracy\tse\tn_samples\tchance"
    res = run(runner, out, "benchmark", "--suite", "timing", "--checkpoint", only_run(root, "train") / "final.kitt",
              "--sizes", "8,16", "--dims", "1,2")
    assert res.exit_code == 0, res.output
    timing = only_run(out, "benchmark")
    res = run(runner, out, "report", "--runs", gtr, "--runs", timing, "--runs", only_run(root, "train"))
    assert res.exit_code == 0, res.output
    names = {p.name for p in only_run(out, "report").iterdir()}
    assert f"accuracy_vs_n.{gtr.name}.txt" in names
    assert f"timing_vs_n.D2.{timing.name}.txt" in names
    assert any(n.startswith("eval_loss_vs_step") for n in names)
    res = runner.invoke(main, ["--run-root", str(out), "benchmark", "--suite", "synthetic-gtr", "--checkpoint",
                               str(cls), "--dims", "2,4"])
    assert res.exit_code == 2


def test_threads_flag(runner, tmp_path):
    res = runner.invoke(main, ["--threads", "0", "--run-root", str(tmp_path), "gen-data"])
    assert res.exit_code == 2
