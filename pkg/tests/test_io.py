import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kitt import io as kio
from kitt.inference import CandidateKernel
from kitt.kernels import sample_expression


def write_csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(str(v) for v in r) for r in rows) + "\n")
    return path


def test_midpoint_maps_to_zero():
    norm = kio.NormalizationRecord.fit(np.array([[0.0], [10.0], [3.0]]), np.arange(3.0))
    assert norm.transform_x([[5.0]])[0, 0] == 0.0
    np.testing.assert_allclose(norm.transform_x([[0.0], [10.0]])[:, 0], [-2.5, 2.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_round_trips(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 3)) * rng.lognormal(size=3) + rng.normal(size=3) * 100
    y = rng.normal(size=20) * 50 + 7
    norm = kio.NormalizationRecord.fit(X, y)
    np.testing.assert_allclose(norm.inverse_y(norm.transform_y(y)), y, atol=1e-12 * np.abs(y).max())
    np.testing.assert_allclose(norm.inverse_x(norm.transform_x(X)), X, rtol=1e-12, atol=1e-12 * np.abs(X).max())
    again = kio.NormalizationRecord.from_dict(norm.to_dict())
    np.testing.assert_array_equal(again.transform_x(X), norm.transform_x(X))


def test_constant_columns_and_target_warn():
    X = np.column_stack([np.full(4, 3.0), np.arange(4.0)])
    with pytest.warns(RuntimeWarning, match="constant input"):
        norm = kio.NormalizationRecord.fit(X, np.arange(4.0))
    assert np.all(norm.transform_x(X)[:, 0] == 0.0)
    np.testing.assert_array_equal(norm.inverse_x(norm.transform_x(X))[:, 0], 3.0)
    with pytest.warns(RuntimeWarning, match="constant target"):
        kio.NormalizationRecord.fit(np.arange(4.0)[:, None], np.ones(4))


def test_split_reproducible_and_sized():
    a = kio.split_indices(100, seed=3)
    b = kio.split_indices(100, seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert len(a[1]) == 10 and len(a[0]) == 90
    assert set(a[0]).isdisjoint(a[1])
    tr, te = kio.split_indices(5000, seed=0, subsample=2000)
    assert len(tr) + len(te) == 2000 and len(te) == 200


def test_ingest_uses_train_statistics(tmp_path):
    rng = np.random.default_rng(0)
    rows = np.column_stack([rng.uniform(0, 10, 50), rng.uniform(-1, 1, 50), rng.normal(size=50)])
    path = write_csv(tmp_path / "d.csv", ["a", "b", "y"], rows)
    ds = kio.ingest(path, seed=1)
    assert ds.columns == ["a", "b"] and ds.target == "y"
    assert ds.X_train.min() == pytest.approx(-2.5) and ds.X_train.max() == pytest.approx(2.5)
    assert abs(ds.y_train.mean()) < 1e-12 and ds.y_train.std() == pytest.approx(1.0)
    np.testing.assert_allclose(ds.y_test_raw, rows[ds.test_index, 2], rtol=1e-12)
    by_name = kio.ingest(path, target_column="a", seed=1)
    assert by_name.columns == ["b", "y"]


@pytest.mark.parametrize("content,match", [
    ("", "empty"),
    ("a,b\n", "no data"),
    ("a,b\n1,2\n3\n", "expected 2 fields"),
    ("a,b\n1,x\n", "non-numeric"),
    ("a,b\n1,inf\n", "non-finite"),
])
def test_read_csv_errors(tmp_path, content, match):
    p = tmp_path / "bad.csv"
    p.write_text(content)
    with pytest.raises(kio.IngestError, match=match):
        kio.read_csv(p)


def test_ingest_errors(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["a", "y"], [[1, 2], [3, 4], [5, 6]])
    with pytest.raises(kio.IngestError, match="target"):
        kio.ingest(p, target_column="z")
    q = write_csv(tmp_path / "e.csv", ["y"], [[1], [2]])
    with pytest.raises(kio.IngestError, match="input columns"):
        kio.ingest(q)


def test_config_round_trip(tmp_path):
    p = tmp_path / "c.txt"
    kio.write_config(p, {"n_init": 50, "sizes": [64, 256], "flag": True, "skip": None, "name": "x"})
    assert kio.read_config(p) == {"flag": "true", "n_init": "50", "name": "x", "sizes": "64,256"}
    p.write_text("# comment\nmax-depth = 2  # trailing\n\n")
    assert kio.read_config(p) == {"max_depth": "2"}
    p.write_text("oops\n")
    with pytest.raises(ValueError):
        kio.read_config(p)


def test_run_dirs_are_unique(tmp_path, monkeypatch):
    monkeypatch.setenv(kio.RUN_DIR_ENV, str(tmp_path / "env"))
    a = kio.make_run_dir("fit")
    b = kio.make_run_dir("fit")
    assert a != b and a.parent == tmp_path / "env" and a.name.startswith("fit-")
    assert kio.make_run_dir("fit", tmp_path / "explicit").parent == tmp_path / "explicit"


def test_tables_and_json(tmp_path):
    kio.write_table(tmp_path / "t.tsv", ["a", "b"], [[1, 0.5], ["x", np.float64(1 / 3)]])
    assert (tmp_path / "t.tsv").read_text() == "a\tb\n1\t0.5\nx\t0.333333333\n"
    kio.write_series(tmp_path / "s.txt", [1, 2], [0.25, 0.5])
    assert (tmp_path / "s.txt").read_text() == "1\t0.25\n2\t0.5\n"
    kio.write_json(tmp_path / "j.json", {"a": np.arange(2), "b": float("nan"), "c": np.float32(1.5)})
    assert kio.read_json(tmp_path / "j.json") == {"a": [0, 1], "b": None, "c": 1.5}


def test_fitted_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.uniform(-2.5, 2.5, (10, 2)), rng.normal(size=10)
    expr = sample_expression(["PER", "LIN*NOISE", "RBF"], 2, rng)
    cand = CandidateKernel(expr, -1.2, ("PER", "STOP"), 0.1, -5.0, 12.0, -6.0, True, 1e-7)
    norm = kio.NormalizationRecord.fit(X, y)
    ds = kio.Dataset(X, y, X[:2], y[:2], norm, ["a", "b"], "y", np.arange(10), np.arange(2))
    kio.save_fitted(tmp_path / "f.json", [cand], [1.0], ds, {"ingest": {"seed": 1}})
    cands, w, norm2, Xtr, ytr, meta = kio.load_fitted(tmp_path / "f.json")
    assert meta["extra"] == {"ingest": {"seed": 1}}
    assert cands[0].expression.token_names == expr.token_names
    a = cand.predict(X, y, X[:3])
    b = cands[0].predict(Xtr, ytr, X[:3])
    np.testing.assert_allclose(b.mean, a.mean, rtol=1e-12)
    np.testing.assert_allclose(b.variance, a.variance, rtol=1e-12)
