"""Dataset ingestion, normalization, flat config files, run directories and reports."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import INPUT_BOX
from .inference import CandidateKernel
from .kernels import from_text

log = logging.getLogger(__name__)

RUN_DIR_ENV = "KITT_RUN_DIR"
DEFAULT_RUN_ROOT = "runs"
DEFAULT_SUBSAMPLE = 2000
TEST_FRACTION = 0.1


class IngestError(ValueError):
    pass


@dataclass
class NormalizationRecord:
    """Per-dimension affine map of inputs onto ``[-2.5, 2.5]`` plus output standardization."""

    x_min: np.ndarray
    x_max: np.ndarray
    y_mean: float
    y_std: float
    box: float = INPUT_BOX

    @classmethod
    def fit(cls, X, y, box: float = INPUT_BOX) -> NormalizationRecord:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        x_min, x_max = X.min(0), X.max(0)
        const = x_max == x_min
        if const.any():
            warnings.warn(f"constant input columns {np.flatnonzero(const).tolist()} are mapped to 0",
                          RuntimeWarning)
        y_std = float(y.std())
        if y_std == 0.0:
            warnings.warn("constant target; using unit scale", RuntimeWarning)
            y_std = 1.0
        return cls(x_min, x_max, float(y.mean()), y_std, box)

    @property
    def _span(self):
        span = self.x_max - self.x_min
        return np.where(span > 0, span, 1.0)

    def transform_x(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (X - self.x_min) / self._span * (2 * self.box) - self.box
        return np.where(self.x_max > self.x_min, Z, 0.0)

    def inverse_x(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        X = (Z + self.box) / (2 * self.box) * self._span + self.x_min
        return np.where(self.x_max > self.x_min, X, self.x_min)

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def inverse_y(self, z):
        return np.asarray(z, dtype=float) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_min": self.x_min.tolist(), "x_max": self.x_max.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std, "box": self.box}

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationRecord:
        return cls(np.asarray(d["x_min"], float), np.asarray(d["x_max"], float),
                   float(d["y_mean"]), float(d["y_std"]), float(d.get("box", INPUT_BOX)))


@dataclass
class Dataset:
    """Normalized train/test split plus the record needed to undo it."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    norm: NormalizationRecord
    columns: list[str]
    target: str
    train_index: np.ndarray
    test_index: np.ndarray

    @property
    def y_test_raw(self):
        return self.norm.inverse_y(self.y_test)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Numeric CSV with a header row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise IngestError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    if not rows:
        raise IngestError(f"{path}: no data rows")
    data = np.array(rows)
    if not np.all(np.isfinite(data)):
        raise IngestError(f"{path}: non-finite values")
    return header, data


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def split_indices(n: int, seed: int = 0, test_fraction: float = TEST_FRACTION,
                  subsample: int | None = DEFAULT_SUBSAMPLE) -> tuple[np.ndarray, np.ndarray]:
    """Seeded optional subsample followed by a train/test split."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)
    if subsample is not None and n > subsample:
        idx = idx[:subsample]
    n_test = max(1, int(round(len(idx) * test_fraction))) if len(idx) > 1 else 0
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def ingest(path, target_column: str | None = None, seed: int = 0, subsample: int | None = DEFAULT_SUBSAMPLE,
           test_fraction: float = TEST_FRACTION) -> Dataset:
    """Load a CSV, split, and normalize with train-split statistics.

    ``target_column`` defaults to the last column.
    """
    header, data = read_csv(path)
    target = header[-1] if target_column is None else target_column
    if target not in header:
        raise IngestError(f"{path}: target column {target!r} not found (have {header})")
    t = header.index(target)
    cols = [h for i, h in enumerate(header) if i != t]
    if not cols:
        raise IngestError(f"{path}: no input columns")
    X = np.delete(data, t, axis=1)
    y = data[:, t]
    tr, te = split_indices(len(y), seed, test_fraction, subsample)
    norm = NormalizationRecord.fit(X[tr], y[tr])
    return Dataset(norm.transform_x(X[tr]), norm.transform_y(y[tr]),
                   norm.transform_x(X[te]), norm.transform_y(y[te]),
                   norm, cols, target, tr, te)


# ---------------------------------------------------------------------------
# flat config files


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys use dashes or underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path, values: dict) -> None:
    lines = [f"{k} = {_config_value(v)}" for k, v in sorted(values.items()) if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def _config_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# ---------------------------------------------------------------------------
# run directories and reports


def run_root(base=None) -> Path:
    return Path(base or os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_ROOT)


def make_run_dir(command: str, base=None) -> Path:
    """``<root>/<command>-<UTC timestamp>[-n]``, never reusing an existing directory."""
    root = run_root(base)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    path = root / f"{command}-{stamp}"
    n = 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1
            path = root / f"{command}-{stamp}-{n}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_table(path, header, rows) -> None:
    """Tab-delimited text with a header line."""
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, float) or isinstance(v, np.floating):
        return f"{float(v):.9g}"
    return str(v)


def write_series(path, xs, ys) -> None:
    """Two-column plot data."""
    with open(path, "w") as fh:
        for x, y in zip(xs, ys):
            fh.write(f"{_cell(x)}\t{_cell(y)}\n")


def save_fitted(path, candidates, weights, data: Dataset, extra=None) -> None:
    """Everything needed to predict later: candidates, weights, normalized training data."""
    write_json(path, {
        "candidates": [c.to_dict() for c in candidates],
        "weights": list(np.asarray(weights, float)),
        "normalization": data.norm.to_dict(),
        "columns": data.columns,
        "target": data.target,
        "X_train": data.X_train,
        "y_train": data.y_train,
        "extra": extra or {},
    })


def load_fitted(path):
    """Inverse of :func:`save_fitted`; returns (candidates, weights, record, X_train, y_train, meta)."""
    d = read_json(path)
    cands = []
    for c in d["candidates"]:
        expr = from_text(" + ".join(c["terms"]), c["hyperparameters"])
        cands.append(CandidateKernel(expr, c["caption_log_prob"], tuple(c["caption"]), c["noise"],
                                     c["lml"], c["bic"], c.get("init_lml"), c["converged"],
                                     c.get("grad_norm")))
    return (cands, np.asarray(d["weights"]), NormalizationRecord.from_dict(d["normalization"]),
            np.asarray(d["X_train"], float), np.asarray(d["y_train"], float), d)
