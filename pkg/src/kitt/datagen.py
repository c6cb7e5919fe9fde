"""Synthetic labelled datasets drawn from GP priors over vocabulary kernels.

Shard layout (all little-endian)::

    <manifest JSON, UTF-8, one line terminated by \\n>
    float32 X      n_examples * n_points * n_dims
    float32 y      n_examples * n_points
    int32   labels n_examples * (max_len + 1), padded with the STOP id
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gp import CholeskyError, GpModel, sample_gp
from .kernels import Expression, sample_hyperparameters
from .vocab import Vocabulary, expression_to_caption, pad_caption

log = logging.getLogger(__name__)

SHARD_VERSION = 1
INPUT_BOX = 2.5
MAX_RETRIES = 10


@dataclass
class GenConfig:
    n_points: int = 64
    n_dims: int = 4
    max_terms: int = 3
    jitter: float = 1e-6


@dataclass
class TrainingExample:
    X: np.ndarray
    y: np.ndarray
    label: list[int]
    expr: Expression | None = None


def _draw_expression(tokens, n_dims, rng):
    return Expression([sample_hyperparameters(t, n_dims, rng) for t in tokens])


def generate_example(vocab: Vocabulary, config: GenConfig, rng: np.random.Generator,
                     tokens=None) -> TrainingExample:
    """One labelled dataset; ``tokens`` fixes the kernel instead of drawing it."""
    if config.n_points < 2 or config.n_dims < 1:
        raise ValueError("need n_points >= 2 and n_dims >= 1")
    max_terms = min(config.max_terms, vocab.max_len, len(vocab.kernel_tokens))
    for _ in range(MAX_RETRIES):
        if tokens is None:
            n_terms = int(rng.integers(1, max_terms + 1))
            idx = rng.choice(len(vocab.kernel_tokens), size=n_terms, replace=False)
            chosen = [vocab.kernel_tokens[i] for i in idx]
        else:
            chosen = list(tokens)
        X = rng.uniform(-INPUT_BOX, INPUT_BOX, size=(config.n_points, config.n_dims))
        for _ in range(MAX_RETRIES):
            expr = _draw_expression(chosen, config.n_dims, rng)
            # no likelihood noise beyond jitter: white noise is a token of its own
            model = GpModel(expr, noise=1e-300, jitter=config.jitter)
            try:
                f = sample_gp(X, model, rng)
            except CholeskyError:
                log.debug("resampling hyperparameters for %s", expr)
                continue
            sd = f.std()
            if not np.all(np.isfinite(f)) or sd == 0.0:
                continue
            y = (f - f.mean()) / sd
            return TrainingExample(X, y, expression_to_caption(expr, vocab), expr)
        log.info("redrawing kernel after %d failed hyperparameter draws for %s", MAX_RETRIES, chosen)
    raise RuntimeError(f"could not generate an example for tokens {chosen}")


def _shard_bytes(vocab: Vocabulary, config: GenConfig, n: int, seed: int, shard_index: int) -> bytes:
    rng = np.random.default_rng([seed, shard_index])
    X = np.empty((n, config.n_points, config.n_dims), dtype="<f4")
    y = np.empty((n, config.n_points), dtype="<f4")
    labels = np.empty((n, vocab.max_len + 1), dtype="<i4")
    for i in range(n):
        ex = generate_example(vocab, config, rng)
        X[i], y[i] = ex.X, ex.y
        labels[i] = pad_caption(ex.label, vocab)
    manifest = {
        "version": SHARD_VERSION,
        "n_examples": n,
        "n_points": config.n_points,
        "n_dims": config.n_dims,
        "max_len": vocab.max_len,
        "vocab_hash": vocab.hash,
        "vocab": list(vocab.tokens),
        "seed": seed,
        "shard_index": shard_index,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    return head + X.tobytes() + y.tobytes() + labels.tobytes()


def _write_shard(args):
    vocab, config, n, seed, index, path = args
    try:
        Path(path).write_bytes(_shard_bytes(vocab, config, n, seed, index))
    except OSError as exc:
        raise OSError(f"shard {index}: {exc}") from exc
    return path


def generate_shards(vocab: Vocabulary, out_dir, n_examples: int, shard_size: int = 1000,
                    seed: int = 0, config: GenConfig | None = None, workers: int = 1) -> list[Path]:
    """Write ``ceil(n_examples / shard_size)`` shard files; output depends only on ``seed``.

    Each shard draws from its own stream seeded by ``(seed, shard_index)``, so
    the worker count does not change the bytes written.
    """
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    config = config or GenConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for index, start in enumerate(range(0, n_examples, shard_size)):
        n = min(shard_size, n_examples - start)
        jobs.append((vocab, config, n, seed, index, out_dir / f"shard-{index:05d}.bin"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return [Path(p) for p in pool.map(_write_shard, jobs)]
    return [Path(_write_shard(j)) for j in jobs]


@dataclass
class DatasetShard:
    manifest: dict
    X: np.ndarray
    y: np.ndarray
    labels: np.ndarray


def read_shard(path, expected_vocab_hash: str | None = None) -> DatasetShard:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    manifest = json.loads(raw[:nl].decode("utf-8"))
    if expected_vocab_hash is not None and manifest["vocab_hash"] != expected_vocab_hash:
        raise ValueError(f"{path}: vocabulary hash {manifest['vocab_hash']} != {expected_vocab_hash}")
    n, N, D, L = (manifest["n_examples"], manifest["n_points"], manifest["n_dims"],
                  manifest["max_len"] + 1)
    offset = nl + 1
    sizes = [n * N * D * 4, n * N * 4, n * L * 4]
    if len(raw) - offset != sum(sizes):
        raise ValueError(f"{path}: payload size does not match manifest")
    X = np.frombuffer(raw, "<f4", n * N * D, offset).reshape(n, N, D)
    offset += sizes[0]
    y = np.frombuffer(raw, "<f4", n * N, offset).reshape(n, N)
    offset += sizes[1]
    labels = np.frombuffer(raw, "<i4", n * L, offset).reshape(n, L)
    return DatasetShard(manifest, X, y, labels)


def load_shards(paths, expected_vocab_hash: str | None = None) -> DatasetShard:
    """Concatenate shards in shard-index order (input order is irrelevant)."""
    shards = [read_shard(p, expected_vocab_hash) for p in paths]
    if not shards:
        raise ValueError("no shards given")
    shards.sort(key=lambda s: s.manifest.get("shard_index", 0))
    first = shards[0].manifest
    for s in shards[1:]:
        for key in ("n_points", "n_dims", "max_len", "vocab_hash"):
            if s.manifest[key] != first[key]:
                raise ValueError(f"shards disagree on {key}")
    manifest = dict(first, n_examples=sum(s.manifest["n_examples"] for s in shards))
    return DatasetShard(manifest,
                        np.concatenate([s.X for s in shards]),
                        np.concatenate([s.y for s in shards]),
                        np.concatenate([s.labels for s in shards]))
