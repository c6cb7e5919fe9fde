"""Desk-scale benchmark protocols: ground-truth recovery and prediction timing."""

from __future__ import annotations

import math
import time

import numpy as np

from .datagen import GenConfig, generate_example
from .inference import encode_dataset, generate_caption
from .model import KittModel


def predict_first_token(model: KittModel, X, y) -> np.ndarray:
    """Most likely first kernel token per dataset; ``X`` is (B, N, D)."""
    if model.config.head == "classify":
        return model.classify(X, y).argmax(-1)
    out = []
    for Xi, yi in zip(X, y):
        H = encode_dataset(model, Xi, yi)
        out.append(int(np.argmax(model.decode_step(H, []))))
    return np.array(out)


def ground_truth_accuracy(model: KittModel, sizes, n_samples: int = 300, n_dims: int = 4,
                          seed: int = 0, batch_size: int = 10, classes=None) -> list[dict]:
    """Top-1 recovery of a single-token kernel per dataset size.

    For every size, ``n_samples`` datasets are drawn from a uniformly chosen
    class with its own hyperparameters; the standard error is binomial.
    """
    vocab = model.vocab
    classes = list(classes or vocab.kernel_tokens)
    rows = []
    for n in sizes:
        rng = np.random.default_rng([seed, int(n)])
        cfg = GenConfig(n_points=int(n), n_dims=n_dims)
        hits = 0
        for s in range(0, n_samples, batch_size):
            m = min(batch_size, n_samples - s)
            labels = rng.integers(len(classes), size=m)
            exs = [generate_example(vocab, cfg, rng, tokens=[classes[c]]) for c in labels]
            X = np.stack([e.X for e in exs]).astype(np.float32)
            y = np.stack([e.y for e in exs]).astype(np.float32)
            pred = predict_first_token(model, X, y)
            truth = np.array([vocab.token_id[classes[c]] for c in labels])
            hits += int(np.sum(pred == truth))
        acc = hits / n_samples
        rows.append({"n_points": int(n), "accuracy": acc, "se": math.sqrt(acc * (1 - acc) / n_samples),
                     "n_samples": n_samples, "chance": 1.0 / len(classes)})
    return rows


def caption_timing(model: KittModel, sizes, dims, seed: int = 0, repeats: int = 1) -> list[dict]:
    """Wall time of one greedy caption (or one classification), encoding included, per (N, D)."""
    rows = []
    for d in dims:
        for n in sizes:
            rng = np.random.default_rng([seed, int(n), int(d)])
            X = rng.uniform(-2.5, 2.5, (int(n), int(d))).astype(np.float32)
            y = rng.standard_normal(int(n)).astype(np.float32)
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                if model.config.head == "classify":
                    model.classify(X[None], y[None])
                else:
                    generate_caption(model, X, y, "greedy")
                best = min(best, time.perf_counter() - t0)
            rows.append({"n_points": int(n), "n_dims": int(d), "seconds": best})
    return rows
