"""Teacher-forced training of the captioner and the classifier variant."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import DatasetShard, load_shards
from .model import KittModel, save_checkpoint

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "loss", "eval_loss", "eval_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr0: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 50_000
    max_steps: int = 30_000
    eval_every: int = 1_000
    seed: int = 0
    clip_norm: float = 5.0
    eval_fraction: float = 0.05
    eval_size: int = 512

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")


def lr_schedule(step: int, config: TrainConfig | None = None) -> float:
    """Staircase decay ``lr0 * decay_factor ** floor(step / decay_every)``."""
    config = config or TrainConfig()
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr0 * config.decay_factor ** (step // config.decay_every)


def split_train_eval(n: int, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Last ``eval_fraction`` of examples are held out."""
    n_eval = max(1, int(round(n * eval_fraction))) if n > 1 else 0
    return np.arange(n - n_eval), np.arange(n - n_eval, n)


def caption_batch(labels: np.ndarray, start_id: int, stop_id: int):
    """Teacher-forcing prompts, targets and loss weights for padded captions.

    Positions after the first STOP are padding and get zero weight.
    """
    B, L = labels.shape
    prompts = np.concatenate([np.full((B, 1), start_id), labels[:, :-1]], axis=1)
    is_stop = labels == stop_id
    first_stop = np.where(is_stop.any(1), is_stop.argmax(1), L - 1)
    weights = (np.arange(L)[None, :] <= first_stop[:, None]).astype(float)
    return prompts, labels.astype(np.int64), weights


class _Task:
    """Loss and evaluation for one head."""

    def __init__(self, model: KittModel):
        self.model = model

    def loss(self, X, y, labels, train, rng):
        raise NotImplementedError

    def evaluate(self, X, y, labels) -> tuple[float, float]:
        raise NotImplementedError


class _CaptionTask(_Task):
    def _parts(self, labels):
        return caption_batch(labels, self.model.start_id, self.model.vocab.stop_id)

    def loss(self, X, y, labels, train, rng):
        prompts, targets, weights = self._parts(labels)
        H = self.model.encode(X, y, train, rng)
        logits = self.model.decoder_logits(H, prompts, train, rng)
        return ad.cross_entropy(logits, targets, weights)

    def evaluate(self, X, y, labels):
        with ad.no_grad():
            prompts, targets, weights = self._parts(labels)
            H = self.model.encode(X, y)
            logits = self.model.decoder_logits(H, prompts)
            loss = float(ad.cross_entropy(logits, targets, weights).data)
            hit = (logits.data.argmax(-1) == targets) * weights
        return loss, float(hit.sum() / weights.sum())


class _ClassifyTask(_Task):
    def loss(self, X, y, labels, train, rng):
        H = self.model.encode(X, y, train, rng)
        return ad.cross_entropy(self.model.classifier_logits(H, train, rng), labels[:, 0])

    def evaluate(self, X, y, labels):
        with ad.no_grad():
            logits = self.model.classifier_logits(self.model.encode(X, y))
            loss = float(ad.cross_entropy(logits, labels[:, 0]).data)
            acc = float(np.mean(logits.data.argmax(-1) == labels[:, 0]))
        return loss, acc


def _format_row(row: dict) -> str:
    out = []
    for key in METRIC_FIELDS:
        v = row[key]
        out.append(str(v) if isinstance(v, int) else f"{v:.9g}")
    return "\t".join(out)


def _evaluate_in_batches(task, data, idx, batch_size):
    total_loss, total_acc, count = 0.0, 0.0, 0
    for s in range(0, len(idx), batch_size):
        b = idx[s:s + batch_size]
        loss, acc = task.evaluate(data.X[b], data.y[b], data.labels[b])
        total_loss += loss * len(b)
        total_acc += acc * len(b)
        count += len(b)
    return total_loss / count, total_acc / count


def _train(task: _Task, data, config: TrainConfig, out_dir=None, progress=None) -> list[dict]:
    model = task.model
    if isinstance(data, (list, tuple)):
        data = load_shards(data, model.vocab_hash)
    if data.manifest["vocab_hash"] != model.vocab_hash:
        raise TrainingError("shard vocabulary hash does not match the model")
    train_idx, eval_idx = split_train_eval(len(data.X), config.eval_fraction)
    eval_idx = eval_idx[:config.eval_size]
    order_rng = np.random.default_rng([config.seed, 0])
    drop_rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    rows: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    metric_fh = timing_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metric_fh = open(out_dir / "metrics.tsv", "w")
        metric_fh.write("\t".join(METRIC_FIELDS) + "\n")
        timing_fh = open(out_dir / "timing.tsv", "w")
        timing_fh.write("step\twallclock\n")
    t0 = time.perf_counter()
    perm, pos = order_rng.permutation(train_idx), 0
    running, n_running = 0.0, 0

    def record(step):
        nonlocal running, n_running
        eval_loss, eval_acc = (_evaluate_in_batches(task, data, eval_idx, config.batch_size)
                               if len(eval_idx) else (float("nan"), float("nan")))
        row = {"step": step, "lr": lr_schedule(step, config),
               "loss": running / n_running if n_running else float("nan"),
               "eval_loss": eval_loss, "eval_acc": eval_acc}
        rows.append(row)
        running, n_running = 0.0, 0
        if metric_fh is not None:
            metric_fh.write(_format_row(row) + "\n")
            metric_fh.flush()
            timing_fh.write(f"{step}\t{time.perf_counter() - t0:.3f}\n")
            timing_fh.flush()
            save_checkpoint(model, out_dir / "last.kitt", step)
        if progress is not None:
            progress(row)
        log.info("step %d lr %.3g loss %.4f eval_loss %.4f eval_acc %.3f", step, row["lr"],
                 row["loss"], eval_loss, eval_acc)

    try:
        record(0)
        for step in range(1, config.max_steps + 1):
            if pos + config.batch_size > len(perm):
                perm, pos = order_rng.permutation(train_idx), 0
            batch = perm[pos:pos + config.batch_size]
            pos += config.batch_size
            lr = lr_schedule(step - 1, config)
            loss = task.loss(data.X[batch], data.y[batch], data.labels[batch], True, drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (lr={lr:g}, batch={batch.tolist()})")
            model.zero_grad()
            loss.backward()
            ad.clip_grad_norm(params, config.clip_norm)
            ad.adam_step(params, lr, step)
            running += value
            n_running += 1
            if step % config.eval_every == 0 or step == config.max_steps:
                record(step)
    finally:
        if metric_fh is not None:
            metric_fh.close()
            timing_fh.close()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.kitt", config.max_steps)
    return rows


def train_captioner(model: KittModel, shards, config: TrainConfig, out_dir=None, progress=None):
    """Teacher forcing with a causal mask; loss averaged over non-padding positions."""
    if model.config.head != "caption":
        raise TrainingError("train_captioner needs a caption model")
    return _train(_CaptionTask(model), shards, config, out_dir, progress)


def train_classifier(model: KittModel, shards, config: TrainConfig, out_dir=None, progress=None):
    """Single-step softmax over kernel tokens; labels are each caption's first token."""
    if model.config.head != "classify":
        raise TrainingError("train_classifier needs a classifier model")
    return _train(_ClassifyTask(model), shards, config, out_dir, progress)


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    top = np.argsort(-probs, axis=-1)[:, :k]
    return float(np.mean((top == np.asarray(labels)[:, None]).any(1)))


def as_dataset(X, y, labels, vocab_hash: str) -> DatasetShard:
    """Wrap in-memory arrays so they can be passed to the trainers."""
    manifest = {"vocab_hash": vocab_hash, "n_examples": len(X)}
    return DatasetShard(manifest, np.asarray(X, np.float32), np.asarray(y, np.float32),
                        np.asarray(labels, np.int32))
