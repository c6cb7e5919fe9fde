import hashlib
import math

import numpy as np
import pytest

from kitt.autodiff import no_grad
from kitt.datagen import GenConfig, generate_shards, load_shards
from kitt.model import ArchitectureConfig, KittModel
from kitt.train import (
    TrainConfig,
    TrainingError,
    _CaptionTask,
    _evaluate_in_batches,
    caption_batch,
    lr_schedule,
    split_train_eval,
    topk_accuracy,
    train_captioner,
    train_classifier,
)
from kitt.vocab import build_vocabulary

VOCAB = build_vocabulary()


def small_arch(head="caption", seed=0, **kw):
    cfg = dict(embed_dim=16, n_heads=2, rff_hidden=32, n_sab_seq=1, n_sab_dim=1, n_decoder_blocks=1,
               head=head, seed=seed)
    cfg.update(kw)
    return ArchitectureConfig(**cfg)


@pytest.fixture(scope="module")
def shards(tmp_path_factory):
    out = tmp_path_factory.mktemp("shards")
    return generate_shards(VOCAB, out, 200, shard_size=50, seed=0, config=GenConfig(n_points=16, n_dims=2))


def weights_digest(model):
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.data.tobytes())
    return h.hexdigest()


def test_lr_schedule_examples():
    assert lr_schedule(0) == pytest.approx(1e-4)
    assert lr_schedule(49_999) == pytest.approx(1e-4)
    assert lr_schedule(50_000) == pytest.approx(1e-5)
    assert lr_schedule(149_999) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(decay_every=0)


def test_caption_batch_masks_padding():
    s, start = 9, 10
    labels = np.array([[1, s, s, s], [2, 3, 4, s], [5, 6, s, s]])
    prompts, targets, w = caption_batch(labels, start, s)
    np.testing.assert_array_equal(prompts[:, 0], start)
    np.testing.assert_array_equal(prompts[:, 1:], labels[:, :-1])
    np.testing.assert_array_equal(targets, labels)
    np.testing.assert_array_equal(w, [[1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 0]])


def test_split_train_eval():
    tr, ev = split_train_eval(100, 0.05)
    assert list(ev) == list(range(95, 100)) and len(tr) == 95
    tr, ev = split_train_eval(1, 0.05)
    assert len(tr) == 1 and len(ev) == 0


def test_initial_loss_near_uniform(shards):
    model = KittModel(small_arch(), VOCAB)
    data = load_shards(shards)
    loss, _ = _evaluate_in_batches(_CaptionTask(model), data, np.arange(200), 50)
    assert abs(loss - math.log(len(VOCAB))) < 0.2 * math.log(len(VOCAB))


def test_evaluation_does_not_mutate_weights(shards):
    model = KittModel(small_arch(), VOCAB)
    before = weights_digest(model)
    _evaluate_in_batches(_CaptionTask(model), load_shards(shards), np.arange(200), 64)
    assert weights_digest(model) == before


def test_training_is_deterministic_and_shard_order_free(shards, tmp_path):
    cfg = TrainConfig(batch_size=8, lr0=1e-3, max_steps=6, eval_every=3, seed=5)
    logs = []
    for i, paths in enumerate((shards, shards[::-1])):
        model = KittModel(small_arch(seed=1), VOCAB)
        train_captioner(model, paths, cfg, out_dir=tmp_path / str(i))
        logs.append((tmp_path / str(i) / "metrics.tsv").read_bytes())
        assert (tmp_path / str(i) / "final.kitt").exists()
    assert logs[0] == logs[1]
    assert logs[0].decode().splitlines()[0].split("\t") == ["step", "lr", "loss", "eval_loss", "eval_acc"]
    assert len(logs[0].decode().splitlines()) == 1 + 3


def test_training_errors(shards):
    other = KittModel(small_arch(), build_vocabulary(["RBF", "PER"]))
    with pytest.raises(ValueError, match="hash"):
        train_captioner(other, shards, TrainConfig(max_steps=1))
    with pytest.raises(TrainingError):
        train_classifier(KittModel(small_arch(), VOCAB), shards, TrainConfig(max_steps=1))
    with pytest.raises(TrainingError):
        train_captioner(KittModel(small_arch("classify"), VOCAB), shards, TrainConfig(max_steps=1))
    broken = KittModel(small_arch(), VOCAB)
    broken.params["dec.out.w"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss at step 1"):
        train_captioner(broken, shards, TrainConfig(batch_size=4, max_steps=2))


def test_classifier_chance_at_init(shards):
    model = KittModel(small_arch("classify"), VOCAB)
    rows = train_classifier(model, shards, TrainConfig(batch_size=8, max_steps=0, eval_fraction=1.0,
                                                       eval_size=200))
    k = len(VOCAB) - 1
    sd = math.sqrt((1 / k) * (1 - 1 / k) / 199)
    assert abs(rows[0]["eval_acc"] - 1 / k) < 5 * sd


def test_topk_monotone():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(6), size=200)
    labels = rng.integers(6, size=200)
    accs = [topk_accuracy(probs, labels, k) for k in range(1, 7)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0


@pytest.mark.slow
def test_toy_vocabulary_loss_drops_below_ln2(tmp_path):
    """Two kernel tokens (smooth vs white noise), 500 examples: loss < ln 2 within 2000 steps."""
    vocab = build_vocabulary(["NOISE", "RBF"], max_product_order=1, max_len=1)
    paths = generate_shards(vocab, tmp_path, 500, shard_size=500, seed=0,
                            config=GenConfig(n_points=32, n_dims=1, max_terms=1))
    model = KittModel(small_arch(max_caption_len=1), vocab)
    cfg = TrainConfig(batch_size=32, lr0=1e-3, max_steps=2000, eval_every=250, eval_fraction=0.1)
    rows = train_captioner(model, paths, cfg)
    assert min(r["loss"] for r in rows[1:]) < math.log(2)
    # stricter than the averaged caption loss: the first (kernel) token alone beats the coin flip
    data = load_shards(paths)
    _, ev = split_train_eval(500, 0.1)
    with no_grad():
        logits = model.decoder_logits(model.encode(data.X[ev], data.y[ev]),
                                      np.full((len(ev), 1), model.start_id)).data[:, 0].astype(float)
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    first = data.labels[ev, 0]
    nll = -np.mean(np.log(probs[np.arange(len(ev)), first]))
    assert nll < math.log(2)
