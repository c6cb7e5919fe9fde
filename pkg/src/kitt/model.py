"""The captioning transformer: set-attention encoders and a prompt decoder.

Data flow for a batch of datasets ``X`` (B, N, D) and ``y`` (B, N):

* reshape to (B, D, N, 2) pairs ``(x_ij, y_i)``;
* sequence encoder: rFF to E, SAB stack over the N axis, mean over N;
* dimension encoder: SAB stack over the D axis, then two rFFs;
* decoder: prompt embeddings (no positions), causal self-attention then
  cross-attention to the D encodings, and a softmax over the vocabulary.

The classifier variant mean-pools the encodings over D and applies one dense
layer instead of the decoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .vocab import Vocabulary

CHECKPOINT_MAGIC = "KITT-CKPT"
CHECKPOINT_VERSION = 1
MASK_VALUE = -1e9
# bytes of attention scores held at once during no-grad encoding
ENCODE_MEMORY_BUDGET = 256 * 2 ** 20


class CheckpointError(ValueError):
    pass


@dataclass
class ArchitectureConfig:
    embed_dim: int = 64
    n_heads: int = 4
    rff_hidden: int = 128
    n_sab_seq: int = 6
    n_sab_dim: int = 6
    n_decoder_blocks: int = 2
    dropout_rate: float = 0.1
    max_caption_len: int = 3
    head: str = "caption"  # or "classify"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        for name in ("embed_dim", "n_heads", "rff_hidden", "n_sab_seq", "n_sab_dim",
                     "n_decoder_blocks", "max_caption_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.head not in ("caption", "classify"):
            raise ValueError("head must be 'caption' or 'classify'")


class KittModel:
    """All network weights plus architecture and vocabulary metadata."""

    def __init__(self, config: ArchitectureConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(config.seed)
        self._build()

    @property
    def vocab_hash(self) -> str:
        return self.vocab.hash

    @property
    def n_outputs(self) -> int:
        # classifier scores kernel tokens only; the decoder also emits STOP
        return len(self.vocab) - 1 if self.config.head == "classify" else len(self.vocab)

    @property
    def start_id(self) -> int:
        return len(self.vocab)

    # -- parameters --------------------------------------------------------
    def _add(self, name, shape, init="fan_in"):
        if init == "fan_in":
            limit = 1.0 / math.sqrt(shape[0])
            data = self._rng.uniform(-limit, limit, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:  # embedding
            data = self._rng.uniform(-1.0, 1.0, size=shape)
        self.params[name] = Parameter(data.astype(self.dtype), name)

    def _add_dense(self, name, n_in, n_out, bias=True):
        self._add(f"{name}.w", (n_in, n_out))
        if bias:
            self._add(f"{name}.b", (n_out,), "zeros")

    def _add_rff(self, name, n_in, n_out):
        self._add_dense(f"{name}.l1", n_in, self.config.rff_hidden)
        self._add_dense(f"{name}.l2", self.config.rff_hidden, n_out)

    def _add_mha(self, name):
        E = self.config.embed_dim
        for w in ("wq", "wk", "wv", "wo"):
            self._add(f"{name}.{w}", (E, E))

    def _add_ln(self, name):
        self._add(f"{name}.gain", (self.config.embed_dim,), "ones")
        self._add(f"{name}.bias", (self.config.embed_dim,), "zeros")

    def _add_sab(self, name):
        self._add_mha(f"{name}.mha")
        self._add_rff(f"{name}.rff", self.config.embed_dim, self.config.embed_dim)
        self._add_ln(f"{name}.ln")

    def _build(self):
        c = self.config
        E = c.embed_dim
        self._add_rff("seq.in", 2, E)
        for i in range(c.n_sab_seq):
            self._add_sab(f"seq.sab{i}")
        for i in range(c.n_sab_dim):
            self._add_sab(f"dim.sab{i}")
        self._add_rff("dim.out0", E, E)
        self._add_rff("dim.out1", E, E)
        if c.head == "classify":
            self._add_dense("cls.out", E, self.n_outputs)
            return
        self._add("dec.embed", (len(self.vocab) + 1, E), "embed")
        for i in range(c.n_decoder_blocks):
            name = f"dec.block{i}"
            self._add_mha(f"{name}.self")
            self._add_ln(f"{name}.ln1")
            self._add_mha(f"{name}.cross")
            self._add_ln(f"{name}.ln2")
            self._add_rff(f"{name}.ff", E, E)
            self._add_ln(f"{name}.ln3")
        self._add_dense("dec.out", E, self.n_outputs)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_weights(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- building blocks -----------------------------------------------------
    def _dense(self, name, x):
        out = ad.matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return ad.add(out, b) if b is not None else out

    def rff(self, name, x):
        """Row-wise feed-forward: dense, ReLU, dense."""
        return self._dense(f"{name}.l2", ad.relu(self._dense(f"{name}.l1", x)))

    def multihead_attention(self, name, q_in, kv_in, mask=None):
        """Scaled dot-product attention per head, heads concatenated then projected.

        ``q_in`` is (..., Nq, E) and ``kv_in`` is (..., Nk, E); ``mask`` is a
        boolean (Nq, Nk) array, True where attention is blocked.
        """
        E, H = self.config.embed_dim, self.config.n_heads
        dh = E // H
        P = self.params
        nq, nk = q_in.shape[-2], kv_in.shape[-2]
        lead_q, lead_k = q_in.shape[:-2], kv_in.shape[:-2]

        def heads(x, w, lead, n):
            x = ad.reshape(ad.matmul(x, P[f"{name}.{w}"]), (*lead, n, H, dh))
            nd = len(lead)
            return ad.transpose(x, (*range(nd), nd + 1, nd, nd + 2))  # (..., H, n, dh)

        q = heads(q_in, "wq", lead_q, nq)
        k = heads(kv_in, "wk", lead_k, nk)
        v = heads(kv_in, "wv", lead_k, nk)
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.mask_fill(scores, mask, MASK_VALUE)
        att = ad.matmul(ad.softmax(scores, axis=-1), v)  # (..., H, nq, dh)
        nd = len(lead_q)
        att = ad.transpose(att, (*range(nd), nd + 1, nd, nd + 2))
        return ad.matmul(ad.reshape(att, (*lead_q, nq, E)), P[f"{name}.wo"])

    def layernorm(self, name, x):
        return ad.layernorm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def sab(self, name, z, train=False, rng=None):
        """``LayerNorm(C + Z)`` with ``C = Dropout(rFF(Multihead(Z, Z, Z)))``."""
        c = self.rff(f"{name}.rff", self.multihead_attention(f"{name}.mha", z, z))
        c = ad.dropout(c, self.config.dropout_rate, train, rng)
        return self.layernorm(f"{name}.ln", ad.add(c, z))

    # -- encoder ---------------------------------------------------------------
    def _pairs(self, X, y):
        X = np.asarray(X, dtype=self.dtype)
        y = np.asarray(y, dtype=self.dtype)
        if X.ndim == 2:
            X, y = X[None], y[None]
        B, N, D = X.shape
        if D == 0:
            raise ValueError("dataset needs at least one input dimension")
        if y.shape != (B, N):
            raise ValueError(f"y shape {y.shape} does not match X {X.shape}")
        xs = np.transpose(X, (0, 2, 1))  # (B, D, N)
        ys = np.broadcast_to(y[:, None, :], xs.shape)
        return np.stack([xs, ys], axis=-1)  # (B, D, N, 2)

    def seq_enc(self, X, y, train=False, rng=None) -> Tensor:
        """(B, N, D) inputs and (B, N) outputs to (B, D, E) dimension encodings."""
        pairs = self._pairs(X, y)
        if not train and not ad._grad_enabled:
            return self._seq_enc_chunked(pairs)
        return self._seq_enc_pairs(pairs, train, rng)

    def _seq_enc_pairs(self, pairs, train=False, rng=None) -> Tensor:
        z = self.rff("seq.in", Tensor(pairs))
        for i in range(self.config.n_sab_seq):
            z = self.sab(f"seq.sab{i}", z, train, rng)
        return ad.mean(z, axis=-2)

    def _seq_enc_chunked(self, pairs) -> Tensor:
        B, D, N, _ = pairs.shape
        per_set = self.config.n_heads * N * N * self.dtype.itemsize * 4
        chunk = max(1, ENCODE_MEMORY_BUDGET // per_set)
        flat = pairs.reshape(B * D, N, 2)
        outs = [self._seq_enc_pairs(flat[i:i + chunk]).data for i in range(0, B * D, chunk)]
        return Tensor(np.concatenate(outs, axis=0).reshape(B, D, -1))

    def dim_enc(self, G, train=False, rng=None) -> Tensor:
        z = G
        for i in range(self.config.n_sab_dim):
            z = self.sab(f"dim.sab{i}", z, train, rng)
        return self.rff("dim.out1", self.rff("dim.out0", z))

    def encode(self, X, y, train=False, rng=None) -> Tensor:
        return self.dim_enc(self.seq_enc(X, y, train, rng), train, rng)

    # -- heads ---------------------------------------------------------------
    def decoder_logits(self, H, prompts, train=False, rng=None) -> Tensor:
        """Logits (B, T, V) for prompts (B, T) of token ids (START included)."""
        if self.config.head != "caption":
            raise ValueError("model has no decoder")
        prompts = np.asarray(prompts, dtype=np.int64)
        if prompts.ndim == 1:
            prompts = prompts[None]
        T = prompts.shape[1]
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        x = ad.embed(prompts, self.params["dec.embed"])
        rate = self.config.dropout_rate
        for i in range(self.config.n_decoder_blocks):
            name = f"dec.block{i}"
            a = ad.dropout(self.multihead_attention(f"{name}.self", x, x, causal), rate, train, rng)
            x = self.layernorm(f"{name}.ln1", ad.add(a, x))
            a = ad.dropout(self.multihead_attention(f"{name}.cross", x, H), rate, train, rng)
            x = self.layernorm(f"{name}.ln2", ad.add(a, x))
            a = ad.dropout(self.rff(f"{name}.ff", x), rate, train, rng)
            x = self.layernorm(f"{name}.ln3", ad.add(a, x))
        return self._dense("dec.out", x)

    def classifier_logits(self, H, train=False, rng=None) -> Tensor:
        if self.config.head != "classify":
            raise ValueError("model has no classifier head")
        return self._dense("cls.out", ad.mean(H, axis=-2))

    # -- inference helpers -------------------------------------------------------
    def decode_step(self, H, prompt) -> np.ndarray:
        """Next-token distribution given encodings (1, D, E) and a prompt of kernel ids."""
        prompt = [int(t) for t in prompt]
        if len(prompt) > self.config.max_caption_len:
            raise ValueError("prompt longer than max caption length")
        for t in prompt:
            if not 0 <= t < len(self.vocab):
                raise ValueError(f"token id {t} out of range")
        with ad.no_grad():
            logits = self.decoder_logits(H, [[self.start_id, *prompt]]).data[0, -1]
        return _softmax_np(logits.astype(np.float64))

    def classify(self, X, y) -> np.ndarray:
        with ad.no_grad():
            logits = self.classifier_logits(self.encode(X, y)).data
        return _softmax_np(logits.astype(np.float64))

    # -- checkpoints ---------------------------------------------------------
    def save(self, path, step: int = 0, extra: dict | None = None) -> None:
        save_checkpoint(self, path, step, extra)


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def save_checkpoint(model: KittModel, path, step: int = 0, extra: dict | None = None) -> None:
    """Metadata line, then per tensor a JSON header line and its little-endian bytes."""
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": list(model.vocab.tokens),
        "vocab_hash": model.vocab_hash,
        "max_len": model.vocab.max_len,
        "step": int(step),
        "extra": extra or {},
        "n_tensors": len(model.params),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for name, p in model.params.items():
            arr = np.ascontiguousarray(p.data)
            dtype = arr.dtype.newbyteorder("<")
            header = {"name": name, "dtype": dtype.str, "rank": arr.ndim, "shape": list(arr.shape)}
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(arr.astype(dtype, copy=False).tobytes())


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> tuple[KittModel, dict]:
    with open(path, "rb") as fh:
        meta = json.loads(fh.readline())
        if meta.get("magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        vocab = Vocabulary(tuple(meta["vocab"]), max_len=meta["max_len"])
        if vocab.hash != meta["vocab_hash"]:
            raise CheckpointError("checkpoint vocabulary does not match its hash")
        if expected_vocab_hash is not None and expected_vocab_hash != vocab.hash:
            raise CheckpointError(
                f"vocabulary hash mismatch: checkpoint {vocab.hash}, expected {expected_vocab_hash}")
        model = KittModel(ArchitectureConfig(**meta["config"]), vocab)
        for _ in range(meta["n_tensors"]):
            header = json.loads(fh.readline())
            dtype = np.dtype(header["dtype"])
            count = int(np.prod(header["shape"])) if header["rank"] else 1
            raw = fh.read(count * dtype.itemsize)
            arr = np.frombuffer(raw, dtype=dtype).reshape(header["shape"]).astype(model.dtype)
            if header["name"] not in model.params:
                raise CheckpointError(f"unexpected tensor {header['name']}")
            if model.params[header["name"]].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {header['name']}")
            model.params[header["name"]].data = arr.copy()
    return model, meta
