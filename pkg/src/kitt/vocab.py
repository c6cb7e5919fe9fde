"""Token vocabulary and caption encoding."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field

from .kernels import PRIMITIVES, REDUNDANT, Expression, KernelError, Term, reduce_product

STOP = "STOP"
SELF_PRODUCT_RULES = ("exclude", "non_reducible")


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    max_len: int = 3
    token_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[-1] != STOP:
            raise VocabularyError("STOP must be the last token")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens")
        object.__setattr__(self, "token_id", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def stop_id(self) -> int:
        return len(self.tokens) - 1

    @property
    def kernel_tokens(self) -> tuple[str, ...]:
        return self.tokens[:-1]

    @property
    def hash(self) -> str:
        digest = hashlib.sha256(json.dumps(list(self.tokens)).encode()).hexdigest()
        return digest[:16]

    def to_json(self) -> str:
        return json.dumps(list(self.tokens))

    @classmethod
    def from_json(cls, text: str, max_len: int = 3) -> Vocabulary:
        return cls(tuple(json.loads(text)), max_len=max_len)

    def decode(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise VocabularyError(f"unknown token id {token_id}")
        return self.tokens[token_id]


def build_vocabulary(primitives=PRIMITIVES, max_product_order: int = 2,
                     self_product_rule: str = "exclude", max_len: int = 3) -> Vocabulary:
    """Primitives, then every canonical non-redundant pair, then STOP.

    ``self_product_rule="non_reducible"`` also keeps squares that do not
    collapse to their own family (everything except RBF and NOISE squared).
    """
    primitives = tuple(primitives)
    if not primitives:
        raise VocabularyError("need at least one primitive")
    if self_product_rule not in SELF_PRODUCT_RULES:
        raise VocabularyError(f"self_product_rule must be one of {SELF_PRODUCT_RULES}")
    tokens = list(primitives)
    if max_product_order >= 2:
        for i, j in itertools.combinations_with_replacement(range(len(primitives)), 2):
            a, b = primitives[i], primitives[j]
            if a == b and self_product_rule == "exclude":
                continue
            pair = reduce_product(a, b)
            if pair is REDUNDANT:
                continue
            name = "*".join(pair)
            if name not in tokens:
                tokens.append(name)
    tokens.append(STOP)
    return Vocabulary(tuple(tokens), max_len=max_len)


def expression_to_caption(expr: Expression, vocab: Vocabulary) -> list[int]:
    """Token ids by term variance (descending), terminated by STOP."""
    if len(expr.terms) > vocab.max_len:
        raise VocabularyError(f"expression has {len(expr.terms)} terms, max is {vocab.max_len}")
    ids = []
    for term in expr.sorted_terms():
        if term.name not in vocab.token_id:
            raise VocabularyError(f"token {term.name!r} not in vocabulary")
        ids.append(vocab.token_id[term.name])
    return ids + [vocab.stop_id]


def caption_tokens(caption, vocab: Vocabulary) -> list[str]:
    """Kernel token names up to the first STOP (duplicates dropped)."""
    names = []
    for tid in caption:
        name = vocab.decode(int(tid))
        if name == STOP:
            break
        if name not in names:
            names.append(name)
    if len(names) > vocab.max_len:
        raise VocabularyError(f"caption longer than {vocab.max_len} terms")
    return names


def caption_to_expression(caption, vocab: Vocabulary, hyperparameters: list[Term] | None = None) -> Expression:
    """Expression skeleton for a caption; unit hyperparameters unless supplied."""
    names = caption_tokens(caption, vocab)
    if hyperparameters is not None:
        terms = [t.copy() for t in hyperparameters]
        if [t.name for t in terms] != names:
            raise KernelError("hyperparameter terms do not match caption")
    else:
        terms = [Term(tuple(n.split("*"))) for n in names]
    return Expression(terms, max_terms=vocab.max_len)


def pad_caption(caption, vocab: Vocabulary) -> list[int]:
    """Pad with STOP to ``max_len + 1`` ids."""
    caption = list(caption)
    if len(caption) > vocab.max_len + 1:
        raise VocabularyError("caption too long")
    return caption + [vocab.stop_id] * (vocab.max_len + 1 - len(caption))
