"""Reference kernel-selection strategies: greedy compositional search, RBF-ARD, random."""

from __future__ import annotations

import logging

import numpy as np

from .inference import CandidateKernel, FitError, fit_hyperparameters
from .kernels import Expression, Term
from .vocab import Vocabulary

log = logging.getLogger(__name__)


def _expr(tokens, max_terms=3) -> Expression:
    return Expression([Term(tuple(t.split("*"))) for t in tokens], max_terms=max(max_terms, len(tokens)))


def greedy_search(X, y, vocab: Vocabulary, max_depth: int = 3, n_init: int = 50,
                  final_n_init: int = 1000, rng=None, tokens=None):
    """Additive forward search over vocabulary tokens scored by BIC (lower is better).

    At each depth every unused token is appended to the incumbent sum and the
    whole expression is refit with a reduced restart budget.  The search stops
    when no extension lowers BIC; the winner is refit with ``final_n_init``
    draws.  Returns ``(best, trace)`` where ``trace`` lists every fit.
    """
    rng = np.random.default_rng(rng)
    pool = list(tokens) if tokens is not None else list(vocab.kernel_tokens)
    incumbent: list[str] = []
    best: CandidateKernel | None = None
    trace = []
    for depth in range(1, max_depth + 1):
        round_best, round_tokens = None, None
        for tok in pool:
            if tok in incumbent:
                continue
            cand_tokens = incumbent + [tok]
            try:
                fit = fit_hyperparameters(X, y, _expr(cand_tokens, max_depth), n_init, rng)
            except FitError as exc:
                log.info("greedy search: %s failed (%s)", cand_tokens, exc)
                continue
            trace.append({"depth": depth, "expression": " + ".join(cand_tokens), "bic": fit.bic,
                          "lml": fit.lml})
            if round_best is None or fit.bic < round_best.bic:
                round_best, round_tokens = fit, cand_tokens
        if round_best is None or (best is not None and round_best.bic >= best.bic):
            break
        best, incumbent = round_best, round_tokens
    if best is None:
        raise FitError("greedy search found no fittable expression")
    final = fit_hyperparameters(X, y, _expr(incumbent, max_depth), final_n_init, rng)
    if final.bic > best.bic:
        final = best
    return final, trace


def rbf_ard_fit(X, y, n_init: int = 1000, rng=None) -> CandidateKernel:
    """Single RBF term with one lengthscale per input dimension."""
    return fit_hyperparameters(X, y, _expr(["RBF"]), n_init, rng)


def random_vocab_select(vocab: Vocabulary, k: int, rng=None) -> Expression:
    """Sum of ``k`` distinct kernel tokens drawn uniformly from the vocabulary."""
    rng = np.random.default_rng(rng)
    if not 1 <= k <= len(vocab.kernel_tokens):
        raise ValueError(f"k must be in [1, {len(vocab.kernel_tokens)}]")
    idx = rng.choice(len(vocab.kernel_tokens), size=k, replace=False)
    return _expr([vocab.kernel_tokens[i] for i in idx], max(k, vocab.max_len))


def random_vocab_fit(X, y, vocab: Vocabulary, k: int = 3, n_init: int = 1000, rng=None) -> CandidateKernel:
    rng = np.random.default_rng(rng)
    return fit_hyperparameters(X, y, random_vocab_select(vocab, k, rng), n_init, rng)
