#!/usr/bin/env python3
"""
Conditional Language Model - add-k bigram model over session token streams

Used as the perplexity proxy: a retrieved response is scored token by token
given the previous token, the first token being conditioned on the query's
final token.

British English throughout.
"""

import math
from collections import Counter
from typing import Iterable, Sequence
import logging

logger = logging.getLogger(__name__)

DEFAULT_ADD_K = 0.1


class LanguageModelError(ValueError):
    """Invalid smoothing constant, vocabulary size or empty input"""


class ConditionalLm:
    """
    Bigram counts with add-k smoothing

    p(w | h) = (c(h, w) + k) / (c(h) + k·V), which sums to 1 over the V
    vocabulary ids for every history h.
    """

    def __init__(self, vocab_size: int, add_k: float = DEFAULT_ADD_K):
        if vocab_size < 1:
            raise LanguageModelError(f"vocab_size must be ≥ 1, got {vocab_size}")
        if add_k <= 0:
            raise LanguageModelError(f"add-k constant must be > 0, got {add_k}")
        self.vocab_size = vocab_size
        self.add_k = add_k
        self.bigrams: Counter = Counter()
        self.histories: Counter = Counter()

    def fit(self, streams: Iterable[Sequence[int]]) -> "ConditionalLm":
        """Count bigrams of every id stream"""
        n_streams = 0
        for stream in streams:
            n_streams += 1
            for prev, cur in zip(stream, stream[1:]):
                self.bigrams[(prev, cur)] += 1
                self.histories[prev] += 1
        logger.info(f"Bigram LM: {n_streams} streams, {len(self.bigrams)} distinct bigrams, V={self.vocab_size}")
        return self

    def prob(self, prev: int, token: int) -> float:
        return (self.bigrams[(prev, token)] + self.add_k) / (self.histories[prev] + self.add_k * self.vocab_size)

    def log_prob(self, prev: int, token: int) -> float:
        return math.log(self.prob(prev, token))

    def perplexity(self, history: Sequence[int], tokens: Sequence[int]) -> float:
        """
        exp(−(1/m)·Σ ln p(r_t | r_{t−1})), with r_0 the last history token

        Raises:
            LanguageModelError on an empty history or response
        """
        if not history:
            raise LanguageModelError("perplexity needs at least one history token")
        if not tokens:
            raise LanguageModelError("cannot compute perplexity of an empty response")
        prev = history[-1]
        total = 0.0
        for token in tokens:
            total += self.log_prob(prev, token)
            prev = token
        return math.exp(-total / len(tokens))
