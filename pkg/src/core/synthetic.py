#!/usr/bin/env python3
"""
Synthetic corpora - deterministic fixtures for the pipeline and experiments

Generators:
- toy_corpus: small mixed corpus for the command-line pipeline
- low_overlap_corpus: sibling contexts share many keywords, responses share none
- ambiguous_corpus: twin groups with the same keywords in opposite order
- distractor_pairs: extra database pairs whose responses never match a gold
- order_sensitive_examples: XOR-style pairs only a position-aware scorer separates
- clustered_vectors: Gaussian blobs for index tests

Every generator is a pure function of its arguments and seed.

British English throughout.
"""

from typing import List, Sequence, Tuple
import logging

import numpy as np

from src.core.corpus import DialoguePair
from src.utils.text import SEP_ID

logger = logging.getLogger(__name__)


def _words(prefix: str, n: int) -> List[str]:
    return [f"{prefix}{i}" for i in range(n)]


def _pick(rng: np.random.Generator, pool: Sequence[str], n: int) -> List[str]:
    return [pool[i] for i in rng.choice(len(pool), size=n, replace=len(pool) < n)]


def grouped_corpus(
    n_groups: int,
    seed: int,
    min_contexts: int = 2,
    max_contexts: int = 6,
    single_every: int = 3,
    keywords_per_group: int = 8,
    context_keywords: int = 3,
    context_filler: int = 3,
    utterances: int = 2,
    response_words: int = 6,
    response_filler: int = 2,
    filler_size: int = 40,
    start_id: int = 0,
    topic_pool: int = 0,
    reply_pool: int = 0,
) -> List[DialoguePair]:
    """
    Groups of contexts sharing one response

    Each group has its own context keywords and response words; filler words
    are shared by everything. Every single_every-th group has a single
    context (SC material).

    Args:
        topic_pool: Draw each group's keywords from this many shared words
            (0 = words private to the group)
        reply_pool: Same for response words

    Returns:
        Pairs with consecutive ids from start_id
    """
    rng = np.random.default_rng(seed)
    filler = _words("common", filler_size)
    topics = _words("kw", topic_pool)
    replies = _words("rw", reply_pool)
    pairs: List[DialoguePair] = []
    next_id = start_id

    for g in range(n_groups):
        if topic_pool:
            topic = _pick(rng, topics, keywords_per_group)
        else:
            topic = _words(f"topic{g}w", keywords_per_group)
        if reply_pool:
            reply = _pick(rng, replies, max(response_words, 1))
        else:
            reply = _words(f"reply{g}w", max(response_words, 1))
        response = " ".join(_pick(rng, reply, response_words) + _pick(rng, filler, response_filler))

        n_contexts = 1 if single_every and g % single_every == 0 else int(rng.integers(min_contexts, max_contexts + 1))
        for _ in range(n_contexts):
            context = tuple(
                " ".join(_pick(rng, topic, context_keywords) + _pick(rng, filler, context_filler))
                for _ in range(utterances)
            )
            pairs.append(DialoguePair(next_id, context, response))
            next_id += 1

    logger.info(f"Generated {len(pairs)} pairs over {n_groups} response groups")
    return pairs


def toy_corpus(n_groups: int = 240, seed: int = 0) -> List[DialoguePair]:
    """Bundled corpus for the command-line pipeline"""
    return grouped_corpus(n_groups, seed)


def low_overlap_corpus(n_groups: int = 400, seed: int = 0) -> List[DialoguePair]:
    """
    Contexts of one group share many keywords; responses share no tokens with contexts

    Keywords and response words come from two disjoint shared pools, and a
    group's response words are drawn independently of its keywords. Lexical
    response matching has nothing to work with, contextual matching does.
    """
    return grouped_corpus(
        n_groups, seed,
        min_contexts=3, max_contexts=8, single_every=4,
        keywords_per_group=6, context_keywords=4, context_filler=2,
        response_words=6, response_filler=0,
        topic_pool=150, reply_pool=150,
    )


def ambiguous_corpus(n_twins: int = 150, seed: int = 0, marker_rate: float = 0.5,
                     topic_pool: int = 80, reply_pool: int = 200) -> List[DialoguePair]:
    """
    Twin groups: same keyword bag, opposite keyword order

    A bag-of-words encoder sees twins as identical; a position-aware scorer
    does not. Each context also carries its side's marker word (marker0 or
    marker1, shared by all twins) with probability marker_rate, a weak cue a
    student can be taught to use.
    """
    rng = np.random.default_rng(seed)
    filler = _words("common", 30)
    topics = _words("kw", topic_pool)
    replies = _words("rw", reply_pool)
    pairs: List[DialoguePair] = []
    next_id = 0

    for t in range(n_twins):
        keywords = _pick(rng, topics, 5)
        for side, order in enumerate((keywords, keywords[::-1])):
            marker = f"marker{side}"
            response = " ".join(_pick(rng, replies, 6))
            for _ in range(int(rng.integers(3, 7))):
                first = list(order)
                if rng.random() < marker_rate:
                    first.append(marker)
                context = (" ".join(first), " ".join(_pick(rng, filler, 5)))
                pairs.append(DialoguePair(next_id, context, response))
                next_id += 1

    logger.info(f"Generated {len(pairs)} ambiguous pairs over {2 * n_twins} groups")
    return pairs


def distractor_pairs(n: int, seed: int, start_id: int) -> List[DialoguePair]:
    """Database padding: filler-heavy contexts with unique noise responses"""
    rng = np.random.default_rng(seed)
    filler = _words("common", 40)
    noise = _words("noise", 200)
    pairs = []
    for i in range(n):
        context = tuple(" ".join(_pick(rng, filler, 4) + _pick(rng, noise, 2)) for _ in range(2))
        response = " ".join([f"distractor{i}"] + _pick(rng, noise, 5))
        pairs.append(DialoguePair(start_id + i, context, response))
    return pairs


def order_sensitive_examples(first: int = SEP_ID + 1) -> List[Tuple[List[int], List[int], int]]:
    """
    XOR examples over four token ids

    The query is (a, b) or (b, a); the candidate is c or d; the label is 1
    when (a comes first) XOR (candidate is d). Bag-of-words queries are
    identical for both orders, so no dot-product student separates them.
    """
    a, b, c, d = first, first + 1, first + 2, first + 3
    examples = []
    for query, a_first in (([a, b], True), ([b, a], False)):
        for cand, is_d in (([c], False), ([d], True)):
            examples.append((query, cand, int(a_first != is_d)))
    return examples


def clustered_vectors(n: int, dim: int, clusters: int, seed: int, spread: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Points around unit-norm centres

    Returns:
        (vectors f32 n×dim, cluster label per row)
    """
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((clusters, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    labels = rng.integers(clusters, size=n)
    vectors = centres[labels] + spread * rng.standard_normal((n, dim))
    return vectors.astype(np.float32), labels
