#!/usr/bin/env python3
"""
Sparse Index - Okapi BM25 over one candidate field

Features:
- Inverted index of (doc_id, term frequency) postings, sorted by doc id
- Non-negative IDF: ln(1 + (N − n + 0.5) / (n + 0.5))
- Unique-term query semantics (score is invariant to query order and repeats)
- Term-at-a-time top-K, ties broken by ascending doc id
- Single-file binary persistence with magic and version checks

British English throughout.
"""

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple
import logging

logger = logging.getLogger(__name__)

MAGIC = b"BM25"
VERSION = 1
FIELDS = ('context', 'session', 'response')


class SparseIndexError(ValueError):
    """Bad BM25 input, unknown doc id or unreadable index file"""


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 < 0:
            raise SparseIndexError(f"k1 must be ≥ 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise SparseIndexError(f"b must be within [0, 1], got {self.b}")


@dataclass
class InvertedIndex:
    """Postings term → [(doc_id, tf)] plus document statistics"""
    field: str
    postings: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)
    doc_lengths: Dict[int, int] = field(default_factory=dict)

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def doc_freq(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        n = self.doc_freq(term)
        return math.log(1.0 + (self.n_docs - n + 0.5) / (n + 0.5))


def build_index(docs: Iterable[Tuple[int, Sequence[str]]], field_name: str) -> InvertedIndex:
    """
    Build an inverted index

    Args:
        docs: (doc_id, tokens) pairs
        field_name: context, session or response

    Returns:
        InvertedIndex with complete postings

    Raises:
        SparseIndexError on duplicate doc ids or unknown field
    """
    if field_name not in FIELDS:
        raise SparseIndexError(f"unknown field {field_name!r}; expected one of {FIELDS}")

    index = InvertedIndex(field=field_name)
    for doc_id, tokens in docs:
        doc_id = int(doc_id)
        if doc_id in index.doc_lengths:
            raise SparseIndexError(f"duplicate doc id {doc_id} in {field_name} index")
        index.doc_lengths[doc_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            index.postings.setdefault(term, []).append((doc_id, tf))

    for plist in index.postings.values():
        plist.sort()

    logger.info(f"BM25 {field_name} index: {index.n_docs} docs, {len(index.postings)} terms, avgdl {index.avgdl:.2f}")
    return index


def _term_weight(tf: int, doc_length: int, avgdl: float, params: Bm25Params) -> float:
    ratio = doc_length / avgdl if avgdl > 0 else 0.0
    return (tf * (params.k1 + 1.0)) / (tf + params.k1 * (1.0 - params.b + params.b * ratio))


def bm25_score(index: InvertedIndex, query_tokens: Sequence[str], doc_id: int,
               params: Bm25Params = Bm25Params()) -> float:
    """Okapi BM25 of one document against the unique query terms"""
    if doc_id not in index.doc_lengths:
        raise SparseIndexError(f"doc id {doc_id} not in {index.field} index")

    avgdl = index.avgdl
    doc_length = index.doc_lengths[doc_id]
    score = 0.0
    for term in sorted(set(query_tokens)):
        for pid, tf in index.postings.get(term, ()):
            if pid == doc_id:
                score += index.idf(term) * _term_weight(tf, doc_length, avgdl, params)
                break
    return score


def search_topk(index: InvertedIndex, query_tokens: Sequence[str], k: int,
                params: Bm25Params = Bm25Params()) -> List[Tuple[int, float]]:
    """
    Exact top-K over documents sharing at least one query term

    Returns:
        [(doc_id, score)] by descending score, then ascending doc id
    """
    if k < 1:
        raise SparseIndexError(f"K must be ≥ 1, got {k}")

    avgdl = index.avgdl
    scores: Dict[int, float] = {}
    for term in sorted(set(query_tokens)):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * _term_weight(tf, index.doc_lengths[doc_id], avgdl, params)

    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


# ═══════════════════════════════════════════════════════════════════
# PERSISTENCE
# ═══════════════════════════════════════════════════════════════════

def _pack_str(text: str) -> bytes:
    raw = text.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def save_index(index: InvertedIndex, path: Path):
    """
    Layout (little endian):
        "BM25" u32 version u64 N f64 avgdl str field
        N × (i64 doc_id, u32 length)
        u64 term count, then per term: str term, u32 n, n × (i64 doc_id, u32 tf)
    """
    parts = [MAGIC, struct.pack('<IQd', VERSION, index.n_docs, index.avgdl), _pack_str(index.field)]
    for doc_id in sorted(index.doc_lengths):
        parts.append(struct.pack('<qI', doc_id, index.doc_lengths[doc_id]))
    parts.append(struct.pack('<Q', len(index.postings)))
    for term in sorted(index.postings):
        plist = index.postings[term]
        parts.append(_pack_str(term))
        parts.append(struct.pack('<I', len(plist)))
        parts.extend(struct.pack('<qI', doc_id, tf) for doc_id, tf in plist)

    Path(path).write_bytes(b"".join(parts))
    logger.info(f"Saved BM25 index: {path}")


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise SparseIndexError(f"{self.path}: truncated index file")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def take_str(self) -> str:
        (length,) = self.take('<I')
        if self.offset + length > len(self.data):
            raise SparseIndexError(f"{self.path}: truncated index file")
        text = self.data[self.offset:self.offset + length].decode('utf-8')
        self.offset += length
        return text


def load_index(path: Path) -> InvertedIndex:
    """Read an index written by save_index"""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise SparseIndexError(f"{path}: not a BM25 index (magic {data[:4]!r})")

    reader = _Reader(data, path)
    reader.offset = 4
    version, n_docs, _avgdl = reader.take('<IQd')
    if version != VERSION:
        raise SparseIndexError(f"{path}: index version {version} not supported (expected {VERSION})")

    index = InvertedIndex(field=reader.take_str())
    for _ in range(n_docs):
        doc_id, length = reader.take('<qI')
        index.doc_lengths[doc_id] = length
    (n_terms,) = reader.take('<Q')
    for _ in range(n_terms):
        term = reader.take_str()
        (count,) = reader.take('<I')
        index.postings[term] = [reader.take('<qI') for _ in range(count)]

    return index
