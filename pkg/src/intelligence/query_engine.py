#!/usr/bin/env python3
"""
Query Engine - end-to-end response retrieval

Core features:
- QC / QS / QR retrieval over sparse (BM25), dense-exact or dense-IVF backends
- Every hit mapped back to its pair's response (pair-level ranking, duplicates kept)
- DQS: score = sim(q, context) + λ·sim(q, response), exact or fused
- Fused DQS takes the union of each side's top-K′ and completes the other side
- JSON-lines output with per-query timing

British English throughout.
"""

import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from src.core.corpus import Context, DialoguePair, context_ids, response_ids, session_ids, session_utterances
from src.intelligence.sparse_index import Bm25Params, InvertedIndex, search_topk
from src.intelligence.vector_store import (
    EmbeddingShard,
    IvfIndex,
    ScanCounter,
    exact_topk,
    ivf_search,
    score_all,
    score_docs,
)
from src.learning.models import StudentModel
from src.utils.text import Vocabulary, utterance_words

logger = logging.getLogger(__name__)

BACKENDS = ('sparse', 'dense-exact', 'dense-ivf')
DQS_MODES = ('exact', 'fused')
MODE_FIELDS = {'qc': 'context', 'qs': 'session', 'qr': 'response'}


class RetrievalError(ValueError):
    """Missing index, unknown backend or misaligned DQS shards"""


# ═══════════════════════════════════════════════════════════════════
# FIELD VIEWS
# ═══════════════════════════════════════════════════════════════════

def field_words(pair: DialoguePair, field_name: str) -> List[str]:
    """Word tokens of one candidate field (sparse indexing)"""
    if field_name == 'context':
        return utterance_words(pair.context)
    if field_name == 'response':
        return utterance_words([pair.response])
    if field_name == 'session':
        return utterance_words(session_utterances(pair.context, pair.response))
    raise RetrievalError(f"unknown field {field_name!r}")


def field_ids(pair: DialoguePair, field_name: str, vocab: Vocabulary) -> List[int]:
    """Token ids of one candidate field (dense encoding)"""
    if field_name == 'context':
        return context_ids(pair.context, vocab)
    if field_name == 'response':
        return response_ids(pair.response, vocab)
    if field_name == 'session':
        return session_ids(pair.context, pair.response, vocab)
    raise RetrievalError(f"unknown field {field_name!r}")


# ═══════════════════════════════════════════════════════════════════
# RESULTS
# ═══════════════════════════════════════════════════════════════════

@dataclass
class RetrievalHit:
    pair_id: int
    response: str
    score: float


@dataclass
class RetrievalResult:
    """Ranked hits for one query"""
    hits: List[RetrievalHit]
    mode: str
    backend: str
    elapsed_ms: float = 0.0

    @property
    def responses(self) -> List[str]:
        return [hit.response for hit in self.hits]

    @property
    def pair_ids(self) -> List[int]:
        return [hit.pair_id for hit in self.hits]

    def to_dict(self, query_id: int, include_timing: bool = True) -> Dict:
        return {
            'query_id': query_id,
            'mode': self.mode,
            'hits': [{'pair_id': h.pair_id, 'response': h.response, 'score': h.score} for h in self.hits],
            'elapsed_ms': self.elapsed_ms if include_timing else None,
        }

    @classmethod
    def from_dict(cls, row: Dict, backend: str = '') -> "RetrievalResult":
        hits = [RetrievalHit(int(h['pair_id']), h['response'], float(h['score'])) for h in row['hits']]
        return cls(hits=hits, mode=row['mode'], backend=backend, elapsed_ms=row.get('elapsed_ms') or 0.0)


@dataclass
class DqsIndexes:
    """Context and response shards over the same pair ids, plus λ"""
    context: EmbeddingShard
    response: EmbeddingShard
    lam: float = 1.0
    context_ivf: Optional[IvfIndex] = None
    response_ivf: Optional[IvfIndex] = None

    def __post_init__(self):
        ctx_ids = np.sort(self.context.doc_ids)
        resp_ids = np.sort(self.response.doc_ids)
        if not np.array_equal(ctx_ids, resp_ids):
            only_ctx = sorted(set(ctx_ids.tolist()) - set(resp_ids.tolist()))[:5]
            only_resp = sorted(set(resp_ids.tolist()) - set(ctx_ids.tolist()))[:5]
            raise RetrievalError(
                f"DQS shards are misaligned: {self.context.n} context vs {self.response.n} response rows; "
                f"context-only ids {only_ctx}, response-only ids {only_resp}"
            )
        if self.context.dim != self.response.dim:
            raise RetrievalError(f"DQS shard dimensions differ: {self.context.dim} vs {self.response.dim}")


# ═══════════════════════════════════════════════════════════════════
# RETRIEVER
# ═══════════════════════════════════════════════════════════════════

class ResponseRetriever:
    """
    Retrieve responses for a query context from the candidate database
    """

    def __init__(self,
                 database: Sequence[DialoguePair],
                 vocab: Optional[Vocabulary] = None,
                 student: Optional[StudentModel] = None,
                 sparse: Optional[Dict[str, InvertedIndex]] = None,
                 shards: Optional[Dict[str, EmbeddingShard]] = None,
                 ivf: Optional[Dict[str, IvfIndex]] = None,
                 bm25_params: Bm25Params = Bm25Params(),
                 nprobe: Optional[int] = None,
                 counter: Optional[ScanCounter] = None):
        """
        Initialise retriever

        Args:
            database: Candidate pairs (hits map back to these)
            vocab: Vocabulary for dense query encoding
            student: Student whose query tower encodes queries
            sparse: Field → BM25 index
            shards: Field → embedding shard
            ivf: Field → IVF index
            bm25_params: k1 and b
            nprobe: IVF probes (index default when None)
            counter: Optional scan counter shared by dense searches
        """
        self.pairs = {p.id: p for p in database}
        self.vocab = vocab
        self.student = student
        self.sparse = sparse or {}
        self.shards = shards or {}
        self.ivf = ivf or {}
        self.bm25_params = bm25_params
        self.nprobe = nprobe
        self.counter = counter

    def encode_query(self, query: Context) -> np.ndarray:
        if self.student is None or self.vocab is None:
            raise RetrievalError("dense retrieval needs a student checkpoint and a vocabulary")
        return self.student.query_tower.embed(context_ids(query, self.vocab))

    def _hits(self, ranked: Sequence[Tuple[int, float]]) -> List[RetrievalHit]:
        hits = []
        for pair_id, score in ranked:
            pair = self.pairs.get(pair_id)
            if pair is None:
                raise RetrievalError(f"index returned pair id {pair_id} which is not in the database")
            hits.append(RetrievalHit(pair_id, pair.response, float(score)))
        return hits

    def _search(self, query: Context, field_name: str, k: int, backend: str) -> List[Tuple[int, float]]:
        if backend == 'sparse':
            if field_name not in self.sparse:
                raise RetrievalError(f"no BM25 index for the {field_name} field")
            return search_topk(self.sparse[field_name], utterance_words(query), k, self.bm25_params)
        if backend == 'dense-exact':
            if field_name not in self.shards:
                raise RetrievalError(f"no embedding shard for the {field_name} field")
            return exact_topk(self.shards[field_name], self.encode_query(query), k, self.counter)
        if backend == 'dense-ivf':
            if field_name not in self.ivf:
                raise RetrievalError(f"no IVF index for the {field_name} field")
            return ivf_search(self.ivf[field_name], self.encode_query(query), k, self.nprobe, self.counter)
        raise RetrievalError(f"unknown backend {backend!r}; expected one of {BACKENDS}")

    def retrieve(self, query: Context, mode: str, k: int, backend: str = 'dense-exact') -> RetrievalResult:
        """
        Top-K responses for QC, QS or QR matching

        Args:
            query: Query context (utterances)
            mode: qc, qs or qr
            k: Number of hits
            backend: sparse, dense-exact or dense-ivf
        """
        if mode not in MODE_FIELDS:
            raise RetrievalError(f"unknown mode {mode!r}; expected one of {sorted(MODE_FIELDS)} or dqs")
        start = time.perf_counter()
        hits = self._hits(self._search(query, MODE_FIELDS[mode], k, backend))
        return RetrievalResult(hits, mode, backend, (time.perf_counter() - start) * 1000.0)

    def retrieve_qc(self, query: Context, k: int, backend: str = 'dense-exact') -> RetrievalResult:
        return self.retrieve(query, 'qc', k, backend)

    def retrieve_qs(self, query: Context, k: int, backend: str = 'dense-exact') -> RetrievalResult:
        return self.retrieve(query, 'qs', k, backend)

    def retrieve_qr(self, query: Context, k: int, backend: str = 'dense-exact') -> RetrievalResult:
        return self.retrieve(query, 'qr', k, backend)

    def retrieve_dqs(self, query: Context, k: int, indexes: DqsIndexes, mode: str = 'exact',
                     fused_k: Optional[int] = None, backend: str = 'dense-exact') -> RetrievalResult:
        """
        Decoupled context + λ·response scoring

        Args:
            query: Query context
            k: Number of hits
            indexes: Aligned context and response shards
            mode: exact (every pair) or fused (union of per-side top-K′)
            fused_k: K′ for fused mode (default 10·K)
            backend: dense-exact or dense-ivf for fused candidate generation
        """
        if mode not in DQS_MODES:
            raise RetrievalError(f"unknown DQS mode {mode!r}; expected one of {DQS_MODES}")
        if fused_k is not None and fused_k < 1:
            raise RetrievalError(f"fused_k must be ≥ 1, got {fused_k}")
        start = time.perf_counter()
        q = self.encode_query(query)

        if mode == 'exact':
            ctx_scores = score_all(indexes.context, q)
            resp_scores = score_docs(indexes.response, q, indexes.context.doc_ids.tolist())
            if self.counter is not None:
                self.counter.add(indexes.context.n + indexes.response.n)
            doc_ids = indexes.context.doc_ids
            scores = ctx_scores + indexes.lam * resp_scores
        else:
            k_prime = 10 * k if fused_k is None else fused_k
            candidates = set()
            for shard, ivf in ((indexes.context, indexes.context_ivf), (indexes.response, indexes.response_ivf)):
                if backend == 'dense-ivf':
                    if ivf is None:
                        raise RetrievalError("fused DQS over IVF needs both context and response IVF indexes")
                    ranked = ivf_search(ivf, q, k_prime, self.nprobe, self.counter)
                else:
                    ranked = exact_topk(shard, q, k_prime, self.counter)
                candidates.update(doc_id for doc_id, _ in ranked)
            doc_ids = np.array(sorted(candidates), dtype=np.int64)
            scores = (score_docs(indexes.context, q, doc_ids.tolist())
                      + indexes.lam * score_docs(indexes.response, q, doc_ids.tolist()))

        if len(doc_ids) == 0:
            return RetrievalResult([], 'dqs', backend, (time.perf_counter() - start) * 1000.0)
        order = np.lexsort((doc_ids, -scores))[:k]
        ranked = [(int(doc_ids[i]), float(scores[i])) for i in order]
        return RetrievalResult(self._hits(ranked), 'dqs', backend, (time.perf_counter() - start) * 1000.0)


def fused_recall(fused: RetrievalResult, exact: RetrievalResult) -> float:
    """Share of exact-mode pair ids that fused mode also returned"""
    if not exact.hits:
        return 1.0
    return len(set(fused.pair_ids) & set(exact.pair_ids)) / len(exact.hits)
