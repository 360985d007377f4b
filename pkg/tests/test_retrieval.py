"""Response retrieval over sparse, dense and IVF backends, and DQS scoring"""

import numpy as np
import pytest

from src.core.corpus import DialoguePair, filter_pairs
from src.core.synthetic import toy_corpus
from src.intelligence.query_engine import (
    DqsIndexes, ResponseRetriever, RetrievalError, RetrievalResult, field_ids, field_words, fused_recall,
)
from src.intelligence.sparse_index import build_index
from src.intelligence.vector_store import EmbeddingShard, ScanCounter, exact_topk, ivf_build, precompute
from src.learning.models import MIN_JOINT_LENGTH, ModelConfig, init_student
from src.utils.text import Vocabulary, tokenize


@pytest.fixture(scope="module")
def database():
    return filter_pairs(toy_corpus(40, seed=1))


@pytest.fixture(scope="module")
def vocab(database):
    streams = [tokenize(u) for p in database for u in list(p.context) + [p.response]]
    return Vocabulary.build(streams, min_freq=1)


@pytest.fixture(scope="module")
def student(vocab):
    return init_student(ModelConfig(vocab_size=vocab.size, d_e=8, d=8, max_len=MIN_JOINT_LENGTH, seed=2), 'dqs')


@pytest.fixture(scope="module")
def shards(database, vocab, student):
    return {
        field: precompute(student.tower(field), [(p.id, field_ids(p, field, vocab)) for p in database],
                          show_progress=False)
        for field in ('context', 'response')
    }


@pytest.fixture
def retriever(database, vocab, student, shards):
    sparse = {field: build_index([(p.id, field_words(p, field)) for p in database], field)
              for field in ('context', 'session', 'response')}
    ivf = {'context': ivf_build(shards['context'], k=6, seed=0)}
    return ResponseRetriever(database, vocab=vocab, student=student, sparse=sparse, shards=shards, ivf=ivf)


class TestFieldViews:

    def test_session_words_cover_context_and_response(self):
        pair = DialoguePair(1, ("Hello there", "how are you"), "Fine, thanks")
        assert field_words(pair, 'session') == ["hello", "there", "how", "are", "you", "fine", "thanks"]
        assert field_words(pair, 'response') == ["fine", "thanks"]

    def test_unknown_field(self):
        with pytest.raises(RetrievalError):
            field_words(DialoguePair(1, ("a",), "b"), 'title')


class TestSingleField:

    def test_sparse_hits_map_to_pairs(self, retriever, database):
        query = database[0].context
        result = retriever.retrieve(query, 'qc', 5, backend='sparse')
        assert result.pair_ids[0] == database[0].id
        assert result.responses[0] == database[0].response
        assert len(result.hits) <= 5

    def test_sparse_qs_and_qr(self, retriever, database):
        query = database[3].context
        assert retriever.retrieve_qs(query, 3, backend='sparse').hits
        assert retriever.retrieve_qr(query, 3, backend='sparse').mode == 'qr'

    def test_dense_matches_exact_topk(self, retriever, database, student, vocab, shards):
        query = database[5].context
        result = retriever.retrieve_qc(query, 10)
        q = student.query_tower.embed(field_ids(database[5], 'context', vocab))
        assert result.pair_ids == [d for d, _ in exact_topk(shards['context'], q, 10)]

    def test_duplicate_responses_kept(self, retriever, database):
        result = retriever.retrieve(database[0].context, 'qc', len(database), backend='dense-exact')
        assert len(result.hits) == len(database)
        assert len(set(result.responses)) < len(result.responses)

    def test_ivf_counts_scans(self, database, vocab, student, shards):
        counter = ScanCounter()
        retriever = ResponseRetriever(database, vocab=vocab, student=student, shards=shards,
                                      ivf={'context': ivf_build(shards['context'], k=6, seed=0)},
                                      nprobe=1, counter=counter)
        retriever.retrieve(database[2].context, 'qc', 5, backend='dense-ivf')
        assert counter.searches == 1
        assert counter.scanned < len(database)

    def test_missing_index_and_unknowns(self, retriever, database):
        query = database[0].context
        with pytest.raises(RetrievalError, match="no IVF index"):
            retriever.retrieve(query, 'qr', 5, backend='dense-ivf')
        with pytest.raises(RetrievalError, match="unknown backend"):
            retriever.retrieve(query, 'qc', 5, backend='faiss')
        with pytest.raises(RetrievalError, match="unknown mode"):
            retriever.retrieve(query, 'qx', 5)

    def test_dense_needs_student(self, database):
        with pytest.raises(RetrievalError, match="student"):
            ResponseRetriever(database).encode_query(database[0].context)

    def test_result_serialisation_without_timing(self, retriever, database):
        result = retriever.retrieve(database[0].context, 'qc', 3, backend='sparse')
        row = result.to_dict(query_id=7, include_timing=False)
        assert row['elapsed_ms'] is None
        back = RetrievalResult.from_dict(row, backend='sparse')
        assert back.pair_ids == result.pair_ids
        assert back.responses == result.responses


class TestDqs:

    def test_unit_lambda_sums_context_and_response(self, retriever, database, student, vocab, shards):
        query = database[4].context
        indexes = DqsIndexes(shards['context'], shards['response'], lam=1.0)
        result = retriever.retrieve_dqs(query, len(database), indexes)
        q = student.query_tower.embed(field_ids(database[4], 'context', vocab))
        ctx = dict(exact_topk(shards['context'], q, len(database)))
        resp = dict(exact_topk(shards['response'], q, len(database)))
        for hit in result.hits:
            assert abs(hit.score - (ctx[hit.pair_id] + resp[hit.pair_id])) < 1e-12

    def test_zero_lambda_ranks_like_qc(self, retriever, database, shards):
        query = database[7].context
        indexes = DqsIndexes(shards['context'], shards['response'], lam=0.0)
        dqs = retriever.retrieve_dqs(query, 20, indexes)
        qc = retriever.retrieve(query, 'qc', 20)
        assert dqs.pair_ids == qc.pair_ids

    def test_fused_with_full_candidate_list_equals_exact(self, retriever, database, shards):
        indexes = DqsIndexes(shards['context'], shards['response'], lam=0.7)
        for pair in database[:5]:
            exact = retriever.retrieve_dqs(pair.context, 10, indexes, mode='exact')
            fused = retriever.retrieve_dqs(pair.context, 10, indexes, mode='fused', fused_k=len(database))
            assert fused.pair_ids == exact.pair_ids
            assert [h.score for h in fused.hits] == [h.score for h in exact.hits]
            assert fused_recall(fused, exact) == 1.0

    def test_fused_recall_grows_with_candidates(self, retriever, database, shards):
        indexes = DqsIndexes(shards['context'], shards['response'], lam=1.0)
        query = database[9].context
        exact = retriever.retrieve_dqs(query, 10, indexes)
        recalls = [fused_recall(retriever.retrieve_dqs(query, 10, indexes, mode='fused', fused_k=kp), exact)
                   for kp in (10, 20, 40, len(database))]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == 1.0

    def test_fused_candidate_count_must_be_positive(self, retriever, database, shards):
        indexes = DqsIndexes(shards['context'], shards['response'])
        with pytest.raises(RetrievalError, match="fused_k"):
            retriever.retrieve_dqs(database[0].context, 5, indexes, mode='fused', fused_k=0)

    def test_fused_ivf_needs_both_indexes(self, retriever, database, shards):
        indexes = DqsIndexes(shards['context'], shards['response'])
        with pytest.raises(RetrievalError, match="IVF"):
            retriever.retrieve_dqs(database[0].context, 5, indexes, mode='fused', backend='dense-ivf')

    def test_misaligned_shards(self, shards):
        response = shards['response']
        shifted = EmbeddingShard(response.doc_ids + 10_000, response.vectors)
        with pytest.raises(RetrievalError, match="misaligned"):
            DqsIndexes(shards['context'], shifted)

    def test_dimension_mismatch(self, shards):
        context = shards['context']
        narrow = EmbeddingShard(context.doc_ids, np.zeros((context.n, 3)))
        with pytest.raises(RetrievalError, match="dimensions"):
            DqsIndexes(context, narrow)

    def test_unknown_dqs_mode(self, retriever, database, shards):
        with pytest.raises(RetrievalError):
            retriever.retrieve_dqs(database[0].context, 5, DqsIndexes(shards['context'], shards['response']),
                                   mode='approx')
