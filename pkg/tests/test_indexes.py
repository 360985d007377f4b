"""BM25 inverted index, embedding shards, k-means and IVF"""

import math

import numpy as np
import pytest

from src.core.synthetic import clustered_vectors
from src.intelligence.sparse_index import (
    Bm25Params, SparseIndexError, bm25_score, build_index, load_index, save_index, search_topk,
)
from src.intelligence.vector_store import (
    DenseIndexError, EmbeddingShard, ScanCounter, default_k, default_nprobe, exact_topk, ivf_build,
    ivf_search, kmeans, load_ivf, load_shard, precompute, recall_at_k, save_ivf, save_shard, score_docs,
)
from src.learning.models import MIN_JOINT_LENGTH, ModelConfig, init_student


def brute_force(index, query, params=Bm25Params()):
    scored = [(doc_id, bm25_score(index, query, doc_id, params)) for doc_id in index.doc_lengths]
    scored = [(d, s) for d, s in scored if s != 0.0]
    return sorted(scored, key=lambda item: (-item[1], item[0]))


def random_corpus(rng, n_docs, vocab=30):
    words = [f"w{i}" for i in range(vocab)]
    return [
        (doc_id, [words[j] for j in rng.integers(vocab, size=int(rng.integers(1, 12)))])
        for doc_id in rng.permutation(n_docs * 3)[:n_docs].tolist()
    ]


class TestBm25:

    def test_single_document_reference(self):
        index = build_index([(0, ["cat"])], 'response')
        assert index.idf("cat") == pytest.approx(math.log(4 / 3), abs=1e-12)
        assert bm25_score(index, ["cat"], 0) == pytest.approx(0.287682, abs=1e-6)
        assert abs(bm25_score(index, ["cat"], 0) - math.log(4 / 3)) < 1e-9

    def test_duplicate_query_terms_count_once(self):
        index = build_index([(0, ["cat", "dog"]), (1, ["dog", "dog"])], 'context')
        assert bm25_score(index, ["dog", "dog", "cat"], 0) == bm25_score(index, ["cat", "dog"], 0)

    def test_unmatched_query(self):
        index = build_index([(0, ["cat"])], 'response')
        assert search_topk(index, ["zebra"], 5) == []
        assert bm25_score(index, ["zebra"], 0) == 0.0

    def test_fixture_ranking_matches_brute_force(self):
        docs = [
            (10, "the cat sat on the mat".split()),
            (11, "the dog sat".split()),
            (12, "cats and dogs".split()),
            (13, "a cat a dog a mat".split()),
            (14, "nothing here".split()),
        ]
        index = build_index(docs, 'session')
        query = "cat on mat".split()
        assert search_topk(index, query, 5) == brute_force(index, query)

    def test_random_corpora_match_brute_force(self, rng):
        for _ in range(200):
            index = build_index(random_corpus(rng, int(rng.integers(1, 60))), 'response')
            query = [f"w{j}" for j in rng.integers(30, size=int(rng.integers(1, 6)))]
            k = int(rng.integers(1, 20))
            expected = brute_force(index, query)[:k]
            got = search_topk(index, query, k)
            assert [d for d, _ in got] == [d for d, _ in expected]
            np.testing.assert_allclose([s for _, s in got], [s for _, s in expected], rtol=1e-12)

    def test_ties_broken_by_doc_id(self):
        index = build_index([(5, ["a", "b"]), (2, ["a", "b"]), (9, ["a", "b"])], 'response')
        assert [d for d, _ in search_topk(index, ["a"], 3)] == [2, 5, 9]

    def test_errors(self):
        with pytest.raises(SparseIndexError):
            build_index([(1, ["a"]), (1, ["b"])], 'response')
        with pytest.raises(SparseIndexError):
            build_index([(1, ["a"])], 'title')
        index = build_index([(1, ["a"])], 'response')
        with pytest.raises(SparseIndexError):
            search_topk(index, ["a"], 0)
        with pytest.raises(SparseIndexError):
            bm25_score(index, ["a"], 2)
        with pytest.raises(SparseIndexError):
            Bm25Params(k1=1.2, b=1.5)

    def test_persistence(self, rng, tmp_path):
        index = build_index(random_corpus(rng, 40), 'context')
        save_index(index, tmp_path / "bm25.idx")
        loaded = load_index(tmp_path / "bm25.idx")
        assert loaded.field == 'context'
        assert loaded.doc_lengths == index.doc_lengths
        query = ["w1", "w7", "w19"]
        assert search_topk(loaded, query, 10) == search_topk(index, query, 10)

    def test_truncated_and_foreign_files(self, tmp_path):
        path = tmp_path / "bm25.idx"
        save_index(build_index([(1, ["alpha", "beta"])], 'response'), path)
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(SparseIndexError, match="truncated"):
            load_index(path)
        path.write_bytes(b"NOPE" + data[4:])
        with pytest.raises(SparseIndexError, match="not a BM25 index"):
            load_index(path)


class TestExactSearch:

    def test_matches_full_sort(self, rng):
        shard = EmbeddingShard(np.arange(1000), rng.standard_normal((1000, 16)))
        for _ in range(5):
            query = rng.standard_normal(16)
            scores = (shard.vectors.astype(np.float64) * query).sum(axis=1)
            order = sorted(range(1000), key=lambda i: (-scores[i], i))[:50]
            assert [d for d, _ in exact_topk(shard, query, 50)] == order

    def test_ties_by_doc_id(self):
        shard = EmbeddingShard([7, 3, 5], np.ones((3, 2)))
        assert [d for d, _ in exact_topk(shard, [1.0, 1.0], 3)] == [3, 5, 7]

    def test_errors(self):
        shard = EmbeddingShard([1, 2], np.eye(2))
        with pytest.raises(DenseIndexError):
            exact_topk(shard, [1.0, 0.0], 0)
        with pytest.raises(DenseIndexError):
            exact_topk(shard, [1.0, 0.0, 0.0], 1)
        with pytest.raises(DenseIndexError):
            EmbeddingShard([1, 1], np.eye(2))
        with pytest.raises(DenseIndexError):
            score_docs(shard, [1.0, 0.0], [3])

    def test_precompute_matches_encoder(self):
        model = init_student(ModelConfig(vocab_size=20, d_e=8, d=6, max_len=MIN_JOINT_LENGTH), 'qr')
        docs = [(100 + i, [2 + i, 3 + i, 4]) for i in range(10)]
        shard = precompute(model.tower('response'), docs, workers=2, show_progress=False)
        assert shard.doc_ids.tolist() == [d for d, _ in docs]
        for row, (_, tokens) in enumerate(docs):
            np.testing.assert_allclose(shard.vectors[row], model.encode_response(tokens).data[0], rtol=1e-6)

    def test_precompute_names_bad_doc(self):
        model = init_student(ModelConfig(vocab_size=5, d_e=4, d=4, max_len=MIN_JOINT_LENGTH), 'qr')
        with pytest.raises(DenseIndexError, match="doc 42"):
            precompute(model.tower('response'), [(41, [2]), (42, [9])], show_progress=False)

    def test_shard_persistence(self, rng, tmp_path):
        shard = EmbeddingShard(np.arange(30) * 3, rng.standard_normal((30, 5)))
        save_shard(shard, tmp_path / "db.emb")
        loaded = load_shard(tmp_path / "db.emb")
        np.testing.assert_array_equal(loaded.doc_ids, shard.doc_ids)
        np.testing.assert_array_equal(loaded.vectors, shard.vectors)
        (tmp_path / "db.emb").write_bytes((tmp_path / "db.emb").read_bytes()[:-8])
        with pytest.raises(DenseIndexError, match="truncated"):
            load_shard(tmp_path / "db.emb")


class TestKMeans:

    def test_separated_blobs(self, rng):
        left = rng.standard_normal((50, 2)) * 0.1 + [-10.0, 0.0]
        right = rng.standard_normal((60, 2)) * 0.1 + [10.0, 0.0]
        points = np.vstack([left, right])
        result = kmeans(points, 2, iters=20, seed=0)
        centroids = sorted(result.centroids.tolist())
        np.testing.assert_allclose(centroids[0], left.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(centroids[1], right.mean(axis=0), atol=1e-9)

    def test_one_cluster_per_point(self, rng):
        points = rng.standard_normal((6, 3))
        result = kmeans(points, 6, seed=1)
        assert result.inertia == pytest.approx(0.0, abs=1e-18)
        assert sorted(result.labels.tolist()) == list(range(6))

    def test_inertia_never_rises(self):
        points, _ = clustered_vectors(500, 4, 8, seed=2, spread=0.4)
        history = kmeans(points, 8, iters=15, seed=0).history
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_bad_k(self):
        with pytest.raises(DenseIndexError):
            kmeans(np.zeros((3, 2)), 4)
        with pytest.raises(DenseIndexError):
            kmeans(np.zeros((3, 2)), 0)


class TestIvf:

    @pytest.fixture
    def shard(self):
        vectors, _ = clustered_vectors(2000, 8, 16, seed=5, spread=0.3)
        return EmbeddingShard(np.arange(2000) + 1000, vectors)

    def test_defaults(self):
        assert default_k(2000) == 45
        assert default_nprobe(45) == 7
        assert default_k(1) == 1

    def test_lists_partition_the_shard(self, shard):
        index = ivf_build(shard, k=20, seed=0)
        ids = np.concatenate([lst.doc_ids for lst in index.lists])
        assert sorted(ids.tolist()) == shard.doc_ids.tolist()
        assert sum(index.list_sizes()) == shard.n

    def test_full_probe_equals_exact(self, shard, rng):
        index = ivf_build(shard, k=20, seed=0)
        for _ in range(10):
            query = rng.standard_normal(8)
            assert ivf_search(index, query, 100, nprobe=20) == exact_topk(shard, query, 100)

    def test_recall_non_decreasing_in_nprobe(self, shard, rng):
        index = ivf_build(shard, k=20, seed=0)
        queries = rng.standard_normal((20, 8))
        curve = []
        for nprobe in range(1, 21):
            recalls = [recall_at_k(ivf_search(index, q, 100, nprobe=nprobe), exact_topk(shard, q, 100)) for q in queries]
            curve.append(float(np.mean(recalls)))
        assert all(b >= a for a, b in zip(curve, curve[1:]))
        assert curve[-1] == 1.0

    def test_small_nprobe_scans_less(self, shard, rng):
        index = ivf_build(shard, k=20, seed=0)
        query = rng.standard_normal(8)
        approx, exact = ScanCounter(), ScanCounter()
        ivf_search(index, query, 10, nprobe=2, counter=approx)
        exact_topk(shard, query, 10, counter=exact)
        assert approx.scanned < exact.scanned == shard.n
        assert approx.searches == exact.searches == 1

    def test_nprobe_out_of_range(self, shard):
        index = ivf_build(shard, k=10, seed=0)
        with pytest.raises(DenseIndexError):
            ivf_search(index, np.ones(8), 5, nprobe=11)
        with pytest.raises(DenseIndexError):
            ivf_build(shard, k=10, nprobe=11)

    def test_zero_is_not_a_default(self, shard):
        index = ivf_build(shard, k=5, seed=0)
        with pytest.raises(DenseIndexError):
            ivf_search(index, shard.vectors[0], 5, nprobe=0)
        with pytest.raises(DenseIndexError):
            ivf_build(shard, k=5, nprobe=0)
        with pytest.raises(DenseIndexError):
            ivf_build(shard, k=0)

    def test_persistence(self, shard, tmp_path, rng):
        index = ivf_build(shard, k=12, seed=3)
        save_ivf(index, tmp_path / "db.ivf")
        loaded = load_ivf(tmp_path / "db.ivf")
        assert loaded.nprobe == index.nprobe
        np.testing.assert_array_equal(loaded.centroids, index.centroids)
        query = rng.standard_normal(8)
        assert ivf_search(loaded, query, 20) == ivf_search(index, query, 20)

    @pytest.mark.slow
    def test_recall_on_large_clustered_set(self):
        vectors, _ = clustered_vectors(50000, 16, 200, seed=0, spread=0.15)
        shard = EmbeddingShard(np.arange(50000), vectors)
        index = ivf_build(shard, seed=0)
        queries, _ = clustered_vectors(20, 16, 200, seed=0, spread=0.15)
        nprobe = math.ceil(index.k / 4)
        recalls = [recall_at_k(ivf_search(index, q, 100, nprobe=nprobe), exact_topk(shard, q, 100)) for q in queries]
        assert np.mean(recalls) >= 0.9
