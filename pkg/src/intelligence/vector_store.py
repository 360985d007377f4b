#!/usr/bin/env python3
"""
Vector Store - offline candidate embeddings with exact and IVF search

KEY FEATURES:
1. Precomputed shards - candidates are embedded once, queries online
2. Exact search - exhaustive dot product, f64 accumulation over f32 storage
3. k-means coarse quantizer - k-means++ seeding, Lloyd iterations
4. IVF search - probe the nprobe centroids with the highest dot product
5. Scan accounting - every search can report how many vectors it scored

British English throughout.
"""

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
from tqdm import tqdm

from src.learning.models import ModelError, TowerEncoder

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"EMB1"
IVF_MAGIC = b"IVF1"
DEFAULT_KMEANS_ITERS = 10


class DenseIndexError(ValueError):
    """Bad shard, dimension mismatch or unreadable index file"""


@dataclass
class ScanCounter:
    """Number of vectors scored across searches"""
    scanned: int = 0
    searches: int = 0

    def add(self, count: int):
        self.scanned += count
        self.searches += 1


@dataclass
class EmbeddingShard:
    """n candidate embeddings (f32) aligned with their doc ids"""
    doc_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.doc_ids = np.asarray(self.doc_ids, dtype=np.int64).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise DenseIndexError(f"vectors must be n×d, got shape {self.vectors.shape}")
        if self.vectors.shape[0] != len(self.doc_ids):
            raise DenseIndexError(f"{len(self.doc_ids)} doc ids for {self.vectors.shape[0]} vectors")
        if len(np.unique(self.doc_ids)) != len(self.doc_ids):
            raise DenseIndexError("doc ids in a shard must be unique")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_of(self) -> dict:
        return {int(doc_id): row for row, doc_id in enumerate(self.doc_ids)}

    def subset(self, rows: np.ndarray) -> "EmbeddingShard":
        return EmbeddingShard(self.doc_ids[rows], self.vectors[rows])


def _scores(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise dot products in f64; each row reduces identically whatever the batch"""
    return (vectors.astype(np.float64) * query).sum(axis=1)


def _rank(doc_ids: np.ndarray, scores: np.ndarray, k: int) -> List[Tuple[int, float]]:
    order = np.lexsort((doc_ids, -scores))[:k]
    return [(int(doc_ids[i]), float(scores[i])) for i in order]


def _check_query(query, dim: int) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != dim:
        raise DenseIndexError(f"query dimension {query.shape[0]} does not match index dimension {dim}")
    return query


def precompute(encoder: TowerEncoder, docs: Sequence[Tuple[int, Sequence[int]]], workers: int = 1,
               show_progress: bool = True) -> EmbeddingShard:
    """
    Embed every candidate with a frozen tower

    Args:
        encoder: Candidate tower
        docs: (doc_id, token ids) in output order
        workers: Threads (the encoder is read-only)

    Returns:
        EmbeddingShard with rows in input order
    """
    def embed(doc):
        doc_id, tokens = doc
        try:
            return encoder.embed(tokens)
        except ModelError as e:
            raise DenseIndexError(f"doc {doc_id}: {e}")

    progress = dict(total=len(docs), desc=f"Embedding {encoder.role}", disable=None if show_progress else True)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(embed, docs), **progress))
    else:
        rows = [embed(doc) for doc in tqdm(docs, **progress)]

    vectors = np.vstack(rows) if rows else np.zeros((0, encoder.dim))
    return EmbeddingShard([doc_id for doc_id, _ in docs], vectors)


def exact_topk(shard: EmbeddingShard, query_vec, k: int,
               counter: Optional[ScanCounter] = None) -> List[Tuple[int, float]]:
    """Exhaustive top-K by dot product, ties by ascending doc id"""
    if k < 1:
        raise DenseIndexError(f"K must be ≥ 1, got {k}")
    query = _check_query(query_vec, shard.dim)
    if counter is not None:
        counter.add(shard.n)
    return _rank(shard.doc_ids, _scores(shard.vectors, query), k)


def score_all(shard: EmbeddingShard, query_vec) -> np.ndarray:
    """Dot product of every row, aligned with shard.doc_ids"""
    return _scores(shard.vectors, _check_query(query_vec, shard.dim))


def score_docs(shard: EmbeddingShard, query_vec, doc_ids: Sequence[int]) -> np.ndarray:
    """Dot products for specific doc ids"""
    query = _check_query(query_vec, shard.dim)
    rows = shard.row_of()
    missing = [d for d in doc_ids if d not in rows]
    if missing:
        raise DenseIndexError(f"doc ids not in shard: {missing[:5]}")
    return _scores(shard.vectors[[rows[d] for d in doc_ids]], query)


# ═══════════════════════════════════════════════════════════════════
# K-MEANS
# ═══════════════════════════════════════════════════════════════════

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: List[float] = field(default_factory=list)


def _sq_distances(points: np.ndarray, centroids: np.ndarray, chunk_elements: int = 1 << 22) -> np.ndarray:
    """Exact squared distances n×k, computed in row chunks to bound memory"""
    k, d = centroids.shape
    step = max(1, chunk_elements // max(1, k * d))
    out = np.empty((points.shape[0], k))
    for start in range(0, points.shape[0], step):
        chunk = points[start:start + step]
        out[start:start + step] = ((chunk[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        closest = np.minimum(closest, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(vectors, k: int, iters: int = DEFAULT_KMEANS_ITERS, seed: int = 0) -> KMeansResult:
    """
    k-means++ seeding followed by Lloyd iterations

    Empty clusters are reseeded to the point farthest from its centroid.
    Stops early once assignments no longer change.

    Raises:
        DenseIndexError if k is not within [1, n]
    """
    points = np.asarray(vectors, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise DenseIndexError(f"k must be within [1, n={n}], got {k}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels = np.full(n, -1)
    history: List[float] = []

    for _ in range(max(1, iters)):
        dist = _sq_distances(points, centroids)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
            else:
                own = ((points - centroids[labels]) ** 2).sum(axis=1)
                far = int(own.argmax())
                centroids[c] = points[far]
                labels[far] = c

    dist = _sq_distances(points, centroids)
    labels = dist.argmin(axis=1)
    inertia = float(dist[np.arange(n), labels].sum())
    if not history or inertia != history[-1]:
        history.append(inertia)
    return KMeansResult(centroids=centroids, labels=labels, inertia=inertia, history=history)


# ═══════════════════════════════════════════════════════════════════
# IVF
# ═══════════════════════════════════════════════════════════════════

@dataclass
class IvfIndex:
    """Coarse centroids and one posting shard per centroid"""
    centroids: np.ndarray
    lists: List[EmbeddingShard]
    nprobe: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def n(self) -> int:
        return sum(lst.n for lst in self.lists)

    def list_sizes(self) -> List[int]:
        return [lst.n for lst in self.lists]


def default_k(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def default_nprobe(k: int) -> int:
    return max(1, math.ceil(math.sqrt(k)))


def assign(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the centroid with the highest dot product (lowest index on ties)"""
    return (np.asarray(vectors, dtype=np.float64) @ centroids.T).argmax(axis=1)


def ivf_build(shard: EmbeddingShard, k: Optional[int] = None, seed: int = 0,
              iters: int = DEFAULT_KMEANS_ITERS, nprobe: Optional[int] = None) -> IvfIndex:
    """
    Cluster a shard and split it into posting lists

    Args:
        shard: Candidate embeddings
        k: Number of lists (default ⌈√n⌉)
        seed: k-means seed
        nprobe: Default probes stored with the index (default ⌈√k⌉)
    """
    if shard.n == 0:
        raise DenseIndexError("cannot build an IVF index over an empty shard")
    if k is None:
        k = default_k(shard.n)
    result = kmeans(shard.vectors, k, iters=iters, seed=seed)
    labels = assign(shard.vectors, result.centroids)
    lists = [shard.subset(np.flatnonzero(labels == c)) for c in range(k)]

    if nprobe is None:
        nprobe = default_nprobe(k)
    if not 1 <= nprobe <= k:
        raise DenseIndexError(f"nprobe must be within [1, k={k}], got {nprobe}")

    logger.info(f"IVF index: n={shard.n}, k={k}, nprobe={nprobe}, inertia {result.inertia:.4f}")
    return IvfIndex(centroids=result.centroids, lists=lists, nprobe=nprobe)


def ivf_search(index: IvfIndex, query_vec, k: int, nprobe: Optional[int] = None,
               counter: Optional[ScanCounter] = None) -> List[Tuple[int, float]]:
    """
    Approximate top-K: exact scoring inside the nprobe best-matching lists

    Raises:
        DenseIndexError if nprobe is not within [1, k]
    """
    if k < 1:
        raise DenseIndexError(f"K must be ≥ 1, got {k}")
    if nprobe is None:
        nprobe = index.nprobe
    if not 1 <= nprobe <= index.k:
        raise DenseIndexError(f"nprobe must be within [1, k={index.k}], got {nprobe}")
    query = _check_query(query_vec, index.dim)

    centroid_scores = index.centroids @ query
    probed = np.lexsort((np.arange(index.k), -centroid_scores))[:nprobe]
    chosen = [index.lists[c] for c in probed if index.lists[c].n]

    scanned = sum(lst.n for lst in chosen)
    if counter is not None:
        counter.add(scanned)
    if not chosen:
        return []

    doc_ids = np.concatenate([lst.doc_ids for lst in chosen])
    scores = np.concatenate([_scores(lst.vectors, query) for lst in chosen])
    return _rank(doc_ids, scores, k)


def recall_at_k(approx: Sequence[Tuple[int, float]], exact: Sequence[Tuple[int, float]]) -> float:
    """Share of the exact top-K doc ids the approximate result recovered"""
    if not exact:
        return 1.0
    return len({d for d, _ in approx} & {d for d, _ in exact}) / len(exact)


# ═══════════════════════════════════════════════════════════════════
# PERSISTENCE
# ═══════════════════════════════════════════════════════════════════

def _shard_bytes(shard: EmbeddingShard) -> bytes:
    return (
        struct.pack('<QI', shard.n, shard.dim)
        + shard.doc_ids.astype('<i8').tobytes()
        + shard.vectors.astype('<f4').tobytes()
    )


def _read_shard(data: bytes, offset: int, path: Path) -> Tuple[EmbeddingShard, int]:
    header = struct.calcsize('<QI')
    if offset + header > len(data):
        raise DenseIndexError(f"{path}: truncated file")
    n, d = struct.unpack_from('<QI', data, offset)
    offset += header
    end = offset + 8 * n + 4 * n * d
    if end > len(data):
        raise DenseIndexError(f"{path}: truncated file (expected {n}×{d} vectors)")
    ids = np.frombuffer(data, dtype='<i8', count=n, offset=offset)
    vectors = np.frombuffer(data, dtype='<f4', count=n * d, offset=offset + 8 * n).reshape(n, d)
    return EmbeddingShard(ids.copy(), vectors.copy()), end


def save_shard(shard: EmbeddingShard, path: Path):
    """"EMB1" u64 n u32 d, n × i64 doc id, n·d × f32 (little endian)"""
    Path(path).write_bytes(SHARD_MAGIC + _shard_bytes(shard))
    logger.info(f"Saved embedding shard ({shard.n}×{shard.dim}): {path}")


def load_shard(path: Path) -> EmbeddingShard:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != SHARD_MAGIC:
        raise DenseIndexError(f"{path}: not an embedding shard (magic {data[:4]!r})")
    shard, _ = _read_shard(data, 4, path)
    return shard


def save_ivf(index: IvfIndex, path: Path):
    """"IVF1" u32 k u32 d u32 nprobe, k·d × f64 centroids, then k shards"""
    parts = [IVF_MAGIC, struct.pack('<III', index.k, index.dim, index.nprobe),
             index.centroids.astype('<f8').tobytes()]
    parts.extend(_shard_bytes(lst) for lst in index.lists)
    Path(path).write_bytes(b"".join(parts))
    logger.info(f"Saved IVF index (k={index.k}): {path}")


def load_ivf(path: Path) -> IvfIndex:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != IVF_MAGIC:
        raise DenseIndexError(f"{path}: not an IVF index (magic {data[:4]!r})")
    if len(data) < 16:
        raise DenseIndexError(f"{path}: truncated file")
    k, d, nprobe = struct.unpack_from('<III', data, 4)
    offset = 16
    if offset + 8 * k * d > len(data):
        raise DenseIndexError(f"{path}: truncated centroids")
    centroids = np.frombuffer(data, dtype='<f8', count=k * d, offset=offset).reshape(k, d).copy()
    offset += 8 * k * d
    lists = []
    for _ in range(k):
        shard, offset = _read_shard(data, offset, path)
        lists.append(shard)
    return IvfIndex(centroids=centroids, lists=lists, nprobe=nprobe)
