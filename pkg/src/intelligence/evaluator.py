#!/usr/bin/env python3
"""
Evaluator - retrieval quality, database-size sweeps and latency

Metrics:
- Coverage@K: share of MC queries whose gold response is in the top K
- Perplexity@K (proxy): mean bigram-LM perplexity of the top-K responses given the query
- Relevance@K (proxy): mean σ(teacher logit) of the top-K responses
- Latency: wall-clock per batch of 32 queries, warm-up excluded

Perplexity and Relevance are proxies and every report says so.

British English throughout.
"""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.core.corpus import Context, DialoguePair, context_ids, response_ids
from src.intelligence.language_model import ConditionalLm
from src.intelligence.query_engine import RetrievalResult
from src.intelligence.vector_store import ScanCounter
from src.learning.models import CrossScorer
from src.utils.text import Vocabulary, normalise

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 20, 100, 500)
BENCH_BATCH_SIZE = 32


class EvaluationError(ValueError):
    """Bad K list, non-nested sweep sizes or mismatched inputs"""


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _check_ks(ks: Sequence[int]) -> List[int]:
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise EvaluationError("K list is empty")
    if ks[0] < 1:
        raise EvaluationError(f"every K must be ≥ 1, got {ks[0]}")
    return ks


# ═══════════════════════════════════════════════════════════════════
# METRICS
# ═══════════════════════════════════════════════════════════════════

def coverage_at_k(results: Sequence[RetrievalResult], gold_responses: Sequence[str], ks: Sequence[int],
                  strict: bool = False) -> Dict[int, float]:
    """
    Fraction of queries whose gold response appears among the top-K hits

    Args:
        results: One result per query
        gold_responses: Gold response per query
        ks: K values
        strict: Compare raw strings instead of normalised tokens
    """
    ks = _check_ks(ks)
    if len(results) != len(gold_responses):
        raise EvaluationError(f"{len(results)} results for {len(gold_responses)} gold responses")
    if not results:
        return {k: 0.0 for k in ks}

    key = (lambda s: s) if strict else normalise
    first_hit = []
    for result, gold in zip(results, gold_responses):
        target = key(gold)
        rank = next((i + 1 for i, resp in enumerate(result.responses) if key(resp) == target), None)
        first_hit.append(rank)

    return {k: sum(1 for r in first_hit if r is not None and r <= k) / len(results) for k in ks}


def _perplexities(lm: ConditionalLm, query: Context, responses: Sequence[str], vocab: Vocabulary) -> Tuple[List[float], int]:
    history = context_ids(query, vocab)
    values, skipped = [], 0
    for response in responses:
        tokens = response_ids(response, vocab)
        if not tokens:
            skipped += 1
            continue
        values.append(lm.perplexity(history, tokens))
    return values, skipped


def proxy_perplexity_at_k(lm: ConditionalLm, query: Context, topk_responses: Sequence[str],
                          vocab: Vocabulary) -> float:
    """Mean conditional perplexity of the retrieved responses (empty responses skipped)"""
    values, skipped = _perplexities(lm, query, topk_responses, vocab)
    if skipped:
        logger.warning(f"Skipped {skipped} empty response(s) in perplexity")
    return float(np.mean(values)) if values else float('nan')


def proxy_relevance_at_k(teacher: CrossScorer, query: Context, topk_responses: Sequence[str],
                         vocab: Vocabulary) -> float:
    """Mean σ(teacher logit) of the retrieved responses"""
    if not topk_responses:
        return float('nan')
    q = context_ids(query, vocab)
    return float(np.mean([_sigmoid(teacher.score(q, response_ids(r, vocab)).item()) for r in topk_responses]))


# ═══════════════════════════════════════════════════════════════════
# REPORT
# ═══════════════════════════════════════════════════════════════════

@dataclass
class EvalReport:
    """Per-K metrics plus the configuration that produced them"""
    coverage: Dict[int, float] = field(default_factory=dict)
    ppl: Dict[int, float] = field(default_factory=dict)
    rel: Dict[int, float] = field(default_factory=dict)
    ppl_sc: Dict[int, float] = field(default_factory=dict)
    rel_sc: Dict[int, float] = field(default_factory=dict)
    latency: Dict = field(default_factory=dict)
    skipped_empty: int = 0
    queries: Dict[str, int] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    proxy: bool = True

    def to_dict(self) -> Dict:
        def keyed(metric: Dict[int, float]) -> Dict[str, Optional[float]]:
            return {str(k): (None if v is None or math.isnan(v) else v) for k, v in sorted(metric.items())}

        return {
            'coverage': keyed(self.coverage),
            'ppl': keyed(self.ppl),
            'rel': keyed(self.rel),
            'ppl_sc': keyed(self.ppl_sc),
            'rel_sc': keyed(self.rel_sc),
            'latency': self.latency,
            'skipped_empty': self.skipped_empty,
            'queries': self.queries,
            'config': self.config,
            'proxy': self.proxy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Path):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "EvalReport":
        with open(path, 'r', encoding='utf-8') as f:
            row = json.load(f)

        def unkeyed(metric: Dict) -> Dict[int, float]:
            return {int(k): (float('nan') if v is None else v) for k, v in metric.items()}

        return cls(
            coverage=unkeyed(row.get('coverage', {})),
            ppl=unkeyed(row.get('ppl', {})),
            rel=unkeyed(row.get('rel', {})),
            ppl_sc=unkeyed(row.get('ppl_sc', {})),
            rel_sc=unkeyed(row.get('rel_sc', {})),
            latency=row.get('latency', {}),
            skipped_empty=row.get('skipped_empty', 0),
            queries=row.get('queries', {}),
            config=row.get('config', {}),
            proxy=row.get('proxy', True),
        )

    def table(self) -> pd.DataFrame:
        ks = sorted(set(self.coverage) | set(self.ppl) | set(self.rel))
        frame = pd.DataFrame({
            'Coverage@K': [self.coverage.get(k) for k in ks],
            'PPL@K (proxy, MC)': [self.ppl.get(k) for k in ks],
            'Rel@K (proxy, MC)': [self.rel.get(k) for k in ks],
            'PPL@K (proxy, SC)': [self.ppl_sc.get(k) for k in ks],
            'Rel@K (proxy, SC)': [self.rel_sc.get(k) for k in ks],
        }, index=pd.Index(ks, name='K'))
        return frame

    def render(self) -> str:
        header = "Perplexity and Relevance are PROXIES (bigram LM, trained teacher)"
        return header + "\n" + self.table().to_string(float_format=lambda v: f"{v:.4f}")


def _quality(results: Sequence[RetrievalResult], queries: Sequence[Context], ks: Sequence[int],
             lm: Optional[ConditionalLm], teacher: Optional[CrossScorer], vocab: Vocabulary,
             workers: int) -> Tuple[Dict[int, float], Dict[int, float], int]:
    """Mean proxy perplexity and relevance per K"""
    def per_query(args):
        result, query = args
        ppl, rel, skipped = {}, {}, 0
        for k in ks:
            top = result.responses[:k]
            if lm is not None:
                values, skip = _perplexities(lm, query, top, vocab)
                ppl[k] = float(np.mean(values)) if values else float('nan')
                if k == ks[-1]:
                    skipped = skip
            if teacher is not None:
                rel[k] = proxy_relevance_at_k(teacher, query, top, vocab)
        return ppl, rel, skipped

    items = list(zip(results, queries))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(per_query, items))
    else:
        rows = [per_query(item) for item in tqdm(items, desc="Scoring proxies", leave=False, disable=None)]

    def mean_of(which: int) -> Dict[int, float]:
        out = {}
        for k in ks:
            values = [row[which][k] for row in rows if k in row[which] and not math.isnan(row[which][k])]
            out[k] = float(np.mean(values)) if values else float('nan')
        return out

    ppl = mean_of(0) if lm is not None else {}
    rel = mean_of(1) if teacher is not None else {}
    return ppl, rel, sum(row[2] for row in rows)


def evaluate(mc_results: Sequence[RetrievalResult], mc_pairs: Sequence[DialoguePair],
             sc_results: Sequence[RetrievalResult], sc_pairs: Sequence[DialoguePair],
             ks: Sequence[int], vocab: Vocabulary, lm: Optional[ConditionalLm] = None,
             teacher: Optional[CrossScorer] = None, config: Optional[Dict] = None,
             workers: int = 1, strict: bool = False) -> EvalReport:
    """
    Coverage on MC; proxy perplexity and relevance on MC and SC

    Args:
        mc_results / sc_results: Retrieval results aligned with the test pairs
        mc_pairs / sc_pairs: Test pairs (context = query, response = gold)
        ks: K values
        vocab: Vocabulary for the proxies
        lm: Bigram LM (perplexity skipped when None)
        teacher: Response teacher (relevance skipped when None)
        config: Echoed into the report
    """
    ks = _check_ks(ks)
    report = EvalReport(config=config or {}, queries={'mc': len(mc_pairs), 'sc': len(sc_pairs)})
    report.coverage = coverage_at_k(mc_results, [p.response for p in mc_pairs], ks, strict=strict)

    report.ppl, report.rel, skipped_mc = _quality(mc_results, [p.context for p in mc_pairs], ks, lm, teacher, vocab, workers)
    report.ppl_sc, report.rel_sc, skipped_sc = _quality(sc_results, [p.context for p in sc_pairs], ks, lm, teacher, vocab, workers)
    report.skipped_empty = skipped_mc + skipped_sc
    if report.skipped_empty:
        logger.warning(f"Skipped {report.skipped_empty} empty response(s) in perplexity")
    return report


def report_gains(base: EvalReport, other: EvalReport) -> pd.DataFrame:
    """Per-K differences other − base for every metric both reports carry"""
    rows = {}
    for name in ('coverage', 'ppl', 'rel', 'ppl_sc', 'rel_sc'):
        a, b = getattr(base, name), getattr(other, name)
        for k in sorted(set(a) & set(b)):
            rows.setdefault(k, {})[name] = b[k] - a[k]
    return pd.DataFrame.from_dict(rows, orient='index').rename_axis('K')


# ═══════════════════════════════════════════════════════════════════
# DATABASE-SIZE SWEEP
# ═══════════════════════════════════════════════════════════════════

RetrieveFn = Callable[[Context], RetrievalResult]


def db_size_sweep(factory: Callable[[List[DialoguePair]], RetrieveFn], base_db: Sequence[DialoguePair],
                  distractors: Sequence[DialoguePair], sizes: Sequence[int], queries: Sequence[DialoguePair],
                  k: int) -> Dict[int, float]:
    """
    Coverage@K as distractors are added to the database

    Each size is the number of distractors appended to base_db; the databases
    are nested prefixes of the distractor list.

    Args:
        factory: Builds a retrieve function over a database
        base_db: Pairs present at every size
        distractors: Extra pairs, none sharing a gold response
        sizes: Strictly increasing distractor counts
        queries: Fixed MC queries (context = query, response = gold)
        k: K

    Raises:
        EvaluationError on non-nested sizes or a distractor equal to a gold response
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise EvaluationError("no database sizes given")
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 0:
        raise EvaluationError(f"database sizes must be strictly increasing and non-negative, got {sizes}")
    if sizes[-1] > len(distractors):
        raise EvaluationError(f"largest size {sizes[-1]} exceeds the {len(distractors)} available distractors")

    golds = {normalise(q.response) for q in queries}
    clashes = [d.id for d in distractors[:sizes[-1]] if normalise(d.response) in golds]
    if clashes:
        raise EvaluationError(f"distractor pairs share a gold response: {clashes[:5]}")

    curve = {}
    for size in tqdm(sizes, desc="Database sweep", disable=None):
        retrieve = factory(list(base_db) + list(distractors[:size]))
        results = [retrieve(q.context) for q in queries]
        curve[size] = coverage_at_k(results, [q.response for q in queries], [k])[k]
        logger.info(f"Sweep: +{size} distractors → Coverage@{k} {curve[size]:.4f}")
    return curve


# ═══════════════════════════════════════════════════════════════════
# LATENCY
# ═══════════════════════════════════════════════════════════════════

@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    repeats: int
    batch_size: int
    scanned_per_query: Optional[float] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def bench_latency(retrieve: RetrieveFn, queries: Sequence[Context], repeats: int = 5, warmup: int = 1,
                  batch_size: int = BENCH_BATCH_SIZE, counter: Optional[ScanCounter] = None) -> LatencyStats:
    """
    Wall-clock per batch of queries

    Args:
        retrieve: Query → result (K fixed by the caller)
        queries: Query pool; the batch cycles through it when smaller than batch_size
        repeats: Timed batches
        warmup: Untimed batches run first
        counter: Scan counter the retriever updates (reported per query)

    Returns:
        LatencyStats with population standard deviation (0 for one repeat)
    """
    if not queries:
        raise EvaluationError("latency benchmark needs at least one query")
    if repeats < 1:
        raise EvaluationError(f"repeats must be ≥ 1, got {repeats}")
    batch = [queries[i % len(queries)] for i in range(batch_size)]

    for _ in range(warmup):
        for query in batch:
            retrieve(query)

    scanned_before = counter.scanned if counter is not None else 0
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        for query in batch:
            retrieve(query)
        timings.append((time.perf_counter() - start) * 1000.0)

    scanned = None
    if counter is not None:
        scanned = (counter.scanned - scanned_before) / (repeats * batch_size)
    return LatencyStats(
        mean_ms=float(np.mean(timings)),
        std_ms=float(np.std(timings)),
        repeats=repeats,
        batch_size=batch_size,
        scanned_per_query=scanned,
    )
