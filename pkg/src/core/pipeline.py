#!/usr/bin/env python3
"""
Pipeline - one function per command

corpus → build-dataset → train-student / train-teacher → distill →
build-index → retrieve → evaluate, plus sweep-db and bench.

Every function reads and writes named files in the workdir only and returns
a summary dict for the entry script to print.

British English throughout.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional
import logging

import numpy as np
import pandas as pd

from src.core.config import RunConfig
from src.core.corpus import (
    SplitError,
    SplitResult,
    build_splits,
    filter_pairs,
    load_groups,
    load_pairs,
    save_pairs,
    session_utterances,
)
from src.core.dataset_validator import validate_split
from src.core.synthetic import ambiguous_corpus, distractor_pairs, low_overlap_corpus, toy_corpus
from src.core.workdir import Workdir
from src.intelligence.evaluator import (
    bench_latency,
    db_size_sweep,
    evaluate as evaluate_results,
)
from src.intelligence.language_model import ConditionalLm
from src.intelligence.query_engine import (
    MODE_FIELDS,
    DqsIndexes,
    ResponseRetriever,
    RetrievalError,
    RetrievalResult,
    field_ids,
    field_words,
)
from src.intelligence.sparse_index import Bm25Params, build_index, load_index, save_index
from src.intelligence.vector_store import (
    EmbeddingShard,
    ScanCounter,
    ivf_build,
    load_ivf,
    load_shard,
    precompute,
    save_ivf,
    save_shard,
)
from src.learning.checkpoint import load_checkpoint, save_checkpoint
from src.learning.models import TEACHER_FIELDS, ModelError, init_student, init_teacher
from src.learning.training import (
    MODE_TEACHER_FIELDS,
    distill_student,
    train_student as run_student_training,
    train_teacher as run_teacher_training,
)
from src.utils.text import Vocabulary, utterance_ids, utterance_words

logger = logging.getLogger(__name__)

CORPUS_KINDS = {
    'toy': lambda groups, seed: toy_corpus(groups, seed),
    'low-overlap': lambda groups, seed: low_overlap_corpus(groups, seed),
    'ambiguous': lambda groups, seed: ambiguous_corpus(max(1, groups // 2), seed),
}

# Teacher name → candidate field
TEACHER_ROLES = {'qc': 'context', 'qs': 'session', 'qr': 'response'}
FIELD_TEACHERS = {field: role for role, field in TEACHER_ROLES.items()}


# ═══════════════════════════════════════════════════════════════════
# ARTIFACT NAMES
# ═══════════════════════════════════════════════════════════════════

def corpus_path(cfg: RunConfig, wd: Workdir) -> Path:
    return Path(cfg.paths.corpus_path) if cfg.paths.corpus_path else wd.path("corpus.jsonl")


def student_name(mode: str, distilled: bool = False) -> str:
    return f"student_{mode}_distilled.ckpt" if distilled else f"student_{mode}.ckpt"


def teacher_name(role: str) -> str:
    return f"teacher_{role}.ckpt"


def sparse_name(field_name: str) -> str:
    return f"bm25_{field_name}.idx"


def dense_name(field_name: str, checkpoint: str, ivf: bool = False) -> str:
    return f"db_{field_name}_{Path(checkpoint).stem}.{'ivf' if ivf else 'emb'}"


def retrieval_tag(mode: str, backend: str, checkpoint: Optional[str]) -> str:
    if backend == 'sparse' or checkpoint is None:
        return f"{mode}_{backend}"
    return f"{mode}_{backend}_{Path(checkpoint).stem}"


def retrieval_name(tag: str, split: str) -> str:
    return f"retrieval_{tag}_{split}.jsonl"


def _vocab(wd: Workdir, needed_by: str) -> Vocabulary:
    return Vocabulary.load(wd.require("vocab.txt", needed_by))


def _groups(wd: Workdir, needed_by: str):
    return load_groups(wd.require("train_groups.jsonl", needed_by))


def _database(wd: Workdir, needed_by: str):
    return load_pairs(wd.require("database.jsonl", needed_by))


# ═══════════════════════════════════════════════════════════════════
# CORPUS AND DATASET
# ═══════════════════════════════════════════════════════════════════

def generate_corpus(cfg: RunConfig, kind: str = 'toy') -> Dict:
    """Write a deterministic synthetic corpus"""
    if kind not in CORPUS_KINDS:
        raise ValueError(f"unknown corpus kind {kind!r}; expected one of {sorted(CORPUS_KINDS)}")
    wd = Workdir(cfg.workdir)
    pairs = CORPUS_KINDS[kind](cfg.corpus.toy_groups, cfg.seed)
    path = corpus_path(cfg, wd)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_pairs(pairs, path)
    if path.parent.resolve() == wd.root.resolve():
        wd.record(path.name)
    return {'corpus': str(path), 'pairs': len(pairs), 'kind': kind}


def build_vocabulary(split: SplitResult, min_freq: int) -> Vocabulary:
    """Vocabulary over train contexts and responses plus database sessions"""
    streams: List[List[str]] = []
    for group in split.train_groups:
        streams.extend(utterance_words(c) for c in group.contexts)
        streams.append(utterance_words([group.response]))
    for pair in split.database:
        streams.append(utterance_words(session_utterances(pair.context, pair.response)))
    return Vocabulary.build(streams, min_freq=min_freq)


def build_dataset(cfg: RunConfig) -> Dict:
    """Filter, split, validate and write mc/sc/database/train_groups plus vocab.txt"""
    wd = Workdir(cfg.workdir)
    source = corpus_path(cfg, wd)
    if not source.exists():
        raise FileNotFoundError(f"build-dataset needs {source}, which does not exist (run generate-corpus first)")

    pairs = filter_pairs(load_pairs(source))
    split = build_splits(pairs, cfg.corpus.mc_size, cfg.corpus.sc_size, cfg.seed,
                         train_ratio=cfg.corpus.train_ratio, max_mc_contexts=cfg.corpus.max_mc_contexts)
    is_valid, issues = validate_split(split, pairs)
    if not is_valid:
        raise SplitError("split violates its invariants: " + "; ".join(issues[:5]))

    split.save(wd.root)
    vocab = build_vocabulary(split, cfg.corpus.min_freq)
    vocab.save(wd.path("vocab.txt"))
    for name in ("mc.jsonl", "sc.jsonl", "database.jsonl", "train_groups.jsonl", "vocab.txt"):
        wd.record(name)

    return {**split.stats, 'mc': len(split.mc_test), 'sc': len(split.sc_test),
            'database': len(split.database), 'train_groups': len(split.train_groups), 'vocab': vocab.size}


# ═══════════════════════════════════════════════════════════════════
# TRAINING
# ═══════════════════════════════════════════════════════════════════

def train_student(cfg: RunConfig, mode: Optional[str] = None) -> Dict:
    """Contrastive training of a fresh student"""
    mode = mode or cfg.model.mode
    wd = Workdir(cfg.workdir)
    vocab = _vocab(wd, 'train-student')
    groups = _groups(wd, 'train-student')

    model = init_student(cfg.model.model_config(vocab.size, cfg.seed, vocab.fingerprint), mode)
    history = run_student_training(model, groups, vocab, cfg.train, log_path=wd.path(f"train_log_student_{mode}.jsonl"))
    name = student_name(mode)
    save_checkpoint(model, wd.path(name))
    wd.record(name)
    return {'checkpoint': name, 'epoch_losses': history.epoch_losses, 'steps': len(history.steps)}


def train_teacher(cfg: RunConfig, role: str) -> Dict:
    """BCE training of one teacher (qc, qs or qr)"""
    if role not in TEACHER_ROLES:
        raise ValueError(f"unknown teacher {role!r}; expected one of {sorted(TEACHER_ROLES)}")
    wd = Workdir(cfg.workdir)
    vocab = _vocab(wd, 'train-teacher')
    groups = _groups(wd, 'train-teacher')

    scorer = init_teacher(cfg.model.model_config(vocab.size, cfg.seed, vocab.fingerprint), TEACHER_ROLES[role])
    history = run_teacher_training(scorer, groups, vocab, cfg.train, log_path=wd.path(f"train_log_teacher_{role}.jsonl"))
    name = teacher_name(role)
    save_checkpoint(scorer, wd.path(name))
    wd.record(name)
    return {'checkpoint': name, 'epoch_losses': history.epoch_losses, 'steps': len(history.steps)}


def distill(cfg: RunConfig, mode: Optional[str] = None) -> Dict:
    """Continue a trained student under its teacher(s)"""
    mode = mode or cfg.model.mode
    wd = Workdir(cfg.workdir)
    vocab = _vocab(wd, 'distill')
    groups = _groups(wd, 'distill')

    student = load_checkpoint(wd.require(student_name(mode), 'distill'), expected_kind='student')
    teachers = {
        field: load_checkpoint(wd.require(teacher_name(FIELD_TEACHERS[field]), 'distill'), expected_kind='teacher')
        for field in MODE_TEACHER_FIELDS[mode]
    }
    history = distill_student(student, teachers, groups, vocab, cfg.train,
                              log_path=wd.path(f"train_log_distill_{mode}.jsonl"))
    name = student_name(mode, distilled=True)
    save_checkpoint(student, wd.path(name))
    wd.record(name)
    return {'checkpoint': name, 'teachers': sorted(teachers), 'epoch_losses': history.epoch_losses}


# ═══════════════════════════════════════════════════════════════════
# INDEXES
# ═══════════════════════════════════════════════════════════════════

def build_sparse_index(cfg: RunConfig, field_name: str) -> Dict:
    wd = Workdir(cfg.workdir)
    database = _database(wd, 'build-index')
    index = build_index(((p.id, field_words(p, field_name)) for p in database), field_name)
    name = sparse_name(field_name)
    save_index(index, wd.path(name))
    wd.record(name)
    return {'index': name, 'docs': index.n_docs, 'terms': len(index.postings)}


def build_dense_index(cfg: RunConfig, field_name: str, checkpoint: str) -> Dict:
    """Embed every database candidate with the student's tower for the field"""
    wd = Workdir(cfg.workdir)
    database = _database(wd, 'build-index')
    vocab = _vocab(wd, 'build-index')
    student = load_checkpoint(wd.require(checkpoint, 'build-index'), expected_kind='student')
    try:
        tower = student.tower(field_name)
    except ModelError as e:
        raise RetrievalError(f"{checkpoint}: {e}")

    shard = precompute(tower, [(p.id, field_ids(p, field_name, vocab)) for p in database], workers=cfg.train.workers)
    name = dense_name(field_name, checkpoint)
    save_shard(shard, wd.path(name))
    wd.record(name, built_from=checkpoint)
    return {'index': name, 'vectors': shard.n, 'dim': shard.dim}


def build_ivf_index(cfg: RunConfig, field_name: str, checkpoint: str) -> Dict:
    """Cluster an existing shard into an IVF index"""
    wd = Workdir(cfg.workdir)
    shard_name = dense_name(field_name, checkpoint)
    shard_path = wd.require(shard_name, 'build-index ivf')
    wd.check_built_from(shard_name, checkpoint)
    shard = load_shard(shard_path)
    index = ivf_build(shard, k=cfg.index.n_lists, seed=cfg.seed, iters=cfg.index.kmeans_iters, nprobe=cfg.index.nprobe)
    name = dense_name(field_name, checkpoint, ivf=True)
    save_ivf(index, wd.path(name))
    wd.record(name, built_from=checkpoint)
    return {'index': name, 'lists': index.k, 'nprobe': index.nprobe, 'largest_list': max(index.list_sizes())}


def build_index_command(cfg: RunConfig, kind: str, field_name: str, checkpoint: Optional[str] = None) -> Dict:
    if field_name not in TEACHER_FIELDS:
        raise ValueError(f"unknown field {field_name!r}; expected one of {TEACHER_FIELDS}")
    if kind == 'sparse':
        return build_sparse_index(cfg, field_name)
    checkpoint = checkpoint or student_name(cfg.model.mode)
    if kind == 'dense':
        return build_dense_index(cfg, field_name, checkpoint)
    if kind == 'ivf':
        return build_ivf_index(cfg, field_name, checkpoint)
    raise ValueError(f"unknown index kind {kind!r}; expected sparse, dense or ivf")


# ═══════════════════════════════════════════════════════════════════
# RETRIEVAL
# ═══════════════════════════════════════════════════════════════════

def make_retriever(cfg: RunConfig, wd: Workdir, mode: str, backend: str, checkpoint: Optional[str],
                   counter: Optional[ScanCounter] = None):
    """
    Retriever plus DQS indexes (None for QC/QS/QR) over the workdir artifacts

    Raises:
        MissingArtifactError / ArtifactMismatchError for absent or stale indexes
    """
    database = _database(wd, 'retrieve')
    params = Bm25Params(cfg.index.k1, cfg.index.b)

    if backend == 'sparse':
        if mode == 'dqs':
            raise RetrievalError("DQS retrieval is dense only")
        field_name = MODE_FIELDS[mode]
        sparse = {field_name: load_index(wd.require(sparse_name(field_name), 'retrieve'))}
        return ResponseRetriever(database, sparse=sparse, bm25_params=params), None

    vocab = _vocab(wd, 'retrieve')
    student = load_checkpoint(wd.require(checkpoint, 'retrieve'), expected_kind='student')
    fields = ('context', 'response') if mode == 'dqs' else (MODE_FIELDS[mode],)

    shards, ivf = {}, {}
    for field_name in fields:
        if backend == 'dense-exact' or mode == 'dqs':
            name = dense_name(field_name, checkpoint)
            wd.require(name, 'retrieve')
            wd.check_built_from(name, checkpoint)
            shards[field_name] = load_shard(wd.path(name))
        if backend == 'dense-ivf':
            name = dense_name(field_name, checkpoint, ivf=True)
            wd.require(name, 'retrieve')
            wd.check_built_from(name, checkpoint)
            ivf[field_name] = load_ivf(wd.path(name))

    retriever = ResponseRetriever(database, vocab=vocab, student=student, shards=shards, ivf=ivf,
                                  bm25_params=params, nprobe=cfg.index.nprobe, counter=counter)
    dqs = None
    if mode == 'dqs':
        dqs = DqsIndexes(shards['context'], shards['response'], lam=cfg.train.lam,
                         context_ivf=ivf.get('context'), response_ivf=ivf.get('response'))
    return retriever, dqs


def _retrieve_fn(cfg: RunConfig, retriever: ResponseRetriever, dqs: Optional[DqsIndexes], mode: str,
                 backend: str, k: int):
    if mode == 'dqs':
        return lambda query: retriever.retrieve_dqs(query, k, dqs, mode=cfg.eval.dqs_mode,
                                                    fused_k=cfg.eval.fused_k, backend=backend)
    return lambda query: retriever.retrieve(query, mode, k, backend)


def retrieve(cfg: RunConfig, mode: str, backend: Optional[str] = None, checkpoint: Optional[str] = None) -> Dict:
    """Retrieve top_k responses for every MC and SC query and write JSON lines"""
    backend = backend or cfg.eval.backend
    if backend != 'sparse':
        checkpoint = checkpoint or student_name(mode)
    wd = Workdir(cfg.workdir)
    retriever, dqs = make_retriever(cfg, wd, mode, backend, checkpoint)
    run = _retrieve_fn(cfg, retriever, dqs, mode, backend, cfg.eval.top_k)

    tag = retrieval_tag(mode, backend, checkpoint)
    written = {}
    for split in ('mc', 'sc'):
        queries = load_pairs(wd.require(f"{split}.jsonl", 'retrieve'))
        name = retrieval_name(tag, split)
        with open(wd.path(name), 'w', encoding='utf-8', newline='\n') as f:
            for pair in queries:
                result = run(pair.context)
                f.write(json.dumps(result.to_dict(pair.id, include_timing=cfg.eval.record_timing)) + "\n")
        wd.record(name)
        written[split] = len(queries)
    return {'tag': tag, 'queries': written}


def _read_results(path: Path, backend: str) -> Dict[int, RetrievalResult]:
    with open(path, 'r', encoding='utf-8') as f:
        rows = [json.loads(line) for line in f if line.strip()]
    return {int(row['query_id']): RetrievalResult.from_dict(row, backend) for row in rows}


def evaluate(cfg: RunConfig, tag: str, teacher: Optional[str] = None) -> Dict:
    """Score persisted retrieval results; writes eval_<tag>.json"""
    wd = Workdir(cfg.workdir)
    vocab = _vocab(wd, 'evaluate')
    groups = _groups(wd, 'evaluate')
    mc = load_pairs(wd.require("mc.jsonl", 'evaluate'))
    sc = load_pairs(wd.require("sc.jsonl", 'evaluate'))

    results = {}
    for split, pairs in (('mc', mc), ('sc', sc)):
        by_id = _read_results(wd.require(retrieval_name(tag, split), 'evaluate'), tag)
        missing = [p.id for p in pairs if p.id not in by_id]
        if missing:
            raise RetrievalError(f"{retrieval_name(tag, split)} has no result for queries {missing[:5]}")
        results[split] = [by_id[p.id] for p in pairs]

    lm = ConditionalLm(vocab.size, cfg.eval.add_k).fit(
        utterance_ids(session_utterances(c, g.response), vocab) for g in groups for c in g.contexts
    )
    teacher = teacher or teacher_name('qr')
    scorer = load_checkpoint(wd.path(teacher), expected_kind='teacher') if wd.exists(teacher) else None
    if scorer is None:
        logger.warning(f"{teacher} not found; Relevance@K skipped")

    report = evaluate_results(
        results['mc'], mc, results['sc'], sc, cfg.eval.ks, vocab, lm=lm, teacher=scorer,
        config={'tag': tag, 'teacher': teacher if scorer else None, 'add_k': cfg.eval.add_k, 'strict': cfg.eval.strict},
        workers=cfg.train.workers, strict=cfg.eval.strict,
    )
    name = f"eval_{tag}.json"
    report.save(wd.path(name))
    wd.record(name)
    return {'report': name, 'table': report.render()}


# ═══════════════════════════════════════════════════════════════════
# SWEEP AND BENCH
# ═══════════════════════════════════════════════════════════════════

def sweep_db(cfg: RunConfig, mode: str = 'qs', checkpoint: Optional[str] = None) -> Dict:
    """Coverage@K of exact dense retrieval as distractors are added"""
    if mode == 'dqs':
        raise RetrievalError("sweep-db supports qc, qs and qr")
    checkpoint = checkpoint or student_name(mode)
    wd = Workdir(cfg.workdir)
    vocab = _vocab(wd, 'sweep-db')
    database = _database(wd, 'sweep-db')
    mc = load_pairs(wd.require("mc.jsonl", 'sweep-db'))
    student = load_checkpoint(wd.require(checkpoint, 'sweep-db'), expected_kind='student')
    field_name = MODE_FIELDS[mode]
    tower = student.tower(field_name)

    sizes = sorted(cfg.eval.sweep_sizes)
    start = max([p.id for p in database] + [p.id for p in mc]) + 1
    distractors = distractor_pairs(sizes[-1], cfg.seed, start)

    base = precompute(tower, [(p.id, field_ids(p, field_name, vocab)) for p in database], workers=cfg.train.workers)
    extra = precompute(tower, [(p.id, field_ids(p, field_name, vocab)) for p in distractors], workers=cfg.train.workers)
    k = 20 if 20 in cfg.eval.ks else max(cfg.eval.ks)

    def factory(db):
        n_extra = len(db) - base.n
        shard = EmbeddingShard(np.concatenate([base.doc_ids, extra.doc_ids[:n_extra]]),
                               np.vstack([base.vectors, extra.vectors[:n_extra]]))
        retriever = ResponseRetriever(db, vocab=vocab, student=student, shards={field_name: shard})
        return lambda query: retriever.retrieve(query, mode, k, 'dense-exact')

    curve = db_size_sweep(factory, database, distractors, sizes, mc, k)
    name = f"sweep_{mode}_{Path(checkpoint).stem}.json"
    with open(wd.path(name), 'w', encoding='utf-8', newline='\n') as f:
        json.dump({'k': k, 'coverage': {str(s): v for s, v in curve.items()}}, f, indent=2, sort_keys=True)
        f.write("\n")
    wd.record(name)
    table = pd.DataFrame({f'Coverage@{k}': curve}).rename_axis('distractors')
    return {'file': name, 'table': table.to_string(float_format=lambda v: f"{v:.4f}")}


def bench(cfg: RunConfig, mode: str = 'qs', checkpoint: Optional[str] = None) -> Dict:
    """Per-batch latency of every backend whose index exists"""
    checkpoint = checkpoint or student_name(mode)
    wd = Workdir(cfg.workdir)
    queries = [p.context for p in load_pairs(wd.require("mc.jsonl", 'bench'))]
    k = max(cfg.eval.ks)

    available = []
    if mode != 'dqs' and wd.exists(sparse_name(MODE_FIELDS[mode])):
        available.append('sparse')
    fields = ('context', 'response') if mode == 'dqs' else (MODE_FIELDS[mode],)
    if all(wd.exists(dense_name(f, checkpoint)) for f in fields):
        available.append('dense-exact')
    if mode != 'dqs' and all(wd.exists(dense_name(f, checkpoint, ivf=True)) for f in fields):
        available.append('dense-ivf')
    if not available:
        raise RetrievalError(f"bench found no {mode} index in {wd.root}; run build-index first")

    rows = {}
    for backend in available:
        counter = ScanCounter()
        retriever, dqs = make_retriever(cfg, wd, mode, backend, None if backend == 'sparse' else checkpoint, counter)
        stats = bench_latency(_retrieve_fn(cfg, retriever, dqs, mode, backend, k), queries,
                              repeats=cfg.eval.bench_repeats, warmup=cfg.eval.bench_warmup,
                              counter=None if backend == 'sparse' else counter)
        rows[backend] = stats.to_dict()
        logger.info(f"bench {mode}/{backend}: {stats.mean_ms:.2f} ± {stats.std_ms:.2f} ms per batch")

    with open(wd.path("bench.json"), 'w', encoding='utf-8', newline='\n') as f:
        json.dump({'mode': mode, 'k': k, 'backends': rows}, f, indent=2, sort_keys=True)
        f.write("\n")
    table = pd.DataFrame.from_dict(rows, orient='index')
    return {'file': "bench.json", 'table': table.to_string(float_format=lambda v: f"{v:.3f}")}
