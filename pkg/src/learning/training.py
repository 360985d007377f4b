#!/usr/bin/env python3
"""
Training - contrastive students, BCE teachers and fine-to-coarse distillation

Batches follow the train-group dict scheme: a batch of responses is sampled,
two contexts are drawn per response (one query, one positive context) and the
response is the positive response. Every other instance in the batch supplies
the negatives.

Losses:
- contrastive: −log(Σ_pos e^s / Σ_all e^s), via logsumexp
- teacher: binary cross entropy on the logit, via stable log-sigmoid
- distillation: hard contrastive term + rate·T²·KL(softmax(z_T/T) ‖ softmax(z_S/T));
  the teacher side is a constant

British English throughout.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from tqdm import tqdm

from src.core.corpus import Context, TrainGroup, context_ids, response_ids, session_ids
from src.learning.autodiff import (
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    adam_step,
    add,
    as_tensor,
    backward,
    concat_rows,
    log_sigmoid,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    scalar_mul,
    tensor_sum,
    transpose,
)
from src.learning.models import MODE_FIELD, CrossScorer, StudentModel
from src.utils.text import Vocabulary

logger = logging.getLogger(__name__)

# Teacher field each student mode distils from
MODE_TEACHER_FIELDS = {
    'qc': ('context',),
    'qs': ('session',),
    'qr': ('response',),
    'dqs': ('context', 'response'),
}


class TrainingError(RuntimeError):
    """Training cannot proceed (bad batch, non-finite loss, incompatible teacher)"""


@dataclass
class TrainConfig:
    """Optimisation settings for students, teachers and distillation"""
    batch_size: int = 32
    epochs: int = 3
    steps_per_epoch: Optional[int] = None
    lr: float = 2e-4
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    temperature: float = 3.0
    distill_rate: float = 1.0
    hard_weight: float = 1.0
    lam: float = 1.0
    teacher_weights: Dict[str, float] = field(default_factory=lambda: {'context': 1.0, 'response': 1.0})
    teacher_batch_size: int = 16
    teacher_epochs: int = 3
    with_replacement: bool = True
    workers: int = 1

    def validate(self):
        if self.temperature <= 0:
            raise TrainingError(f"temperature must be > 0, got {self.temperature}")
        if self.distill_rate < 0:
            raise TrainingError(f"distill_rate must be ≥ 0, got {self.distill_rate}")
        if self.batch_size < 2 or self.teacher_batch_size < 2:
            raise TrainingError("batch sizes must be ≥ 2 to provide in-batch negatives")

    def to_dict(self) -> Dict:
        return asdict(self)


# ═══════════════════════════════════════════════════════════════════
# BATCHES
# ═══════════════════════════════════════════════════════════════════

@dataclass
class Instance:
    """One query with its positives"""
    group_index: int
    query: Context
    positive_context: Context
    response: str


@dataclass
class Batch:
    """B instances; each instance's positives are the others' negatives"""
    instances: List[Instance]

    def __post_init__(self):
        if len(self.instances) < 2:
            raise TrainingError(f"a batch needs at least 2 instances, got {len(self.instances)}")

    def __len__(self) -> int:
        return len(self.instances)

    def query_ids(self, vocab: Vocabulary) -> List[List[int]]:
        return [context_ids(inst.query, vocab) for inst in self.instances]

    def candidate_ids(self, field_name: str, vocab: Vocabulary) -> List[List[int]]:
        return [candidate_tokens(field_name, inst.positive_context, inst.response, vocab) for inst in self.instances]


@dataclass
class DistillBatch:
    """Teacher and student scores over the same candidate list per query"""
    field: str
    z_teacher: np.ndarray
    labels: np.ndarray
    z_student: Optional[np.ndarray] = None

    def validate(self):
        if self.z_teacher.shape != self.labels.shape:
            raise TrainingError(f"{self.field}: teacher scores {self.z_teacher.shape} vs labels {self.labels.shape}")
        if self.z_student is not None and self.z_student.shape != self.labels.shape:
            raise TrainingError(f"{self.field}: student scores {self.z_student.shape} vs labels {self.labels.shape}")
        if not np.all(self.labels.sum(axis=1) == 1):
            raise TrainingError(f"{self.field}: each label row needs exactly one positive")


def candidate_tokens(field_name: str, context: Sequence[str], response: str, vocab: Vocabulary) -> List[int]:
    if field_name == 'context':
        return context_ids(context, vocab)
    if field_name == 'response':
        return response_ids(response, vocab)
    if field_name == 'session':
        return session_ids(context, response, vocab)
    raise TrainingError(f"unknown candidate field {field_name!r}")


def sample_batch(groups: Sequence[TrainGroup], batch_size: int, rng: np.random.Generator,
                 with_replacement: bool = True) -> Batch:
    """
    Sample B distinct groups and two contexts from each

    Args:
        groups: Train groups
        batch_size: B (≥ 2)
        rng: Random generator
        with_replacement: Draw the two contexts independently (query may equal
            the positive context); otherwise draw two distinct contexts

    Returns:
        Batch
    """
    if batch_size < 2:
        raise TrainingError(f"batch size must be ≥ 2, got {batch_size}")
    if len(groups) < batch_size:
        raise TrainingError(f"need at least {batch_size} train groups, have {len(groups)}")

    instances = []
    for gi in rng.choice(len(groups), size=batch_size, replace=False).tolist():
        contexts = groups[gi].contexts
        if with_replacement:
            qi, pi = int(rng.integers(len(contexts))), int(rng.integers(len(contexts)))
        else:
            qi, pi = (int(i) for i in rng.choice(len(contexts), size=2, replace=False))
        instances.append(Instance(gi, contexts[qi], contexts[pi], groups[gi].response))
    return Batch(instances)


# ═══════════════════════════════════════════════════════════════════
# LOSSES
# ═══════════════════════════════════════════════════════════════════

def contrastive_loss_matrix(scores: Tensor, positive_mask: np.ndarray) -> Tensor:
    """Mean over rows of logsumexp(all) − logsumexp(positives) → 1×1"""
    positive_mask = np.asarray(positive_mask, dtype=bool)
    if not np.all(positive_mask.any(axis=1)):
        raise TrainingError("every query needs at least one positive")
    per_row = add(logsumexp(scores), scalar_mul(logsumexp(scores, positive_mask), -1.0))
    return scalar_mul(tensor_sum(per_row), 1.0 / scores.shape[0])


def contrastive_loss(sims_pos: Sequence[float], sims_neg: Sequence[float]) -> Tensor:
    """
    Contrastive objective for one query

    Args:
        sims_pos: Similarities to positive candidates (at least one)
        sims_neg: Similarities to negative candidates

    Returns:
        1×1 tensor: −log(Σ_pos e^s / Σ_all e^s)
    """
    sims_pos, sims_neg = list(sims_pos), list(sims_neg)
    if not sims_pos:
        raise TrainingError("contrastive loss needs at least one positive")
    row = Tensor([sims_pos + sims_neg])
    mask = np.array([[True] * len(sims_pos) + [False] * len(sims_neg)])
    return contrastive_loss_matrix(row, mask)


def teacher_loss(logit: Union[Tensor, float], label: int) -> Tensor:
    """Binary cross entropy −[y·log σ(z) + (1−y)·log(1−σ(z))] → 1×1"""
    if label not in (0, 1):
        raise TrainingError(f"label must be 0 or 1, got {label}")
    z = as_tensor(logit)
    signed = z if label == 1 else scalar_mul(z, -1.0)
    return scalar_mul(tensor_sum(log_sigmoid(signed)), -1.0)


def softened(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax(scores / T)"""
    return np.exp(log_softmax(Tensor(np.asarray(scores, dtype=np.float64) / temperature)).data)


@dataclass
class DistillTerms:
    hard: Tensor
    kl: Tensor
    total: Tensor


def distill_terms(z_student: Union[Tensor, np.ndarray, Sequence], z_teacher: Union[np.ndarray, Sequence],
                  labels: Union[np.ndarray, Sequence], temperature: float, rate: float,
                  hard_weight: float = 1.0) -> DistillTerms:
    """
    Hard contrastive term and temperature-softened KL term

    Args:
        z_student: Student scores (n,) or (B, n); gradients flow through these
        z_teacher: Teacher scores of the same shape (constant)
        labels: One-hot rows of the same shape
        temperature: T > 0
        rate: Weight of T²·KL
        hard_weight: Weight of the hard term (0 for pure replacement)

    Returns:
        DistillTerms with 1×1 tensors
    """
    if temperature <= 0:
        raise TrainingError(f"temperature must be > 0, got {temperature}")
    zs = as_tensor(z_student)
    zt = Tensor(z_teacher).data
    y = Tensor(labels).data.astype(bool)
    if zs.shape != zt.shape or zs.shape != y.shape:
        raise TrainingError(f"length mismatch: student {zs.shape}, teacher {zt.shape}, labels {y.shape}")

    rows = zs.shape[0]
    hard = contrastive_loss_matrix(zs, y)

    log_pt = log_softmax(Tensor(zt / temperature)).data
    pt = np.exp(log_pt)
    neg_entropy = (pt * log_pt).sum() * (1.0 / rows)
    log_ps = log_softmax(scalar_mul(zs, 1.0 / temperature))
    cross = scalar_mul(tensor_sum(mul(Tensor(pt), log_ps)), -1.0 / rows)
    kl = add(cross, Tensor(neg_entropy))

    total = add(scalar_mul(hard, hard_weight), scalar_mul(kl, rate * temperature * temperature))
    return DistillTerms(hard=hard, kl=kl, total=total)


def distill_loss(z_S, z_T, y, T: float, rate: float, hard_weight: float = 1.0) -> Tensor:
    """L = hard_weight·L_hard + rate·T²·KL(softmax(z_T/T) ‖ softmax(z_S/T)) → 1×1"""
    return distill_terms(z_S, z_T, y, T, rate, hard_weight).total


# ═══════════════════════════════════════════════════════════════════
# STUDENT FORWARD
# ═══════════════════════════════════════════════════════════════════

@dataclass
class StudentScores:
    """Per-field B×B score blocks and the joint B×M score matrix"""
    blocks: Dict[str, Tensor]
    joint: Tensor
    positive_mask: np.ndarray


def student_scores(model: StudentModel, batch: Batch, vocab: Vocabulary, lam: float = 1.0) -> StudentScores:
    """
    In-batch similarity matrices for a student

    For DQS the response block is scaled by λ and the joint matrix holds
    context columns then response columns, with both positives marked.
    """
    size = len(batch)
    query = model.query_tower.encode_batch(batch.query_ids(vocab))

    blocks: Dict[str, Tensor] = {}
    if model.mode == 'dqs':
        contexts = model.tower('context').encode_batch(batch.candidate_ids('context', vocab))
        responses = model.tower('response').encode_batch(batch.candidate_ids('response', vocab))
        if lam != 1.0:
            responses = scalar_mul(responses, lam)
        blocks['context'] = matmul(query, transpose(contexts))
        blocks['response'] = matmul(query, transpose(responses))
        joint = transpose(concat_rows(transpose(blocks['context']), transpose(blocks['response'])))
        mask = np.hstack([np.eye(size, dtype=bool), np.eye(size, dtype=bool)])
    else:
        field_name = MODE_FIELD[model.mode]
        candidates = model.tower(field_name).encode_batch(batch.candidate_ids(field_name, vocab))
        blocks[field_name] = matmul(query, transpose(candidates))
        joint = blocks[field_name]
        mask = np.eye(size, dtype=bool)

    return StudentScores(blocks=blocks, joint=joint, positive_mask=mask)


def _optimise(params: Sequence[Parameter], loss: Tensor, tape: Tape, cfg: TrainConfig) -> float:
    backward(tape, loss)
    return adam_step(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, warmup_steps=cfg.warmup)


def student_step(model: StudentModel, batch: Batch, vocab: Vocabulary, cfg: TrainConfig) -> Dict:
    """One contrastive optimisation step"""
    with Tape() as tape:
        scores = student_scores(model, batch, vocab, cfg.lam)
        loss = contrastive_loss_matrix(scores.joint, scores.positive_mask)
    value = loss.item()
    lr = _optimise(model.parameters(), loss, tape, cfg)
    return {'loss': value, 'hard': value, 'kl': 0.0, 'lr': lr}


# ═══════════════════════════════════════════════════════════════════
# TRAINING LOOPS
# ═══════════════════════════════════════════════════════════════════

@dataclass
class TrainingHistory:
    epoch_losses: List[float] = field(default_factory=list)
    steps: List[Dict] = field(default_factory=list)


class _StepLogger:
    """JSON-lines step log (optional)"""

    def __init__(self, path: Optional[Path]):
        self.file = open(path, 'w', encoding='utf-8', newline='\n') if path else None

    def write(self, record: Dict):
        if self.file:
            self.file.write(json.dumps(record) + "\n")

    def close(self):
        if self.file:
            self.file.close()


def _steps_per_epoch(cfg: TrainConfig, n_groups: int, batch_size: int) -> int:
    return cfg.steps_per_epoch or max(1, n_groups // batch_size)


def _run_loop(name: str, n_groups: int, batch_size: int, epochs: int, cfg: TrainConfig,
              step_fn, log_path: Optional[Path]) -> TrainingHistory:
    rng = np.random.default_rng(cfg.seed)
    steps = _steps_per_epoch(cfg, n_groups, batch_size)
    history = TrainingHistory()
    step_log = _StepLogger(log_path)
    global_step = 0

    try:
        for epoch in range(epochs):
            losses = []
            for _ in tqdm(range(steps), desc=f"{name} epoch {epoch + 1}/{epochs}", leave=False, disable=None):
                global_step += 1
                try:
                    record = step_fn(rng)
                except NonFiniteError as e:
                    raise TrainingError(
                        f"{name}: non-finite value at epoch {epoch + 1}, step {global_step} ({e}); "
                        f"last losses: {[round(s['loss'], 6) for s in history.steps[-5:]]}"
                    )
                if not np.isfinite(record['loss']):
                    raise TrainingError(f"{name}: loss {record['loss']} at epoch {epoch + 1}, step {global_step}")
                record = {'step': global_step, **record}
                history.steps.append(record)
                step_log.write(record)
                losses.append(record['loss'])
            history.epoch_losses.append(float(np.mean(losses)))
            logger.info(f"{name} epoch {epoch + 1}/{epochs}: mean loss {history.epoch_losses[-1]:.6f}")
    finally:
        step_log.close()

    return history


def train_student(model: StudentModel, groups: Sequence[TrainGroup], vocab: Vocabulary,
                  cfg: TrainConfig, log_path: Optional[Path] = None) -> TrainingHistory:
    """
    Contrastive training with in-batch negatives

    QC uses contexts, QS sessions, QR responses; DQS scores contexts and
    responses jointly with both positives in the numerator.

    Returns:
        TrainingHistory (per-epoch mean loss and per-step records)
    """
    cfg.validate()

    def step(rng):
        return student_step(model, sample_batch(groups, cfg.batch_size, rng, cfg.with_replacement), vocab, cfg)

    return _run_loop(f"{model.mode} student", len(groups), cfg.batch_size, cfg.epochs, cfg, step, log_path)


# ═══════════════════════════════════════════════════════════════════
# TEACHER TRAINING
# ═══════════════════════════════════════════════════════════════════

def teacher_examples(batch: Batch, groups: Sequence[TrainGroup], field_name: str, vocab: Vocabulary,
                     rng: np.random.Generator) -> List[Tuple[List[int], List[int], int]]:
    """
    One positive and one sampled negative per instance

    Negatives come from a uniformly drawn different group.
    """
    examples = []
    for inst in batch.instances:
        query = context_ids(inst.query, vocab)
        examples.append((query, candidate_tokens(field_name, inst.positive_context, inst.response, vocab), 1))

        other = int(rng.integers(len(groups) - 1))
        if other >= inst.group_index:
            other += 1
        group = groups[other]
        neg_context = group.contexts[int(rng.integers(len(group.contexts)))]
        examples.append((query, candidate_tokens(field_name, neg_context, group.response, vocab), 0))
    return examples


def teacher_step(scorer: CrossScorer, examples: Sequence[Tuple[List[int], List[int], int]], cfg: TrainConfig) -> Dict:
    with Tape() as tape:
        losses = [teacher_loss(scorer.score(q, c), label) for q, c, label in examples]
        loss = scalar_mul(tensor_sum(concat_rows(*losses)), 1.0 / len(losses))
    value = loss.item()
    lr = _optimise(scorer.parameters(), loss, tape, cfg)
    return {'loss': value, 'hard': value, 'kl': 0.0, 'lr': lr}


def train_teacher(scorer: CrossScorer, groups: Sequence[TrainGroup], vocab: Vocabulary,
                  cfg: TrainConfig, log_path: Optional[Path] = None) -> TrainingHistory:
    """
    Binary cross-entropy training of a one-tower teacher

    Positives pair a query with its own group's candidate (context, session or
    response per the teacher's field); each is matched with one negative.
    """
    cfg.validate()

    def step(rng):
        batch = sample_batch(groups, cfg.teacher_batch_size, rng, cfg.with_replacement)
        return teacher_step(scorer, teacher_examples(batch, groups, scorer.field, vocab, rng), cfg)

    return _run_loop(f"{scorer.field} teacher", len(groups), cfg.teacher_batch_size, cfg.teacher_epochs,
                     cfg, step, log_path)


def teacher_accuracy(scorer: CrossScorer, examples: Sequence[Tuple[Sequence[int], Sequence[int], int]]) -> float:
    """Fraction of examples where sign(logit) matches the label"""
    correct = sum(int((scorer.score(q, c).item() > 0) == bool(label)) for q, c, label in examples)
    return correct / len(examples)


# ═══════════════════════════════════════════════════════════════════
# DISTILLATION
# ═══════════════════════════════════════════════════════════════════

def score_matrix(teacher: CrossScorer, queries: Sequence[Sequence[int]],
                 candidates: Sequence[Sequence[int]], workers: int = 1) -> np.ndarray:
    """
    Teacher logits for every (query, candidate) pair → len(queries)×len(candidates)

    Rows may be scored on several threads; results keep candidate order.
    """
    def row(query):
        return [teacher.score(query, cand).item() for cand in candidates]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, queries))
    else:
        rows = [row(q) for q in queries]
    return np.asarray(rows, dtype=np.float64)


def check_teachers(student: StudentModel, teachers: Dict[str, CrossScorer], vocab: Optional[Vocabulary] = None):
    """Raise unless every required teacher is present and shares the student's vocabulary"""
    if vocab is not None:
        _check_fingerprint(student.config.vocab_fingerprint, vocab.fingerprint, f"{student.mode} student", "supplied vocabulary")
    for field_name in MODE_TEACHER_FIELDS[student.mode]:
        teacher = teachers.get(field_name)
        if teacher is None:
            raise TrainingError(f"{student.mode} distillation needs a {field_name} teacher (have {sorted(teachers)})")
        if teacher.field != field_name:
            raise TrainingError(f"teacher passed as {field_name} scores {teacher.field} candidates")
        if teacher.config.vocab_size != student.config.vocab_size:
            raise TrainingError(
                f"{field_name} teacher vocab_size {teacher.config.vocab_size} "
                f"!= student vocab_size {student.config.vocab_size}"
            )
        _check_fingerprint(teacher.config.vocab_fingerprint, student.config.vocab_fingerprint,
                           f"{field_name} teacher", f"{student.mode} student")


def _check_fingerprint(ours: Optional[str], theirs: Optional[str], what: str, other: str):
    # Checkpoints without a fingerprint are compared by vocab_size only
    if ours is not None and theirs is not None and ours != theirs:
        raise TrainingError(
            f"{what} was trained on a different vocabulary than the {other} "
            f"(fingerprint {ours[:12]} != {theirs[:12]})"
        )


def build_distill_batches(student: StudentModel, teachers: Dict[str, CrossScorer], batch: Batch,
                          vocab: Vocabulary, workers: int = 1) -> Dict[str, DistillBatch]:
    """Teacher scores over the in-batch candidate lists"""
    queries = batch.query_ids(vocab)
    labels = np.eye(len(batch))
    out = {}
    for field_name in MODE_TEACHER_FIELDS[student.mode]:
        z_teacher = score_matrix(teachers[field_name], queries, batch.candidate_ids(field_name, vocab), workers)
        out[field_name] = DistillBatch(field=field_name, z_teacher=z_teacher, labels=labels)
    return out


def distill_step(student: StudentModel, teachers: Dict[str, CrossScorer], batch: Batch,
                 vocab: Vocabulary, cfg: TrainConfig) -> Dict:
    distill_batches = build_distill_batches(student, teachers, batch, vocab, cfg.workers)

    with Tape() as tape:
        scores = student_scores(student, batch, vocab, cfg.lam)
        hard = contrastive_loss_matrix(scores.joint, scores.positive_mask)
        total = scalar_mul(hard, cfg.hard_weight)
        kl_value = 0.0
        for field_name, db in distill_batches.items():
            db.z_student = scores.blocks[field_name].data.copy()
            db.validate()
            weight = cfg.teacher_weights.get(field_name, 1.0) if student.mode == 'dqs' else 1.0
            terms = distill_terms(scores.blocks[field_name], db.z_teacher, db.labels,
                                  cfg.temperature, cfg.distill_rate, hard_weight=0.0)
            total = add(total, scalar_mul(terms.total, weight))
            kl_value += weight * terms.kl.item()

    value = total.item()
    hard_value = hard.item()
    lr = _optimise(student.parameters(), total, tape, cfg)
    return {'loss': value, 'hard': hard_value, 'kl': kl_value, 'lr': lr}


def distill_student(student: StudentModel, teachers: Dict[str, CrossScorer], groups: Sequence[TrainGroup],
                    vocab: Vocabulary, cfg: TrainConfig, log_path: Optional[Path] = None) -> TrainingHistory:
    """
    Fine-to-coarse distillation of a (partially trained) student

    z^S comes from student dot products and z^T from the frozen teacher over
    the same in-batch candidates. DQS distils from two teachers (contexts and
    responses), each with its own KL term.
    """
    cfg.validate()
    check_teachers(student, teachers, vocab)

    def step(rng):
        batch = sample_batch(groups, cfg.batch_size, rng, cfg.with_replacement)
        return distill_step(student, teachers, batch, vocab, cfg)

    return _run_loop(f"{student.mode} distillation", len(groups), cfg.batch_size, cfg.epochs, cfg, step, log_path)
