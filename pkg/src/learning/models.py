#!/usr/bin/env python3
"""
Retrieval Models - multi-tower students and the one-tower teacher

Students: one TowerEncoder per role (query, context, response, session).
Each tower mean-pools token embeddings and applies a linear layer followed
by tanh, so every embedding lies in (−1, 1)^d. Query/candidate similarity
is the dot product, which keeps candidates indexable offline.

Teacher: CrossScorer reads the joint sequence query ⊕ SEP ⊕ candidate with
segment and position embeddings, runs one self-attention block with a
residual connection and feeds the first-position output to a small
tanh head that returns a scalar logit.

British English throughout.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np

from src.learning.autodiff import (
    Parameter,
    Tensor,
    add,
    gather_rows,
    masked_softmax,
    matmul,
    row_mean,
    scalar_mul,
    tanh,
    transpose,
    unique_parameters,
)
from src.utils.text import SEP_ID

logger = logging.getLogger(__name__)

# Longest context + separator + longest response
MIN_JOINT_LENGTH = 128 + 64 + 1

INIT_SCALE = 0.05

STUDENT_MODES = ('qc', 'qs', 'qr', 'dqs')
TEACHER_FIELDS = ('context', 'session', 'response')

# Towers each matching mode needs, query first
MODE_ROLES: Dict[str, Tuple[str, ...]] = {
    'qc': ('query', 'context'),
    'qs': ('query', 'session'),
    'qr': ('query', 'response'),
    'dqs': ('query', 'context', 'response'),
}

# Candidate tower that shares parameters with the query tower when share_encoders is on
PRIMARY_ROLE = {'qc': 'context', 'qs': 'session', 'qr': 'response', 'dqs': 'context'}

# Candidate field each mode matches against
MODE_FIELD = {'qc': 'context', 'qs': 'session', 'qr': 'response'}


class ModelError(ValueError):
    """Invalid model input or configuration"""


@dataclass
class ModelConfig:
    """Model dimensions (desk-scale defaults)"""
    vocab_size: int
    d_e: int = 64
    d: int = 64
    d_h: int = 64
    max_len: int = 400
    share_encoders: bool = False
    seed: int = 0
    vocab_fingerprint: Optional[str] = None

    def validate(self):
        if self.vocab_size < 2:
            raise ModelError(f"vocab_size must hold at least UNK and SEP, got {self.vocab_size}")
        if self.max_len < MIN_JOINT_LENGTH:
            raise ModelError(f"max_len must be ≥ {MIN_JOINT_LENGTH}, got {self.max_len}")
        for name in ('d_e', 'd', 'd_h'):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    def to_dict(self) -> Dict:
        return asdict(self)


def _check_ids(tokens: Sequence[int], vocab_size: int, what: str) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ModelError(f"{what}: empty token sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ModelError(f"{what}: token id out of range [0, {vocab_size}) (got {int(ids.min())}..{int(ids.max())})")
    return ids


# ═══════════════════════════════════════════════════════════════════
# STUDENT TOWERS
# ═══════════════════════════════════════════════════════════════════

class TowerEncoder:
    """Embedding → mean pool → linear → tanh"""

    def __init__(self, role: str, embedding: Parameter, projection: Parameter, bias: Parameter):
        self.role = role
        self.embedding = embedding
        self.projection = projection
        self.bias = bias

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.embedding, self.projection, self.bias]

    def encode(self, tokens: Sequence[int]) -> Tensor:
        """tanh(mean_rows(E[tokens]) · W + b) → 1×d"""
        ids = _check_ids(tokens, self.vocab_size, f"{self.role} encoder")
        pooled = row_mean(gather_rows(self.embedding, ids))
        return tanh(add(matmul(pooled, self.projection), self.bias))

    def encode_batch(self, sequences: Sequence[Sequence[int]]) -> Tensor:
        """
        Encode several sequences at once → B×d

        Mean pooling is a constant pooling matrix times the gathered rows.
        """
        if not sequences:
            raise ModelError(f"{self.role} encoder: empty batch")
        checked = [_check_ids(seq, self.vocab_size, f"{self.role} encoder") for seq in sequences]
        lengths = [len(ids) for ids in checked]
        pool = np.zeros((len(checked), sum(lengths)))
        offset = 0
        for row, length in enumerate(lengths):
            pool[row, offset:offset + length] = 1.0 / length
            offset += length
        gathered = gather_rows(self.embedding, np.concatenate(checked))
        pooled = matmul(Tensor(pool), gathered)
        return tanh(add(matmul(pooled, self.projection), self.bias))

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        """Inference helper: 1-D embedding"""
        return self.encode(tokens).data[0]


class StudentModel:
    """Multi-tower student for one matching mode"""

    kind = 'student'

    def __init__(self, config: ModelConfig, mode: str, towers: Dict[str, TowerEncoder]):
        if mode not in MODE_ROLES:
            raise ModelError(f"unknown student mode {mode!r}; expected one of {STUDENT_MODES}")
        self.config = config
        self.mode = mode
        self.towers = towers

    @property
    def candidate_roles(self) -> Tuple[str, ...]:
        return MODE_ROLES[self.mode][1:]

    def tower(self, role: str) -> TowerEncoder:
        if role not in self.towers:
            raise ModelError(f"{self.mode} student has no {role} tower (towers: {sorted(self.towers)})")
        return self.towers[role]

    @property
    def query_tower(self) -> TowerEncoder:
        return self.towers['query']

    def encode_query(self, tokens: Sequence[int]) -> Tensor:
        return self.query_tower.encode(tokens)

    def encode_context(self, tokens: Sequence[int]) -> Tensor:
        return self.tower('context').encode(tokens)

    def encode_response(self, tokens: Sequence[int]) -> Tensor:
        return self.tower('response').encode(tokens)

    def encode_session(self, tokens: Sequence[int]) -> Tensor:
        return self.tower('session').encode(tokens)

    def named_parameters(self) -> Dict[str, Parameter]:
        named: Dict[str, Parameter] = {}
        seen = set()
        for role in MODE_ROLES[self.mode]:
            for param in self.towers[role].parameters():
                if id(param) not in seen:
                    seen.add(id(param))
                    named[param.name] = param
        return named

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def meta(self) -> Dict:
        return {'mode': self.mode}


# ═══════════════════════════════════════════════════════════════════
# TEACHER
# ═══════════════════════════════════════════════════════════════════

class CrossScorer:
    """One-tower teacher scoring a concatenated (query, candidate) pair"""

    kind = 'teacher'

    PARAMETER_NAMES = (
        'token_embedding', 'segment_embedding', 'position_embedding',
        'w_q', 'w_k', 'w_v', 'w_o',
        'head_w1', 'head_b1', 'head_w2', 'head_b2',
    )

    def __init__(self, config: ModelConfig, field: str, params: Dict[str, Parameter]):
        if field not in TEACHER_FIELDS:
            raise ModelError(f"unknown teacher field {field!r}; expected one of {TEACHER_FIELDS}")
        missing = [name for name in self.PARAMETER_NAMES if name not in params]
        if missing:
            raise ModelError(f"teacher parameters missing: {missing}")
        self.config = config
        self.field = field
        self.params = params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {name: self.params[name] for name in self.PARAMETER_NAMES}

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def meta(self) -> Dict:
        return {'field': self.field}

    def joint_inputs(self, query_tokens: Sequence[int], cand_tokens: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """Joint ids query ⊕ SEP ⊕ candidate and their segment ids"""
        query = _check_ids(query_tokens, self.config.vocab_size, "teacher query")
        cand = _check_ids(cand_tokens, self.config.vocab_size, "teacher candidate")
        joint = np.concatenate([query, [SEP_ID], cand]).astype(np.int64)
        if joint.size > self.config.max_len:
            raise ModelError(
                f"joint length {joint.size} exceeds max_len {self.config.max_len} "
                f"(query {query.size} + 1 + candidate {cand.size})"
            )
        segments = np.concatenate([np.zeros(query.size + 1, dtype=np.int64), np.ones(cand.size, dtype=np.int64)])
        return joint, segments

    def score(self, query_tokens: Sequence[int], cand_tokens: Sequence[int]) -> Tensor:
        """Relevance logit → 1×1"""
        p = self.params
        joint, segments = self.joint_inputs(query_tokens, cand_tokens)
        positions = np.arange(joint.size)

        x = add(
            add(gather_rows(p['token_embedding'], joint), gather_rows(p['segment_embedding'], segments)),
            gather_rows(p['position_embedding'], positions),
        )

        # only the first position feeds the head, so attend from it alone
        x0 = gather_rows(x, [0])
        q0 = matmul(x0, p['w_q'])
        keys = matmul(x, p['w_k'])
        values = matmul(x, p['w_v'])
        weights = masked_softmax(scalar_mul(matmul(q0, transpose(keys)), 1.0 / math.sqrt(self.config.d_e)))
        h0 = add(x0, matmul(matmul(weights, values), p['w_o']))

        hidden = tanh(add(matmul(h0, p['head_w1']), p['head_b1']))
        return add(matmul(hidden, p['head_w2']), p['head_b2'])

    def attention_weights(self, query_tokens: Sequence[int], cand_tokens: Sequence[int]) -> np.ndarray:
        """First-position attention distribution over the joint sequence"""
        p = self.params
        joint, segments = self.joint_inputs(query_tokens, cand_tokens)
        x = (p['token_embedding'].data[joint] + p['segment_embedding'].data[segments]
             + p['position_embedding'].data[np.arange(joint.size)])
        logits = (x[:1] @ p['w_q'].data) @ (x @ p['w_k'].data).T / math.sqrt(self.config.d_e)
        return masked_softmax(Tensor(logits)).data[0]


# ═══════════════════════════════════════════════════════════════════
# MODULE-LEVEL OPERATIONS
# ═══════════════════════════════════════════════════════════════════

def encode(enc: TowerEncoder, tokens: Sequence[int]) -> Tensor:
    return enc.encode(tokens)


def encode_batch(enc: TowerEncoder, sequences: Sequence[Sequence[int]]) -> Tensor:
    return enc.encode_batch(sequences)


def similarity(q_vec: Union[Tensor, np.ndarray, Sequence[float]],
               k_vec: Union[Tensor, np.ndarray, Sequence[float]]) -> float:
    """Dot product of two embeddings"""
    q = np.asarray(q_vec.data if isinstance(q_vec, Tensor) else q_vec, dtype=np.float64).reshape(-1)
    k = np.asarray(k_vec.data if isinstance(k_vec, Tensor) else k_vec, dtype=np.float64).reshape(-1)
    if q.shape != k.shape:
        raise ModelError(f"similarity: dimension mismatch {q.shape[0]} vs {k.shape[0]}")
    return float(np.dot(q, k))


def teacher_score(t: CrossScorer, query_tokens: Sequence[int], cand_tokens: Sequence[int]) -> float:
    return t.score(query_tokens, cand_tokens).item()


def _uniform(rng: np.random.Generator, name: str, shape: Tuple[int, int]) -> Parameter:
    return Parameter(name, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))


def _zeros(name: str, shape: Tuple[int, int]) -> Parameter:
    return Parameter(name, np.zeros(shape))


def init_student(cfg: ModelConfig, mode: str) -> StudentModel:
    """Seeded student for a matching mode"""
    cfg.validate()
    if mode not in MODE_ROLES:
        raise ModelError(f"unknown student mode {mode!r}; expected one of {STUDENT_MODES}")
    rng = np.random.default_rng(cfg.seed)

    towers: Dict[str, TowerEncoder] = {}
    for role in MODE_ROLES[mode]:
        if cfg.share_encoders and role == PRIMARY_ROLE[mode]:
            query = towers['query']
            towers[role] = TowerEncoder(role, query.embedding, query.projection, query.bias)
            continue
        towers[role] = TowerEncoder(
            role,
            embedding=_uniform(rng, f"{role}.embedding", (cfg.vocab_size, cfg.d_e)),
            projection=_uniform(rng, f"{role}.projection", (cfg.d_e, cfg.d)),
            bias=_zeros(f"{role}.bias", (1, cfg.d)),
        )

    model = StudentModel(cfg, mode, towers)
    logger.info(f"Initialised {mode} student: {sum(p.data.size for p in model.parameters()):,} parameters")
    return model


def init_teacher(cfg: ModelConfig, field: str) -> CrossScorer:
    """Seeded teacher for a candidate field"""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {
        'token_embedding': _uniform(rng, 'token_embedding', (cfg.vocab_size, cfg.d_e)),
        'segment_embedding': _uniform(rng, 'segment_embedding', (2, cfg.d_e)),
        'position_embedding': _uniform(rng, 'position_embedding', (cfg.max_len, cfg.d_e)),
        'w_q': _uniform(rng, 'w_q', (cfg.d_e, cfg.d_e)),
        'w_k': _uniform(rng, 'w_k', (cfg.d_e, cfg.d_e)),
        'w_v': _uniform(rng, 'w_v', (cfg.d_e, cfg.d_e)),
        'w_o': _uniform(rng, 'w_o', (cfg.d_e, cfg.d_e)),
        'head_w1': _uniform(rng, 'head_w1', (cfg.d_e, cfg.d_h)),
        'head_b1': _zeros('head_b1', (1, cfg.d_h)),
        'head_w2': _uniform(rng, 'head_w2', (cfg.d_h, 1)),
        'head_b2': _zeros('head_b2', (1, 1)),
    }
    teacher = CrossScorer(cfg, field, params)
    logger.info(f"Initialised {field} teacher: {sum(p.data.size for p in teacher.parameters()):,} parameters")
    return teacher


def init_params(cfg: ModelConfig, kind: str) -> Union[StudentModel, CrossScorer]:
    """
    Build a freshly initialised model

    Weights and embeddings ~ U(−0.05, 0.05) from the config seed; biases zero.

    Args:
        cfg: Model configuration
        kind: Student mode ('qc', 'qs', 'qr', 'dqs') or 'teacher_<field>'

    Returns:
        StudentModel or CrossScorer
    """
    if kind.startswith('teacher_'):
        return init_teacher(cfg, kind[len('teacher_'):])
    return init_student(cfg, kind)


def zero_parameters(model: Union[StudentModel, CrossScorer]):
    """Set every parameter to zero (fixture helper)"""
    for param in unique_parameters(model.parameters()):
        param.data.fill(0.0)
