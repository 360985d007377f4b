#!/usr/bin/env python3
"""
Dialogue Corpus - filtering, train groups and MC/SC test-set construction

Turns a raw corpus of (context, response) pairs into:
- MC test set: responses with several source contexts; one is held out as
  the query, the siblings go back into the database
- SC test set: responses with exactly one source context
- Candidate database: every remaining pair (id, context, response, session)
- Train groups: responses with all of their (≥2) contexts, reserved before
  the database is assembled so no train context leaks into it

British English throughout.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple
import logging

import numpy as np

from src.utils.text import SEP_TOKEN, Vocabulary, utterance_ids, word_count

logger = logging.getLogger(__name__)

# Length limits (words, lower inclusive / upper exclusive)
MIN_CONTEXT_WORDS = 5
MAX_CONTEXT_WORDS = 128
MIN_RESPONSE_WORDS = 5
MAX_RESPONSE_WORDS = 64

# Responses with more source contexts than this are never MC queries
MAX_MC_CONTEXTS = 50

DEFAULT_TRAIN_RATIO = 0.5

Context = Tuple[str, ...]


class CorpusError(ValueError):
    """Raised for malformed corpus files"""


class SplitError(ValueError):
    """Raised when a split cannot be built as requested"""


@dataclass(frozen=True)
class DialoguePair:
    """One context-response pair"""
    id: int
    context: Context
    response: str

    @property
    def key(self) -> Tuple[Context, str]:
        return (self.context, self.response)

    def to_dict(self, with_session: bool = False) -> Dict:
        row = {'id': self.id, 'context': list(self.context), 'response': self.response}
        if with_session:
            row['session'] = session_of(self).text
        return row

    @classmethod
    def from_dict(cls, row: Dict) -> "DialoguePair":
        context = row['context']
        if isinstance(context, str) or not isinstance(context, list):
            raise CorpusError(f"context must be a list of utterances, got {type(context).__name__}")
        if not context:
            raise CorpusError(f"pair {row.get('id')} has an empty context")
        return cls(id=int(row['id']), context=tuple(str(u) for u in context), response=str(row['response']))


@dataclass(frozen=True)
class Session:
    """Context utterances followed by the response, as one document"""
    pair_id: int
    text: str


@dataclass
class TrainGroup:
    """A response with all of its distinct contexts (at least two)"""
    response: str
    contexts: List[Context]

    def to_dict(self) -> Dict:
        return {'response': self.response, 'contexts': [list(c) for c in self.contexts]}

    @classmethod
    def from_dict(cls, row: Dict) -> "TrainGroup":
        return cls(response=str(row['response']), contexts=[tuple(c) for c in row['contexts']])


@dataclass
class SplitResult:
    """Everything build_splits produces"""
    mc_test: List[DialoguePair]
    sc_test: List[DialoguePair]
    database: List[DialoguePair]
    train_groups: List[TrainGroup]
    stats: Dict = field(default_factory=dict)

    def save(self, out_dir: Path):
        """Write mc.jsonl, sc.jsonl, database.jsonl and train_groups.jsonl"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_pairs(self.mc_test, out_dir / "mc.jsonl")
        save_pairs(self.sc_test, out_dir / "sc.jsonl")
        save_pairs(self.database, out_dir / "database.jsonl", with_session=True)
        save_groups(self.train_groups, out_dir / "train_groups.jsonl")

    @classmethod
    def load(cls, in_dir: Path) -> "SplitResult":
        in_dir = Path(in_dir)
        return cls(
            mc_test=load_pairs(in_dir / "mc.jsonl"),
            sc_test=load_pairs(in_dir / "sc.jsonl"),
            database=load_pairs(in_dir / "database.jsonl"),
            train_groups=load_groups(in_dir / "train_groups.jsonl"),
        )


# ═══════════════════════════════════════════════════════════════════
# DERIVED VIEWS
# ═══════════════════════════════════════════════════════════════════

def session_of(pair: DialoguePair) -> Session:
    """Session text: utterances then response, separated by the SEP token"""
    return Session(pair_id=pair.id, text=f" {SEP_TOKEN} ".join(list(pair.context) + [pair.response]))


def session_utterances(context: Sequence[str], response: str) -> List[str]:
    return list(context) + [response]


def context_ids(context: Sequence[str], vocab: Vocabulary) -> List[int]:
    return utterance_ids(context, vocab)


def session_ids(context: Sequence[str], response: str, vocab: Vocabulary) -> List[int]:
    return utterance_ids(session_utterances(context, response), vocab)


def response_ids(response: str, vocab: Vocabulary) -> List[int]:
    return utterance_ids([response], vocab)


# ═══════════════════════════════════════════════════════════════════
# FILTERING AND GROUPING
# ═══════════════════════════════════════════════════════════════════

def is_within_limits(pair: DialoguePair) -> bool:
    context_words = word_count(pair.context)
    response_words = word_count([pair.response])
    return (
        MIN_CONTEXT_WORDS <= context_words < MAX_CONTEXT_WORDS
        and MIN_RESPONSE_WORDS <= response_words < MAX_RESPONSE_WORDS
    )


def filter_pairs(pairs: Iterable[DialoguePair]) -> List[DialoguePair]:
    """
    Keep pairs whose context has [5, 128) words and response [5, 64) words

    Args:
        pairs: Raw pairs

    Returns:
        Pairs within the length limits, input order preserved
    """
    pairs = list(pairs)
    kept = [p for p in pairs if is_within_limits(p)]
    logger.info(f"Length filter kept {len(kept)}/{len(pairs)} pairs")
    return kept


def dedupe_pairs(pairs: Iterable[DialoguePair]) -> List[DialoguePair]:
    """Drop rows with an identical (context, response), keeping the lowest id"""
    best: Dict[Tuple[Context, str], DialoguePair] = {}
    for pair in pairs:
        current = best.get(pair.key)
        if current is None or pair.id < current.id:
            best[pair.key] = pair
    return sorted(best.values(), key=lambda p: p.id)


def group_by_response(pairs: Iterable[DialoguePair]) -> Dict[str, List[DialoguePair]]:
    """Response string → its pairs ordered by id"""
    groups: Dict[str, List[DialoguePair]] = {}
    for pair in sorted(pairs, key=lambda p: p.id):
        groups.setdefault(pair.response, []).append(pair)
    return groups


def build_train_groups(pairs: Iterable[DialoguePair]) -> List[TrainGroup]:
    """
    One group per response string with at least two distinct contexts

    Args:
        pairs: Filtered pairs

    Returns:
        Groups sorted by response string; contexts in pair-id order
    """
    groups = []
    for response, members in sorted(group_by_response(dedupe_pairs(pairs)).items()):
        contexts: List[Context] = []
        seen = set()
        for pair in members:
            if pair.context not in seen:
                seen.add(pair.context)
                contexts.append(pair.context)
        if len(contexts) >= 2:
            groups.append(TrainGroup(response=response, contexts=contexts))
    return groups


# ═══════════════════════════════════════════════════════════════════
# SPLIT CONSTRUCTION
# ═══════════════════════════════════════════════════════════════════

def build_splits(
    pairs: Sequence[DialoguePair],
    mc_size: int,
    sc_size: int,
    seed: int,
    train_ratio: float = DEFAULT_TRAIN_RATIO,
    max_mc_contexts: int = MAX_MC_CONTEXTS
) -> SplitResult:
    """
    Build MC/SC test sets, the candidate database and train groups

    Process:
    1. Deduplicate rows and group by response
    2. Reserve train_ratio of the multi-context responses as train groups
    3. Drop non-train pairs whose context also appears in a train group
    4. Sample MC responses (2..max_mc_contexts source contexts, ≥2 left);
       one random context becomes the query, the rest stay in the database
    5. Sample SC responses (exactly one source context)
    6. Everything else is the database

    Args:
        pairs: Filtered pairs
        mc_size: Number of MC test pairs
        sc_size: Number of SC test pairs
        seed: RNG seed
        train_ratio: Fraction of multi-context responses reserved for training
        max_mc_contexts: Upper bound on source contexts of an MC response

    Returns:
        SplitResult (deterministic under seed)

    Raises:
        SplitError if too few eligible responses exist
    """
    if not 0.0 <= train_ratio < 1.0:
        raise SplitError(f"train_ratio must be in [0, 1), got {train_ratio}")

    rng = np.random.default_rng(seed)
    unique = dedupe_pairs(pairs)
    by_response = group_by_response(unique)
    responses = sorted(by_response)
    source_counts = {r: len(by_response[r]) for r in responses}

    multi = [r for r in responses if source_counts[r] >= 2]
    n_train = int(round(len(multi) * train_ratio))
    order = rng.permutation(len(multi))
    train_responses = {multi[i] for i in order[:n_train]}

    train_pairs = [p for r in sorted(train_responses) for p in by_response[r]]
    train_contexts = {p.context for p in train_pairs}

    rest = [p for p in unique if p.response not in train_responses]
    leaked = [p for p in rest if p.context in train_contexts]
    if leaked:
        logger.info(f"Removed {len(leaked)} pairs whose context also appears in a train group")
    rest = [p for p in rest if p.context not in train_contexts]
    rest_by_response = group_by_response(rest)

    mc_eligible = sorted(
        r for r, members in rest_by_response.items()
        if 2 <= source_counts[r] <= max_mc_contexts and len(members) >= 2
    )
    sc_eligible = sorted(r for r in rest_by_response if source_counts[r] == 1)

    shortfalls = []
    if mc_size > len(mc_eligible):
        shortfalls.append(f"MC needs {mc_size} responses but only {len(mc_eligible)} are eligible (short by {mc_size - len(mc_eligible)})")
    if sc_size > len(sc_eligible):
        shortfalls.append(f"SC needs {sc_size} responses but only {len(sc_eligible)} are eligible (short by {sc_size - len(sc_eligible)})")
    if shortfalls:
        raise SplitError("; ".join(shortfalls))

    mc_test: List[DialoguePair] = []
    for idx in sorted(rng.choice(len(mc_eligible), size=mc_size, replace=False).tolist()):
        members = rest_by_response[mc_eligible[idx]]
        mc_test.append(members[int(rng.integers(len(members)))])

    sc_test = [
        rest_by_response[sc_eligible[idx]][0]
        for idx in sorted(rng.choice(len(sc_eligible), size=sc_size, replace=False).tolist())
    ]

    held_out = {p.id for p in mc_test} | {p.id for p in sc_test}
    database = [p for p in rest if p.id not in held_out]

    result = SplitResult(
        mc_test=sorted(mc_test, key=lambda p: p.id),
        sc_test=sorted(sc_test, key=lambda p: p.id),
        database=database,
        train_groups=build_train_groups(train_pairs),
        stats={
            'source_pairs': len(pairs),
            'unique_pairs': len(unique),
            'multi_context_responses': len(multi),
            'train_responses': len(train_responses),
            'leakage_removed': len(leaked),
            'mc_eligible': len(mc_eligible),
            'sc_eligible': len(sc_eligible),
        }
    )

    logger.info(
        f"Split built: MC={len(result.mc_test)} SC={len(result.sc_test)} "
        f"database={len(result.database)} train_groups={len(result.train_groups)}"
    )
    return result


# ═══════════════════════════════════════════════════════════════════
# JSON-LINES IO
# ═══════════════════════════════════════════════════════════════════

def _read_jsonl(path: Path) -> Iterable[Tuple[int, Dict]]:
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: line {line_no} is not valid JSON ({e})")


def load_pairs(path: Path) -> List[DialoguePair]:
    """Read {"id", "context", "response"} lines"""
    pairs = []
    seen = set()
    for line_no, row in _read_jsonl(Path(path)):
        try:
            pair = DialoguePair.from_dict(row)
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusError(f"{path}: line {line_no}: {e}")
        if pair.id in seen:
            raise CorpusError(f"{path}: line {line_no}: duplicate pair id {pair.id}")
        seen.add(pair.id)
        pairs.append(pair)
    return pairs


def save_pairs(pairs: Iterable[DialoguePair], path: Path, with_session: bool = False):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_dict(with_session=with_session), ensure_ascii=False) + "\n")


def load_groups(path: Path) -> List[TrainGroup]:
    groups = []
    for line_no, row in _read_jsonl(Path(path)):
        try:
            group = TrainGroup.from_dict(row)
        except (KeyError, TypeError) as e:
            raise CorpusError(f"{path}: line {line_no}: {e}")
        if len(group.contexts) < 2:
            raise CorpusError(f"{path}: line {line_no}: train group needs at least 2 contexts")
        groups.append(group)
    return groups


def save_groups(groups: Iterable[TrainGroup], path: Path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for group in groups:
            f.write(json.dumps(group.to_dict(), ensure_ascii=False) + "\n")
