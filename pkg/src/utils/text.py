#!/usr/bin/env python3
"""
Text utilities - tokenisation and vocabulary

Lowercase + whitespace + punctuation-strip tokeniser shared by every index
and model, and the frequency-thresholded vocabulary that maps tokens to
dense ids.

British English throughout.
"""

import hashlib
import string
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union
import logging

logger = logging.getLogger(__name__)

UNK_TOKEN = "[UNK]"
SEP_TOKEN = "[SEP]"
UNK_ID = 0
SEP_ID = 1

_PUNCTUATION = string.punctuation


class VocabularyError(ValueError):
    """Raised for malformed vocabulary files"""


class Vocabulary:
    """
    Bijective token → id map with reserved UNK and SEP ids

    Ids are dense 0..V-1. Reserved tokens occupy 0 and 1; the remaining
    tokens follow in descending frequency, ties broken lexicographically.
    """

    def __init__(self, tokens: Sequence[str]):
        """
        Args:
            tokens: Ordered non-reserved tokens (position gives the id offset)
        """
        self.id_to_token: List[str] = [UNK_TOKEN, SEP_TOKEN]
        self.token_to_id: Dict[str, int] = {UNK_TOKEN: UNK_ID, SEP_TOKEN: SEP_ID}

        for token in tokens:
            if token in self.token_to_id:
                raise VocabularyError(f"Duplicate token in vocabulary: {token!r}")
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def fingerprint(self) -> str:
        """sha256 over the ordered token list; equal fingerprints mean identical id assignment"""
        return hashlib.sha256("\n".join(self.id_to_token).encode('utf-8')).hexdigest()

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @classmethod
    def build(cls, token_streams: Iterable[Sequence[str]], min_freq: int = 2) -> "Vocabulary":
        """
        Build a vocabulary from tokenised text

        Args:
            token_streams: Iterable of token lists
            min_freq: Minimum corpus frequency for a token to get its own id

        Returns:
            Deterministic Vocabulary for the given corpus and threshold
        """
        counts: Counter = Counter()
        for stream in token_streams:
            counts.update(stream)

        kept = [
            token for token, freq in counts.items()
            if freq >= min_freq and token not in (UNK_TOKEN, SEP_TOKEN)
        ]
        kept.sort(key=lambda token: (-counts[token], token))

        logger.info(f"Vocabulary built: {len(kept) + 2} ids ({len(counts)} distinct tokens, min_freq={min_freq})")
        return cls(kept)

    def save(self, path: Path):
        """Write 'token<TAB>id' lines sorted by id"""
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for idx, token in enumerate(self.id_to_token):
                f.write(f"{token}\t{idx}\n")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        """Read a vocabulary file written by save()"""
        tokens: List[str] = []
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f):
                line = line.rstrip('\n')
                if not line:
                    continue
                try:
                    token, idx = line.rsplit('\t', 1)
                    idx = int(idx)
                except ValueError:
                    raise VocabularyError(f"{path}: malformed line {line_no + 1}: {line!r}")
                if idx != line_no:
                    raise VocabularyError(f"{path}: ids must be dense and sorted (line {line_no + 1} has id {idx})")
                tokens.append(token)

        if tokens[:2] != [UNK_TOKEN, SEP_TOKEN]:
            raise VocabularyError(f"{path}: reserved tokens missing from ids 0 and 1")
        return cls(tokens[2:])


def tokenize(text: str, vocab: Optional[Vocabulary] = None) -> Union[List[str], List[int]]:
    """
    Tokenise text

    Lowercases, splits on whitespace, strips leading/trailing punctuation
    from each token and drops empty tokens. With a vocabulary the tokens are
    mapped to ids (unknown tokens → UNK id).

    Args:
        text: Raw text
        vocab: Optional vocabulary

    Returns:
        Token strings, or ids when a vocabulary is given
    """
    tokens = [tok.strip(_PUNCTUATION) for tok in text.lower().split()]
    tokens = [tok for tok in tokens if tok]
    if vocab is None:
        return tokens
    return [vocab.lookup(tok) for tok in tokens]


def normalise(text: str) -> str:
    """Tokenise-and-rejoin normalisation used for response matching"""
    return " ".join(tokenize(text))


def word_count(utterances: Sequence[str]) -> int:
    """Number of whitespace-separated words across utterances, punctuation included"""
    return sum(len(u.split()) for u in utterances)


def utterance_words(utterances: Sequence[str]) -> List[str]:
    """Word tokens of all utterances, concatenated (no separators)"""
    words: List[str] = []
    for utterance in utterances:
        words.extend(tokenize(utterance))
    return words


def utterance_ids(utterances: Sequence[str], vocab: Vocabulary) -> List[int]:
    """
    Flatten utterances into one id sequence with SEP between utterances

    Args:
        utterances: Ordered utterances
        vocab: Vocabulary

    Returns:
        Id sequence
    """
    ids: List[int] = []
    for i, utterance in enumerate(utterances):
        if i > 0:
            ids.append(SEP_ID)
        ids.extend(tokenize(utterance, vocab))
    return ids
