"""Shared fixtures for the dialogue retrieval test suite"""

import sys
from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.core.corpus import DialoguePair, TrainGroup  # noqa: E402
from src.core.synthetic import toy_corpus  # noqa: E402
from src.learning.autodiff import Parameter, Tape, Tensor, backward  # noqa: E402
from src.utils.text import Vocabulary, tokenize  # noqa: E402


def max_relative_error(build_loss: Callable[[], Tensor], params: List[Parameter], h: float = 1e-5) -> float:
    """
    Worst relative error between tape gradients and central differences

    build_loss must be a pure function of the parameters' current values.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(*p.data.shape):
            original = p.data[idx]
            p.data[idx] = original + h
            plus = build_loss().item()
            p.data[idx] = original - h
            minus = build_loss().item()
            p.data[idx] = original
            numeric[idx] = (plus - minus) / (2 * h)
        scale = max(np.linalg.norm(grad) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(grad - numeric) / scale))
    return worst


@pytest.fixture
def gradcheck():
    return max_relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_pairs() -> List[DialoguePair]:
    return toy_corpus(60, seed=0)


@pytest.fixture
def small_groups() -> List[TrainGroup]:
    groups = []
    for g in range(6):
        contexts = [
            (f"topic{g} question {k} here please", f"more topic{g} detail now")
            for k in range(3)
        ]
        groups.append(TrainGroup(response=f"reply{g} answer words for you", contexts=contexts))
    return groups


@pytest.fixture
def small_vocab(small_groups) -> Vocabulary:
    streams = []
    for group in small_groups:
        streams.append(tokenize(group.response))
        for context in group.contexts:
            for utterance in context:
                streams.append(tokenize(utterance))
    return Vocabulary.build(streams, min_freq=1)
