#!/usr/bin/env python3
"""
Model checkpoints - JSON serialisation of every parameter

Format:
    {"format_version": 1, "kind": "student"|"teacher", "meta": {...},
     "config": {...}, "parameters": {name: {"shape": [r, c], "data": [...]}}}

Floats are written with their shortest round-trip representation
(at most 17 significant digits), so load(save(m)) is bit-exact.

British English throughout.
"""

import json
import os
from pathlib import Path
from typing import Dict, Optional, Union
import logging

import numpy as np

from src.learning.models import CrossScorer, ModelConfig, StudentModel, init_student, init_teacher

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

Model = Union[StudentModel, CrossScorer]


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint"""


def checkpoint_payload(model: Model) -> Dict:
    return {
        'format_version': FORMAT_VERSION,
        'kind': model.kind,
        'meta': model.meta(),
        'config': model.config.to_dict(),
        'parameters': {
            name: {'shape': list(param.shape), 'data': param.data.reshape(-1).tolist()}
            for name, param in model.named_parameters().items()
        },
    }


def save_checkpoint(model: Model, path: Path):
    """
    Write a checkpoint atomically

    Args:
        model: Student or teacher
        path: Destination file
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(checkpoint_payload(model), f, separators=(',', ':'))
    os.replace(tmp, path)
    logger.info(f"Saved {model.kind} checkpoint: {path}")


def load_checkpoint(path: Path, expected_kind: Optional[str] = None) -> Model:
    """
    Read a checkpoint back into a model

    Args:
        path: Checkpoint file
        expected_kind: 'student' or 'teacher' to enforce the kind

    Returns:
        StudentModel or CrossScorer with every tensor restored

    Raises:
        CheckpointError on truncation, version mismatch, unknown or missing
        parameter names and shape mismatches
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not a complete checkpoint ({e})")

    version = payload.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version!r} not supported (expected {FORMAT_VERSION})")

    kind = payload.get('kind')
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind} checkpoint, found {kind!r}")

    try:
        config = ModelConfig(**payload['config'])
        meta = payload.get('meta', {})
        if kind == 'student':
            model = init_student(config, meta['mode'])
        elif kind == 'teacher':
            model = init_teacher(config, meta['field'])
        else:
            raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed header ({e})")

    stored = payload.get('parameters', {})
    expected = model.named_parameters()

    unknown = sorted(set(stored) - set(expected))
    if unknown:
        raise CheckpointError(f"{path}: unknown parameter name(s): {', '.join(unknown)}")
    missing = sorted(set(expected) - set(stored))
    if missing:
        raise CheckpointError(f"{path}: missing parameter(s): {', '.join(missing)}")

    for name, param in expected.items():
        entry = stored[name]
        shape = tuple(entry['shape'])
        if shape != param.shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, model expects {param.shape}")
        data = np.asarray(entry['data'], dtype=np.float64)
        if data.size != shape[0] * shape[1]:
            raise CheckpointError(f"{path}: {name} holds {data.size} values for shape {shape}")
        param.data[...] = data.reshape(shape)

    logger.info(f"Loaded {kind} checkpoint: {path}")
    return model
