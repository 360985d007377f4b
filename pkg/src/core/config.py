#!/usr/bin/env python3
"""
Run configuration - one file, every field overridable by a flag

Precedence (lowest first): dataclass defaults, config file, environment
(workdir only), command-line flags.

Any field may be written nested (train: {batch_size: 16}) or flat at the
top level (batch_size: 16). Writing it both ways with different values is
a conflict.

British English throughout.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin
import logging

import yaml

from src.core.corpus import DEFAULT_TRAIN_RATIO, MAX_MC_CONTEXTS
from src.learning.models import MIN_JOINT_LENGTH, STUDENT_MODES, ModelConfig
from src.learning.training import TrainConfig

logger = logging.getLogger(__name__)

WORKDIR_ENV = "DIALOGUE_RETRIEVAL_WORKDIR"
DEFAULT_CONFIG_FILE = Path(__file__).resolve().parents[2] / "config.yaml"


class ConfigError(ValueError):
    """Unreadable config file, unknown field or bad value"""


class ConfigConflictError(ConfigError):
    """A field given twice with different values"""


# ═══════════════════════════════════════════════════════════════════
# SECTIONS
# ═══════════════════════════════════════════════════════════════════

@dataclass
class PathsConfig:
    corpus_path: Optional[str] = None
    workdir: Optional[str] = None


@dataclass
class CorpusConfig:
    mc_size: int = 40
    sc_size: int = 40
    train_ratio: float = DEFAULT_TRAIN_RATIO
    max_mc_contexts: int = MAX_MC_CONTEXTS
    min_freq: int = 2
    toy_groups: int = 240


@dataclass
class ModelSection:
    mode: str = 'qs'
    d_e: int = 64
    d: int = 64
    d_h: int = 64
    max_len: int = 400
    share_encoders: bool = False

    def model_config(self, vocab_size: int, seed: int, vocab_fingerprint: Optional[str] = None) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_e=self.d_e, d=self.d, d_h=self.d_h,
                           max_len=self.max_len, share_encoders=self.share_encoders, seed=seed,
                           vocab_fingerprint=vocab_fingerprint)


@dataclass
class IndexConfig:
    k1: float = 1.2
    b: float = 0.75
    n_lists: Optional[int] = None
    nprobe: Optional[int] = None
    kmeans_iters: int = 10


@dataclass
class EvalConfig:
    ks: List[int] = field(default_factory=lambda: [1, 20, 100, 500])
    top_k: int = 500
    backend: str = 'dense-exact'
    dqs_mode: str = 'exact'
    fused_k: Optional[int] = None
    add_k: float = 0.1
    strict: bool = False
    record_timing: bool = False
    bench_repeats: int = 5
    bench_warmup: int = 1
    sweep_sizes: List[int] = field(default_factory=lambda: [100, 300, 1000])


SECTIONS = {
    'paths': PathsConfig,
    'corpus': CorpusConfig,
    'model': ModelSection,
    'train': TrainConfig,
    'index': IndexConfig,
    'eval': EvalConfig,
}

# Set only through the top-level seed
RESERVED = {('train', 'seed')}


def _field_owners() -> Dict[str, str]:
    owners: Dict[str, str] = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if (section, f.name) in RESERVED:
                continue
            if f.name in owners:
                raise ConfigError(f"field {f.name!r} is defined in both {owners[f.name]} and {section}")
            owners[f.name] = section
    return owners


FIELD_OWNERS = _field_owners()


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.train.seed = self.seed

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir or 'workdir')

    def to_dict(self) -> Dict:
        out = {'seed': self.seed}
        for section in SECTIONS:
            values = asdict(getattr(self, section))
            if section == 'train':
                values.pop('seed')
            out[section] = values
        return out


# ═══════════════════════════════════════════════════════════════════
# LOADING
# ═══════════════════════════════════════════════════════════════════

def read_config_file(path: Path) -> Dict:
    """Parse a YAML (.yaml/.yml) or JSON (.json) config file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    suffix = path.suffix.lower()
    with open(path, 'r', encoding='utf-8') as f:
        try:
            if suffix in ('.yaml', '.yml'):
                data = yaml.safe_load(f)
            elif suffix == '.json':
                data = json.load(f)
            else:
                raise ConfigError(f"{path}: unsupported config format {suffix!r} (use .yaml, .yml or .json)")
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: cannot parse config ({e})")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def merge_layout(raw: Dict, source: str) -> Dict[str, Dict[str, Any]]:
    """
    Fold flat and nested fields into {section: {field: value}}

    Raises:
        ConfigConflictError naming both spellings when they disagree
        ConfigError on unknown sections or fields
    """
    merged: Dict[str, Dict[str, Any]] = {'': {}}
    for section in SECTIONS:
        merged[section] = {}

    for key, value in raw.items():
        if key == 'seed':
            merged['']['seed'] = value
        elif key in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: section {key!r} must be a mapping")
            for name, inner in value.items():
                if FIELD_OWNERS.get(name) != key:
                    raise ConfigError(f"{source}: unknown field {key}.{name}")
                merged[key][name] = inner

    for key, value in raw.items():
        if key == 'seed' or key in SECTIONS:
            continue
        section = FIELD_OWNERS.get(key)
        if section is None:
            raise ConfigError(f"{source}: unknown field {key!r}")
        nested = merged[section]
        if key in nested and nested[key] != value:
            raise ConfigConflictError(
                f"{source}: {key} is {value!r} at the top level but {nested[key]!r} under {section}.{key}"
            )
        nested[key] = value

    return merged


def build_config(layers: List[Tuple[str, Dict[str, Dict[str, Any]]]]) -> RunConfig:
    """Apply merged layers in order; later layers win"""
    values: Dict[str, Dict[str, Any]] = {'': {}}
    for section in SECTIONS:
        values[section] = {}
    for _, layer in layers:
        for section, entries in layer.items():
            values[section].update(entries)

    try:
        sections = {section: cls(**values[section]) for section, cls in SECTIONS.items()}
    except TypeError as e:
        raise ConfigError(f"bad configuration field: {e}")
    seed = int(values[''].get('seed', 0))
    return RunConfig(seed=seed, **sections)


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load the run configuration

    Args:
        path: Config file (default: config.yaml next to the entry script, if present)
        overrides: Flat field → value from command-line flags

    Returns:
        RunConfig
    """
    layers = []
    file_path = Path(path) if path else (DEFAULT_CONFIG_FILE if DEFAULT_CONFIG_FILE.exists() else None)
    if file_path is not None:
        layers.append((str(file_path), merge_layout(read_config_file(file_path), str(file_path))))
        logger.info(f"Configuration loaded from {file_path}")

    file_workdir = layers[0][1]['paths'].get('workdir') if layers else None
    if not file_workdir and os.getenv(WORKDIR_ENV):
        layers.append((WORKDIR_ENV, merge_layout({'workdir': os.getenv(WORKDIR_ENV)}, WORKDIR_ENV)))

    if overrides:
        layers.append(('command line', merge_layout(overrides, 'command line')))

    return build_config(layers)


# ═══════════════════════════════════════════════════════════════════
# FLAGS
# ═══════════════════════════════════════════════════════════════════

def _parse_bool(text: str) -> bool:
    lowered = str(text).lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_weights(text: str) -> Dict[str, float]:
    """context=1,response=0.5"""
    weights = {}
    for item in text.split(','):
        name, _, value = item.partition('=')
        if not value:
            raise ConfigError(f"expected name=value pairs, got {text!r}")
        weights[name.strip()] = float(value)
    return weights


def _base_type(tp):
    if get_origin(tp) is Union:
        tp = next(arg for arg in get_args(tp) if arg is not type(None))
    return get_origin(tp) or tp


FLAG_ALIASES = {'lam': '--lambda'}


def flag_specs() -> List[Tuple[str, str, Dict[str, Any]]]:
    """(field, flag, argparse kwargs) for every overridable field"""
    specs = [('seed', '--seed', {'type': int})]
    for name, section in FIELD_OWNERS.items():
        cls = SECTIONS[section]
        tp = _base_type(next(f.type for f in fields(cls) if f.name == name))
        flag = FLAG_ALIASES.get(name, '--' + name.replace('_', '-'))
        if tp is bool:
            kwargs = {'type': _parse_bool, 'metavar': 'BOOL'}
        elif tp is list:
            kwargs = {'type': int, 'nargs': '+'}
        elif tp is dict:
            kwargs = {'type': _parse_weights, 'metavar': 'NAME=W,...'}
        else:
            kwargs = {'type': tp}
        specs.append((name, flag, kwargs))
    return specs


def add_config_flags(parser):
    """Register one flag per config field (default None = not given)"""
    group = parser.add_argument_group('configuration overrides')
    for name, flag, kwargs in flag_specs():
        group.add_argument(flag, dest=name, default=None, help=f"override {name}", **kwargs)


def overrides_from_args(args) -> Dict[str, Any]:
    return {name: getattr(args, name) for name, _, _ in flag_specs() if getattr(args, name, None) is not None}


# ═══════════════════════════════════════════════════════════════════
# VALIDATION
# ═══════════════════════════════════════════════════════════════════

def validate_config(config: RunConfig) -> Tuple[bool, List[str]]:
    """
    Check value ranges

    Returns:
        (is_valid, list of issues)
    """
    issues = []
    train, model, index, ev, corpus = config.train, config.model, config.index, config.eval, config.corpus

    if train.temperature <= 0:
        issues.append(f"temperature must be > 0 (got {train.temperature})")
    if train.distill_rate < 0:
        issues.append(f"distill_rate must be ≥ 0 (got {train.distill_rate})")
    if train.batch_size < 2:
        issues.append(f"batch_size must be ≥ 2 (got {train.batch_size})")
    if train.teacher_batch_size < 2:
        issues.append(f"teacher_batch_size must be ≥ 2 (got {train.teacher_batch_size})")
    if train.lr < 0:
        issues.append(f"lr must be ≥ 0 (got {train.lr})")
    if model.max_len < MIN_JOINT_LENGTH:
        issues.append(f"max_len must be ≥ {MIN_JOINT_LENGTH} (got {model.max_len})")
    if model.mode not in STUDENT_MODES:
        issues.append(f"mode must be one of {STUDENT_MODES} (got {model.mode!r})")
    if not ev.ks or any(k < 1 for k in ev.ks):
        issues.append(f"ks must be a non-empty list of positive integers (got {ev.ks})")
    if ev.top_k < max(ev.ks or [1]):
        issues.append(f"top_k ({ev.top_k}) must be ≥ the largest K ({max(ev.ks)})")
    if not 0 < corpus.train_ratio < 1:
        issues.append(f"train_ratio must be within (0, 1) (got {corpus.train_ratio})")
    if index.k1 < 0:
        issues.append(f"k1 must be ≥ 0 (got {index.k1})")
    if not 0 <= index.b <= 1:
        issues.append(f"b must be within [0, 1] (got {index.b})")
    if ev.add_k <= 0:
        issues.append(f"add_k must be > 0 (got {ev.add_k})")
    for name, value in (('n_lists', index.n_lists), ('nprobe', index.nprobe), ('fused_k', ev.fused_k)):
        if value is not None and value < 1:
            issues.append(f"{name} must be ≥ 1 or null for the default (got {value})")

    return (len(issues) == 0, issues)
