#!/usr/bin/env python3
"""
Workdir - flat artifact directory with a content-hash manifest

manifest.json records the sha256 of every artifact a command wrote and,
for indexes, the checkpoint (name and hash) the index was built from.
No timestamps are stored, so identical runs give identical manifests.

British English throughout
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, Optional
import logging

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOG_NAME = "dialogue_retrieval.log"

# Artifact name prefix → command that produces it
PRODUCERS = {
    'corpus': 'generate-corpus',
    'vocab': 'build-dataset',
    'mc': 'build-dataset',
    'sc': 'build-dataset',
    'database': 'build-dataset',
    'train_groups': 'build-dataset',
    'student': 'train-student',
    'teacher': 'train-teacher',
    'bm25': 'build-index',
    'db': 'build-index',
    'retrieval': 'retrieve',
    'eval': 'evaluate',
}


class MissingArtifactError(FileNotFoundError):
    """A command needs a file an earlier command should have written"""


class ArtifactMismatchError(ValueError):
    """An index was built from a different checkpoint than the one supplied"""


def file_sha256(path: Path) -> str:
    """SHA256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def producer_of(name: str) -> str:
    stem = name.split('.')[0]
    for prefix, command in PRODUCERS.items():
        if stem == prefix or stem.startswith(prefix + '_'):
            return command
    return 'an earlier command'


class Workdir:
    """Artifact paths, existence checks and the manifest"""

    def __init__(self, root: Path):
        """
        Args:
            root: Workdir directory (created if missing)
        """
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_file = self.root / MANIFEST_NAME
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> Dict:
        if self.manifest_file.exists():
            with open(self.manifest_file, 'r', encoding='utf-8') as f:
                return json.load(f)
        return {'artifacts': {}}

    def _save_manifest(self):
        with open(self.manifest_file, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    @property
    def log_file(self) -> Path:
        return self.root / LOG_NAME

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def require(self, name: str, needed_by: str) -> Path:
        """
        Path of an artifact that must already exist

        Raises:
            MissingArtifactError naming the file and the command that writes it
        """
        path = self.path(name)
        if not path.exists():
            raise MissingArtifactError(
                f"{needed_by} needs {path}, which does not exist (run {producer_of(name)} first)"
            )
        return path

    def record(self, name: str, built_from: Optional[str] = None):
        """
        Hash an artifact into the manifest

        Args:
            name: Artifact file name
            built_from: Checkpoint name the artifact was derived from
        """
        entry = {'sha256': file_sha256(self.path(name)), 'bytes': self.path(name).stat().st_size}
        if built_from is not None:
            entry['built_from'] = {'name': built_from, 'sha256': file_sha256(self.require(built_from, name))}
        self.manifest['artifacts'][name] = entry
        self._save_manifest()
        logger.info(f"Recorded {name} ({entry['sha256'][:12]})")

    def entry(self, name: str) -> Optional[Dict]:
        return self.manifest['artifacts'].get(name)

    def check_built_from(self, index_name: str, checkpoint_name: str):
        """
        Refuse an index built from a different checkpoint

        Raises:
            ArtifactMismatchError when the manifest names another checkpoint or hash
        """
        entry = self.entry(index_name)
        if entry is None or 'built_from' not in entry:
            raise ArtifactMismatchError(f"{index_name} has no provenance in {self.manifest_file}; rebuild it")
        source = entry['built_from']
        current = file_sha256(self.require(checkpoint_name, index_name))
        if source['name'] != checkpoint_name or source['sha256'] != current:
            raise ArtifactMismatchError(
                f"{index_name} was built from {source['name']} ({source['sha256'][:12]}), "
                f"not {checkpoint_name} ({current[:12]}); rebuild the index"
            )
