#!/usr/bin/env python3
"""
Dataset Validator - exhaustive checks on a built split

Validates:
- MC queries keep at least one sibling context in the database
- SC responses have no context in the database
- Train-group contexts never appear as database contexts
- MC responses had 2..50 contexts in the source corpus
- Test pairs and database pairs are id-disjoint
- Every pair respects the length limits

British English throughout.
"""

from collections import Counter
from typing import List, Optional, Sequence, Tuple
import logging

from src.core.corpus import (
    MAX_MC_CONTEXTS,
    DialoguePair,
    SplitResult,
    dedupe_pairs,
    is_within_limits,
)

logger = logging.getLogger(__name__)


class SplitValidator:
    """
    Validate a SplitResult against the construction rules

    Every check is exhaustive (no sampling); issues are collected rather
    than raised so a single run reports everything wrong at once.
    """

    def __init__(
        self,
        split: SplitResult,
        source_pairs: Optional[Sequence[DialoguePair]] = None,
        max_mc_contexts: int = MAX_MC_CONTEXTS,
        max_issues_per_check: int = 5
    ):
        """
        Args:
            split: Split to validate
            source_pairs: Filtered source corpus (enables the multiplicity check)
            max_mc_contexts: Upper bound on MC source multiplicity
            max_issues_per_check: Examples reported per failing check
        """
        self.split = split
        self.source_pairs = source_pairs
        self.max_mc_contexts = max_mc_contexts
        self.max_issues_per_check = max_issues_per_check

        self.db_response_counts = Counter(p.response for p in split.database)
        self.db_contexts_by_response = {}
        for pair in split.database:
            self.db_contexts_by_response.setdefault(pair.response, set()).add(pair.context)

    def validate_all(self) -> Tuple[bool, List[str]]:
        """
        Run all validation checks

        Returns:
            (is_valid, list_of_issues)
        """
        issues: List[str] = []

        checks = [
            ("MC residual contexts", self._validate_mc_residuals),
            ("SC isolation", self._validate_sc_isolation),
            ("Train/database context overlap", self._validate_no_leakage),
            ("MC source multiplicity", self._validate_mc_multiplicity),
            ("Id disjointness", self._validate_id_disjointness),
            ("Length limits", self._validate_lengths),
        ]

        for name, check in checks:
            found = check()
            if found:
                logger.warning(f"{name}: {len(found)} violation(s)")
                issues.extend(f"{name}: {issue}" for issue in found)
            else:
                logger.info(f"{name}: ok")

        return (len(issues) == 0, issues)

    def _limit(self, found: List[str], total: int) -> List[str]:
        if total > len(found):
            found.append(f"... {total - len(found)} more")
        return found

    def _validate_mc_residuals(self) -> List[str]:
        bad = [
            p for p in self.split.mc_test
            if not (self.db_contexts_by_response.get(p.response, set()) - {p.context})
        ]
        found = [f"MC pair {p.id} has no sibling context in the database" for p in bad[:self.max_issues_per_check]]
        return self._limit(found, len(bad))

    def _validate_sc_isolation(self) -> List[str]:
        bad = [p for p in self.split.sc_test if self.db_response_counts.get(p.response, 0) > 0]
        found = [
            f"SC pair {p.id}: response has {self.db_response_counts[p.response]} database context(s)"
            for p in bad[:self.max_issues_per_check]
        ]
        return self._limit(found, len(bad))

    def _validate_no_leakage(self) -> List[str]:
        db_contexts = {p.context for p in self.split.database}
        leaked = [
            ctx for group in self.split.train_groups for ctx in group.contexts
            if ctx in db_contexts
        ]
        found = [f"train context also in database: {' | '.join(ctx)[:80]!r}" for ctx in leaked[:self.max_issues_per_check]]
        return self._limit(found, len(leaked))

    def _validate_mc_multiplicity(self) -> List[str]:
        if self.source_pairs is None:
            return []
        counts = Counter(p.response for p in dedupe_pairs(self.source_pairs))
        bad = [p for p in self.split.mc_test if not 2 <= counts.get(p.response, 0) <= self.max_mc_contexts]
        found = [
            f"MC pair {p.id}: response had {counts.get(p.response, 0)} source contexts"
            for p in bad[:self.max_issues_per_check]
        ]
        return self._limit(found, len(bad))

    def _validate_id_disjointness(self) -> List[str]:
        db_ids = {p.id for p in self.split.database}
        found = []
        for label, test in (("MC", self.split.mc_test), ("SC", self.split.sc_test)):
            overlap = sorted(db_ids & {p.id for p in test})
            if overlap:
                found.append(f"{label} and database share {len(overlap)} pair id(s), e.g. {overlap[:5]}")
        return found

    def _validate_lengths(self) -> List[str]:
        everything = list(self.split.mc_test) + list(self.split.sc_test) + list(self.split.database)
        bad = [p for p in everything if not is_within_limits(p)]
        found = [f"pair {p.id} violates the length limits" for p in bad[:self.max_issues_per_check]]
        return self._limit(found, len(bad))


def validate_split(
    split: SplitResult,
    source_pairs: Optional[Sequence[DialoguePair]] = None
) -> Tuple[bool, List[str]]:
    """Convenience wrapper around SplitValidator.validate_all()"""
    return SplitValidator(split, source_pairs).validate_all()
