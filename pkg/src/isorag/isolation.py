"""Passage isolation and exhaustive enumeration of surviving benign groups.

Isolation packs omega adjacent passages per group, giving m = ceil(k / omega)
disjoint groups. For certification we enumerate, over every possible placement
of the k' corrupted passages, which benign groups can survive intact; each
distinct survival pattern is a GroupCase. Enumeration is exhaustive — there is
deliberately no sampling fallback — and refuses work past a fixed layout
budget instead of running for hours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import Passage, RetrievalSet, concat
from .errors import BudgetExceededError, InvalidOmegaError, NoBenignGroupsError

# Upper bound on corrupted layouts enumerated per call (C(k,k') for injection,
# C(k,k')^2 for modification).
ENUMERATION_BUDGET = 10**6


@dataclass(frozen=True)
class PassageGroup:
    """A contiguous block of passages, prompted as one isolated unit."""

    member_indices: Tuple[int, ...]
    text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "member_indices", tuple(self.member_indices))
        if not self.member_indices:
            raise ValueError("a passage group cannot be empty")


@dataclass(frozen=True)
class Grouping:
    groups: Tuple[PassageGroup, ...]
    m: int
    omega: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) != self.m:
            raise ValueError("group count must equal m")


@dataclass(frozen=True)
class GroupCase:
    """One survivable combination of benign groups, with m' groups corrupted.

    benign_groups may be empty (every group touched); certification treats
    such a case as an automatic failure rather than rejecting it here.
    """

    benign_groups: Tuple[PassageGroup, ...]
    m_prime: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "benign_groups", tuple(self.benign_groups))

    def key(self) -> Tuple[Tuple[int, ...], ...]:
        """Dedup key: the member-index sets, in layout order."""
        return tuple(g.member_indices for g in self.benign_groups)


def _group_slots(n_slots: int, omega: int) -> List[Tuple[int, ...]]:
    """Slot indices (0-based) covered by each group of size omega."""
    m = math.ceil(n_slots / omega)
    return [
        tuple(range(omega * j, min(omega * (j + 1), n_slots))) for j in range(m)
    ]


def iso_group(retrieval: RetrievalSet, omega: int) -> Grouping:
    """Partition the retrieval into ceil(k/omega) groups of omega adjacent passages."""
    if not (1 <= omega <= retrieval.k):
        raise InvalidOmegaError(f"omega must be in [1, {retrieval.k}], got {omega}")
    groups = []
    for slots in _group_slots(retrieval.k, omega):
        members = [retrieval.passages[s] for s in slots]
        groups.append(
            PassageGroup(
                member_indices=tuple(p.rank for p in members),
                text=concat([p.text for p in members]),
            )
        )
    return Grouping(groups=tuple(groups), m=len(groups), omega=omega)


def _cases_for_layouts(
    layouts: Iterable[Sequence[Optional[Passage]]],
    omega: int,
) -> List[GroupCase]:
    """Regroup each corrupted layout, drop groups containing a corrupted slot,
    and deduplicate the surviving benign-group combinations.

    A layout marks corrupted slots with None.
    """
    seen: Dict[Tuple[Tuple[int, ...], ...], GroupCase] = {}
    for layout in layouts:
        slots_per_group = _group_slots(len(layout), omega)
        benign_groups = []
        m_prime = 0
        for slots in slots_per_group:
            members = [layout[s] for s in slots]
            if any(p is None for p in members):
                m_prime += 1
                continue
            benign_groups.append(
                PassageGroup(
                    member_indices=tuple(p.rank for p in members),
                    text=concat([p.text for p in members]),
                )
            )
        case = GroupCase(benign_groups=tuple(benign_groups), m_prime=m_prime)
        seen.setdefault(case.key(), case)
    return sorted(seen.values(), key=GroupCase.key)


def _injection_layouts(
    benign: Sequence[Passage], k: int, k_prime: int
) -> Iterable[List[Optional[Passage]]]:
    """All layouts that place k' corrupted passages among k slots, the given
    benign passages filling the remaining slots in order."""
    for corrupted_slots in combinations(range(k), k_prime):
        corrupted = set(corrupted_slots)
        layout: List[Optional[Passage]] = []
        it = iter(benign)
        for slot in range(k):
            layout.append(None if slot in corrupted else next(it))
        yield layout


def benign_group_cases_injection(
    retrieval: RetrievalSet, omega: int, k_prime: int
) -> List[GroupCase]:
    """Every distinct benign-group survival under injection of k' passages.

    Injected passages eject the bottom k' benign passages, so the survivors
    are always the top k - k'; only their placement relative to group
    boundaries varies with the injection positions.
    """
    if not (1 <= omega <= retrieval.k):
        raise InvalidOmegaError(f"omega must be in [1, {retrieval.k}], got {omega}")
    if k_prime < 0:
        raise ValueError("k_prime must be >= 0")
    k = retrieval.k
    if k_prime == 0:
        grouping = iso_group(retrieval, omega)
        return [GroupCase(benign_groups=grouping.groups, m_prime=0)]
    if k_prime >= k:
        raise NoBenignGroupsError(f"k_prime={k_prime} corrupts the whole top-{k}")
    if math.comb(k, k_prime) > ENUMERATION_BUDGET:
        raise BudgetExceededError(
            f"C({k},{k_prime}) = {math.comb(k, k_prime)} layouts exceeds the budget"
        )
    survivors = retrieval.passages[: k - k_prime]
    cases = _cases_for_layouts(_injection_layouts(survivors, k, k_prime), omega)
    if all(not c.benign_groups for c in cases):
        raise NoBenignGroupsError("no benign group survives any injection layout")
    return cases


def benign_group_cases_modification(
    retrieval: RetrievalSet, omega: int, k_prime: int
) -> List[GroupCase]:
    """Every distinct benign-group survival under modification of k' passages.

    Modification = remove any k' originals, then inject k' corrupted passages
    anywhere; both choice sets are enumerated in full. Injection cases are a
    strict subset (they pin the removal to the bottom k').
    """
    if not (1 <= omega <= retrieval.k):
        raise InvalidOmegaError(f"omega must be in [1, {retrieval.k}], got {omega}")
    if k_prime < 1:
        raise ValueError("k_prime must be >= 1 for modification")
    k = retrieval.k
    if k_prime >= k:
        raise NoBenignGroupsError(f"k_prime={k_prime} corrupts the whole top-{k}")
    n_layouts = math.comb(k, k_prime) ** 2
    if n_layouts > ENUMERATION_BUDGET:
        raise BudgetExceededError(
            f"C({k},{k_prime})^2 = {n_layouts} layouts exceeds the budget"
        )

    def layouts() -> Iterable[List[Optional[Passage]]]:
        for removed in combinations(range(k), k_prime):
            removed_set = set(removed)
            survivors = [
                p for i, p in enumerate(retrieval.passages) if i not in removed_set
            ]
            yield from _injection_layouts(survivors, k, k_prime)

    cases = _cases_for_layouts(layouts(), omega)
    if all(not c.benign_groups for c in cases):
        raise NoBenignGroupsError("no benign group survives any modification layout")
    return cases


def benign_group_cases(
    retrieval: RetrievalSet, omega: int, k_prime: int, attack_kind: str
) -> List[GroupCase]:
    if attack_kind == "injection":
        return benign_group_cases_injection(retrieval, omega, k_prime)
    if attack_kind == "modification":
        if k_prime == 0:
            return benign_group_cases_injection(retrieval, omega, 0)
        return benign_group_cases_modification(retrieval, omega, k_prime)
    raise ValueError(f"unknown attack kind {attack_kind!r}")
