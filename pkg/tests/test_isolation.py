import math
from itertools import combinations

import pytest
from hypothesis import given, settings, strategies as st

from isorag.core import RetrievalSet
from isorag.errors import BudgetExceededError, InvalidOmegaError, NoBenignGroupsError
from isorag.isolation import (
    benign_group_cases_injection,
    benign_group_cases_modification,
    iso_group,
)


def retrieval(k):
    return RetrievalSet.from_texts([f"passage number {i}" for i in range(1, k + 1)])


def member_sets(cases):
    return {tuple(g.member_indices for g in case.benign_groups) for case in cases}


# --- independent oracle: enumerate layouts directly and regroup ------------


def oracle_cases(k, omega, k_prime, kind):
    """Brute-force survival patterns straight from the threat-model definition."""
    m = math.ceil(k / omega)
    slots_per_group = [
        range(omega * j, min(omega * (j + 1), k)) for j in range(m)
    ]

    def survivals(benign_ranks):
        # benign_ranks fill non-corrupted slots in order
        out = set()
        for corrupted_slots in combinations(range(k), k_prime):
            corrupted = set(corrupted_slots)
            layout = {}
            it = iter(benign_ranks)
            for slot in range(k):
                layout[slot] = None if slot in corrupted else next(it)
            pattern = []
            for slots in slots_per_group:
                ranks = [layout[s] for s in slots]
                if all(r is not None for r in ranks):
                    pattern.append(tuple(ranks))
            out.add(tuple(pattern))
        return out

    if kind == "injection":
        return survivals(list(range(1, k - k_prime + 1)))
    patterns = set()
    for removed in combinations(range(1, k + 1), k_prime):
        survivors = [r for r in range(1, k + 1) if r not in set(removed)]
        patterns |= survivals(survivors)
    return patterns


# --- iso_group --------------------------------------------------------------


def test_iso_group_k6_omega2():
    grouping = iso_group(retrieval(6), omega=2)
    assert [g.member_indices for g in grouping.groups] == [(1, 2), (3, 4), (5, 6)]
    assert grouping.m == 3
    assert grouping.groups[0].text == "passage number 1\npassage number 2"


def test_iso_group_omega1_identity():
    grouping = iso_group(retrieval(10), omega=1)
    assert grouping.m == 10
    assert all(len(g.member_indices) == 1 for g in grouping.groups)


def test_iso_group_uneven_tail():
    grouping = iso_group(retrieval(5), omega=2)
    assert [g.member_indices for g in grouping.groups] == [(1, 2), (3, 4), (5,)]


def test_iso_group_invalid_omega():
    with pytest.raises(InvalidOmegaError):
        iso_group(retrieval(4), omega=0)
    with pytest.raises(InvalidOmegaError):
        iso_group(retrieval(4), omega=5)


# --- injection cases --------------------------------------------------------


def test_injection_k6_omega2_kprime1_three_cases():
    cases = benign_group_cases_injection(retrieval(6), omega=2, k_prime=1)
    assert member_sets(cases) == {
        ((2, 3), (4, 5)),
        ((1, 2), (4, 5)),
        ((1, 2), (3, 4)),
    }
    assert all(case.m_prime == 1 for case in cases)


def test_injection_omega1_single_case():
    for k, k_prime in [(10, 1), (10, 4), (5, 2)]:
        cases = benign_group_cases_injection(retrieval(k), omega=1, k_prime=k_prime)
        assert len(cases) == 1
        assert member_sets(cases) == {tuple((r,) for r in range(1, k - k_prime + 1))}
        assert cases[0].m_prime == k_prime


def test_injection_kprime0_full_grouping():
    cases = benign_group_cases_injection(retrieval(6), omega=2, k_prime=0)
    assert len(cases) == 1
    assert cases[0].m_prime == 0
    assert member_sets(cases) == {((1, 2), (3, 4), (5, 6))}


def test_injection_group_texts_match_original_passages():
    cases = benign_group_cases_injection(retrieval(6), omega=2, k_prime=1)
    for case in cases:
        for group in case.benign_groups:
            expected = "\n".join(f"passage number {r}" for r in group.member_indices)
            assert group.text == expected


def test_injection_everything_corrupted():
    with pytest.raises(NoBenignGroupsError):
        benign_group_cases_injection(retrieval(4), omega=2, k_prime=4)


# --- modification cases ------------------------------------------------------


def test_modification_contains_fig_style_removal_branch():
    # removing the first passage then injecting anywhere must contribute
    # exactly these three survivals (among others from other removals)
    cases = benign_group_cases_modification(retrieval(6), omega=2, k_prime=1)
    got = member_sets(cases)
    assert {((3, 4), (5, 6)), ((2, 3), (5, 6)), ((2, 3), (4, 5))} <= got


def test_modification_omega1_bounded_by_choose():
    cases = benign_group_cases_modification(retrieval(5), omega=1, k_prime=1)
    assert len(cases) <= math.comb(5, 1)
    assert member_sets(cases) == oracle_cases(5, 1, 1, "modification")


def test_modification_kprime_equals_k():
    with pytest.raises(NoBenignGroupsError):
        benign_group_cases_modification(retrieval(3), omega=1, k_prime=3)


def cases_or_none(fn, rs, omega, k_prime):
    try:
        return member_sets(fn(rs, omega, k_prime))
    except NoBenignGroupsError:
        return None


@settings(deadline=None, max_examples=40)
@given(
    k=st.integers(min_value=2, max_value=7),
    omega=st.integers(min_value=1, max_value=3),
    k_prime=st.integers(min_value=1, max_value=2),
)
def test_enumeration_matches_brute_force_oracle(k, omega, k_prime):
    if omega > k or k_prime >= k:
        return
    rs = retrieval(k)
    for kind, fn in [
        ("injection", benign_group_cases_injection),
        ("modification", benign_group_cases_modification),
    ]:
        expected = oracle_cases(k, omega, k_prime, kind)
        got = cases_or_none(fn, rs, omega, k_prime)
        if got is None:
            assert all(p == () for p in expected)
        else:
            assert got == expected


@settings(deadline=None, max_examples=40)
@given(
    k=st.integers(min_value=2, max_value=7),
    omega=st.integers(min_value=1, max_value=3),
    k_prime=st.integers(min_value=1, max_value=2),
)
def test_injection_cases_subset_of_modification(k, omega, k_prime):
    if omega > k or k_prime >= k:
        return
    rs = retrieval(k)
    inj = cases_or_none(benign_group_cases_injection, rs, omega, k_prime)
    mod = cases_or_none(benign_group_cases_modification, rs, omega, k_prime)
    if inj is None:
        return
    assert mod is not None
    assert inj <= mod


def test_budget_exceeded():
    with pytest.raises(BudgetExceededError):
        benign_group_cases_injection(retrieval(40), omega=1, k_prime=8)
    with pytest.raises(BudgetExceededError):
        benign_group_cases_modification(retrieval(40), omega=1, k_prime=4)


def test_mixed_empty_and_nonempty_cases_are_kept():
    # k=4, omega=2, k_prime=2: corrupting slots {1,3} kills both groups,
    # corrupting {1,2} leaves one; both placements must be represented.
    cases = benign_group_cases_injection(retrieval(4), omega=2, k_prime=2)
    sizes = {len(case.benign_groups) for case in cases}
    assert 0 in sizes and 1 in sizes
