"""Worst-case certification: provable lower bounds on response quality.

Given the benign groups that survive a corruption placement, each certifier
enumerates *every* response the deployed aggregator could emit when the
attacker controls the remaining m' groups with arbitrary content, then takes
the minimum metric score over that finite response set. Any situation where
the reachable set cannot be bounded returns tau = 0 with a failure status.

The top-level certify() runs one certifier per surviving-group case and keeps
the minimum across cases, which covers every corruption placement within the
threat model (injection or modification).
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .aggregation import (
    abstain_filter,
    generate_group_responses,
    group_prompt,
    keyword_answer,
    no_retrieval_prompt,
    retention_threshold,
    tally_keywords,
    top2,
    vec_sum,
    vote_counts,
    winner_and_runnerup,
)
from .backends import ModelBackend
from .core import (
    DefenseConfig,
    QualityScore,
    Query,
    ReferenceAnswer,
    Response,
    RetrievalSet,
    abstained_response,
)
from .errors import CapabilityUnsupportedError, NoBenignGroupsError, NoVotesError
from .evaluation import Metric, metric_substring
from .instructions import NO_RETRIEVAL_ID, TemplateStore, default_templates
from .isolation import GroupCase, benign_group_cases

STATUS_EXACT = "exact"
STATUS_SUBSAMPLED = "subsampled"
STATUS_FAILED_CASE4 = "failed-case4"
STATUS_FAILED_POWERSET = "failed-powerset-cap"
STATUS_FAILED_NO_BENIGN = "failed-no-benign-groups"

FAILED_STATUSES = (
    STATUS_FAILED_CASE4,
    STATUS_FAILED_POWERSET,
    STATUS_FAILED_NO_BENIGN,
)

# Enumerating the power set of medium-count keywords is capped at 2^15.
POWERSET_CAP = 15
# Response sets larger than this are scored on a seeded random subsample.
SUBSAMPLE_THRESHOLD = 1000
SUBSAMPLE_SIZE = 100


@dataclass(frozen=True)
class CertificationResult:
    """tau plus the explored response set and how the exploration ended.

    status == "exact" means `responses` is the complete reachable set and tau
    is a certified bound; "subsampled" means tau was scored on a random subset
    and is only an approximation; failed-* statuses force tau = 0.
    """

    tau: QualityScore
    responses: frozenset
    status: str
    case_count: int = 1

    def __post_init__(self) -> None:
        if self.status in FAILED_STATUSES and self.tau.value != 0.0:
            raise ValueError("failed certification must report tau = 0")

    @property
    def approximate(self) -> bool:
        return self.status == STATUS_SUBSAMPLED


def _failed(status: str, case_count: int = 1) -> CertificationResult:
    return CertificationResult(
        tau=QualityScore(0.0),
        responses=frozenset(),
        status=status,
        case_count=case_count,
    )


def _min_score(
    responses: Sequence[Response], answer: ReferenceAnswer, metric: Metric
) -> QualityScore:
    return min(metric(r, answer) for r in responses)


# ---------------------------------------------------------------------------
# Voting
# ---------------------------------------------------------------------------


def certify_vote(
    case: GroupCase,
    query: Query,
    choices: Sequence[str],
    m_prime: int,
    answer: ReferenceAnswer,
    config: DefenseConfig,
    model: ModelBackend,
    metric: Metric = metric_substring,
    templates: Optional[TemplateStore] = None,
) -> CertificationResult:
    """Gap test: the winner is certified iff its lead over the runner-up
    exceeds the number of groups the attacker controls."""
    templates = templates or default_templates()
    if not case.benign_groups:
        return _failed(STATUS_FAILED_NO_BENIGN)
    counts = vote_counts(query, case.benign_groups, choices, model, templates)

    if m_prime == 0:
        # No attacker: certification degenerates to replaying inference.
        try:
            winner, _, _ = winner_and_runnerup(counts)
            response = Response(text=winner)
        except NoVotesError:
            response = abstained_response()
        return CertificationResult(
            tau=metric(response, answer),
            responses=frozenset([response]),
            status=STATUS_EXACT,
        )

    try:
        winner, top_count, runnerup_count = winner_and_runnerup(counts)
    except NoVotesError:
        return _failed(STATUS_FAILED_CASE4)
    if top_count - runnerup_count > m_prime:
        response = Response(text=winner)
        return CertificationResult(
            tau=metric(response, answer),
            responses=frozenset([response]),
            status=STATUS_EXACT,
        )
    return _failed(STATUS_FAILED_CASE4)


# ---------------------------------------------------------------------------
# Keyword aggregation
# ---------------------------------------------------------------------------


def certify_keyword(
    case: GroupCase,
    query: Query,
    answer: ReferenceAnswer,
    config: DefenseConfig,
    model: ModelBackend,
    metric: Metric = metric_substring,
    templates: Optional[TemplateStore] = None,
) -> CertificationResult:
    """Enumerate every retained keyword set the attacker can induce.

    For each possible number of non-abstained malicious responses k_eff, the
    shifted threshold mu' = min(alpha * (n + k_eff), beta) splits benign
    keywords into always-retained (count >= mu'), attacker-controlled
    (mu' > count >= mu' - k_eff), and never-retained. The reachable retained
    sets are the always-retained block unioned with each subset of the
    controlled block.

    Two unbounded situations force tau = 0: more than 15 controlled keywords
    (power-set blow-up), and k_eff >= mu' with k_eff > 0, where a keyword the
    benign side never produced can reach the threshold, i.e. the attacker may
    add arbitrary strings of their choosing to the retained set.
    """
    templates = templates or default_templates()
    if not case.benign_groups:
        return _failed(STATUS_FAILED_NO_BENIGN)
    responses = generate_group_responses(query, case.benign_groups, model, templates)
    counts, n = tally_keywords(responses)

    candidate_sets: Set[Tuple[str, ...]] = set()
    abstain_reachable = False
    for k_eff in range(case.m_prime + 1):
        if n + k_eff == 0:
            # Nothing non-abstained at all: inference would refuse outright.
            abstain_reachable = True
            continue
        mu = retention_threshold(config.alpha, config.beta, n + k_eff)
        if k_eff > 0 and Fraction(k_eff) >= mu:
            return _failed(STATUS_FAILED_CASE4)
        always = sorted(w for w, c in counts.items() if c >= mu)
        controlled = sorted(w for w, c in counts.items() if mu > c >= mu - k_eff)
        if len(controlled) > POWERSET_CAP:
            return _failed(STATUS_FAILED_POWERSET)
        for size in range(len(controlled) + 1):
            for subset in combinations(controlled, size):
                candidate_sets.add(tuple(sorted(set(always) | set(subset))))

    reachable: List[Response] = []
    for keywords in sorted(candidate_sets):
        reachable.append(keyword_answer(query, keywords, model, templates))
    if abstain_reachable:
        reachable.append(abstained_response())
    return CertificationResult(
        tau=_min_score(reachable, answer, metric),
        responses=frozenset(reachable),
        status=STATUS_EXACT,
    )


# ---------------------------------------------------------------------------
# Decoding aggregation
# ---------------------------------------------------------------------------


def certify_decoding(
    case: GroupCase,
    query: Query,
    answer: ReferenceAnswer,
    config: DefenseConfig,
    model: ModelBackend,
    metric: Metric = metric_substring,
    templates: Optional[TemplateStore] = None,
) -> CertificationResult:
    """Depth-first exploration of every decodable response.

    At each partial response the benign groups' summed distribution yields a
    top-2 gap A - B. The attacker shifts each coordinate by at most m', which
    leaves exactly four regimes for the emitted token:

      1. A - B >  eta + m'          -> always the benign top-1
      2. eta + m' >= A - B > |eta - m'| -> top-1 or the no-retrieval token
      3. eta - m' >= A - B > 0      -> always the no-retrieval token
      4. anything else              -> no bound holds; certification fails

    The inequality boundaries are deliberately strict/non-strict exactly as
    stated; the regime proofs break if they are loosened.
    """
    templates = templates or default_templates()
    if not model.supports_exact_distributions:
        raise CapabilityUnsupportedError(
            "decoding certification requires exact next-token distributions"
        )
    if not case.benign_groups:
        return _failed(STATUS_FAILED_NO_BENIGN)
    m_prime = case.m_prime
    kept = abstain_filter(case.benign_groups, query, config, model, templates)
    if not kept:
        if m_prime == 0:
            response = abstained_response()
            return CertificationResult(
                tau=metric(response, answer),
                responses=frozenset([response]),
                status=STATUS_EXACT,
            )
        # Malicious groups may survive the filter while no benign one does.
        return _failed(STATUS_FAILED_CASE4)

    instruction = templates.get(query.instruction_id)
    nor_instruction = templates.get(NO_RETRIEVAL_ID)
    vocab = model.vocab  # type: ignore[attr-defined]
    groups = [case.benign_groups[j] for j in kept]

    texts: Set[str] = set()
    stack: List[Tuple[int, ...]] = [()]
    while stack:
        partial = stack.pop()
        if len(partial) >= config.t_max or (partial and partial[-1] == vocab.eos_id):
            texts.add(vocab.decode(partial))
            continue
        partial_text = vocab.decode(partial)
        summed = vec_sum(
            [
                model.next_token_distribution(
                    group_prompt(instruction, query, g, partial_text)
                )
                for g in groups
            ]
        )
        (t_a, top_mass), (_, second_mass) = top2(summed)
        gap = top_mass - second_mass
        if gap > config.eta + m_prime:
            children = (t_a,)
        elif config.eta + m_prime >= gap > abs(config.eta - m_prime):
            t_nor = model.next_token_greedy(
                no_retrieval_prompt(nor_instruction, query, partial_text)
            )
            children = (t_a,) if t_nor == t_a else (t_a, t_nor)
        elif config.eta - m_prime >= gap > 0:
            t_nor = model.next_token_greedy(
                no_retrieval_prompt(nor_instruction, query, partial_text)
            )
            children = (t_nor,)
        else:
            return _failed(STATUS_FAILED_CASE4)
        for child in children:
            stack.append(partial + (child,))

    responses = frozenset(Response(text=t) for t in texts)
    if len(texts) > SUBSAMPLE_THRESHOLD:
        rng = random.Random(config.seed)
        sampled = rng.sample(sorted(texts), SUBSAMPLE_SIZE)
        tau = _min_score([Response(text=t) for t in sampled], answer, metric)
        return CertificationResult(
            tau=tau, responses=responses, status=STATUS_SUBSAMPLED
        )
    return CertificationResult(
        tau=_min_score(list(responses), answer, metric),
        responses=responses,
        status=STATUS_EXACT,
    )


# ---------------------------------------------------------------------------
# Orchestration over all corruption placements
# ---------------------------------------------------------------------------


def certify_case(
    case: GroupCase,
    query: Query,
    answer: ReferenceAnswer,
    config: DefenseConfig,
    model: ModelBackend,
    choices: Optional[Sequence[str]] = None,
    metric: Metric = metric_substring,
    templates: Optional[TemplateStore] = None,
) -> CertificationResult:
    if config.aggregator == "voting":
        if not choices:
            raise ValueError("voting certification requires choices")
        return certify_vote(
            case, query, choices, case.m_prime, answer, config, model, metric, templates
        )
    if config.aggregator == "keyword":
        return certify_keyword(case, query, answer, config, model, metric, templates)
    if config.aggregator == "decoding":
        return certify_decoding(case, query, answer, config, model, metric, templates)
    raise ValueError(f"aggregator {config.aggregator!r} has no certification path")


def _merge_status(statuses: Sequence[str]) -> str:
    for status in statuses:
        if status in FAILED_STATUSES:
            return status
    if STATUS_SUBSAMPLED in statuses:
        return STATUS_SUBSAMPLED
    return STATUS_EXACT


def certify(
    query: Query,
    retrieval: RetrievalSet,
    attack_kind: str,
    k_prime: int,
    omega: int,
    answer: ReferenceAnswer,
    config: DefenseConfig,
    model: ModelBackend,
    choices: Optional[Sequence[str]] = None,
    metric: Metric = metric_substring,
    templates: Optional[TemplateStore] = None,
) -> CertificationResult:
    """Certified tau for one query under the given threat model.

    Enumerates every surviving-benign-group case for the corruption budget,
    certifies each with the attacker controlling that case's m' groups, and
    returns the minimum tau. With k' = 0 the single case replays benign
    inference exactly.
    """
    try:
        cases = benign_group_cases(retrieval, omega, k_prime, attack_kind)
    except NoBenignGroupsError:
        return _failed(STATUS_FAILED_NO_BENIGN, case_count=0)

    results = [
        certify_case(case, query, answer, config, model, choices, metric, templates)
        for case in cases
    ]
    tau = min(r.tau for r in results)
    merged: Set[Response] = set()
    for r in results:
        merged.update(r.responses)
    return CertificationResult(
        tau=tau,
        responses=frozenset(merged),
        status=_merge_status([r.status for r in results]),
        case_count=len(cases),
    )


# --- report row schema (external interface) --------------------------------

CERTIFY_ROW_COLUMNS = [
    "query_id",
    "aggregator",
    "attack_kind",
    "k_prime",
    "omega",
    "tau",
    "status",
    "r_size",
    "approximate",
    "wall_time_ms",
]


def certify_report_row(
    query_id: str,
    config: DefenseConfig,
    attack_kind: str,
    k_prime: int,
    omega: int,
    result: CertificationResult,
    wall_time_ms: Optional[int] = None,
) -> Dict[str, object]:
    return {
        "query_id": query_id,
        "aggregator": config.aggregator,
        "attack_kind": attack_kind,
        "k_prime": k_prime,
        "omega": omega,
        "tau": result.tau.value,
        "status": result.status,
        "r_size": len(result.responses),
        "approximate": result.approximate,
        "wall_time_ms": wall_time_ms,
    }
