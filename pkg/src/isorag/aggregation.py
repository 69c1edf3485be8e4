"""Inference-time defenses: keyword aggregation, decoding aggregation, voting.

Each defense isolates passages into groups, queries the model once per group,
and combines the isolated outputs through an operation an attacker can only
nudge by a bounded amount: unique-keyword counts move by at most one per
corrupted response, and every coordinate of a summed probability vector moves
by at most one per corrupted group.

Prompt construction lives here so certification can rebuild byte-identical
prompts when it replays the benign side of an attack.
"""

from __future__ import annotations

import string
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .backends import ModelBackend, ModelRequest, TokenDistribution
from .core import (
    DefenseConfig,
    Query,
    Response,
    RetrievalSet,
    abstained_response,
    concat,
    ABSTAIN_PHRASE,
)
from .errors import CapabilityUnsupportedError, NoVotesError
from .instructions import KEYWORD_ANSWER_ID, NO_RETRIEVAL_ID, TemplateStore, default_templates
from .isolation import PassageGroup, iso_group

# Uninformative words: articles, conjunctions, prepositions, auxiliaries and
# pronouns. Runs of words *not* in this set become keywords and keyphrases.
STOPWORDS = frozenset(
    """
    a an the
    and or but nor so yet then than because although though while if unless
    until when whenever where wherever after before since as that whether
    in on at by for with about against between into through during above
    below to from up down of off over under again further near out
    is am are was were be been being have has had having do does did doing
    will would shall should may might must can could won't wouldn't don't
    doesn't didn't isn't aren't wasn't weren't hasn't haven't hadn't cannot
    can't couldn't shouldn't mustn't
    i you he she it we they me him her us them my your his its our their
    mine yours hers ours theirs myself yourself himself herself itself
    ourselves themselves this these those who whom whose which what
    there here how why all any both each few more most other some such
    no not only own same too very just also
    """.split()
)

_PUNCT = string.punctuation + "‘’“”"


def _informative(word: str) -> Optional[str]:
    """Lowercased, punctuation-stripped form of an informative word, else None."""
    cleaned = word.lower().strip(_PUNCT)
    if not cleaned or cleaned in STOPWORDS:
        return None
    return cleaned


def get_unique_keywords(text: str) -> Set[str]:
    """Extract the unique keywords and keyphrases of a response.

    Every informative word counts once, and every maximal run of two or more
    consecutive informative words contributes the run joined by single spaces.
    Uninformative (stopword or punctuation-only) words break runs.
    """
    keywords: Set[str] = set()
    run: List[str] = []

    def flush() -> None:
        if len(run) >= 2:
            keywords.add(" ".join(run))
        run.clear()

    for word in text.split():
        cleaned = _informative(word)
        if cleaned is None:
            flush()
            continue
        keywords.add(cleaned)
        run.append(cleaned)
    flush()
    return keywords


def retention_threshold(alpha: float, beta: int, n: int) -> Fraction:
    """min(alpha * n, beta) as an exact rational, so count comparisons at the
    boundary (e.g. alpha=0.2, n=10) are not at the mercy of float rounding."""
    return min(Fraction(str(alpha)) * n, Fraction(beta))


# ---------------------------------------------------------------------------
# Prompt construction (shared verbatim with certification)
# ---------------------------------------------------------------------------


def group_prompt(
    instruction: str, query: Query, group: PassageGroup, partial: str = ""
) -> str:
    return concat([instruction, query.question, group.text, partial])


def keyword_answer_prompt(
    instruction: str, query: Query, keywords: Sequence[str]
) -> str:
    return concat([instruction, query.question, "Keywords: " + ", ".join(keywords)])


def no_retrieval_prompt(instruction: str, query: Query, partial: str = "") -> str:
    return concat([instruction, query.question, partial])


def vote_prompt(
    instruction: str, query: Query, choices: Sequence[str], group: PassageGroup
) -> str:
    options = "Options: " + ", ".join(choices)
    return concat([instruction, query.question, options, group.text])


def vanilla_prompt(instruction: str, query: Query, retrieval: RetrievalSet) -> str:
    return concat(
        [instruction, query.question] + [p.text for p in retrieval.passages]
    )


# ---------------------------------------------------------------------------
# Keyword aggregation
# ---------------------------------------------------------------------------


def tally_keywords(responses: Sequence[Response]) -> Tuple[Dict[str, int], int]:
    """Unique-keyword counts over the non-abstained responses, plus their number."""
    counts: Dict[str, int] = {}
    n = 0
    for response in responses:
        if response.abstained:
            continue
        n += 1
        for keyword in get_unique_keywords(response.text):
            counts[keyword] = counts.get(keyword, 0) + 1
    return counts, n


def generate_group_responses(
    query: Query,
    groups: Sequence[PassageGroup],
    model: ModelBackend,
    templates: TemplateStore,
) -> List[Response]:
    instruction = templates.get(query.instruction_id)
    return [
        model.generate(ModelRequest(prompt=group_prompt(instruction, query, g)))
        for g in groups
    ]


def keyword_answer(
    query: Query,
    keywords: Sequence[str],
    model: ModelBackend,
    templates: TemplateStore,
) -> Response:
    """Second-stage call: answer from the alphabetically sorted keyword list."""
    instruction = templates.get(KEYWORD_ANSWER_ID)
    prompt = keyword_answer_prompt(instruction, query, sorted(keywords))
    return model.generate(ModelRequest(prompt=prompt))


def rrag_keyword(
    query: Query,
    retrieval: RetrievalSet,
    config: DefenseConfig,
    model: ModelBackend,
    templates: Optional[TemplateStore] = None,
) -> Response:
    """Keyword-aggregated robust inference.

    Isolate, generate per group, count unique keywords over non-abstained
    responses, keep keywords with count >= min(alpha * n, beta), and answer
    again from the retained keywords alone. If every group abstains there is
    nothing to ground a second call, so the abstain response is returned.
    """
    templates = templates or default_templates()
    grouping = iso_group(retrieval, config.omega)
    responses = generate_group_responses(query, grouping.groups, model, templates)
    counts, n = tally_keywords(responses)
    if n == 0:
        return abstained_response()
    mu = retention_threshold(config.alpha, config.beta, n)
    retained = [w for w, c in counts.items() if c >= mu]
    return keyword_answer(query, sorted(retained), model, templates)


# ---------------------------------------------------------------------------
# Decoding aggregation
# ---------------------------------------------------------------------------


def _require_distributions(config_model: ModelBackend, for_certification: bool) -> None:
    if config_model.supports_exact_distributions:
        return
    if not for_certification and getattr(
        config_model, "allow_decoding_aggregation", False
    ):
        return
    raise CapabilityUnsupportedError(
        "decoding aggregation needs exact next-token distributions "
        "(approximate backends may opt in for empirical runs only)"
    )


def abstain_filter(
    groups: Sequence[PassageGroup],
    query: Query,
    config: DefenseConfig,
    model: ModelBackend,
    templates: Optional[TemplateStore] = None,
) -> List[int]:
    """Indices of groups whose abstain-phrase probability is strictly below gamma.

    Backends without exact sequence probabilities (the empirical-only HTTP
    path) fall back to generating once per group and dropping responses that
    contain the abstain phrase; gamma plays no role there.
    """
    templates = templates or default_templates()
    instruction = templates.get(query.instruction_id)
    kept = []
    for j, group in enumerate(groups):
        prompt = group_prompt(instruction, query, group)
        if model.supports_exact_distributions:
            abstains = model.sequence_probability(prompt, ABSTAIN_PHRASE) >= config.gamma
        else:
            abstains = model.generate(ModelRequest(prompt=prompt)).abstained
        if not abstains:
            kept.append(j)
    return kept


def vec_sum(distributions: Sequence[TokenDistribution]) -> Dict[int, float]:
    total: Dict[int, float] = {}
    for dist in distributions:
        for token, p in dist.probs.items():
            total[token] = total.get(token, 0.0) + p
    return total


def top2(summed: Dict[int, float]) -> Tuple[Tuple[int, float], Tuple[int, float]]:
    """Top-2 (token, mass) of a summed vector; ties break to the lowest id.

    Tokens absent from the sparse sum have mass zero, so the runner-up falls
    back to a zero-mass sentinel when fewer than two tokens carry mass.
    """
    ranked = sorted(summed.items(), key=lambda kv: (-kv[1], kv[0]))
    first = ranked[0] if ranked else (0, 0.0)
    if len(ranked) >= 2:
        second = ranked[1]
    else:
        second = (first[0] + 1, 0.0)
    return first, second


def rrag_decoding(
    query: Query,
    retrieval: RetrievalSet,
    config: DefenseConfig,
    model: ModelBackend,
    templates: Optional[TemplateStore] = None,
) -> Response:
    """Decoding-aggregated robust inference.

    Groups likely to abstain are dropped up front. At each step the remaining
    groups' next-token distributions are summed; if the top-1 mass beats the
    runner-up by more than eta the top-1 token is emitted, otherwise the
    greedy token of a retrieval-free prompt is used as a neutral fallback.
    """
    templates = templates or default_templates()
    _require_distributions(model, for_certification=False)
    grouping = iso_group(retrieval, config.omega)
    kept = abstain_filter(grouping.groups, query, config, model, templates)
    if not kept:
        return abstained_response()

    instruction = templates.get(query.instruction_id)
    nor_instruction = templates.get(NO_RETRIEVAL_ID)
    vocab = model.vocab  # type: ignore[attr-defined]
    produced: List[int] = []
    for _ in range(config.t_max):
        partial = vocab.decode(produced)
        summed = vec_sum(
            [
                model.next_token_distribution(
                    group_prompt(instruction, query, grouping.groups[j], partial)
                )
                for j in kept
            ]
        )
        (t1, p1), (_, p2) = top2(summed)
        if p1 - p2 > config.eta:
            token = t1
        else:
            token = model.next_token_greedy(
                no_retrieval_prompt(nor_instruction, query, partial)
            )
        produced.append(token)
        if token == vocab.eos_id:
            break
    return Response(text=vocab.decode(produced), tokens=tuple(produced))


# ---------------------------------------------------------------------------
# Majority voting (fixed-choice tasks)
# ---------------------------------------------------------------------------


def match_choice(text: str, choices: Sequence[str]) -> Optional[str]:
    """First choice whose surface string occurs in the response, else None."""
    lowered = text.lower()
    for choice in choices:
        if choice.lower() in lowered:
            return choice
    return None


def vote_counts(
    query: Query,
    groups: Sequence[PassageGroup],
    choices: Sequence[str],
    model: ModelBackend,
    templates: TemplateStore,
) -> Dict[str, int]:
    """Per-choice vote counts across isolated groups; unmatched responses are
    abstain votes and simply do not count."""
    instruction = templates.get(query.instruction_id)
    counts: Dict[str, int] = {c: 0 for c in choices}
    for group in groups:
        response = model.generate(
            ModelRequest(prompt=vote_prompt(instruction, query, choices, group))
        )
        if response.abstained:
            continue
        matched = match_choice(response.text, choices)
        if matched is not None:
            counts[matched] += 1
    return counts


def winner_and_runnerup(counts: Dict[str, int]) -> Tuple[str, int, int]:
    """Winning label (ties to the lexicographically smallest), its count, and
    the best count among the other labels."""
    if not counts or all(c == 0 for c in counts.values()):
        raise NoVotesError("no isolated prediction matched any choice")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    winner, top = ordered[0]
    runnerup = ordered[1][1] if len(ordered) > 1 else 0
    return winner, top, runnerup


def rrag_vote(
    query: Query,
    retrieval: RetrievalSet,
    choices: Sequence[str],
    config: DefenseConfig,
    model: ModelBackend,
    templates: Optional[TemplateStore] = None,
) -> str:
    """Majority vote over isolated per-group predictions."""
    if len(choices) < 2:
        raise ValueError("voting needs at least two choices")
    templates = templates or default_templates()
    grouping = iso_group(retrieval, config.omega)
    counts = vote_counts(query, grouping.groups, choices, model, templates)
    winner, _, _ = winner_and_runnerup(counts)
    return winner


# ---------------------------------------------------------------------------
# Undefended baseline
# ---------------------------------------------------------------------------


def vanilla_inference(
    query: Query,
    retrieval: RetrievalSet,
    model: ModelBackend,
    templates: Optional[TemplateStore] = None,
) -> Response:
    """All k passages in one prompt, no defense; empirical baseline only."""
    templates = templates or default_templates()
    instruction = templates.get(query.instruction_id)
    return model.generate(
        ModelRequest(prompt=vanilla_prompt(instruction, query, retrieval))
    )


def run_inference(
    query: Query,
    retrieval: RetrievalSet,
    config: DefenseConfig,
    model: ModelBackend,
    choices: Optional[Sequence[str]] = None,
    templates: Optional[TemplateStore] = None,
) -> Response:
    """Dispatch to the configured aggregator, normalizing the result to a Response."""
    if config.aggregator == "keyword":
        return rrag_keyword(query, retrieval, config, model, templates)
    if config.aggregator == "decoding":
        return rrag_decoding(query, retrieval, config, model, templates)
    if config.aggregator == "voting":
        if not choices:
            raise ValueError("voting aggregator requires choices")
        try:
            label = rrag_vote(query, retrieval, choices, config, model, templates)
        except NoVotesError:
            return abstained_response()
        return Response(text=label)
    if config.aggregator == "vanilla":
        return vanilla_inference(query, retrieval, model, templates)
    raise ValueError(f"unknown aggregator {config.aggregator!r}")
