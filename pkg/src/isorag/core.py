"""Shared domain types: passages, queries, responses, scores, and run configuration.

Everything here is immutable after construction and safe to share across
threads. Higher-level modules (grouping, aggregation, certification) only
ever read these objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

ABSTAIN_PHRASE = "I don't know"

AGGREGATORS = ("keyword", "decoding", "voting", "vanilla")
ATTACK_KINDS = ("injection", "modification")


def contains_abstain(text: str) -> bool:
    """Case-insensitive membership test for the refusal phrase."""
    return ABSTAIN_PHRASE.lower() in text.lower()


def concat(parts: Sequence[str]) -> str:
    """Join text parts with a single newline.

    Empty parts are dropped so that the empty string acts as the identity
    element: concat([concat(xs), y]) == concat(list(xs) + [y]) for every xs.
    """
    return "\n".join(p for p in parts if p)


@dataclass(frozen=True)
class Passage:
    """One retrieved passage and its 1-based retrieval position."""

    text: str
    rank: int

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("passage text must be non-empty after trimming")
        if self.rank < 1:
            raise ValueError(f"passage rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class RetrievalSet:
    """The ordered top-k passages for one query; the object an attacker corrupts."""

    passages: Tuple[Passage, ...]
    k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "passages", tuple(self.passages))
        if self.k < 1:
            raise ValueError("retrieval set requires k >= 1")
        if len(self.passages) != self.k:
            raise ValueError(
                f"expected {self.k} passages, got {len(self.passages)}"
            )
        ranks = [p.rank for p in self.passages]
        if any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise ValueError(f"passage ranks must be strictly increasing: {ranks}")

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "RetrievalSet":
        passages = tuple(Passage(text=t, rank=i + 1) for i, t in enumerate(texts))
        return cls(passages=passages, k=len(passages))


@dataclass(frozen=True)
class Query:
    id: str
    question: str
    instruction_id: str = "qa_with_retrieval"

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("query question must be non-empty")


@dataclass(frozen=True)
class ReferenceAnswer:
    """The set of accepted answer strings for one query."""

    accepted_strings: frozenset

    def __post_init__(self) -> None:
        object.__setattr__(self, "accepted_strings", frozenset(self.accepted_strings))
        if not self.accepted_strings:
            raise ValueError("reference answer needs at least one accepted string")
        if any(not s for s in self.accepted_strings):
            raise ValueError("accepted strings must be non-empty")

    @classmethod
    def of(cls, *strings: str) -> "ReferenceAnswer":
        return cls(accepted_strings=frozenset(strings))


@dataclass(frozen=True)
class Response:
    """A model response; `abstained` is derived from the text, never passed in."""

    text: str
    tokens: Optional[Tuple[int, ...]] = None
    abstained: bool = field(init=False)

    def __post_init__(self) -> None:
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "abstained", contains_abstain(self.text))


def abstained_response() -> Response:
    """The canonical refusal response emitted when aggregation has no signal."""
    return Response(text=ABSTAIN_PHRASE + ".")


@dataclass(frozen=True, order=True)
class QualityScore:
    """Response quality in [0, 1]; judge-style 0-100 scores divide by 100 on ingest."""

    value: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"quality score must be in [0, 1], got {self.value}")

    @classmethod
    def from_percent(cls, value: float) -> "QualityScore":
        return cls(value=value / 100.0)


@dataclass(frozen=True)
class DefenseConfig:
    """Defense parameters shared by inference and certification.

    alpha/beta gate keyword retention, eta is the decoding confidence margin,
    gamma the abstain-probability filter, t_max the decode length cap. The
    `vanilla` aggregator is an undefended empirical baseline with no
    certification path.
    """

    k: int
    omega: int = 1
    alpha: float = 0.2
    beta: int = 3
    eta: float = 0.0
    gamma: float = 0.99
    t_max: int = 20
    aggregator: str = "keyword"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (1 <= self.omega <= self.k):
            raise ValueError(f"omega must be in [1, k={self.k}], got {self.omega}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.beta < 1:
            raise ValueError("beta must be a positive integer")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(
                f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}"
            )


@dataclass(frozen=True)
class AttackSpec:
    """A concrete corruption: which passages go where, under which threat model."""

    kind: str
    k_prime: int
    malicious_passages: Tuple[Passage, ...]
    positions: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "malicious_passages", tuple(self.malicious_passages)
        )
        object.__setattr__(self, "positions", tuple(self.positions))
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.k_prime < 1:
            raise ValueError("k_prime must be >= 1")
        if len(self.malicious_passages) != self.k_prime:
            raise ValueError("need exactly k_prime malicious passages")
        if len(self.positions) != self.k_prime:
            raise ValueError("need exactly k_prime positions")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError(f"duplicate positions: {self.positions}")
        if any(p < 1 for p in self.positions):
            raise ValueError("positions are 1-based")
