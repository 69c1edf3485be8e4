"""Shared mock-instance builders for the test suite."""

from isorag.backends import (
    MockBackend,
    MockModelTable,
    MockRule,
    ModelRequest,
    TokenDistribution,
    Vocab,
)
from isorag.core import Query, RetrievalSet

QUESTION = "What is the name of the highest mountain?"
ABSTAIN_TEXT = "I don't know."


def query(qid="q1", question=QUESTION):
    return Query(id=qid, question=question)


def fixed(pattern, output):
    return MockRule(pattern=pattern, output=output)


def dist_rule(pattern, partials, vocab):
    dists = {
        partial: TokenDistribution(probs=probs, vocab_size=vocab.size)
        for partial, probs in partials.items()
    }
    return MockRule(pattern=pattern, distributions=dists)


def backend(rules, vocab=None):
    return MockBackend(MockModelTable(rules=tuple(rules), vocab=vocab))


class RecordingBackend(MockBackend):
    """Mock backend that remembers every generate prompt it served."""

    def __init__(self, table):
        super().__init__(table)
        self.generate_prompts = []

    def generate(self, request: ModelRequest):
        self.generate_prompts.append(request.prompt)
        return super().generate(request)


# --- canonical keyword QA instance -----------------------------------------
# Three sources all supporting "Mount Everest"; a catch-all keyword-answer
# rule returns a wrong answer so unexpected keyword sets are visible.

KEYWORD_FINAL_GOOD = "The answer is Mount Everest."
KEYWORD_FINAL_FALLBACK = "No idea at all."


def everest_rules():
    return [
        fixed("Keywords: everest, mount, mount everest", KEYWORD_FINAL_GOOD),
        fixed("source snippet one", "Mount Everest"),
        fixed("source snippet two", "Mount Everest"),
        fixed("source snippet three", "Mount Everest"),
        fixed("Keywords:", KEYWORD_FINAL_FALLBACK),
    ]


def everest_retrieval():
    return RetrievalSet.from_texts(
        ["source snippet one", "source snippet two", "source snippet three"]
    )


# --- decoding vocab ----------------------------------------------------------

DECODE_VOCAB = Vocab(
    tokens={
        0: "<eos>",
        1: " alpha",
        2: " beta",
        3: " gamma",
        4: " delta",
        9: "I don't know",
    },
    eos_id=0,
)
