import json

import pytest

from isorag.backends import (
    CachedBackend,
    MockBackend,
    MockModelTable,
    MockRule,
    ModelRequest,
    TokenDistribution,
    Vocab,
    load_table,
    table_from_json,
    table_to_json,
)
from isorag.core import concat
from isorag.errors import NoRuleMatchedError

VOCAB = Vocab(
    tokens={0: "<eos>", 1: " one", 2: " two", 3: " three", 7: " seven"},
    eos_id=0,
)


def dist(probs):
    return TokenDistribution(probs=probs, vocab_size=VOCAB.size)


def make_backend(rules):
    return MockBackend(MockModelTable(rules=tuple(rules), vocab=VOCAB))


def test_fixed_rule_lookup_and_determinism():
    backend = make_backend([MockRule(pattern="highest mountain", output="Mount Everest")])
    request = ModelRequest(prompt="q: highest mountain?")
    first = backend.generate(request)
    second = backend.generate(request)
    assert first.text == "Mount Everest"
    assert first.text == second.text


def test_first_match_wins():
    backend = make_backend(
        [
            MockRule(pattern="mountain", output="first"),
            MockRule(pattern="highest mountain", output="second"),
        ]
    )
    assert backend.generate(ModelRequest(prompt="highest mountain")).text == "first"


def test_no_rule_matched():
    backend = make_backend([MockRule(pattern="xyzzy", output="nope")])
    with pytest.raises(NoRuleMatchedError):
        backend.generate(ModelRequest(prompt="unrelated"))


def test_greedy_decode_follows_argmax_chain():
    # argmax path: t3, then t7, then EOS -> two-token decode
    rule = MockRule(
        pattern="count",
        distributions={
            "": dist({3: 0.9, 1: 0.1}),
            " three": dist({7: 0.8, 0: 0.2}),
            " three seven": dist({0: 1.0}),
        },
    )
    backend = make_backend([rule])
    response = backend.generate(ModelRequest(prompt="count:"))
    assert response.text == " three seven"
    assert response.tokens == (3, 7)


def test_distribution_lookup_is_exact_table_row():
    rule = MockRule(pattern="p", distributions={"": dist({1: 0.7, 2: 0.3})})
    backend = make_backend([rule])
    out = backend.next_token_distribution("p")
    assert out.probs == {1: 0.7, 2: 0.3}


def test_uniform_distribution_sums_to_one():
    rule = MockRule(
        pattern="p",
        distributions={"": dist({0: 0.25, 1: 0.25, 2: 0.25, 3: 0.25})},
    )
    backend = make_backend([rule])
    out = backend.next_token_distribution("p")
    assert all(p == 0.25 for p in out.probs.values())
    assert abs(sum(out.probs.values()) - 1.0) < 1e-12


def test_argmax_tie_breaks_to_lowest_token_id():
    assert dist({2: 0.5, 1: 0.5}).argmax() == 1


def test_exact_distribution_must_sum_to_one():
    with pytest.raises(ValueError):
        TokenDistribution(probs={1: 0.5}, vocab_size=8)
    TokenDistribution(probs={1: 0.5}, vocab_size=8, exact=False)


def test_distribution_validates_range():
    with pytest.raises(ValueError):
        TokenDistribution(probs={99: 1.0}, vocab_size=8)
    with pytest.raises(ValueError):
        TokenDistribution(probs={1: 1.5}, vocab_size=8, exact=False)


def test_greedy_matches_distribution_argmax():
    rule = MockRule(pattern="p", distributions={"": dist({1: 0.2, 2: 0.8})})
    backend = make_backend([rule])
    assert backend.next_token_greedy("p") == backend.next_token_distribution("p").argmax()


def test_generate_equals_stepwise_argmax_replay():
    rule = MockRule(
        pattern="replay",
        distributions={
            "": dist({1: 0.6, 2: 0.4}),
            " one": dist({2: 0.7, 0: 0.3}),
            " one two": dist({0: 0.9, 1: 0.1}),
        },
    )
    backend = make_backend([rule])
    prompt = "replay this"
    produced = []
    while True:
        d = backend.next_token_distribution(concat([prompt, VOCAB.decode(produced)]))
        token = d.argmax()
        if token == VOCAB.eos_id or len(produced) >= 64:
            break
        produced.append(token)
    assert backend.generate(ModelRequest(prompt=prompt)).text == VOCAB.decode(produced)


def test_sequence_probability_product_of_ones():
    rule = MockRule(pattern="p", distributions={"": dist({1: 1.0})})
    backend = make_backend([rule])
    assert backend.sequence_probability("p", " one") == 1.0


def test_sequence_probability_zero_annihilates():
    rule = MockRule(pattern="p", distributions={"": dist({2: 1.0})})
    backend = make_backend([rule])
    assert backend.sequence_probability("p", " one") == 0.0


def test_sequence_probability_hand_checked_product():
    # two steps, 0.8 then 0.5 -> 0.4
    rule = MockRule(
        pattern="p",
        distributions={
            "": dist({1: 0.8, 2: 0.2}),
            " one": dist({2: 0.5, 0: 0.5}),
        },
    )
    backend = make_backend([rule])
    assert backend.sequence_probability("p", " one two") == pytest.approx(0.4)


def test_vocab_tokenize_longest_match():
    assert VOCAB.tokenize(" one two") == (1, 2)
    with pytest.raises(ValueError):
        VOCAB.tokenize("garbage")


def test_table_json_round_trip():
    table = MockModelTable(
        rules=(
            MockRule(pattern="a", output="text"),
            MockRule(pattern="b", distributions={"": dist({1: 1.0})}),
        ),
        vocab=VOCAB,
    )
    doc = table_to_json(table)
    rebuilt = table_from_json(json.loads(json.dumps(doc)))
    assert rebuilt.content_hash() == table.content_hash()


def test_load_table_from_file(tmp_path):
    table = MockModelTable(rules=(MockRule(pattern="a", output="t"),), vocab=None)
    path = tmp_path / "table.json"
    path.write_text(json.dumps(table_to_json(table)))
    assert load_table(path).content_hash() == table.content_hash()


# ---------------------------------------------------------------------------
# Caching wrapper
# ---------------------------------------------------------------------------


def test_cache_miss_then_hit_identical(tmp_path):
    inner = make_backend([MockRule(pattern="q", output="answer")])
    cached = CachedBackend(inner, tmp_path)
    request = ModelRequest(prompt="q1")
    first = cached.generate(request)
    calls_after_first = inner.call_count
    second = cached.generate(request)
    assert first == second
    assert inner.call_count == calls_after_first


def test_cache_distinct_prompts_distinct_entries(tmp_path):
    inner = make_backend([MockRule(pattern="q", output="answer")])
    cached = CachedBackend(inner, tmp_path)
    cached.generate(ModelRequest(prompt="q1"))
    cached.generate(ModelRequest(prompt="q2"))
    assert len(list(tmp_path.glob("*.json"))) == 2


def test_cold_cache_n_unique_prompts_n_invocations(tmp_path):
    inner = make_backend([MockRule(pattern="q", output="answer")])
    cached = CachedBackend(inner, tmp_path)
    prompts = [f"q{i}" for i in range(7)]
    for p in prompts:
        cached.generate(ModelRequest(prompt=p))
        cached.generate(ModelRequest(prompt=p))
    assert inner.call_count == len(prompts)


def test_cache_transparency(tmp_path):
    rules = [
        MockRule(pattern="fix", output="fixed text"),
        MockRule(pattern="gen", distributions={"": dist({3: 0.9, 0: 0.1}), " three": dist({0: 1.0})}),
    ]
    plain = make_backend(rules)
    cached = CachedBackend(make_backend(rules), tmp_path)
    requests = [
        ("generate", ModelRequest(prompt="fix it")),
        ("generate", ModelRequest(prompt="gen it")),
        ("dist", "gen it"),
        ("seq", ("gen it", " three")),
    ]
    for _ in range(2):  # second pass exercises warm-cache paths
        for mode, arg in requests:
            if mode == "generate":
                assert cached.generate(arg) == plain.generate(arg)
            elif mode == "dist":
                assert cached.next_token_distribution(arg).probs == plain.next_token_distribution(arg).probs
            else:
                assert cached.sequence_probability(*arg) == plain.sequence_probability(*arg)


def test_corrupt_cache_entry_treated_as_miss_and_rewritten(tmp_path):
    inner = make_backend([MockRule(pattern="q", output="answer")])
    cached = CachedBackend(inner, tmp_path)
    cached.generate(ModelRequest(prompt="q1"))
    entry = next(tmp_path.glob("*.json"))
    entry.write_text('{"checksum": "bogus", "payload": {"text": "evil", "tokens": null}}')
    response = cached.generate(ModelRequest(prompt="q1"))
    assert response.text == "answer"
    assert json.loads(entry.read_text())["payload"]["text"] == "answer"


def test_cached_backend_exposes_inner_capabilities(tmp_path):
    inner = make_backend([MockRule(pattern="q", output="answer")])
    cached = CachedBackend(inner, tmp_path)
    assert cached.supports_exact_distributions
    assert cached.vocab is VOCAB


def test_generate_honors_stop_tokens():
    rule = MockRule(
        pattern="stoppy",
        distributions={
            "": dist({1: 0.9, 2: 0.1}),
            " one": dist({7: 0.8, 0: 0.2}),
        },
    )
    backend = make_backend([rule])
    response = backend.generate(
        ModelRequest(prompt="stoppy", stop_tokens=frozenset({7}))
    )
    assert response.text == " one"
