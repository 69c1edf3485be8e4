"""Generative-model backends: a deterministic mock, an OpenAI-compatible HTTP
client, and a content-addressed caching wrapper.

All backends expose four call modes: text generation, next-token probability
distribution, greedy next token, and teacher-forced sequence probability.
Greedy decoding only; ties break toward the lowest token id so every mode is
a total, reproducible function of the prompt.

Certification requires exact distributions. The HTTP backend only sees
truncated top-L logprobs, so it reports itself as approximate and is barred
from certification; its missing probability mass is tracked, never
renormalized (renormalizing would silently inflate the attacker's per-token
influence past 1).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .core import Response, concat
from .errors import (
    BackendUnavailableError,
    CapabilityUnsupportedError,
    NoRuleMatchedError,
)

EXACT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TokenDistribution:
    """Sparse next-token distribution over token ids [0, vocab_size)."""

    probs: Mapping[int, float]
    vocab_size: int
    exact: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", dict(self.probs))
        for tok, p in self.probs.items():
            if not (0 <= tok < self.vocab_size):
                raise ValueError(f"token id {tok} outside [0, {self.vocab_size})")
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probability {p} for token {tok} outside [0, 1]")
        if self.exact and abs(sum(self.probs.values()) - 1.0) > EXACT_SUM_TOL:
            raise ValueError(
                f"exact distribution must sum to 1, got {sum(self.probs.values())}"
            )

    def prob(self, token: int) -> float:
        return self.probs.get(token, 0.0)

    @property
    def missing_mass(self) -> float:
        return max(0.0, 1.0 - sum(self.probs.values()))

    def argmax(self) -> int:
        """Highest-probability token; ties break to the lowest token id."""
        if not self.probs:
            return 0
        return min(self.probs, key=lambda t: (-self.probs[t], t))


@dataclass(frozen=True)
class ModelRequest:
    prompt: str
    mode: str = "generate"
    max_new_tokens: int = 64
    stop_tokens: frozenset = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop_tokens", frozenset(self.stop_tokens))
        if self.mode == "generate" and self.max_new_tokens < 1:
            raise ValueError("generate mode requires max_new_tokens >= 1")


class ModelBackend:
    """Interface all backends implement. Subclasses must be thread-safe."""

    cache_id: str = "backend"
    supports_exact_distributions: bool = False

    def generate(self, request: ModelRequest) -> Response:
        raise NotImplementedError

    def next_token_distribution(self, prompt: str) -> TokenDistribution:
        raise NotImplementedError

    def next_token_greedy(self, prompt: str) -> int:
        return self.next_token_distribution(prompt).argmax()

    def sequence_probability(self, prompt: str, target: str) -> float:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    """Token-id -> surface-string table for the mock backend.

    Decoding is plain concatenation of token strings (EOS contributes
    nothing), so token strings typically carry their own leading space.
    """

    tokens: Mapping[int, str]
    eos_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", dict(self.tokens))
        if self.eos_id not in self.tokens:
            raise ValueError("eos_id must be a vocab entry")
        for tok_id, text in self.tokens.items():
            if "\n" in text:
                raise ValueError(f"token {tok_id} contains a newline")

    @property
    def size(self) -> int:
        return max(self.tokens) + 1

    def decode(self, token_ids: Sequence[int]) -> str:
        return "".join(self.tokens[t] for t in token_ids if t != self.eos_id)

    def tokenize(self, text: str) -> Tuple[int, ...]:
        """Greedy longest-match tokenization; raises if text is not coverable."""
        by_len = sorted(
            ((s, i) for i, s in self.tokens.items() if s),
            key=lambda pair: -len(pair[0]),
        )
        out: List[int] = []
        pos = 0
        while pos < len(text):
            for surface, tok_id in by_len:
                if text.startswith(surface, pos):
                    out.append(tok_id)
                    pos += len(surface)
                    break
            else:
                raise ValueError(f"cannot tokenize {text[pos:]!r} with this vocab")
        return tuple(out)


@dataclass(frozen=True)
class MockRule:
    """One (pattern, behavior) pair.

    `pattern` is a substring predicate over the prompt. Behavior is either a
    fixed `output` string, or next-token `distributions` keyed by the decoded
    partial response so far. Distribution lookup picks the longest declared
    key that suffixes the prompt; the empty key acts as a catch-all, so a
    single {"": dist} entry yields the same distribution at every step.
    """

    pattern: str
    output: Optional[str] = None
    distributions: Optional[Mapping[str, TokenDistribution]] = None

    def __post_init__(self) -> None:
        if (self.output is None) == (self.distributions is None):
            raise ValueError("rule needs exactly one of output/distributions")
        if self.distributions is not None:
            object.__setattr__(self, "distributions", dict(self.distributions))

    @property
    def is_fixed(self) -> bool:
        return self.output is not None

    def matches(self, prompt: str) -> bool:
        return self.pattern in prompt

    def distribution_for(self, prompt: str) -> TokenDistribution:
        assert self.distributions is not None
        best: Optional[str] = None
        for partial in self.distributions:
            if prompt.endswith(partial) and (best is None or len(partial) > len(best)):
                best = partial
        if best is None:
            raise NoRuleMatchedError(
                f"rule {self.pattern!r} has no distribution for this decode state"
            )
        return self.distributions[best]


@dataclass(frozen=True)
class MockModelTable:
    """Ordered first-match rule table plus the vocab distribution rules use."""

    rules: Tuple[MockRule, ...]
    vocab: Optional[Vocab] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        for rule in self.rules:
            if rule.distributions is not None:
                if self.vocab is None:
                    raise ValueError("distribution rules require a vocab")
                for dist in rule.distributions.values():
                    if dist.vocab_size != self.vocab.size:
                        raise ValueError("distribution vocab_size mismatch")

    def match(self, prompt: str) -> MockRule:
        for rule in self.rules:
            if rule.matches(prompt):
                return rule
        raise NoRuleMatchedError(f"no mock rule matches prompt: {prompt[:120]!r}...")

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(table_to_json(self), sort_keys=True).encode("utf-8")
        ).hexdigest()


class MockBackend(ModelBackend):
    """Exact, deterministic table-driven backend used by tests and certification."""

    supports_exact_distributions = True

    def __init__(self, table: MockModelTable) -> None:
        self.table = table
        self.cache_id = f"mock:{table.content_hash()[:16]}"
        self.call_count = 0

    @property
    def vocab(self) -> Vocab:
        if self.table.vocab is None:
            raise CapabilityUnsupportedError("mock table has no vocab configured")
        return self.table.vocab

    def generate(self, request: ModelRequest) -> Response:
        self.call_count += 1
        rule = self.table.match(request.prompt)
        if rule.is_fixed:
            return Response(text=rule.output)
        # Greedy decode by replaying next_token_distribution on the growing
        # prompt, so generate and step-wise decoding can never disagree.
        vocab = self.vocab
        produced: List[int] = []
        for _ in range(request.max_new_tokens):
            dist = self.next_token_distribution(
                concat([request.prompt, vocab.decode(produced)])
            )
            token = dist.argmax()
            if token == vocab.eos_id or token in request.stop_tokens:
                break
            produced.append(token)
        return Response(text=vocab.decode(produced), tokens=tuple(produced))

    def next_token_distribution(self, prompt: str) -> TokenDistribution:
        self.call_count += 1
        rule = self.table.match(prompt)
        if rule.is_fixed:
            raise NoRuleMatchedError(
                f"rule {rule.pattern!r} is a fixed-output rule; no distribution available"
            )
        return rule.distribution_for(prompt)

    def sequence_probability(self, prompt: str, target: str) -> float:
        vocab = self.vocab
        target_tokens = vocab.tokenize(target)
        if not target_tokens:
            raise ValueError("target must tokenize to at least one token")
        prob = 1.0
        for step in range(len(target_tokens)):
            prefix = vocab.decode(target_tokens[:step])
            dist = self.next_token_distribution(concat([prompt, prefix]))
            prob *= dist.prob(target_tokens[step])
            if prob == 0.0:
                return 0.0
        return prob


# --- mock table JSON (used by the CLI --mock-table flag) -------------------


def table_to_json(table: MockModelTable) -> dict:
    doc: dict = {"rules": []}
    if table.vocab is not None:
        doc["vocab"] = {
            "tokens": {str(i): s for i, s in sorted(table.vocab.tokens.items())},
            "eos_id": table.vocab.eos_id,
        }
    for rule in table.rules:
        entry: dict = {"pattern": rule.pattern}
        if rule.is_fixed:
            entry["output"] = rule.output
        else:
            entry["distributions"] = {
                partial: {str(t): p for t, p in sorted(dist.probs.items())}
                for partial, dist in rule.distributions.items()
            }
        doc["rules"].append(entry)
    return doc


def table_from_json(doc: dict) -> MockModelTable:
    vocab = None
    if "vocab" in doc:
        vocab = Vocab(
            tokens={int(i): s for i, s in doc["vocab"]["tokens"].items()},
            eos_id=doc["vocab"]["eos_id"],
        )
    rules = []
    for entry in doc["rules"]:
        if "output" in entry:
            rules.append(MockRule(pattern=entry["pattern"], output=entry["output"]))
        else:
            assert vocab is not None, "distribution rules require a vocab"
            dists = {
                partial: TokenDistribution(
                    probs={int(t): p for t, p in probs.items()},
                    vocab_size=vocab.size,
                )
                for partial, probs in entry["distributions"].items()
            }
            rules.append(MockRule(pattern=entry["pattern"], distributions=dists))
    return MockModelTable(rules=tuple(rules), vocab=vocab)


def load_table(path: Union[str, Path]) -> MockModelTable:
    with open(path, "r", encoding="utf-8") as fh:
        return table_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backend
# ---------------------------------------------------------------------------


class _InternedVocab:
    """Decode-only vocab over a backend's interned token-string table.

    EOS is matched by surface text (providers do not expose stable ids);
    with no eos_text configured decoding just runs to the step limit.
    """

    def __init__(self, owner: "HTTPBackend") -> None:
        self._owner = owner

    @property
    def eos_id(self) -> int:
        if self._owner.eos_text is None:
            return -1
        return self._owner._intern(self._owner.eos_text)

    def decode(self, token_ids: Sequence[int]) -> str:
        eos = self.eos_id
        return "".join(
            self._owner.token_text(t) for t in token_ids if t != eos
        )


class HTTPBackend(ModelBackend):
    """Chat-completions client with top-L logprob distributions.

    Distributions carry only the provider's top-L mass and are flagged
    approximate, which bars this backend from certification. Decoding
    aggregation needs one call per token here, so it is gated behind
    `allow_decoding_aggregation` for empirical runs only.
    """

    supports_exact_distributions = False

    def __init__(
        self,
        base_url: str,
        model: str,
        token_env: str = "OPENAI_API_KEY",
        top_logprobs: int = 5,
        allow_decoding_aggregation: bool = False,
        eos_text: Optional[str] = None,
        max_retries: int = 3,
        timeout: float = 60.0,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.token_env = token_env
        self.top_logprobs = top_logprobs
        self.allow_decoding_aggregation = allow_decoding_aggregation
        self.eos_text = eos_text
        self.max_retries = max_retries
        self.timeout = timeout
        self.cache_id = f"http:{self.base_url}:{self.model}"
        self._token_ids: Dict[str, int] = {}
        self._lock = threading.Lock()

    @property
    def vocab(self) -> _InternedVocab:
        return _InternedVocab(self)

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, payload: dict) -> dict:
        import requests

        url = f"{self.base_url}/chat/completions"
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(
                    url, json=payload, headers=self._headers(), timeout=self.timeout
                )
                if resp.status_code >= 500:
                    last_error = BackendUnavailableError(
                        f"server error {resp.status_code}"
                    )
                    time.sleep(0.1 * (attempt + 1))
                    continue
                resp.raise_for_status()
                return resp.json()
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                time.sleep(0.1 * (attempt + 1))
        raise BackendUnavailableError(f"backend unreachable: {last_error}")

    def _intern(self, token_text: str) -> int:
        with self._lock:
            if token_text not in self._token_ids:
                self._token_ids[token_text] = len(self._token_ids)
            return self._token_ids[token_text]

    def token_text(self, token_id: int) -> str:
        with self._lock:
            for text, tid in self._token_ids.items():
                if tid == token_id:
                    return text
        raise KeyError(token_id)

    def generate(self, request: ModelRequest) -> Response:
        body = self._post(
            {
                "model": self.model,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": 0,
                "max_tokens": request.max_new_tokens,
            }
        )
        return Response(text=body["choices"][0]["message"]["content"])

    def next_token_distribution(self, prompt: str) -> TokenDistribution:
        body = self._post(
            {
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0,
                "max_tokens": 1,
                "logprobs": True,
                "top_logprobs": self.top_logprobs,
            }
        )
        top = body["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        probs = {self._intern(t["token"]): math.exp(t["logprob"]) for t in top}
        with self._lock:
            vocab_size = max(len(self._token_ids), 1)
        return TokenDistribution(probs=probs, vocab_size=vocab_size, exact=False)

    def sequence_probability(self, prompt: str, target: str) -> float:
        raise CapabilityUnsupportedError(
            "truncated-logprob backends cannot compute exact sequence probabilities"
        )


# ---------------------------------------------------------------------------
# Caching wrapper
# ---------------------------------------------------------------------------


class CachedBackend(ModelBackend):
    """Content-addressed, observationally transparent cache around any backend.

    Key = hash of (backend id, mode, prompt, decode params). One JSON file per
    key; a checksum mismatch on read counts as a miss and the entry is
    rewritten. Writes are atomic (tmp + rename) and serialized, so concurrent
    writers at worst repeat identical work.
    """

    def __init__(self, inner: ModelBackend, cache_dir: Union[str, Path]) -> None:
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.cache_id = inner.cache_id
        self._write_lock = threading.Lock()

    @property
    def supports_exact_distributions(self) -> bool:  # type: ignore[override]
        return self.inner.supports_exact_distributions

    @property
    def vocab(self):
        return self.inner.vocab  # type: ignore[attr-defined]

    @property
    def allow_decoding_aggregation(self) -> bool:
        return getattr(self.inner, "allow_decoding_aggregation", False)

    def _key(self, mode: str, prompt: str, params: dict) -> str:
        material = json.dumps(
            {
                "backend": self.inner.cache_id,
                "mode": mode,
                "prompt": prompt,
                "params": params,
            },
            sort_keys=True,
        )
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def _read(self, key: str) -> Optional[dict]:
        path = self.cache_dir / f"{key}.json"
        try:
            raw = path.read_bytes()
            doc = json.loads(raw)
            payload = doc["payload"]
            digest = hashlib.sha256(
                json.dumps(payload, sort_keys=True).encode("utf-8")
            ).hexdigest()
            if digest != doc["checksum"]:
                return None
            return payload
        except (OSError, ValueError, KeyError):
            return None

    def _write(self, key: str, payload: dict) -> None:
        path = self.cache_dir / f"{key}.json"
        doc = {
            "checksum": hashlib.sha256(
                json.dumps(payload, sort_keys=True).encode("utf-8")
            ).hexdigest(),
            "payload": payload,
        }
        with self._write_lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
            os.replace(tmp, path)

    def generate(self, request: ModelRequest) -> Response:
        key = self._key(
            "generate",
            request.prompt,
            {
                "max_new_tokens": request.max_new_tokens,
                "stop_tokens": sorted(request.stop_tokens),
            },
        )
        payload = self._read(key)
        if payload is None:
            response = self.inner.generate(request)
            payload = {
                "text": response.text,
                "tokens": list(response.tokens) if response.tokens is not None else None,
            }
            self._write(key, payload)
        tokens = tuple(payload["tokens"]) if payload["tokens"] is not None else None
        return Response(text=payload["text"], tokens=tokens)

    def next_token_distribution(self, prompt: str) -> TokenDistribution:
        key = self._key("next_token_distribution", prompt, {})
        payload = self._read(key)
        if payload is None:
            dist = self.inner.next_token_distribution(prompt)
            payload = {
                "probs": {str(t): p for t, p in sorted(dist.probs.items())},
                "vocab_size": dist.vocab_size,
                "exact": dist.exact,
            }
            self._write(key, payload)
        return TokenDistribution(
            probs={int(t): p for t, p in payload["probs"].items()},
            vocab_size=payload["vocab_size"],
            exact=payload["exact"],
        )

    def next_token_greedy(self, prompt: str) -> int:
        return self.next_token_distribution(prompt).argmax()

    def sequence_probability(self, prompt: str, target: str) -> float:
        key = self._key("sequence_probability", prompt, {"target": target})
        payload = self._read(key)
        if payload is None:
            payload = {"prob": self.inner.sequence_probability(prompt, target)}
            self._write(key, payload)
        return payload["prob"]
