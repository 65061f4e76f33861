"""Uniform interfaces to the external models.

Three capabilities are needed: free-text generation (the policy and the
reflector), continuation scoring with summed token logprobs (the aligned
scorer and its reference), and binary entailment judgments. Live models are
reached over OpenAI-compatible HTTP routes; deterministic scripted backends
stand in for all three during tests.

Every call goes through a BackendSet, which appends a record per call to a
shared ledger. Ablation purity checks read that ledger.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import httpx

from .errors import (
    BackendUnavailable,
    CapabilityError,
    ConfigError,
    ScriptedBackendError,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 120.0
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY_S = 0.5

JUDGE_PROMPT_TEMPLATE = "premise: {premise} hypothesis: {hypothesis}"
SUPPORTIVE_PROBE = "supportive"


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_tokens: int = 256
    stop_sequences: tuple[str, ...] = ()
    seed: Optional[int] = None


class PolicyBackend(Protocol):
    def generate(self, prompt: str, params: GenerationParams) -> str: ...


class ScoringBackend(Protocol):
    def score_continuation(self, context: str, continuation: str) -> tuple[float, int]: ...


class EntailmentBackend(Protocol):
    def entails(self, premise: str, hypothesis: str) -> bool: ...


@dataclass(frozen=True)
class CallRecord:
    role: str
    kind: str
    prompt_hash: str
    latency_s: float


class CallLedger:
    """Append-only record of backend calls; safe under concurrent appends."""

    def __init__(self) -> None:
        self._records: list[CallRecord] = []
        self._lock = threading.Lock()

    def append(self, record: CallRecord) -> None:
        with self._lock:
            self._records.append(record)

    def records(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def counts_by_role(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records():
            counts[r.role] = counts.get(r.role, 0) + 1
        return counts


def _hash_prompt(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


Matcher = Union[str, "re.Pattern[str]"]
RuleResponse = Union[str, list, tuple, float, int, bool]


@dataclass
class Rule:
    """One scripted behavior: a matcher over the probe text and its response.

    String matchers compare for equality; compiled patterns use re.search.
    A list response is consumed one entry per call (the last entry repeats
    once exhausted), which lets a single expansion prompt yield distinct
    sibling children.
    """

    matcher: Matcher
    response: RuleResponse
    _cursor: int = field(default=0, repr=False)

    def matches(self, probe: str) -> bool:
        if isinstance(self.matcher, str):
            return self.matcher == probe
        return self.matcher.search(probe) is not None

    def next_response(self):
        if isinstance(self.response, list):
            idx = min(self._cursor, len(self.response) - 1)
            self._cursor += 1
            return self.response[idx]
        return self.response


class ScriptedBackend:
    """Deterministic rule-table stand-in for a model endpoint.

    Implements all three backend capabilities; the probe text a rule sees is
    the prompt for generation, the continuation for scoring, and the rendered
    judge prompt ("premise: ... hypothesis: ...") for entailment. The first
    matching rule wins and an unmatched probe is an error: rule tables must be
    exhaustive. Scoring rules respond with a bare logprob (token count is the
    continuation's whitespace count) or an explicit (logprob, count) tuple;
    list responses are reserved for sequential generation replies, so JSON
    fixtures can only use the scalar form.
    """

    def __init__(self, rules: Sequence[Rule] | None = None):
        self.rules = list(rules or [])
        self.call_log: list[str] = []

    def add(self, matcher: Matcher, response: RuleResponse) -> "ScriptedBackend":
        self.rules.append(Rule(matcher, response))
        return self

    def _lookup(self, probe: str):
        self.call_log.append(probe)
        for rule in self.rules:
            if rule.matches(probe):
                return rule.next_response()
        tail = probe if len(probe) <= 200 else "..." + probe[-200:]
        raise ScriptedBackendError(f"no scripted rule matches probe ending {tail!r}")

    def generate(self, prompt: str, params: GenerationParams) -> str:
        response = self._lookup(prompt)
        if not isinstance(response, str):
            raise ScriptedBackendError(f"rule for generation probe returned {type(response).__name__}")
        return response

    def score_continuation(self, context: str, continuation: str) -> tuple[float, int]:
        response = self._lookup(continuation)
        if isinstance(response, (tuple, list)):
            logprob, count = response
            return float(logprob), int(count)
        if isinstance(response, (int, float)) and not isinstance(response, bool):
            return float(response), len(continuation.split())
        raise ScriptedBackendError(f"rule for scoring probe returned {type(response).__name__}")

    def entails(self, premise: str, hypothesis: str) -> bool:
        probe = JUDGE_PROMPT_TEMPLATE.format(premise=premise, hypothesis=hypothesis)
        response = self._lookup(probe)
        if not isinstance(response, bool):
            raise ScriptedBackendError(f"rule for entailment probe returned {type(response).__name__}")
        return response

    @classmethod
    def from_json(cls, path: str | Path) -> "ScriptedBackend":
        """Load a rule table from a JSON fixture:
        {"rules": [{"match": "...", "regex": false, "response": ...}, ...]}
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"scripted rules file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid scripted rules JSON: {exc}") from exc
        rules = []
        for entry in payload.get("rules", []):
            matcher: Matcher = entry["match"]
            if entry.get("regex"):
                matcher = re.compile(entry["match"], re.DOTALL)
            response = entry["response"]
            rules.append(Rule(matcher, response))
        return cls(rules)


class _HttpTransport:
    """Shared request machinery: retries with capped exponential backoff on
    transport failures and 5xx; 4xx is a configuration problem and is not
    retried.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        max_concurrency: int = 4,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self._semaphore = threading.Semaphore(max_concurrency)
        self._client = client or httpx.Client(timeout=timeout_s)

    def post(self, route: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            try:
                with self._semaphore:
                    response = self._client.post(
                        f"{self.base_url}{route}", json=payload, headers=headers
                    )
                if 400 <= response.status_code < 500:
                    raise ConfigError(
                        f"{route} returned {response.status_code}: {response.text[:300]}"
                    )
                response.raise_for_status()
                return response.json()
            except ConfigError:
                raise
            except (httpx.HTTPError, json.JSONDecodeError) as exc:
                last_error = exc
                delay = RETRY_BASE_DELAY_S * (2**attempt)
                logger.warning("transient backend failure (%s), retrying in %.1fs", exc, delay)
                if attempt < RETRY_ATTEMPTS - 1:
                    time.sleep(delay)
        raise BackendUnavailable(f"{self.base_url}{route} unreachable after {RETRY_ATTEMPTS} attempts: {last_error}")


class OpenAIChatBackend:
    """Generation via an OpenAI-compatible /chat/completions route."""

    def __init__(self, transport: _HttpTransport):
        self.transport = transport

    def generate(self, prompt: str, params: GenerationParams) -> str:
        payload = {
            "model": self.transport.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        if params.seed is not None:
            payload["seed"] = params.seed
        data = self.transport.post("/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError) as exc:
            raise BackendUnavailable(f"malformed chat completion response: {data}") from exc


class OpenAICompletionsBackend:
    """Generation and continuation scoring via /completions with echoed
    logprobs. Scoring sums the token logprobs of the continuation span.
    """

    def __init__(self, transport: _HttpTransport):
        self.transport = transport

    def generate(self, prompt: str, params: GenerationParams) -> str:
        payload = {
            "model": self.transport.model,
            "prompt": prompt,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        if params.seed is not None:
            payload["seed"] = params.seed
        data = self.transport.post("/completions", payload)
        try:
            return data["choices"][0]["text"] or ""
        except (KeyError, IndexError) as exc:
            raise BackendUnavailable(f"malformed completion response: {data}") from exc

    def score_continuation(self, context: str, continuation: str) -> tuple[float, int]:
        full = context + continuation
        payload = {
            "model": self.transport.model,
            "prompt": full,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
            "temperature": 0.0,
        }
        data = self.transport.post("/completions", payload)
        try:
            logprobs = data["choices"][0]["logprobs"]
            token_logprobs = logprobs["token_logprobs"]
            offsets = logprobs["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise CapabilityError(
                f"endpoint {self.transport.base_url} did not return echoed logprobs"
            ) from exc
        boundary = len(context)
        total = 0.0
        count = 0
        for offset, lp in zip(offsets, token_logprobs):
            if offset >= boundary:
                # the first token of a sequence has no conditional logprob
                if lp is not None:
                    total += lp
                count += 1
        return total, count


class NliJudgeBackend:
    """Entailment over a generation endpoint: a pinned premise/hypothesis
    prompt and a binary verbalizer over the model's reply.
    """

    def __init__(
        self,
        backend: PolicyBackend,
        true_token: str = "1",
        false_token: str = "0",
    ):
        self.backend = backend
        self.true_token = true_token.lower()
        self.false_token = false_token.lower()

    def entails(self, premise: str, hypothesis: str) -> bool:
        prompt = JUDGE_PROMPT_TEMPLATE.format(premise=premise, hypothesis=hypothesis)
        reply = self.backend.generate(
            prompt, GenerationParams(temperature=0.0, max_tokens=8)
        ).strip().lower()
        if reply.startswith(self.true_token) or reply.startswith("yes"):
            return True
        if reply.startswith(self.false_token) or reply.startswith("no"):
            return False
        raise BackendUnavailable(f"judge reply {reply!r} matches neither verbalizer token")


@dataclass
class BackendSet:
    """The five model roles plus the shared call ledger. Roles may alias the
    same underlying backend (the reflector usually aliases the policy).
    """

    policy: PolicyBackend
    reflector: PolicyBackend
    scorer_policy: ScoringBackend
    scorer_reference: ScoringBackend
    judge: EntailmentBackend
    ledger: CallLedger = field(default_factory=CallLedger)

    def fork_ledger(self) -> "BackendSet":
        """Same backends, fresh ledger; used for exact per-question accounting."""
        return replace(self, ledger=CallLedger())

    def _record(self, role: str, kind: str, probe: str, started: float) -> None:
        self.ledger.append(
            CallRecord(role, kind, _hash_prompt(probe), time.monotonic() - started)
        )

    def generate(self, role: str, prompt: str, params: GenerationParams) -> str:
        backend = self.policy if role == "policy" else self.reflector
        started = time.monotonic()
        try:
            return backend.generate(prompt, params)
        finally:
            self._record(role, "generate", prompt, started)

    def score(self, role: str, context: str, continuation: str) -> tuple[float, int]:
        backend = self.scorer_policy if role == "scorer_policy" else self.scorer_reference
        started = time.monotonic()
        try:
            return backend.score_continuation(context, continuation)
        finally:
            self._record(role, "score", continuation, started)

    def entails(self, premise: str, hypothesis: str) -> bool:
        started = time.monotonic()
        try:
            return self.judge.entails(premise, hypothesis)
        finally:
            self._record("judge", "entails", premise + "\x1f" + hypothesis, started)


def probe_capabilities(backends: BackendSet) -> None:
    """Verify logprob support on the scorer backends before any search runs.
    Scripted backends are inherently capable and are not probed.
    """
    for role in ("scorer_policy", "scorer_reference"):
        backend = getattr(backends, role)
        if isinstance(backend, ScriptedBackend):
            continue
        try:
            backend.score_continuation("capability probe:", " ok")
        except CapabilityError:
            raise
        except Exception as exc:
            raise CapabilityError(f"{role} failed the scoring capability probe: {exc}") from exc
