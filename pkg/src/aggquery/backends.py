"""Completion backends: a deterministic scripted mock and an HTTP chat client,
behind one request shape, with call/token budget accounting.

Offline runs use ScriptedBackend exclusively; it never touches the network
and refuses unregistered prompts loudly so tests cannot silently drift.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

from .errors import (
    BudgetExceededError,
    ConfigError,
    ResponseFormatError,
    TransportError,
    UnscriptedPromptError,
    ValidationError,
)
from .tokens import count_tokens

logger = logging.getLogger(__name__)

PURPOSES = ("parse", "classify", "clarify", "plan", "judge", "probe")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValidationError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[Message, ...]
    purpose: str
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValidationError("messages must be non-empty")
        if self.purpose not in PURPOSES:
            raise ValidationError(f"unknown purpose {self.purpose!r}; expected one of {PURPOSES}")
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValidationError(f"max_tokens must be >= 1, got {self.max_tokens}")

    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


def user_request(purpose: str, content: str, system: str | None = None, **kwargs) -> CompletionRequest:
    """One-user-message request, optionally with a system preamble."""
    messages: list[Message] = []
    if system is not None:
        messages.append(Message("system", system))
    messages.append(Message("user", content))
    return CompletionRequest(tuple(messages), purpose, **kwargs)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    output_tokens: int

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.output_tokens


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage


def approx_usage(req: CompletionRequest, response_text: str) -> Usage:
    """Whitespace-token usage estimate for backends that report none."""
    return Usage(count_tokens(req.prompt_text()), count_tokens(response_text))


class LlmBackend(Protocol):
    def generate(self, req: CompletionRequest) -> Completion: ...


# ---------------------------------------------------------------------------
# Budget accounting
# ---------------------------------------------------------------------------


@dataclass
class BudgetCeilings:
    max_calls: int | None = None
    max_prompt_tokens: int | None = None
    max_output_tokens: int | None = None
    max_calls_per_purpose: dict[str, int] = field(default_factory=dict)


class BudgetLedger:
    """Thread-safe call/token accounting with hard ceilings.

    `reserve` raises once any ceiling has been reached: the breaching call is
    the last to go through and the next attempt halts the pipeline.  Totals
    only ever grow.
    """

    def __init__(self, ceilings: BudgetCeilings | None = None):
        self.ceilings = ceilings or BudgetCeilings()
        self._lock = threading.Lock()
        self._calls: dict[str, int] = {p: 0 for p in PURPOSES}
        self._prompt_tokens = 0
        self._output_tokens = 0

    def reserve(self, purpose: str) -> None:
        c = self.ceilings
        with self._lock:
            total_calls = sum(self._calls.values())
            if c.max_calls is not None and total_calls >= c.max_calls:
                raise BudgetExceededError(f"call budget exhausted ({c.max_calls} calls)")
            per = c.max_calls_per_purpose.get(purpose)
            if per is not None and self._calls[purpose] >= per:
                raise BudgetExceededError(f"{purpose} call budget exhausted ({per} calls)")
            if c.max_prompt_tokens is not None and self._prompt_tokens >= c.max_prompt_tokens:
                raise BudgetExceededError(f"prompt token budget exhausted ({c.max_prompt_tokens})")
            if c.max_output_tokens is not None and self._output_tokens >= c.max_output_tokens:
                raise BudgetExceededError(f"output token budget exhausted ({c.max_output_tokens})")

    def record(self, purpose: str, usage: Usage) -> None:
        with self._lock:
            self._calls[purpose] += 1
            self._prompt_tokens += usage.prompt_tokens
            self._output_tokens += usage.output_tokens

    def snapshot(self) -> dict:
        with self._lock:
            calls = dict(self._calls)
            return {
                "calls": calls,
                "total_calls": sum(calls.values()),
                "prompt_tokens": self._prompt_tokens,
                "output_tokens": self._output_tokens,
            }


def complete(req: CompletionRequest, backend: LlmBackend, ledger: BudgetLedger | None = None) -> Completion:
    """Run one completion, charging the ledger when one is given."""
    if ledger is not None:
        ledger.reserve(req.purpose)
    result = backend.generate(req)
    if ledger is not None:
        ledger.record(req.purpose, result.usage)
    return result


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------


def request_key(req: CompletionRequest) -> str:
    """Stable exact-match key: purpose plus a hash of the full message list."""
    canon = json.dumps(
        [[m.role, m.content] for m in req.messages], ensure_ascii=False, separators=(",", ":")
    )
    digest = hashlib.sha256(canon.encode("utf-8")).hexdigest()[:32]
    return f"{req.purpose}:{digest}"


class ScriptedBackend:
    """Pure-lookup backend for tests and recorded runs.

    Exact keys (from `request_key`) are consulted first, then purpose+contains
    rules in registration order.  A miss raises UnscriptedPromptError; there
    is deliberately no default response.
    """

    def __init__(self):
        self._exact: dict[str, str] = {}
        self._rules: list[tuple[str, str, str]] = []  # (purpose, contains, response)
        self.seen: list[CompletionRequest] = []
        self._lock = threading.Lock()

    def register_script(self, key: str, response: str) -> None:
        with self._lock:
            if key in self._exact:
                raise ValidationError(f"script key already registered: {key}")
            self._exact[key] = response

    def register_response(self, req: CompletionRequest, response: str) -> None:
        self.register_script(request_key(req), response)

    def register_rule(self, purpose: str, contains: str, response: str) -> None:
        if purpose not in PURPOSES:
            raise ValidationError(f"unknown purpose {purpose!r}")
        with self._lock:
            if any(p == purpose and c == contains for p, c, _ in self._rules):
                raise ValidationError(f"rule already registered: {purpose}+{contains!r}")
            self._rules.append((purpose, contains, response))

    def load_script_file(self, path: str | Path) -> int:
        """Load a JSON list of {key, response} / {purpose, contains, response}."""
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(entries, list):
            raise ValidationError(f"{path}: script file must be a JSON list")
        for entry in entries:
            if "key" in entry:
                self.register_script(entry["key"], entry["response"])
            elif "purpose" in entry and "contains" in entry:
                self.register_rule(entry["purpose"], entry["contains"], entry["response"])
            else:
                raise ValidationError(f"{path}: entry needs 'key' or 'purpose'+'contains'")
        return len(entries)

    def generate(self, req: CompletionRequest) -> Completion:
        with self._lock:
            self.seen.append(req)
            response = self._exact.get(request_key(req))
            if response is None:
                prompt = req.prompt_text()
                for purpose, contains, rule_response in self._rules:
                    if purpose == req.purpose and contains in prompt:
                        response = rule_response
                        break
        if response is None:
            head = req.prompt_text()[:200]
            raise UnscriptedPromptError(
                f"no script for purpose={req.purpose} key={request_key(req)}; prompt starts: {head!r}"
            )
        return Completion(response, approx_usage(req, response))


# ---------------------------------------------------------------------------
# HTTP chat backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HttpBackendConfig:
    url: str
    model: str
    api_key: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4

    @classmethod
    def from_env(cls, env=os.environ) -> "HttpBackendConfig":
        url = env.get("AGGQUERY_LLM_URL", "")
        model = env.get("AGGQUERY_LLM_MODEL", "")
        if not url or not model:
            raise ConfigError("AGGQUERY_LLM_URL and AGGQUERY_LLM_MODEL must be set")
        return cls(
            url=url,
            model=model,
            api_key=env.get("AGGQUERY_LLM_API_KEY", ""),
            timeout=float(env.get("AGGQUERY_LLM_TIMEOUT", "60")),
            max_retries=int(env.get("AGGQUERY_LLM_RETRIES", "3")),
            max_parallel=int(env.get("AGGQUERY_LLM_PARALLEL", "4")),
        )


class HttpChatBackend:
    """Chat-completions-style JSON over HTTP."""

    def __init__(self, config: HttpBackendConfig, session=None):
        if session is None:
            import requests

            session = requests.Session()
        self.config = config
        self._session = session
        self._semaphore = threading.Semaphore(config.max_parallel)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        return headers

    def generate(self, req: CompletionRequest) -> Completion:
        payload = {
            "model": self.config.model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                with self._semaphore:
                    resp = self._session.post(
                        self.config.url,
                        json=payload,
                        headers=self._headers(),
                        timeout=self.config.timeout,
                    )
                resp.raise_for_status()
                return self._parse(req, resp.json())
            except ResponseFormatError:
                raise
            except Exception as exc:  # noqa: BLE001 - transport failures are retryable
                last_exc = exc
                if attempt < self.config.max_retries:
                    delay = min(2.0**attempt * 0.5, 10.0)
                    logger.warning("llm call failed (attempt %d: %s); retrying", attempt + 1, exc)
                    time.sleep(delay)
        raise TransportError(
            f"llm request failed after {self.config.max_retries + 1} attempts", last_exc
        )

    @staticmethod
    def _parse(req: CompletionRequest, body: dict) -> Completion:
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseFormatError(f"malformed completion body: {exc}", raw=json.dumps(body)) from exc
        usage = body.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            return Completion(text, Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"])))
        return Completion(text, approx_usage(req, text))


def loads_first_json(text: str):
    """Parse the first JSON value in a model response.

    Models wrap JSON in prose or code fences often enough that bare
    json.loads is unusable; scanning for the first parsable value keeps the
    callers strict (anything without a JSON value is still an error).
    """
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "[{":
            try:
                obj, _ = decoder.raw_decode(text[i:])
                return obj
            except json.JSONDecodeError:
                continue
    raise ResponseFormatError("no JSON value found in model response", raw=text)


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

# Templates use string.Template ($var) so JSON braces need no escaping.
# The prompts/ directory carries a VERSION file; bump it on any wording change.


def load_prompt(name: str) -> string.Template:
    try:
        text = resources.files("aggquery.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no prompt template named {name!r}") from None
    return string.Template(text)


def render_prompt(name: str, **values: str) -> str:
    try:
        return load_prompt(name).substitute(**values)
    except KeyError as exc:
        raise ConfigError(f"prompt {name!r} is missing value for {exc}") from exc


def prompt_version() -> str:
    return resources.files("aggquery.prompts").joinpath("VERSION").read_text(encoding="utf-8").strip()
