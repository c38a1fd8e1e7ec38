"""Uniform interface to text-completion backends.

Every agent role in the pipeline (decomposition, solving, reflection,
synthesis, consolidation, judging, exploration) issues its calls through
:class:`Gateway`, which provides transport retries with backoff, structured
output enforcement with bounded repair re-prompts, an in-flight concurrency
gate, and an atomic call counter. Structured replies are requested as fenced
``json`` blocks and validated against a JSON schema; a reply that cannot be
repaired is a hard :class:`FormatError`, never a silent fallback.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Protocol

import jsonschema
import requests

ROLES = (
    "decomposer",
    "solver",
    "reflector",
    "synthesizer",
    "consolidator",
    "judge",
    "explorer",
)

DEFAULT_TEMPERATURE = 0.7
JUDGE_TEMPERATURE = 0.0
DEFAULT_MAX_IN_FLIGHT = 20

_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


class GatewayError(Exception):
    """Base class for completion failures."""


class TransportError(GatewayError):
    """Backend unreachable or returned a non-success transport status."""


class FormatError(GatewayError):
    """Structured reply failed validation after all repair attempts."""


@dataclass(frozen=True)
class ResponseSchema:
    """A named JSON schema the reply must validate against."""

    name: str
    json_schema: dict


@dataclass(frozen=True)
class CompletionRequest:
    role_tag: str
    system_text: str
    user_text: str
    temperature: float = DEFAULT_TEMPERATURE
    structured_schema: Optional[ResponseSchema] = None

    def __post_init__(self) -> None:
        if self.role_tag not in ROLES:
            raise ValueError(f"unknown role_tag {self.role_tag!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    parsed: Any
    attempt_count: int
    backend_id: str


class Backend(Protocol):
    """A text-completion provider. Implementations must be thread-safe."""

    backend_id: str

    def generate(self, request: CompletionRequest) -> str:
        """Return the raw reply text, raising TransportError on failure."""
        ...


def extract_json(text: str) -> Any:
    """Pull the first JSON value out of a reply.

    Prefers a fenced block; falls back to scanning for the first decodable
    object or array, then to parsing the whole stripped text.
    """
    for block in _FENCE.findall(text):
        try:
            return json.loads(block.strip())
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    for match in re.finditer(r"[\[{]", text):
        try:
            value, _ = decoder.raw_decode(text, match.start())
            return value
        except json.JSONDecodeError:
            continue
    try:
        return json.loads(text.strip())
    except json.JSONDecodeError as exc:
        raise FormatError(f"no JSON value found in reply: {text[:200]!r}") from exc


def parse_structured(text: str, schema: ResponseSchema) -> Any:
    value = extract_json(text)
    try:
        jsonschema.validate(value, schema.json_schema)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"reply does not match {schema.name}: {exc.message}") from exc
    return value


def _repair_suffix(schema: ResponseSchema, reason: str) -> str:
    return (
        "\n\nYour previous reply could not be used: "
        f"{reason}\n"
        f"Reply again with ONLY a fenced ```json block matching the {schema.name} format."
    )


class Gateway:
    """Thread-safe completion front-end with retries, repairs, and accounting.

    The call counter increments exactly once per logical ``complete`` call;
    transport retries and repair re-prompts are reported via
    ``CompletionResult.attempt_count`` instead. Counters are per instance, so
    per-sample accounting is done by giving each sample run its own gateway
    over a shared backend and a shared in-flight limiter.
    """

    def __init__(
        self,
        backend: Backend,
        *,
        limiter: Optional[threading.Semaphore] = None,
        max_transport_attempts: int = 3,
        max_repairs: int = 2,
        backoff_seconds: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
        observer: Optional[Callable[[CompletionRequest], None]] = None,
    ) -> None:
        self._backend = backend
        self._limiter = limiter if limiter is not None else threading.Semaphore(DEFAULT_MAX_IN_FLIGHT)
        self._max_transport_attempts = max_transport_attempts
        self._max_repairs = max_repairs
        self._backoff_seconds = backoff_seconds
        self._sleep = sleep
        self._observer = observer
        self._count = 0
        self._lock = threading.Lock()

    def call_count(self) -> int:
        with self._lock:
            return self._count

    def reset_count(self) -> None:
        with self._lock:
            self._count = 0

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self._count += 1
        if self._observer is not None:
            self._observer(request)
        with self._limiter:
            return self._complete_locked(request)

    def _complete_locked(self, request: CompletionRequest) -> CompletionResult:
        attempts = 0
        current = request
        repairs = 0
        while True:
            text, used = self._generate_with_retries(current)
            attempts += used
            if request.structured_schema is None:
                return CompletionResult(text, None, attempts, self._backend.backend_id)
            try:
                parsed = parse_structured(text, request.structured_schema)
                return CompletionResult(text, parsed, attempts, self._backend.backend_id)
            except FormatError as exc:
                if repairs >= self._max_repairs:
                    raise FormatError(
                        f"{request.role_tag}: {exc} (after {repairs} repair prompts)"
                    ) from exc
                repairs += 1
                current = replace(
                    request,
                    user_text=request.user_text
                    + _repair_suffix(request.structured_schema, str(exc)),
                )

    def _generate_with_retries(self, request: CompletionRequest) -> tuple[str, int]:
        last: Optional[TransportError] = None
        for attempt in range(self._max_transport_attempts):
            try:
                return self._backend.generate(request), attempt + 1
            except TransportError as exc:
                last = exc
                if attempt + 1 < self._max_transport_attempts:
                    self._sleep(self._backoff_seconds * (2**attempt))
        raise TransportError(
            f"{request.role_tag}: backend failed after "
            f"{self._max_transport_attempts} attempts: {last}"
        )


def make_limiter(max_in_flight: int = DEFAULT_MAX_IN_FLIGHT) -> threading.Semaphore:
    """A shareable in-flight gate for gateways built over one backend."""
    return threading.Semaphore(max_in_flight)


class RemoteChatBackend:
    """OpenAI-style chat-completions backend over HTTP."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: Optional[str] = None,
        timeout: float = 120.0,
        session: Optional[Any] = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self._session = session if session is not None else requests.Session()
        self.backend_id = f"remote:{model}"

    def generate(self, request: CompletionRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
        }
        try:
            response = self._session.post(
                f"{self.endpoint}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportError(f"backend returned HTTP {response.status_code}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed backend response: {exc}") from exc
