import hashlib
import json
import logging
import os
import re
import threading
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Any, TypeVar

import openai
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from .exceptions import BackendError, ConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Written for a factor when the reviews carry no evidence about it
UNKNOWN = "unknown"

RETRYABLE = (
    openai.APIConnectionError,
    openai.RateLimitError,
    openai.InternalServerError,
)

STOP_WORDS = frozenset(
    """a about after again all also am an and any are as at be because been before
    being but by can could did do does doing for from had has have having he her here
    his how i if in into is it its just me more most my no nor not of off on once only
    or other our out over own really same she should so some such than that the their
    them then there these they this those through to too under until up very was we
    were what when where which while who whom why will with would you your""".split()
)


class BackendKind(StrEnum):
    http_chat = "http_chat"
    mock = "mock"


@dataclass(frozen=True)
class LlmBackendConfig:
    kind: BackendKind = BackendKind.mock
    endpoint: str | None = None
    model_name: str = "gpt-4o-mini"
    max_retries: int = 5
    timeout: float = 60.0
    temperature: float = 0.0
    api_key_env: str = "OPENAI_API_KEY"
    mock_top_k: int = 1


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[dict[str, str], ...]
    # Structured view of the prompt, only the mock backend reads it
    factor_names: tuple[str, ...] = ()
    reviews: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return "\n".join(m["content"] for m in self.messages)


def estimate_tokens(text: str) -> int:
    return (len(text) + 3) // 4


def call_with_backoff(
    func: Callable[..., T], *args: Any, max_retries: int, what: str, **kwargs: Any
) -> T:
    """Retry transient API failures: sleeps 1s, 2s, 4s, ... between attempts"""
    retrying = Retrying(
        stop=stop_after_attempt(max_retries + 1),
        wait=wait_exponential(multiplier=1, exp_base=2, max=60),
        retry=retry_if_exception_type(RETRYABLE),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
    try:
        return retrying(func, *args, **kwargs)
    except RETRYABLE as e:
        raise BackendError(f"{what} failed after {max_retries} retries: {e}") from e
    except openai.OpenAIError as e:
        raise BackendError(f"{what} failed: {e}") from e


class ResponseCache:
    """Raw backend responses keyed by content hash.

    Entries live in memory and, when `directory` is given, one JSON file per key so
    that later runs never call the backend again for the same request.
    """

    def __init__(self, directory: Path | None = None):
        self.directory = directory
        self._memory: dict[str, str] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts: str) -> str:
        return hashlib.sha256(json.dumps(parts).encode("utf8")).hexdigest()

    def _path(self, key: str) -> Path | None:
        return None if self.directory is None else self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if (path := self._path(key)) is not None and path.exists():
            value = json.loads(path.read_text("utf8"))["response"]
            with self._lock:
                self._memory[key] = value
            return value
        return None

    def put(self, key: str, value: str) -> None:
        with self._lock:
            self._memory[key] = value
        if (path := self._path(key)) is not None:
            tmp = path.with_suffix(f".{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps({"response": value}), "utf8")
            tmp.replace(path)

    def get_or_create(self, key: str, create: Callable[[], str]) -> tuple[str, bool]:
        """Return (value, hit); concurrent callers of one key create it once"""
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            try:
                if (value := self.get(key)) is not None:
                    return value, True
                value = create()
                self.put(key, value)
                return value, False
            finally:
                # Late callers find the value in memory and need no lock
                with self._lock:
                    if self._key_locks.get(key) is key_lock:
                        del self._key_locks[key]


class ChatBackend:
    def __init__(self, config: LlmBackendConfig):
        self.config = config
        self.calls = 0
        self.tokens = 0
        self._lock = threading.Lock()

    @property
    def tag(self) -> str:
        c = self.config
        return f"{c.kind}:{c.model_name}:{c.temperature}"

    def complete(self, request: ChatRequest) -> str:
        reply = self._complete(request)
        with self._lock:
            self.calls += 1
            self.tokens += estimate_tokens(request.text) + estimate_tokens(reply)
        return reply

    def _complete(self, request: ChatRequest) -> str:
        raise NotImplementedError


class HttpChatBackend(ChatBackend):
    """Any chat-completions compatible endpoint, through the openai client"""

    def __init__(self, config: LlmBackendConfig):
        super().__init__(config)
        if not (api_key := os.getenv(config.api_key_env)):
            raise ConfigError(f"Environment variable {config.api_key_env} is not set")
        self.client = openai.OpenAI(
            api_key=api_key,
            base_url=config.endpoint,
            timeout=config.timeout,
            max_retries=0,
        )

    def _complete(self, request: ChatRequest) -> str:
        response = call_with_backoff(
            self.client.chat.completions.create,
            model=self.config.model_name,
            messages=list(request.messages),
            temperature=self.config.temperature,
            max_retries=self.config.max_retries,
            what="chat completion",
        )
        if (content := response.choices[0].message.content) is None:
            raise BackendError("chat completion returned no content")
        return content


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


def mock_description(factor: str, reviews: tuple[str, ...] | list[str], top_k: int) -> str:
    """Top-k content words of the review sentences that mention `factor`.

    Example::
        >>> mock_description("flavor", ["The flavor was spicy. Great place!"], 1)
        'flavor: spicy'
        >>> mock_description("price", ["The flavor was spicy."], 1)
        'unknown'
    """
    name = _words(factor)
    phrase = " " + " ".join(name) + " "
    counts: Counter[str] = Counter()
    for text in reviews:
        for sentence in re.split(r"[.!?;\n]+", text):
            words = _words(sentence)
            if phrase in " " + " ".join(words) + " ":
                counts.update(w for w in words if w not in STOP_WORDS and w not in name)
    if not counts:
        return UNKNOWN
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return f"{factor}: " + " ".join(w for w, _ in top)


class MockChatBackend(ChatBackend):
    """Deterministic offline stand-in answering in the JSON contract"""

    @property
    def tag(self) -> str:
        return f"{self.config.kind}:top{self.config.mock_top_k}"

    def _complete(self, request: ChatRequest) -> str:
        k = self.config.mock_top_k
        answer = {f: mock_description(f, request.reviews, k) for f in request.factor_names}
        return json.dumps(answer)


def make_backend(config: LlmBackendConfig) -> ChatBackend:
    if config.kind == BackendKind.http_chat:
        return HttpChatBackend(config)
    return MockChatBackend(config)
