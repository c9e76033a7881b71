"""Chat-completion clients: a remote HTTP client and a scripted mock.

Both enforce the prompt token budget before anything is sent.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from reges._io import iter_lines

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
DEFAULT_TEMPERATURE = 0.1
TOKEN_BUDGET = 4096
CHAT_TOKEN_ENV = "REGES_CHAT_TOKEN"

# completion caps per call type
MAX_TOKENS_QUERY = 256
MAX_TOKENS_ITEM = 64
MAX_TOKENS_COT = 512


class ChatError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, fingerprint: str | None = None):
        super().__init__(message)
        self.status = status
        self.fingerprint = fingerprint


class PromptTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ChatPrompt:
    messages: tuple[tuple[str, str], ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = MAX_TOKENS_QUERY

    def __post_init__(self):
        if not self.messages:
            raise ValueError("prompt has no messages")
        for role, _ in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if self.messages[-1][0] != "user":
            raise ValueError("last message must have role 'user'")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")

    @classmethod
    def user(cls, content: str, **kwargs) -> "ChatPrompt":
        return cls((("user", content),), **kwargs)

    @property
    def text(self) -> str:
        return "\n".join(content for _, content in self.messages)

    def to_wire(self) -> list[dict]:
        return [{"role": r, "content": c} for r, c in self.messages]


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    latency_ms: int = 0


def fingerprint(prompt: ChatPrompt | Sequence[tuple[str, str]]) -> str:
    """64-bit hex digest of the concatenated ``role:content`` pairs."""
    messages = prompt.messages if isinstance(prompt, ChatPrompt) else prompt
    h = hashlib.blake2b(digest_size=8)
    for role, content in messages:
        h.update(f"{role}:{content}\n".encode("utf-8"))
    return h.hexdigest()


def count_tokens_approx(text: str, tokenizer: Callable[[str], int] | None = None) -> int:
    """``ceil(utf8_bytes / 4)`` unless an exact tokenizer is supplied."""
    if tokenizer is not None:
        return int(tokenizer(text))
    return math.ceil(len(text.encode("utf-8")) / 4)


def prompt_tokens(prompt: ChatPrompt, tokenizer=None) -> int:
    return sum(count_tokens_approx(c, tokenizer) for _, c in prompt.messages)


@dataclass
class EndpointConfig:
    kind: str = "mock"
    url: str | None = None
    model: str = "mock"
    script: str | None = None
    on_miss: str = "fail"
    max_in_flight: int = 4
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    token_budget: int = TOKEN_BUDGET

    def __post_init__(self):
        if self.kind not in ("remote", "mock"):
            raise ValueError(f"endpoint kind must be 'remote' or 'mock', got {self.kind!r}")
        if self.kind == "remote" and not self.url:
            raise ValueError("remote endpoint requires url")
        if self.on_miss not in ("fail", "echo"):
            raise ValueError("on_miss must be 'fail' or 'echo'")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown endpoint keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class ChatClient:
    """Base class: budget check at the boundary, then ``_complete``."""

    def __init__(self, token_budget: int = TOKEN_BUDGET, tokenizer=None):
        self.token_budget = token_budget
        self.tokenizer = tokenizer

    def chat(self, prompt: ChatPrompt) -> ChatResponse:
        used = prompt_tokens(prompt, self.tokenizer)
        if used > self.token_budget:
            raise PromptTooLongError(f"prompt is {used} tokens, budget {self.token_budget}")
        return self._complete(prompt)

    def _complete(self, prompt: ChatPrompt) -> ChatResponse:
        raise NotImplementedError


@dataclass
class MockScript:
    """Canned answers looked up by prompt fingerprint.

    Lookup order: keyed entry, next unconsumed sequence entry, ``*`` fallback,
    then the miss policy (``fail`` raises, ``echo`` returns the last user
    message).
    """

    keyed: dict[str, str] = field(default_factory=dict)
    sequence: list[str] = field(default_factory=list)
    fallback: str | None = None
    on_miss: str = "fail"

    @classmethod
    def load(cls, path: str | Path, on_miss: str = "fail") -> "MockScript":
        script = cls(on_miss=on_miss)
        for lineno, text in iter_lines(path):
            rec = json.loads(text)
            fp = rec.get("fingerprint")
            content = rec["content"]
            if fp == "*":
                script.fallback = content
            elif fp:
                script.keyed[fp] = content
            else:
                script.sequence.append(content)
        return script

    def dump(self, path: str | Path) -> None:
        from reges._io import write_jsonl

        recs = [{"fingerprint": fp, "content": c} for fp, c in sorted(self.keyed.items())]
        recs += [{"fingerprint": None, "content": c} for c in self.sequence]
        if self.fallback is not None:
            recs.append({"fingerprint": "*", "content": self.fallback})
        write_jsonl(path, recs)


class MockChatClient(ChatClient):
    """Deterministic stand-in for an endpoint.

    ``responder`` (a function of the prompt) takes precedence over the script.
    Every call is logged on ``calls`` as ``(fingerprint, content)``.
    """

    def __init__(self, script: MockScript | None = None, responder=None, **kwargs):
        super().__init__(**kwargs)
        self.script = script or MockScript()
        self.responder = responder
        self.calls: list[tuple[str, str]] = []
        self._cursor = 0
        self._lock = threading.Lock()

    def _complete(self, prompt: ChatPrompt) -> ChatResponse:
        fp = fingerprint(prompt)
        if self.responder is not None:
            content = self.responder(prompt)
        else:
            content = self._lookup(fp, prompt)
        with self._lock:
            self.calls.append((fp, content))
        return ChatResponse(content, "stop", 0)

    def _lookup(self, fp: str, prompt: ChatPrompt) -> str:
        s = self.script
        if fp in s.keyed:
            return s.keyed[fp]
        with self._lock:
            if self._cursor < len(s.sequence):
                self._cursor += 1
                return s.sequence[self._cursor - 1]
        if s.fallback is not None:
            return s.fallback
        if s.on_miss == "echo":
            return prompt.messages[-1][1]
        raise ChatError(f"no scripted response for fingerprint {fp}", fingerprint=fp)


class RemoteChatClient(ChatClient):
    """Chat-completions over HTTP with bounded retries and in-flight limit."""

    def __init__(self, config: EndpointConfig, transport=None, sleep=time.sleep):
        import httpx

        super().__init__(token_budget=config.token_budget)
        self.config = config
        token = os.environ.get(CHAT_TOKEN_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._sleep = sleep

    def payload(self, prompt: ChatPrompt) -> dict:
        return {
            "model": self.config.model,
            "messages": prompt.to_wire(),
            "temperature": prompt.temperature,
            "max_tokens": prompt.max_tokens,
        }

    def _complete(self, prompt: ChatPrompt) -> ChatResponse:
        import httpx

        cfg = self.config
        body = self.payload(prompt)
        status = None
        for attempt in range(cfg.retries):
            start = time.monotonic()
            try:
                with self._slots:
                    resp = self._client.post(cfg.url, json=body)
                status = resp.status_code
                if status == 200:
                    choice = resp.json()["choices"][0]
                    content = choice["message"]["content"]
                    if content is None:
                        raise ChatError("endpoint returned no content", status)
                    reason = "length" if choice.get("finish_reason") == "length" else "stop"
                    latency = int((time.monotonic() - start) * 1000)
                    return ChatResponse(content, reason, latency)
                if status < 500 and status != 429:
                    break
                logger.warning("chat attempt %d got HTTP %d", attempt + 1, status)
            except httpx.TransportError as exc:
                logger.warning("chat attempt %d failed: %s", attempt + 1, exc)
            if attempt + 1 < cfg.retries:
                self._sleep(cfg.backoff * 2**attempt)
        raise ChatError(f"chat request failed after {cfg.retries} attempts (last status {status})", status)


def make_client(config: EndpointConfig | dict, base_dir: str | Path | None = None, transport=None) -> ChatClient:
    if isinstance(config, dict):
        config = EndpointConfig.from_dict(config)
    if config.kind == "remote":
        return RemoteChatClient(config, transport=transport)
    script = None
    if config.script:
        path = Path(config.script)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        script = MockScript.load(path, on_miss=config.on_miss)
    else:
        script = MockScript(on_miss=config.on_miss)
    return MockChatClient(script, token_budget=config.token_budget)


def chat(client: ChatClient | EndpointConfig, prompt: ChatPrompt) -> ChatResponse:
    if isinstance(client, EndpointConfig):
        client = make_client(client)
    return client.chat(prompt)
