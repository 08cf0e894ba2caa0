"""Model backends: an HTTP chat-completions client and a scripted replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import requests

log = logging.getLogger(__name__)

HTTP_CHAT = "http_chat"
SCRIPTED_REPLAY = "scripted_replay"


class BackendError(Exception):
    """Fatal for a trajectory; ``partial`` is set to the trajectory so far by the agent."""

    partial = None


class BackendUnavailable(BackendError):
    pass


class TransportError(BackendUnavailable):
    pass


class ReplayExhausted(BackendError):
    pass


class ReplayDigestMismatch(BackendError):
    pass


@dataclass(frozen=True)
class CallKey:
    instance_id: str | None
    stage: str
    step_index: int


Message = Mapping[str, str]


def prompt_digest(messages: Sequence[Message]) -> str:
    blob = json.dumps([{"role": m["role"], "content": m["content"]} for m in messages],
                      ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class ModelBackend(Protocol):
    kind: str

    def complete(self, messages: Sequence[Message], temperature: float, max_tokens: int,
                 key: CallKey | None = None) -> str: ...


def complete(backend: ModelBackend, messages: Sequence[Message], temperature: float,
             max_tokens: int, key: CallKey | None = None) -> str:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].get("role") != "system":
        raise ValueError("the first message must have the system role")
    return backend.complete(messages, temperature, max_tokens, key)


# -- scripted replay ---------------------------------------------------------------

@dataclass(frozen=True)
class ScriptEntry:
    stage: str
    step_index: int
    response: str
    instance_id: str | None = None
    prompt_digest: str | None = None


class ScriptedReplayBackend:
    """Replays recorded responses keyed by (instance, stage, step index).

    Entries without an instance id serve every instance. Lookups are pure, so
    one backend can be shared by concurrent tasks.
    """

    kind = SCRIPTED_REPLAY

    def __init__(self, entries: Iterable[ScriptEntry | Mapping]):
        self._table: dict[tuple[str | None, str, int], ScriptEntry] = {}
        for e in entries:
            if not isinstance(e, ScriptEntry):
                e = ScriptEntry(e["stage"], int(e["step_index"]), e["response"],
                                e.get("instance_id"), e.get("prompt_digest"))
            self._table[(e.instance_id, e.stage, e.step_index)] = e
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedReplayBackend":
        text = Path(path).read_text(encoding="utf-8")
        stripped = text.lstrip()
        if stripped.startswith("["):
            entries = json.loads(text)
        elif stripped.startswith("{") and '"entries"' in stripped[:200]:
            entries = json.loads(text)["entries"]
        else:
            entries = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(entries)

    def complete(self, messages, temperature, max_tokens, key=None) -> str:
        if key is None:
            raise ReplayExhausted("scripted replay needs a (stage, step_index) key")
        entry = (self._table.get((key.instance_id, key.stage, key.step_index))
                 or self._table.get((None, key.stage, key.step_index)))
        if entry is None:
            raise ReplayExhausted(f"no scripted response for {key.instance_id}/{key.stage}/{key.step_index}")
        if entry.prompt_digest is not None:
            actual = prompt_digest(messages)
            if actual != entry.prompt_digest:
                raise ReplayDigestMismatch(
                    f"{key.stage}/{key.step_index}: prompt digest {actual} != recorded {entry.prompt_digest}")
        with self._lock:
            self.calls += 1
        return entry.response


class RecordingBackend:
    """Wraps a backend and records every exchange as replay entries (with digests)."""

    def __init__(self, inner: ModelBackend):
        self.inner = inner
        self.kind = inner.kind
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def complete(self, messages, temperature, max_tokens, key=None) -> str:
        text = self.inner.complete(messages, temperature, max_tokens, key)
        if key is not None:
            with self._lock:
                self.entries.append({"instance_id": key.instance_id, "stage": key.stage,
                                     "step_index": key.step_index,
                                     "prompt_digest": prompt_digest(messages), "response": text})
        return text

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, ensure_ascii=False) + "\n")


# -- http chat -----------------------------------------------------------------------

class HttpChatBackend:
    """Chat-completions client with exponential backoff on 5xx, 429 and connection errors."""

    kind = HTTP_CHAT

    def __init__(self, endpoint: str, model: str = "default", api_key: str | None = None,
                 max_retries: int = 4, backoff: float = 1.0, timeout: float = 120.0,
                 session: requests.Session | None = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("SWESYN_API_KEY")
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self._lock = threading.Lock()
        self.retry_count = 0
        self.calls = 0

    def _post(self, payload: dict) -> requests.Response:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)

    def complete(self, messages, temperature, max_tokens, key=None) -> str:
        payload = {"model": self.model, "messages": [dict(m) for m in messages],
                   "temperature": temperature, "max_tokens": max_tokens}
        attempt = 0
        while True:
            problem = None
            try:
                resp = self._post(payload)
            except (requests.ConnectionError, requests.Timeout) as exc:
                problem = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    problem = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    with self._lock:
                        self.calls += 1
                    return self._content(resp)
            if attempt >= self.max_retries:
                raise TransportError(f"giving up after {attempt} retries: {problem}")
            attempt += 1
            with self._lock:
                self.retry_count += 1
            delay = self.backoff * 2 ** (attempt - 1)
            log.warning("chat backend %s (%s); retry %d/%d in %.2fs",
                        self.endpoint, problem, attempt, self.max_retries, delay)
            if delay:
                time.sleep(delay)

    @staticmethod
    def _content(resp: requests.Response) -> str:
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {resp.text[:200]}") from exc
        if not isinstance(content, str):
            raise TransportError("assistant content is not text")
        return content
