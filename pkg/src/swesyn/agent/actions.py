"""Lenient extraction of the action object from model output."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Iterable

from ..code_search import SEARCH_APIS

TERMINAL_ACTIONS = ("select_files", "select_entities", "plan", "locations", "edit")

NO_OBJECT_FOUND = "NoObjectFound"
SCHEMA_VIOLATION = "SchemaViolation"
UNTERMINATED_FENCE = "UnterminatedFence"

_FENCE_RE = re.compile(r"```[^\n`]*\n?(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class Action:
    name: str
    payload: Any  # list of args for search apis, content for others
    is_search: bool = False

    def to_dict(self) -> dict:
        if self.is_search:
            return {"api": self.name, "args": list(self.payload)}
        return {"action": self.name, "content": self.payload}


@dataclass(frozen=True)
class ParseDiagnostic:
    kind: str
    detail: str
    field: str | None = None

    def __str__(self) -> str:
        where = f" ({self.field})" if self.field else ""
        return f"{self.kind}{where}: {self.detail}"


@dataclass(frozen=True)
class ParsedReply:
    action: Action | None
    diagnostic: ParseDiagnostic | None
    cot: str


def _objects_in(text: str) -> Iterable[tuple[dict, int, int]]:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, end = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            yield obj, pos, end
            pos = text.find("{", end)
        else:
            pos = text.find("{", pos + 1)


def _find_object(text: str) -> tuple[dict | None, tuple[int, int] | None, bool]:
    """First JSON object, preferring fenced blocks. Returns (obj, span to cut, unterminated)."""
    for m in _FENCE_RE.finditer(text):
        for obj, _, _ in _objects_in(m.group(1)):
            return obj, (m.start(), m.end()), False
    unterminated = text.count("```") % 2 == 1
    for obj, start, end in _objects_in(text):
        return obj, (start, end), False
    return None, None, unterminated


def _is_str_list(value) -> bool:
    return isinstance(value, list) and all(isinstance(v, str) for v in value)


def _opt_str(entry: dict, key: str) -> bool:
    return entry.get(key) is None or isinstance(entry.get(key), str)


def validate(obj: dict) -> Action | ParseDiagnostic:
    if "api" in obj:
        api = obj["api"]
        if api not in SEARCH_APIS:
            return ParseDiagnostic(SCHEMA_VIOLATION, f"unknown search api {api!r}", "api")
        args = obj.get("args", obj.get("arguments"))
        if isinstance(args, str):
            args = [args]
        if not _is_str_list(args) or len(args) != SEARCH_APIS[api]:
            return ParseDiagnostic(SCHEMA_VIOLATION,
                                   f"{api} takes {SEARCH_APIS[api]} string argument(s)", "args")
        return Action(api, tuple(args), is_search=True)

    name = obj.get("action")
    if name not in TERMINAL_ACTIONS:
        return ParseDiagnostic(SCHEMA_VIOLATION, f"unknown action {name!r}", "action")
    if "content" not in obj:
        return ParseDiagnostic(SCHEMA_VIOLATION, "missing content", "content")
    content = obj["content"]
    if name == "select_files":
        if not _is_str_list(content):
            return ParseDiagnostic(SCHEMA_VIOLATION, "content must be a list of paths", "content")
    elif name == "plan":
        if not isinstance(content, str) or not content.strip():
            return ParseDiagnostic(SCHEMA_VIOLATION, "content must be non-empty text", "content")
    elif name in ("select_entities", "locations"):
        if not isinstance(content, list) or not all(isinstance(e, dict) for e in content):
            return ParseDiagnostic(SCHEMA_VIOLATION, "content must be a list of objects", "content")
        for entry in content:
            if not isinstance(entry.get("file"), str):
                return ParseDiagnostic(SCHEMA_VIOLATION, "every entry needs a file", "content.file")
            if not (_opt_str(entry, "class") and _opt_str(entry, "function")):
                return ParseDiagnostic(SCHEMA_VIOLATION, "class/function must be strings or null",
                                       "content.class")
            if ("start" in entry or "end" in entry) and not (
                    isinstance(entry.get("start"), int) and isinstance(entry.get("end"), int)
                    and entry["start"] <= entry["end"]):
                return ParseDiagnostic(SCHEMA_VIOLATION, "start/end must be ordered integers",
                                       "content.start")
    elif name == "edit":
        if isinstance(content, dict):
            content = [content]
        if not isinstance(content, list) or not content:
            return ParseDiagnostic(SCHEMA_VIOLATION, "content must be a non-empty list of edits", "content")
        for entry in content:
            if not isinstance(entry, dict) or not all(
                    isinstance(entry.get(k), str) for k in ("file", "original", "replacement")):
                return ParseDiagnostic(SCHEMA_VIOLATION,
                                       "each edit needs string file, original and replacement",
                                       "content")
    return Action(name, content)


def parse_model_action(text: str, expected: Iterable[str] | None = None) -> Action | ParseDiagnostic:
    """First action object in ``text``, tolerating code fences and surrounding prose."""
    reply = parse_reply(text, expected)
    return reply.action or reply.diagnostic


def parse_reply(text: str, expected: Iterable[str] | None = None) -> ParsedReply:
    obj, span, unterminated = _find_object(text)
    if obj is None:
        kind = UNTERMINATED_FENCE if unterminated else NO_OBJECT_FOUND
        detail = ("a code fence is opened but never closed" if unterminated
                  else "no JSON action object found in the reply")
        return ParsedReply(None, ParseDiagnostic(kind, detail), text.strip())
    cot = (text[:span[0]] + text[span[1]:]).strip()
    result = validate(obj)
    if isinstance(result, ParseDiagnostic):
        return ParsedReply(None, result, cot)
    if expected is not None:
        allowed = set(expected)
        if result.name not in allowed:
            return ParsedReply(None, ParseDiagnostic(
                SCHEMA_VIOLATION, f"{result.name!r} is not allowed here; expected one of "
                + ", ".join(sorted(allowed)), "action"), cot)
    return ParsedReply(result, None, cot)
