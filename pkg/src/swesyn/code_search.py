"""AST-backed index over a snapshot plus the localization search APIs."""

from __future__ import annotations

import textwrap
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

from . import pyast
from .repo_model import RepoSnapshot, compress_file

SEARCH_APIS: dict[str, int] = {
    "search_class": 1,
    "search_method_in_class": 2,
    "search_func": 1,
    "search_code": 1,
    "search_file_skeleton": 1,
}

DEFAULT_CONTEXT_BUDGET = 200
DEFAULT_CODE_CONTEXT = 10


class SearchError(Exception):
    pass


class MalformedQuery(SearchError):
    pass


class UnknownFile(SearchError):
    pass


@dataclass(frozen=True)
class EntityRecord:
    kind: str
    qualname: str
    file: str
    start: int
    end: int
    signature: str
    parent: str | None = None

    @property
    def name(self) -> str:
        return self.qualname.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class SearchQuery:
    api: str
    arguments: tuple[str, ...]

    def __post_init__(self):
        if self.api not in SEARCH_APIS:
            raise MalformedQuery(f"unknown search api {self.api!r}")
        want = SEARCH_APIS[self.api]
        if len(self.arguments) != want or not all(isinstance(a, str) for a in self.arguments):
            raise MalformedQuery(f"{self.api} takes {want} string argument(s), got {list(self.arguments)!r}")

    @classmethod
    def of(cls, api: str, *args: str) -> "SearchQuery":
        return cls(api, tuple(args))


@dataclass(frozen=True)
class SearchResult:
    file: str
    entity: str | None
    span: tuple[int, int]
    snippet: str
    truncated: bool = False


@dataclass(frozen=True)
class CodeIndex:
    snapshot: RepoSnapshot = field(repr=False)
    entities: Mapping[str, tuple[EntityRecord, ...]]
    line_index: Mapping[str, tuple[int, ...]] = field(repr=False)
    degraded: frozenset[str] = frozenset()

    def all_entities(self) -> list[EntityRecord]:
        out = [rec for recs in self.entities.values() for rec in recs]
        out.sort(key=lambda r: (r.file, r.start, r.qualname))
        return out

    def in_file(self, path: str) -> list[EntityRecord]:
        return [r for r in self.all_entities() if r.file == path]

    def lines(self, path: str) -> list[str]:
        return self.snapshot.text(path).splitlines(keepends=True)


def _line_offsets(text: str) -> tuple[int, ...]:
    offsets = [0]
    for i, ch in enumerate(text):
        if ch == "\n":
            offsets.append(i + 1)
    return tuple(offsets)


def build_index(snapshot: RepoSnapshot) -> CodeIndex:
    by_name: dict[str, list[EntityRecord]] = defaultdict(list)
    offsets: dict[str, tuple[int, ...]] = {}
    degraded = set()
    for path in snapshot.source_paths():
        text = snapshot.text(path)
        offsets[path] = _line_offsets(text)
        if snapshot.files[path].language != "python":
            degraded.add(path)
            continue
        try:
            tree = pyast.parse(text)
        except (SyntaxError, ValueError):
            degraded.add(path)
            continue
        lines = text.splitlines(keepends=True)
        for ent in pyast.walk_entities(tree, lines):
            if ent.kind == "global":
                continue
            signature = "".join(lines[ent.sig_start - 1:ent.sig_end]).rstrip()
            rec = EntityRecord(ent.kind, ent.qualname, path, ent.start, ent.end, signature, ent.parent)
            by_name[rec.name].append(rec)
    frozen = {k: tuple(sorted(v, key=lambda r: (r.file, r.start))) for k, v in sorted(by_name.items())}
    return CodeIndex(snapshot, MappingProxyType(frozen), MappingProxyType(offsets), frozenset(degraded))


def _slice(index: CodeIndex, path: str, start: int, end: int) -> str:
    return "".join(index.lines(path)[start - 1:end])


def _entity_result(index: CodeIndex, rec: EntityRecord, budget: int) -> SearchResult:
    span = (rec.start, rec.end)
    if rec.end - rec.start + 1 <= budget:
        return SearchResult(rec.file, rec.qualname, span, _slice(index, rec.file, *span))
    # oversized: compressed view of the entity instead of its full body
    text = _slice(index, rec.file, *span)
    indent = len(text) - len(text.lstrip(" "))
    skeleton = compress_file(textwrap.dedent(text)).text
    skeleton = textwrap.indent(skeleton, " " * indent)
    lines = skeleton.splitlines(keepends=True)
    if len(lines) > budget:
        skeleton = "".join(lines[:budget])
    return SearchResult(rec.file, rec.qualname, span, skeleton, truncated=True)


def search(index: CodeIndex, query: SearchQuery, context_budget: int = DEFAULT_CONTEXT_BUDGET,
           code_context: int = DEFAULT_CODE_CONTEXT) -> list[SearchResult]:
    api, args = query.api, query.arguments
    if api == "search_class":
        recs = [r for r in index.entities.get(args[0], ()) if r.kind == "class"]
        results = [_entity_result(index, r, context_budget) for r in recs]
    elif api == "search_method_in_class":
        cls, meth = args
        recs = [r for r in index.entities.get(meth, ())
                if r.kind == "method" and r.parent is not None
                and r.parent.rsplit(".", 1)[-1] == cls]
        results = [_entity_result(index, r, context_budget) for r in recs]
    elif api == "search_func":
        recs = [r for r in index.entities.get(args[0], ()) if r.kind in ("function", "method")]
        results = [_entity_result(index, r, context_budget) for r in recs]
    elif api == "search_code":
        results = _search_code(index, args[0], code_context)
    else:
        path = args[0]
        if path not in index.snapshot.files:
            raise UnknownFile(path)
        rec = index.snapshot.files[path]
        text = index.snapshot.text(path)
        sk = compress_file(text, rec.language or "", path=path)
        n = len(index.lines(path))
        results = [SearchResult(path, None, (1, max(n, 1)), sk.text, truncated=True)]
    results.sort(key=lambda r: (r.file, r.span[0], r.entity or ""))
    return results


def _search_code(index: CodeIndex, needle: str, context: int) -> list[SearchResult]:
    if not needle:
        return []
    out = []
    for path in index.snapshot.source_paths():
        lines = index.lines(path)
        for i, line in enumerate(lines, start=1):
            pos = line.find(needle)
            while pos != -1:
                lo, hi = max(1, i - context), min(len(lines), i + context)
                out.append(SearchResult(path, None, (lo, hi), "".join(lines[lo - 1:hi])))
                pos = line.find(needle, pos + len(needle))
    return out


def format_results(query: SearchQuery, results: Sequence[SearchResult]) -> str:
    """Observation text for one executed query."""
    call = f"{query.api}({', '.join(repr(a) for a in query.arguments)})"
    if not results:
        return f"Result of {call}: no matches found.\n"
    parts = [f"Result of {call}: {len(results)} match(es).\n"]
    for i, res in enumerate(results, start=1):
        label = f"{res.file}:{res.span[0]}-{res.span[1]}"
        if res.entity:
            label += f" ({res.entity})"
        if res.truncated:
            label += " [compressed]"
        body = res.snippet if res.snippet.endswith("\n") else res.snippet + "\n"
        parts.append(f"<match {i}> {label}\n{body}</match {i}>\n")
    return "".join(parts)
