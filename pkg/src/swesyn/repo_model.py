"""Repository snapshots, directory-tree rendering and source skeletons."""

from __future__ import annotations

import ast
import fnmatch
import hashlib
import json
import logging
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from types import MappingProxyType
from typing import Iterable, Mapping

from . import pyast

log = logging.getLogger(__name__)

DEFAULT_IGNORE_RULES: tuple[str, ...] = (
    ".git/", ".hg/", ".svn/", "__pycache__/", ".tox/", ".nox/", ".venv/",
    ".mypy_cache/", ".pytest_cache/", "node_modules/", "build/", "dist/", "*.egg-info/",
    "*.pyc", "*.pyo", "*.so", "*.dll", "*.dylib", "*.o", "*.a", "*.exe", "*.bin",
    "*.png", "*.jpg", "*.jpeg", "*.gif", "*.ico", "*.pdf", "*.zip", "*.gz", "*.tar",
    "*.whl", "*.jar", "*.class",
)

# extension -> language tag; only these count as source
SOURCE_EXTENSIONS: dict[str, str] = {".py": "python", ".pyi": "python"}

# language -> line-comment prefix used for markers
COMMENT_PREFIX: dict[str, str] = {
    "python": "#", "javascript": "//", "typescript": "//", "java": "//", "go": "//",
    "rust": "//", "c": "//", "cpp": "//", "ruby": "#", "shell": "#",
}

ELIDED_COMMENT = "… body elided …"
TRUNCATED_COMMENT = "… truncated …"
FALLBACK_HEAD_LINES = 50


class RepoError(Exception):
    pass


class MissingRoot(RepoError):
    pass


class UnknownRevision(RepoError):
    pass


@dataclass(frozen=True)
class FileRecord:
    size: int
    is_source: bool
    language: str | None
    digest: str


@dataclass(frozen=True)
class RepoSnapshot:
    root_path: Path
    commit_ref: str | None
    files: Mapping[str, FileRecord]
    ignore_rules: tuple[str, ...]
    contents: Mapping[str, str] = field(repr=False, compare=False)
    # (path, reason) for files skipped while crawling
    unreadable: tuple[tuple[str, str], ...] = ()
    name: str = ""

    def text(self, path: str) -> str:
        try:
            return self.contents[path]
        except KeyError:
            raise FileNotFoundError(path) from None

    def __contains__(self, path: object) -> bool:
        return path in self.files

    def source_paths(self) -> list[str]:
        return [p for p, rec in self.files.items() if rec.is_source]

    @property
    def display_name(self) -> str:
        return self.name or self.root_path.name or "repo"


def is_ignored(path: str, rules: Iterable[str]) -> bool:
    parts = PurePosixPath(path).parts
    for rule in rules:
        if rule.endswith("/"):
            pattern = rule[:-1]
            if any(fnmatch.fnmatchcase(seg, pattern) for seg in parts[:-1]):
                return True
        elif "/" in rule:
            if fnmatch.fnmatchcase(path, rule):
                return True
        elif fnmatch.fnmatchcase(parts[-1], rule):
            return True
    return False


def language_of(path: str, table: Mapping[str, str] = SOURCE_EXTENSIONS) -> str | None:
    return table.get(PurePosixPath(path).suffix.lower())


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read_worktree(root: Path, rules: tuple[str, ...]) -> tuple[dict[str, bytes], list[tuple[str, str]]]:
    blobs: dict[str, bytes] = {}
    bad: list[tuple[str, str]] = []
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = Path(dirpath).relative_to(root).as_posix()
        rel_dir = "" if rel_dir == "." else rel_dir + "/"
        # prune ignored directories early
        dirnames[:] = sorted(d for d in dirnames if not is_ignored(f"{rel_dir}{d}/x", rules))
        for fname in filenames:
            rel = rel_dir + fname
            if is_ignored(rel, rules):
                continue
            full = Path(dirpath, fname)
            if full.is_symlink() or not full.is_file():
                continue
            try:
                blobs[rel] = full.read_bytes()
            except OSError as exc:
                bad.append((rel, str(exc)))
    return blobs, bad


def _git(root: Path, *args: str, input: bytes | None = None) -> bytes:
    proc = subprocess.run(["git", "-C", str(root), *args], input=input,
                          capture_output=True, check=False)
    if proc.returncode != 0:
        raise subprocess.CalledProcessError(proc.returncode, args, proc.stdout, proc.stderr)
    return proc.stdout


def _read_revision(root: Path, commit_ref: str, rules: tuple[str, ...]) -> dict[str, bytes]:
    try:
        _git(root, "rev-parse", "--verify", "--quiet", f"{commit_ref}^{{commit}}")
    except (subprocess.CalledProcessError, FileNotFoundError) as exc:
        raise UnknownRevision(f"{commit_ref!r} not found in {root}") from exc
    listing = _git(root, "ls-tree", "-r", "-z", "--full-tree", commit_ref)
    wanted: list[tuple[str, str]] = []
    for entry in listing.split(b"\0"):
        if not entry:
            continue
        meta, path = entry.split(b"\t", 1)
        _mode, otype, sha = meta.split()
        rel = path.decode("utf-8", "surrogateescape")
        if otype == b"blob" and not is_ignored(rel, rules):
            wanted.append((rel, sha.decode()))
    if not wanted:
        return {}
    out = _git(root, "cat-file", "--batch", input="".join(f"{sha}\n" for _, sha in wanted).encode())
    blobs: dict[str, bytes] = {}
    pos = 0
    for rel, _sha in wanted:
        nl = out.index(b"\n", pos)
        size = int(out[pos:nl].split()[2])
        blobs[rel] = out[nl + 1:nl + 1 + size]
        pos = nl + 1 + size + 1
    return blobs


def build_snapshot(root: str | os.PathLike, commit_ref: str | None = None,
                   ignore_rules: Iterable[str] | None = None, *,
                   source_extensions: Mapping[str, str] = SOURCE_EXTENSIONS,
                   name: str = "") -> RepoSnapshot:
    """Crawl ``root`` (or ``commit_ref`` inside it) into an immutable snapshot.

    Files that cannot be read or decoded as UTF-8 are skipped and listed in
    ``unreadable`` instead of aborting the crawl.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingRoot(f"repository root does not exist: {root}")
    rules = tuple(DEFAULT_IGNORE_RULES if ignore_rules is None else ignore_rules)
    if commit_ref:
        blobs, bad = _read_revision(root, commit_ref, rules), []
    else:
        blobs, bad = _read_worktree(root, rules)

    files: dict[str, FileRecord] = {}
    contents: dict[str, str] = {}
    for rel in sorted(blobs):
        data = blobs[rel]
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            bad.append((rel, "not valid UTF-8"))
            continue
        lang = language_of(rel, source_extensions)
        files[rel] = FileRecord(len(data), lang is not None, lang, _digest(data))
        contents[rel] = text
    for rel, reason in bad:
        log.warning("skipping unreadable file %s: %s", rel, reason)
    return RepoSnapshot(root, commit_ref, MappingProxyType(files), rules,
                        MappingProxyType(contents), tuple(sorted(bad)), name)


def snapshot_from_files(files: Mapping[str, str], name: str = "repo",
                        root: str | os.PathLike = ".") -> RepoSnapshot:
    """In-memory snapshot, mostly for tests and scratch use."""
    records = {}
    for rel in sorted(files):
        data = files[rel].encode()
        lang = language_of(rel)
        records[rel] = FileRecord(len(data), lang is not None, lang, _digest(data))
    return RepoSnapshot(Path(root), None, MappingProxyType(records), DEFAULT_IGNORE_RULES,
                        MappingProxyType({k: files[k] for k in sorted(files)}), (), name)


# -- manifest ---------------------------------------------------------------

def write_manifest(snapshot: RepoSnapshot, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rel, rec in snapshot.files.items():
            fh.write(json.dumps({"path": rel, "size": rec.size,
                                 "language": rec.language, "hash": rec.digest}) + "\n")


def read_manifest(path: str | os.PathLike) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["path"]] = row
    return out


def changed_files(snapshot: RepoSnapshot, manifest: Mapping[str, dict]) -> list[str]:
    """Paths whose content digest differs from (or is absent in) a cached manifest."""
    return [rel for rel, rec in snapshot.files.items()
            if manifest.get(rel, {}).get("hash") != rec.digest]


# -- tree rendering -----------------------------------------------------------

@dataclass(frozen=True)
class DirectoryTreeText:
    text: str
    file_count: int
    depth: int
    truncated: bool = False


def render_tree(snapshot: RepoSnapshot, source_only: bool = False,
                max_entries: int | None = None) -> DirectoryTreeText:
    """Indented tree: dirs before files, lexicographic, 2 spaces per level."""
    tree: dict = {}
    for rel, rec in snapshot.files.items():
        if source_only and not rec.is_source:
            continue
        node = tree
        *dirs, leaf = rel.split("/")
        for d in dirs:
            node = node.setdefault(d + "/", {})
        node[leaf] = None

    lines = [snapshot.display_name + "/"]
    counts = {"files": 0, "depth": 0}

    def emit(node: dict, depth: int) -> None:
        dirs = sorted(k for k, v in node.items() if v is not None)
        leaves = sorted(k for k, v in node.items() if v is None)
        for d in dirs:
            lines.append("  " * depth + d)
            counts["depth"] = max(counts["depth"], depth)
            emit(node[d], depth + 1)
        for f in leaves:
            lines.append("  " * depth + f)
            counts["files"] += 1
            counts["depth"] = max(counts["depth"], depth)

    emit(tree, 1)
    truncated = False
    if max_entries is not None and len(lines) - 1 > max_entries:
        hidden = len(lines) - 1 - max_entries
        lines = lines[:max_entries + 1] + [f"  ... ({hidden} more entries)"]
        truncated = True
    return DirectoryTreeText("\n".join(lines) + "\n", counts["files"], counts["depth"], truncated)


# -- code compressor ----------------------------------------------------------

@dataclass(frozen=True)
class FileSkeleton:
    path: str
    text: str
    kept_entities: tuple[tuple[str, str, tuple[int, int]], ...]
    elided_spans: tuple[tuple[int, int], ...]
    degraded: bool = False


def marker_line(language: str = "python") -> str:
    prefix = COMMENT_PREFIX.get(language, "#")
    if language == "python":
        # the Ellipsis statement keeps the skeleton parseable
        return f"...  {prefix} {ELIDED_COMMENT}"
    return f"{prefix} {ELIDED_COMMENT}"


def _fallback(path: str, source: str, language: str, head_lines: int) -> FileSkeleton:
    lines = source.splitlines(keepends=True)
    if len(lines) <= head_lines:
        return FileSkeleton(path, source, (), (), degraded=True)
    marker = f"{COMMENT_PREFIX.get(language, '#')} {TRUNCATED_COMMENT}\n"
    head = "".join(lines[:head_lines])
    if not head.endswith("\n"):
        head += "\n"
    return FileSkeleton(path, head + marker, (), ((head_lines + 1, len(lines)),), degraded=True)


def _is_blank_or_comment(line: str) -> bool:
    s = line.strip()
    return not s or s.startswith("#")


def _lift(lines: list[str], node: ast.stmt, indent: str, head_lines: int) -> str:
    """Skeleton of a def nested in a compound statement, re-indented to ``indent``."""
    first = min([d.lineno for d in node.decorator_list] + [node.lineno])
    raw = lines[first - 1]
    old = raw[:len(raw) - len(raw.lstrip())]
    segment = "".join(lines[first - 1:node.end_lineno])
    if not segment.endswith("\n"):
        segment += "\n"
    text = compress_file("if True:\n" + segment, "python", head_lines=head_lines).text
    body = text.splitlines(keepends=True)[1:]
    return "".join(indent + l[len(old):] if l.startswith(old) else l for l in body)


def compress_file(source: str, language: str = "python", path: str = "",
                  head_lines: int = FALLBACK_HEAD_LINES) -> FileSkeleton:
    """Keep signatures, class headers, docstrings, comments and globals; elide function bodies.

    Each contiguous run of body statements becomes one marker line. Nested
    ``def``/``class`` statements inside a body survive with their own bodies
    elided; ones sitting inside an ``if``/``for``/``try`` are lifted out to
    body level right after the marker that replaces their host statement.
    """
    if language != "python":
        return _fallback(path, source, language, head_lines)
    try:
        tree = pyast.parse(source)
    except (SyntaxError, ValueError):
        return _fallback(path, source, language, head_lines)

    lines = source.splitlines(keepends=True)
    entities = pyast.walk_entities(tree, lines)
    full_marker = marker_line(language)

    # (start_line, start_col or None, end_line, indent, lifted defs)
    cuts: list[tuple[int, int | None, int, str, str]] = []
    for ent in entities:
        if ent.kind not in ("function", "method"):
            continue
        node = ent.node
        colon_line, _ = pyast.header_end(lines, node)
        body = list(node.body)
        kept_end = colon_line
        doc = pyast.docstring_node(node)
        if doc is not None:
            body = body[1:]
            kept_end = doc.end_lineno
        runs: list[list] = []
        for stmt in body:
            if isinstance(stmt, pyast.DEF_NODES):
                runs.append([])
            else:
                if not runs or not runs[-1]:
                    runs.append([])
                runs[-1].append(stmt)
        for run in runs:
            if not run:
                continue
            first, last = run[0], run[-1]
            if first.lineno <= kept_end:
                # statement shares a line with the header or docstring
                indent = " " * (node.col_offset + 4)
                cut = (first.lineno, first.col_offset, last.end_lineno, indent)
            else:
                start = first.lineno
                while start - 1 > kept_end and _is_blank_or_comment(lines[start - 2]):
                    start -= 1
                raw = lines[first.lineno - 1]
                indent = raw[:len(raw) - len(raw.lstrip())]
                cut = (start, None, last.end_lineno, indent)
            lifted = "".join(_lift(lines, d, indent, head_lines)
                             for stmt in run for d in pyast.defs_within(stmt))
            cuts.append((*cut, lifted))
            kept_end = last.end_lineno

    # defs lifted out of a compound statement are compressed with their host cut
    cuts.sort()
    outer: list[tuple[int, int | None, int, str, str]] = []
    for cut in cuts:
        if outer and cut[0] <= outer[-1][2]:
            continue
        outer.append(cut)

    out: list[str] = []
    spans: list[tuple[int, int]] = []
    line_no = 1
    for start, col, end, indent, lifted in outer:
        out.extend(lines[line_no - 1:start - 1])
        removed = "".join(lines[start - 1:end])
        head = ""
        if col is not None:
            head = lines[start - 1][:col].rstrip()
            removed = removed[len(head):]
        sep = "\n" if col is not None else ""
        # shorter markers so the skeleton never grows
        budget = len(removed) - len(lifted)
        options = [sep + indent + full_marker + "\n", sep + indent + "...\n"]
        if col is not None:
            options.append(" ...\n")
        marker = next((m for m in options if len(m) <= budget), options[-1])
        out.append(head + marker + lifted)
        spans.append((start, end))
        line_no = end + 1
    out.extend(lines[line_no - 1:])

    kept = tuple((e.kind, e.qualname, (e.sig_start, e.sig_end)) for e in entities)
    return FileSkeleton(path, "".join(out), kept, tuple(spans))
