"""Fault locations: extraction from diffs, Jaccard, granularity hits."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

from .. import pyast
from ..diffparse import CorruptDiff, parse_unified_diff
from ..repo_model import RepoSnapshot

CHUNK_RADIUS = 3
MODULE_SCOPE = "<module>"


class Level(str, Enum):
    FILE = "file"
    CLASS = "class"
    FUNCTION = "function"
    CHUNK = "chunk"


class Derivation(str, Enum):
    FROM_GOLD_PATCH = "from_gold_patch"
    FROM_PREDICTED_PATCH = "from_predicted_patch"
    FROM_AGENT_TERMINAL = "from_agent_terminal"


class UnresolvableDiff(ValueError):
    pass


class EmptyTruthAtLevel(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FaultLocation:
    file: str
    level: Level
    qualified_name: str | None = None
    window: tuple[int, int] | None = None

    def __post_init__(self):
        if self.level is Level.CHUNK and self.window is None:
            raise ValueError("chunk location needs a window")
        if self.level in (Level.CLASS, Level.FUNCTION) and not self.qualified_name:
            raise ValueError(f"{self.level.value} location needs a qualified name")

    @property
    def canonical(self) -> str:
        if self.level is Level.FILE:
            return self.file
        if self.level is Level.CHUNK:
            return f"{self.file}::[{self.window[0]}-{self.window[1]}]"
        return f"{self.file}::{self.qualified_name}"

    def __str__(self) -> str:
        return self.canonical

    @classmethod
    def file_(cls, path: str) -> "FaultLocation":
        return cls(path, Level.FILE)

    @classmethod
    def function(cls, path: str, qualname: str) -> "FaultLocation":
        return cls(path, Level.FUNCTION, qualname)

    @classmethod
    def class_(cls, path: str, qualname: str) -> "FaultLocation":
        return cls(path, Level.CLASS, qualname)

    @classmethod
    def chunk(cls, path: str, start: int, end: int) -> "FaultLocation":
        return cls(path, Level.CHUNK, None, (start, end))


def _merge_windows(windows: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for s, e in sorted(windows):
        if merged and s <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


class FaultLocationSet:
    """Canonical set of locations; same-file chunk windows that overlap or touch are merged.

    Elements are unique by canonical string, so a class and a function that
    share a qualified name collapse to one element (the class wins).
    """

    __slots__ = ("locations", "derivation")

    def __init__(self, locations: Iterable[FaultLocation] = (),
                 derivation: Derivation | str = Derivation.FROM_AGENT_TERMINAL):
        plain: dict[str, FaultLocation] = {}
        chunks: dict[str, list[tuple[int, int]]] = {}
        for loc in locations:
            if loc.level is Level.CHUNK:
                chunks.setdefault(loc.file, []).append(loc.window)
            elif loc.canonical not in plain or loc.level is Level.CLASS:
                plain[loc.canonical] = loc
        found = set(plain.values())
        for path, wins in chunks.items():
            found.update(FaultLocation.chunk(path, s, e) for s, e in _merge_windows(wins))
        self.locations = frozenset(found)
        self.derivation = Derivation(derivation)

    def __iter__(self) -> Iterator[FaultLocation]:
        return iter(sorted(self.locations))

    def __len__(self) -> int:
        return len(self.locations)

    def __contains__(self, item) -> bool:
        return item in self.locations

    def __eq__(self, other) -> bool:
        return isinstance(other, FaultLocationSet) and self.locations == other.locations

    def __hash__(self) -> int:
        return hash(self.locations)

    def __repr__(self) -> str:
        return f"FaultLocationSet([{', '.join(str(l) for l in self)}], {self.derivation.value})"

    def at(self, level: Level) -> list[FaultLocation]:
        return sorted(l for l in self.locations if l.level is level)

    def files(self) -> set[str]:
        return {l.file for l in self.locations}

    def canonical(self) -> list[str]:
        return [l.canonical for l in self]

    def to_json(self) -> list[str]:
        return self.canonical()

    @classmethod
    def from_canonical(cls, items: Iterable[str], derivation=Derivation.FROM_AGENT_TERMINAL,
                       kinds: dict[str, str] | None = None) -> "FaultLocationSet":
        """Inverse of ``canonical``; ``kinds`` maps "file::name" to class/function (default function)."""
        kinds = kinds or {}
        locs = []
        for item in items:
            if "::" not in item:
                locs.append(FaultLocation.file_(item))
                continue
            path, rest = item.split("::", 1)
            if rest.startswith("[") and rest.endswith("]"):
                s, e = rest[1:-1].split("-")
                locs.append(FaultLocation.chunk(path, int(s), int(e)))
            elif kinds.get(item) == "class":
                locs.append(FaultLocation.class_(path, rest))
            else:
                locs.append(FaultLocation.function(path, rest))
        return cls(locs, derivation)


# -- extraction -------------------------------------------------------------------

def _hunk_matches(lines: list[str], start: int, expected: list[str]) -> bool:
    seg = lines[start - 1:start - 1 + len(expected)]
    return len(seg) == len(expected) and all(a.rstrip("\r\n") == b for a, b in zip(seg, expected))


def _resolve_offset(lines: list[str], hunk) -> int:
    """Shift between the hunk's stated old_start and where its old lines actually are."""
    expected = hunk.old_lines()
    if not expected:
        return 0
    if _hunk_matches(lines, hunk.old_start, expected):
        return 0
    for delta in sorted(range(-len(lines), len(lines) + 1), key=abs):
        start = hunk.old_start + delta
        if start >= 1 and _hunk_matches(lines, start, expected):
            return delta
    raise UnresolvableDiff(f"hunk {hunk.header!r} does not match the snapshot")


def extract_locations(diff: str, snapshot: RepoSnapshot,
                      derivation: Derivation | str = Derivation.FROM_GOLD_PATCH) -> FaultLocationSet:
    """Locations touched by ``diff`` in pre-image coordinates.

    Every modified line contributes its file and a ±3-line chunk window;
    lines inside a function also contribute the innermost function and its
    enclosing class, lines in a class body outside methods the class.
    """
    try:
        files = parse_unified_diff(diff)
    except CorruptDiff as exc:
        raise UnresolvableDiff(str(exc)) from exc
    locs: list[FaultLocation] = []
    for fp in files:
        if not fp.hunks and not fp.is_new and not fp.is_deleted:
            continue
        path = fp.old_path or fp.new_path
        locs.append(FaultLocation.file_(path))
        if fp.is_new:
            continue
        if path not in snapshot.files:
            raise UnresolvableDiff(f"{path} is not in the snapshot")
        text = snapshot.text(path)
        lines = text.splitlines(keepends=True)
        n = max(len(lines), 1)
        entities: list[pyast.Entity] = []
        if snapshot.files[path].language == "python":
            try:
                entities = pyast.walk_entities(pyast.parse(text), lines)
            except (SyntaxError, ValueError):
                entities = []
        for hunk in fp.hunks:
            delta = _resolve_offset(lines, hunk)
            for line in hunk.modified_old_lines():
                line = min(max(line + delta, 1), n)
                locs.append(FaultLocation.chunk(path, max(1, line - CHUNK_RADIUS),
                                                min(n, line + CHUNK_RADIUS)))
                func = pyast.enclosing(entities, line, ("function", "method"))
                if func is not None:
                    locs.append(FaultLocation.function(path, func.qualname))
                cls = pyast.enclosing(entities, line, ("class",))
                if cls is not None:
                    locs.append(FaultLocation.class_(path, cls.qualname))
    return FaultLocationSet(locs, derivation)


# -- jaccard ------------------------------------------------------------------------

def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def matched_chunk_pairs(a: Iterable[FaultLocation], b: Iterable[FaultLocation]) -> int:
    """Greedy start-sorted pairing of overlapping same-file chunk windows."""
    by_file_a: dict[str, list[tuple[int, int]]] = {}
    by_file_b: dict[str, list[tuple[int, int]]] = {}
    for loc in a:
        by_file_a.setdefault(loc.file, []).append(loc.window)
    for loc in b:
        by_file_b.setdefault(loc.file, []).append(loc.window)
    count = 0
    for path, wins_a in by_file_a.items():
        wins_b = sorted(by_file_b.get(path, ()))
        used = [False] * len(wins_b)
        for wa in sorted(wins_a):
            for j, wb in enumerate(wins_b):
                if not used[j] and _overlaps(wa, wb):
                    used[j] = True
                    count += 1
                    break
    return count


def jaccard(a: FaultLocationSet, b: FaultLocationSet) -> float:
    """|a ∩ b| / |a ∪ b| with overlap-matching for chunk windows; 1.0 when both are empty."""
    if not len(a) and not len(b):
        return 1.0
    plain_a = {l.canonical for l in a.locations if l.level is not Level.CHUNK}
    plain_b = {l.canonical for l in b.locations if l.level is not Level.CHUNK}
    inter = len(plain_a & plain_b) + matched_chunk_pairs(a.at(Level.CHUNK), b.at(Level.CHUNK))
    union = len(a) + len(b) - inter
    return inter / union


# -- granularity hits ----------------------------------------------------------------

FULL_RECALL = "full_recall"
ANY_OVERLAP = "any_overlap"
HIT_MODES = (FULL_RECALL, ANY_OVERLAP)


def _project(locs: FaultLocationSet, level: Level) -> list[FaultLocation]:
    if level is Level.FILE:
        return [FaultLocation.file_(p) for p in sorted(locs.files())]
    if level is Level.CHUNK:
        return locs.at(Level.CHUNK)
    # function level: files touched only outside functions become one
    # module-scope element, so a function-level hit implies a file-level hit
    funcs = locs.at(Level.FUNCTION)
    covered = {f.file for f in funcs}
    extra = [FaultLocation.function(p, MODULE_SCOPE) for p in sorted(locs.files() - covered)]
    return sorted(funcs + extra)


def localization_hit(pred: FaultLocationSet, truth: FaultLocationSet, level: Level | str,
                     mode: str = FULL_RECALL) -> bool:
    """Whether ``pred`` localizes ``truth`` at ``level``.

    ``full_recall``: every truth element at that level is matched;
    ``any_overlap``: at least one is. Raises EmptyTruthAtLevel when the truth
    has nothing at that level (callers drop such instances from the denominator).
    At function level, truth without any function counts as empty; in mixed
    truth, each file edited only outside functions is one module-scope element.
    """
    level = Level(level)
    if mode not in HIT_MODES:
        raise ValueError(f"unknown hit mode {mode!r}")
    truth_items = _project(truth, level)
    if level is Level.FUNCTION and not truth.at(Level.FUNCTION):
        truth_items = []
    if not truth_items:
        raise EmptyTruthAtLevel(level.value)
    pred_items = _project(pred, level)
    if level is Level.CHUNK:
        matched = [any(p.file == t.file and _overlaps(p.window, t.window) for p in pred_items)
                   for t in truth_items]
    else:
        pred_set = set(pred_items)
        matched = [t in pred_set for t in truth_items]
    return all(matched) if mode == FULL_RECALL else any(matched)
