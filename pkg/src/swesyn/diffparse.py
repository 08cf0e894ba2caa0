"""Minimal unified-diff reader (git flavour)."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@(.*)$")


class CorruptDiff(ValueError):
    pass


@dataclass
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    header: str
    # (tag, text) with tag in " ", "-", "+"; text without trailing newline
    lines: list[tuple[str, str]] = field(default_factory=list)

    def old_lines(self) -> list[str]:
        return [t for tag, t in self.lines if tag in " -"]

    def modified_old_lines(self) -> list[int]:
        """Old-file line numbers touched by this hunk.

        Removed lines map to themselves; a pure insertion maps to the old line
        just before the insertion point (line 1 when inserting at the top).
        """
        out: list[int] = []
        old = self.old_start
        block_removed = block_added = False
        for tag, _ in self.lines + [(" ", "")]:
            if tag == " ":
                if block_added and not block_removed:
                    out.append(max(old - 1, 1))
                block_removed = block_added = False
                old += 1
            elif tag == "-":
                out.append(old)
                block_removed = True
                old += 1
            else:
                block_added = True
        return sorted(set(out))


@dataclass
class FilePatch:
    old_path: str | None
    new_path: str | None
    hunks: list[Hunk] = field(default_factory=list)

    @property
    def path(self) -> str:
        return self.new_path or self.old_path or ""

    @property
    def is_new(self) -> bool:
        return self.old_path is None

    @property
    def is_deleted(self) -> bool:
        return self.new_path is None


def _strip_path(raw: str) -> str | None:
    raw = raw.split("\t", 1)[0].strip()
    if raw == "/dev/null":
        return None
    if raw.startswith(("a/", "b/")):
        raw = raw[2:]
    return raw


def parse_unified_diff(text: str) -> list[FilePatch]:
    """Parse ``text`` into per-file patches; raises CorruptDiff on malformed input."""
    files: list[FilePatch] = []
    lines = text.splitlines()
    i = 0
    current: FilePatch | None = None
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- ") and i + 1 < len(lines) and lines[i + 1].startswith("+++ "):
            current = FilePatch(_strip_path(line[4:]), _strip_path(lines[i + 1][4:]))
            files.append(current)
            i += 2
            continue
        m = _HUNK_RE.match(line)
        if m:
            if current is None:
                raise CorruptDiff(f"hunk without file header at line {i + 1}")
            old_len = int(m.group(2)) if m.group(2) is not None else 1
            new_len = int(m.group(4)) if m.group(4) is not None else 1
            hunk = Hunk(int(m.group(1)), old_len, int(m.group(3)), new_len, line)
            i += 1
            seen_old = seen_new = 0
            while i < len(lines) and (seen_old < old_len or seen_new < new_len):
                body = lines[i]
                if body.startswith("\\"):
                    i += 1
                    continue
                tag = body[:1] if body else " "
                if tag not in " -+":
                    raise CorruptDiff(f"unexpected line in hunk at line {i + 1}: {body!r}")
                hunk.lines.append((tag, body[1:]))
                if tag in " -":
                    seen_old += 1
                if tag in " +":
                    seen_new += 1
                i += 1
            if seen_old != old_len or seen_new != new_len:
                raise CorruptDiff(f"hunk {line!r} is truncated")
            while i < len(lines) and lines[i].startswith("\\"):
                i += 1
            current.hunks.append(hunk)
            continue
        i += 1
    return files
