"""Snippet-replacement edits, unified-diff rendering, lint and ``git apply``."""

from __future__ import annotations

import difflib
import os
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Mapping, Sequence

from .diffparse import CorruptDiff as _ParseCorrupt
from .diffparse import parse_unified_diff
from .repo_model import RepoSnapshot

SCRATCH_ENV = "SWESYN_SCRATCH_DIR"
CONTEXT_LINES = 3

# classify_patch_error categories
MALFORMED_EDIT_FORMAT = "malformed_edit_format"
SNIPPET_NOT_FOUND = "snippet_not_found"
SYNTAX_ERROR = "syntax_error"
APPLY_CONFLICT = "apply_conflict"


class PatchError(Exception):
    pass


class SnippetNotFound(PatchError):
    def __init__(self, file: str, excerpt: str):
        super().__init__(f"original snippet not found in {file}: {excerpt!r}")
        self.file = file
        self.excerpt = excerpt


class FileNotFound(PatchError):
    def __init__(self, file: str):
        super().__init__(f"file not found in repository: {file}")
        self.file = file


class ApplyError(PatchError):
    def __init__(self, message: str, stderr: str = "", hunk_header: str | None = None):
        super().__init__(message)
        self.stderr = stderr
        self.hunk_header = hunk_header


class HunkMismatch(ApplyError):
    pass


class PathOutsideRepo(ApplyError):
    pass


class CorruptDiff(ApplyError):
    pass


@dataclass(frozen=True)
class Edit:
    file: str
    original: str
    replacement: str


@dataclass(frozen=True)
class EditPatch:
    edits: tuple[Edit, ...]
    rendered_diff: str | None = None

    @classmethod
    def of(cls, *edits: Edit) -> "EditPatch":
        return cls(tuple(edits))


@dataclass(frozen=True)
class RenderedDiff:
    text: str
    post_images: Mapping[str, str]
    warnings: tuple[str, ...] = ()

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class SyntaxDiagnostic:
    line: int
    column: int
    category: str
    message: str


@dataclass
class PatchAttempt:
    attempt_index: int
    status: str
    error_excerpt: str = ""


@dataclass
class PatchResult:
    status: str  # applied | format_error | syntax_error | apply_error | exhausted
    diff: str | None = None
    attempts: list[PatchAttempt] = field(default_factory=list)


@dataclass(frozen=True)
class ErrorFeedback:
    category: str
    text: str


# -- editing & rendering ------------------------------------------------------

def apply_edits(patch: EditPatch, snapshot: RepoSnapshot) -> tuple[dict[str, str], list[str]]:
    """Post-edit text of every touched file, plus warnings.

    Edits to one file are applied in order; an original occurring more than
    once anchors to its first occurrence.
    """
    texts: dict[str, str] = {}
    warnings: list[str] = []
    for edit in patch.edits:
        if edit.file not in texts:
            if edit.file not in snapshot.files:
                raise FileNotFound(edit.file)
            texts[edit.file] = snapshot.text(edit.file)
        current = texts[edit.file]
        if not edit.original:
            raise SnippetNotFound(edit.file, edit.original)
        count = current.count(edit.original)
        if count == 0:
            raise SnippetNotFound(edit.file, edit.original)
        if count > 1:
            warnings.append(f"ambiguous_snippet:{edit.file}")
        if edit.original == edit.replacement:
            warnings.append(f"no_op_edit:{edit.file}")
        texts[edit.file] = current.replace(edit.original, edit.replacement, 1)
    return texts, warnings


def _file_diff(path: str, before: str, after: str) -> str:
    a = before.splitlines(keepends=True)
    b = after.splitlines(keepends=True)
    out = []
    for line in difflib.unified_diff(a, b, f"a/{path}", f"b/{path}", n=CONTEXT_LINES):
        if line.startswith(("---", "+++")):
            out.append(line.rstrip("\n") + "\n")
        elif line.endswith("\n"):
            out.append(line)
        else:
            out.append(line + "\n\\ No newline at end of file\n")
    if not out:
        return ""
    return f"diff --git a/{path} b/{path}\n" + "".join(out)


def render_diff(patch: EditPatch, snapshot: RepoSnapshot) -> RenderedDiff:
    """Render edits as a git-compatible unified diff with 3 context lines."""
    texts, warnings = apply_edits(patch, snapshot)
    parts = []
    for path in sorted(texts):
        parts.append(_file_diff(path, snapshot.text(path), texts[path]))
    return RenderedDiff("".join(parts), texts, tuple(warnings))


def diff_between(before: Mapping[str, str], after: Mapping[str, str]) -> str:
    """Unified diff between two {path: text} maps (same key set)."""
    return "".join(_file_diff(p, before[p], after[p]) for p in sorted(after))


# -- lint -----------------------------------------------------------------------

def lint_check(file_text: str, language: str = "python") -> list[SyntaxDiagnostic]:
    """Empty list when the file parses; otherwise the first syntax error."""
    if language != "python":
        return []
    try:
        compile(file_text, "<edited>", "exec", dont_inherit=True, flags=0x400)  # PyCF_ONLY_AST
    except SyntaxError as exc:
        return [SyntaxDiagnostic(exc.lineno or 0, exc.offset or 0, type(exc).__name__, exc.msg)]
    except ValueError as exc:  # e.g. null bytes
        return [SyntaxDiagnostic(0, 0, "ValueError", str(exc))]
    return []


# -- git apply --------------------------------------------------------------------

@dataclass
class AppliedTree:
    root: Path
    post_images: dict[str, str]

    def cleanup(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self) -> "AppliedTree":
        return self

    def __exit__(self, *exc) -> None:
        self.cleanup()


def _unsafe(path: str | None) -> bool:
    if path is None:
        return False
    p = PurePosixPath(path)
    return p.is_absolute() or ".." in p.parts


def _scratch_dir() -> Path:
    base = os.environ.get(SCRATCH_ENV)
    if base:
        Path(base).mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix="swesyn-", dir=base or None))


def materialize(snapshot: RepoSnapshot, dest: Path) -> None:
    for rel in snapshot.files:
        target = dest / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(snapshot.text(rel).encode("utf-8"))


_FAILED_AT = re.compile(r"patch failed: (.+):(\d+)")
_CORRUPT_MARKERS = ("corrupt patch", "No valid patches", "unrecognized input",
                    "patch fragment without header", "recount")


def _rejected_hunk(diff: str, stderr: str) -> str | None:
    m = _FAILED_AT.search(stderr)
    if not m:
        return None
    path, line = m.group(1), int(m.group(2))
    try:
        files = parse_unified_diff(diff)
    except _ParseCorrupt:
        return None
    for fp in files:
        if fp.path == path:
            for h in fp.hunks:
                if h.old_start == line:
                    return h.header
            if fp.hunks:
                return fp.hunks[0].header
    return None


def apply_patch(snapshot: RepoSnapshot, diff: str, base: AppliedTree | None = None) -> AppliedTree:
    """Apply ``diff`` in a scratch copy of the snapshot (or of ``base``) via ``git apply``.

    The snapshot itself is never modified. The caller owns the returned
    tree and should ``cleanup()`` it.
    """
    if not diff.strip():
        raise CorruptDiff("empty diff")
    try:
        files = parse_unified_diff(diff)
    except _ParseCorrupt as exc:
        raise CorruptDiff(str(exc)) from exc
    if not files:
        raise CorruptDiff("no file headers found in diff")
    for fp in files:
        if _unsafe(fp.old_path) or _unsafe(fp.new_path):
            raise PathOutsideRepo(f"path escapes repository: {fp.path}")

    scratch = _scratch_dir()
    try:
        if base is None:
            materialize(snapshot, scratch)
        else:
            shutil.copytree(base.root, scratch, dirs_exist_ok=True)
        # keep git from discovering an enclosing repository
        env = dict(os.environ, GIT_CEILING_DIRECTORIES=str(scratch.parent))
        proc = subprocess.run(["git", "apply", "--whitespace=nowarn", "-"], cwd=scratch, env=env,
                              input=diff.encode("utf-8"), capture_output=True, check=False)
        if proc.returncode != 0:
            stderr = proc.stderr.decode("utf-8", "replace")
            if any(m in stderr for m in _CORRUPT_MARKERS):
                raise CorruptDiff(stderr.strip(), stderr)
            if "outside" in stderr or "beyond a symbolic link" in stderr:
                raise PathOutsideRepo(stderr.strip(), stderr)
            raise HunkMismatch(stderr.strip(), stderr, _rejected_hunk(diff, stderr))
        post = {}
        for fp in files:
            if fp.new_path is not None:
                post[fp.new_path] = (scratch / fp.new_path).read_text(encoding="utf-8")
        return AppliedTree(scratch, post)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise


def write_patch_file(out_dir: str | os.PathLike, instance_id: str, diff: str) -> Path:
    path = Path(out_dir) / f"{instance_id}.patch"
    path.write_text(diff, encoding="utf-8")
    return path


# -- error classification ------------------------------------------------------

def _excerpt(text: str, limit: int = 400) -> str:
    text = text.strip("\n")
    return text if len(text) <= limit else text[:limit] + " …"


def classify_patch_error(failure: object) -> ErrorFeedback:
    """Map a failure to a debug category and a feedback paragraph for the next attempt."""
    if isinstance(failure, SnippetNotFound):
        return ErrorFeedback(SNIPPET_NOT_FOUND, (
            f"The original snippet for {failure.file} was not found verbatim in the file:\n"
            f"```\n{_excerpt(failure.excerpt)}\n```\n"
            "Copy the original code exactly as it appears, including indentation."))
    if isinstance(failure, FileNotFound):
        return ErrorFeedback(SNIPPET_NOT_FOUND, (
            f"The file {failure.file} does not exist in the repository. "
            "Use a path from the repository structure."))
    if isinstance(failure, Sequence) and failure and isinstance(failure[0], SyntaxDiagnostic):
        d = failure[0]
        return ErrorFeedback(SYNTAX_ERROR, (
            f"The edited code does not parse: {d.category} at line {d.line}, column {d.column}: "
            f"{d.message}. Fix the syntax of your replacement."))
    if isinstance(failure, SyntaxDiagnostic):
        return classify_patch_error([failure])
    if isinstance(failure, ApplyError):
        where = f" Rejected hunk: {failure.hunk_header}." if failure.hunk_header else ""
        return ErrorFeedback(APPLY_CONFLICT, (
            f"git apply failed ({type(failure).__name__}).{where}\n"
            f"```\n{_excerpt(str(failure))}\n```\n"
            "Regenerate the edit against the current file content."))
    # parse diagnostics and anything else about the edit's shape
    return ErrorFeedback(MALFORMED_EDIT_FORMAT, (
        f"The edit could not be understood: {_excerpt(str(failure))}\n"
        'Reply with {"action": "edit", "content": [{"file": ..., "original": ..., '
        '"replacement": ...}]}.'))

