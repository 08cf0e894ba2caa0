"""Python entity walk shared by the compressor, the search index and location extraction.

Entity reachability: compound statements (``if``, ``try``, ``with``, loops,
``match``) are descended into at every level. Globals are only collected at
module level.
"""

from __future__ import annotations

import ast
import io
import tokenize
from dataclasses import dataclass, field
from typing import Iterator

FUNCTION_NODES = (ast.FunctionDef, ast.AsyncFunctionDef)
DEF_NODES = (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)

_COMPOUND_BLOCKS = ("body", "orelse", "finalbody")


@dataclass(frozen=True)
class Entity:
    kind: str  # class | function | method | global
    qualname: str
    start: int  # first line, decorators included
    end: int
    sig_start: int
    sig_end: int
    parent: str | None = None
    node: ast.AST | None = field(default=None, compare=False, repr=False)

    @property
    def name(self) -> str:
        return self.qualname.rsplit(".", 1)[-1]


def parse(source: str) -> ast.Module:
    return ast.parse(source, type_comments=False)


def _compound_children(stmt: ast.stmt) -> Iterator[list[ast.stmt]]:
    for attr in _COMPOUND_BLOCKS:
        block = getattr(stmt, attr, None)
        if block and isinstance(block, list) and isinstance(block[0], ast.stmt):
            yield block
    for handler in getattr(stmt, "handlers", None) or ():
        yield handler.body
    for case in getattr(stmt, "cases", None) or ():
        yield case.body


def header_end(lines: list[str], node: ast.AST) -> tuple[int, int]:
    """(line, col) of the colon closing a def/class header."""
    start = node.lineno
    text = "".join(lines[start - 1:])
    depth = 0
    seen_keyword = False
    try:
        for tok in tokenize.generate_tokens(io.StringIO(text).readline):
            if tok.type == tokenize.NAME and tok.string in ("def", "class"):
                seen_keyword = True
            elif tok.type == tokenize.OP:
                if tok.string in "([{":
                    depth += 1
                elif tok.string in ")]}":
                    depth -= 1
                elif tok.string == ":" and depth == 0 and seen_keyword:
                    return start + tok.start[0] - 1, tok.start[1]
    except (tokenize.TokenError, IndentationError):
        pass
    body0 = node.body[0]
    return max(start, body0.lineno - 1), 0


def docstring_node(node: ast.AST) -> ast.Expr | None:
    body = getattr(node, "body", None)
    if body and isinstance(body[0], ast.Expr):
        value = body[0].value
        if isinstance(value, ast.Constant) and isinstance(value.value, str):
            return body[0]
    return None


def _assigned_names(stmt: ast.stmt) -> list[str]:
    if isinstance(stmt, ast.Assign):
        targets = stmt.targets
    elif isinstance(stmt, (ast.AnnAssign, ast.AugAssign)):
        targets = [stmt.target]
    else:
        return []
    names: list[str] = []
    for target in targets:
        for sub in ast.walk(target):
            if isinstance(sub, ast.Name):
                names.append(sub.id)
    return names


def walk_entities(tree: ast.Module, lines: list[str]) -> list[Entity]:
    """All reachable entities in source order."""
    out: list[Entity] = []

    def visit(stmts: list[ast.stmt], prefix: str, context: str, parent: str | None) -> None:
        for stmt in stmts:
            if isinstance(stmt, DEF_NODES):
                qual = prefix + stmt.name
                if isinstance(stmt, ast.ClassDef):
                    kind = "class"
                else:
                    kind = "method" if context == "class" else "function"
                first = min([d.lineno for d in stmt.decorator_list] + [stmt.lineno])
                sig_end, _ = header_end(lines, stmt)
                out.append(Entity(kind, qual, first, stmt.end_lineno, first, sig_end, parent, stmt))
                inner = "class" if kind == "class" else "function"
                visit(stmt.body, qual + ".", inner, qual)
            elif context == "module" and isinstance(stmt, (ast.Assign, ast.AnnAssign, ast.AugAssign)):
                for name in _assigned_names(stmt):
                    out.append(Entity("global", name, stmt.lineno, stmt.end_lineno,
                                      stmt.lineno, stmt.end_lineno, None, stmt))
            else:
                for block in _compound_children(stmt):
                    visit(block, prefix, context, parent)

    visit(tree.body, "", "module", None)
    return out


def defs_within(stmt: ast.stmt) -> list[ast.stmt]:
    """``def``/``class`` nodes inside a compound statement's blocks, outermost only."""
    found = []
    for block in _compound_children(stmt):
        for child in block:
            if isinstance(child, DEF_NODES):
                found.append(child)
            else:
                found.extend(defs_within(child))
    return found


def enclosing(entities: list[Entity], line: int, kinds: tuple[str, ...]) -> Entity | None:
    """Innermost entity of one of ``kinds`` whose span contains ``line``."""
    best = None
    for ent in entities:
        if ent.kind in kinds and ent.start <= line <= ent.end:
            if best is None or (ent.end - ent.start) <= (best.end - best.start):
                best = ent
    return best
