"""Patch normalization, token BLEU and CodeBLEU."""

from __future__ import annotations

import ast
import difflib
import keyword
import math
import re
import textwrap
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from ..diffparse import CorruptDiff, parse_unified_diff

__all__ = [
    "CorruptDiff", "NormalizedPatch", "SimilarityScores", "normalize_patch", "tokenize_code",
    "ngram_similarity", "bleu", "weighted_bleu", "ast_match", "dataflow_match", "codebleu",
]

MAX_ORDER = 4
KEYWORD_WEIGHT = 5.0
DEFAULT_WEIGHTS = (0.25, 0.25, 0.25, 0.25)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
COMMENT_PREFIX = {"python": "#"}


def tokenize_code(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def strip_comment(line: str, language: str = "python") -> str:
    """Drop a trailing line comment, respecting single-line string literals."""
    marker = COMMENT_PREFIX.get(language, "#")
    quote = None
    i = 0
    while i < len(line):
        ch = line[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if line.startswith(quote, i):
                i += len(quote)
                quote = None
                continue
        elif line.startswith(('"""', "'''"), i):
            quote = line[i:i + 3]
            i += 3
            continue
        elif ch in "\"'":
            quote = ch
        elif line.startswith(marker, i):
            return line[:i]
        i += 1
    return line


def canonical_line(line: str, language: str = "python") -> str:
    return " ".join(tokenize_code(strip_comment(line, language)))


@dataclass(frozen=True)
class FileChange:
    path: str
    removed: tuple[str, ...]  # canonical lines
    added: tuple[str, ...]
    added_raw: tuple[str, ...]  # comment-stripped, indentation kept


@dataclass(frozen=True)
class NormalizedPatch:
    files: tuple[FileChange, ...]

    @property
    def text(self) -> str:
        out = []
        for fc in self.files:
            out.append(("- " + " ".join(fc.removed)).rstrip())
            out.append(("+ " + " ".join(fc.added)).rstrip())
        return "\n".join(out) + ("\n" if out else "")

    def added_tokens(self) -> list[str]:
        return [tok for fc in self.files for line in fc.added for tok in line.split()]

    def added_code(self) -> list[str]:
        return ["\n".join(fc.added_raw) for fc in self.files if fc.added_raw]

    def __str__(self) -> str:
        return self.text

    @property
    def empty(self) -> bool:
        return not self.files


def normalize_patch(diff: str, language: str = "python") -> NormalizedPatch:
    """Reduce a diff to its substantive removed/added code.

    Comments, blank lines and whitespace differences are dropped on both
    sides of each hunk before re-diffing, so edits that only touch comments
    or layout vanish.
    """
    files = parse_unified_diff(diff)
    changes = []
    for fp in sorted(files, key=lambda f: f.path):
        removed: list[str] = []
        added: list[str] = []
        added_raw: list[str] = []
        for hunk in fp.hunks:
            old: list[str] = []
            new: list[tuple[str, str]] = []
            for tag, text in hunk.lines:
                stripped = strip_comment(text, language).rstrip()
                canon = " ".join(tokenize_code(stripped))
                if not canon:
                    continue
                if tag in " -":
                    old.append(canon)
                if tag in " +":
                    new.append((canon, stripped))
            matcher = difflib.SequenceMatcher(a=old, b=[c for c, _ in new], autojunk=False)
            for op, i1, i2, j1, j2 in matcher.get_opcodes():
                if op == "equal":
                    continue
                removed.extend(old[i1:i2])
                added.extend(c for c, _ in new[j1:j2])
                added_raw.extend(r for _, r in new[j1:j2])
        if removed or added:
            changes.append(FileChange(fp.path, tuple(removed), tuple(added), tuple(added_raw)))
    return NormalizedPatch(tuple(changes))


# -- BLEU ---------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _brevity_penalty(c: int, r: int) -> float:
    if c >= r:
        return 1.0
    return math.exp(1.0 - r / c)


def _combine(precisions: list[float], c: int, r: int) -> float:
    if any(p == 0.0 for p in precisions):
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / len(precisions)
    return _brevity_penalty(c, r) * math.exp(log_mean)


def _order(cand: Sequence[str], ref: Sequence[str]) -> int:
    return min(MAX_ORDER, len(cand), len(ref))


def bleu(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Sentence BLEU over n = 1..min(4, |cand|, |ref|), uniform weights, no smoothing."""
    if not candidate and not reference:
        return 1.0
    if not candidate or not reference:
        return 0.0
    precisions = []
    for n in range(1, _order(candidate, reference) + 1):
        cand_ng, ref_ng = _ngrams(candidate, n), _ngrams(reference, n)
        clipped = sum(min(c, ref_ng[g]) for g, c in cand_ng.items())
        precisions.append(clipped / sum(cand_ng.values()))
    return _combine(precisions, len(candidate), len(reference))


def weighted_bleu(candidate: Sequence[str], reference: Sequence[str],
                  keywords: frozenset[str] = frozenset(keyword.kwlist),
                  keyword_weight: float = KEYWORD_WEIGHT) -> float:
    """BLEU whose unigram precision weights language keywords ``keyword_weight``×."""
    if not candidate and not reference:
        return 1.0
    if not candidate or not reference:
        return 0.0

    def w(tok: str) -> float:
        return keyword_weight if tok in keywords else 1.0

    cand_1, ref_1 = Counter(candidate), Counter(reference)
    num = sum(w(t) * min(c, ref_1[t]) for t, c in cand_1.items())
    den = sum(w(t) * c for t, c in cand_1.items())
    precisions = [num / den]
    for n in range(2, _order(candidate, reference) + 1):
        cand_ng, ref_ng = _ngrams(candidate, n), _ngrams(reference, n)
        clipped = sum(min(c, ref_ng[g]) for g, c in cand_ng.items())
        precisions.append(clipped / sum(cand_ng.values()))
    return _combine(precisions, len(candidate), len(reference))


def ngram_similarity(a: str | NormalizedPatch, b: str | NormalizedPatch) -> float:
    """Token BLEU with ``a`` as candidate and ``b`` as reference."""
    return bleu(tokenize_code(str(a)), tokenize_code(str(b)))


# -- syntax & dataflow ---------------------------------------------------------------

_CTX = (ast.Load, ast.Store, ast.Del)


def parse_fragment(code: str) -> ast.Module | None:
    try:
        return ast.parse(textwrap.dedent(code))
    except (SyntaxError, ValueError):
        return None


def _children(node: ast.AST) -> list[ast.AST]:
    return [c for c in ast.iter_child_nodes(node) if not isinstance(c, _CTX)]


def subtree_signatures(tree: ast.AST) -> Counter:
    """Multiset of node-type subtrees with at least one child; leaves (identifiers, literals) abstracted."""
    sigs: Counter = Counter()

    def sig(node: ast.AST) -> tuple:
        kids = _children(node)
        s = (type(node).__name__, tuple(sig(k) for k in kids))
        if kids:
            sigs[s] += 1
        return s

    sig(tree)
    return sigs


def _fraction(ref: Counter, cand: Counter) -> float:
    total = sum(ref.values())
    if total == 0:
        return 1.0
    return sum(min(c, cand[k]) for k, c in ref.items()) / total


def ast_match(candidate: Sequence[ast.AST], reference: Sequence[ast.AST]) -> float:
    cand, ref = Counter(), Counter()
    for t in candidate:
        cand.update(subtree_signatures(t))
    for t in reference:
        ref.update(subtree_signatures(t))
    return _fraction(ref, cand)


class _DataFlow(ast.NodeVisitor):
    """Def-use edges with variables renamed by order of first appearance."""

    def __init__(self):
        self.names: dict[str, str] = {}
        self.defined: set[str] = set()
        self.edges: Counter = Counter()

    def norm(self, name: str) -> str:
        if name not in self.names:
            self.names[name] = f"var_{len(self.names)}"
        return self.names[name]

    @staticmethod
    def _loads(node: ast.AST | None) -> list[str]:
        if node is None:
            return []
        return [n.id for n in ast.walk(node) if isinstance(n, ast.Name) and isinstance(n.ctx, ast.Load)]

    @staticmethod
    def _stores(node: ast.AST) -> list[str]:
        return [n.id for n in ast.walk(node) if isinstance(n, ast.Name)]

    def _assign(self, targets: list[ast.AST], value: ast.AST | None) -> None:
        if value is not None:
            self.visit(value)
        sources = [self.norm(s) for s in self._loads(value)]
        for target in targets:
            for t in self._stores(target):
                nt = self.norm(t)
                for s in sources:
                    self.edges[("computedFrom", nt, s)] += 1
                self.defined.add(t)

    def visit_Assign(self, node):
        self._assign(node.targets, node.value)

    def visit_AnnAssign(self, node):
        self._assign([node.target], node.value)

    def visit_AugAssign(self, node):
        if isinstance(node.target, ast.Name) and node.target.id in self.defined:
            self.edges[("comesFrom", self.norm(node.target.id))] += 1
        self._assign([node.target], node.value)

    def visit_For(self, node):
        self._assign([node.target], node.iter)
        for stmt in node.body + node.orelse:
            self.visit(stmt)

    visit_AsyncFor = visit_For

    def visit_arg(self, node):
        self.norm(node.arg)
        self.defined.add(node.arg)

    def visit_Name(self, node):
        if isinstance(node.ctx, ast.Load) and node.id in self.defined:
            self.edges[("comesFrom", self.norm(node.id))] += 1
        else:
            self.norm(node.id)


def dataflow_edges(tree: ast.AST) -> Counter:
    v = _DataFlow()
    v.visit(tree)
    return v.edges


def dataflow_match(candidate: Sequence[ast.AST], reference: Sequence[ast.AST]) -> float:
    cand, ref = Counter(), Counter()
    for t in candidate:
        cand.update(dataflow_edges(t))
    for t in reference:
        ref.update(dataflow_edges(t))
    return _fraction(ref, cand)


@dataclass(frozen=True)
class SimilarityScores:
    ngram: float
    codebleu: float
    # (ngram_match, weighted_ngram, ast_match, dataflow_match); None when dropped
    codebleu_components: tuple[float | None, float | None, float | None, float | None]
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
    degraded: bool = False
    notes: tuple[str, ...] = field(default=())

    @property
    def best(self) -> float:
        return max(self.ngram, self.codebleu)


def _parse_all(blocks: list[str]) -> list[ast.Module] | None:
    trees = []
    for block in blocks:
        tree = parse_fragment(block)
        if tree is None:
            return None
        trees.append(tree)
    return trees


def codebleu(candidate: str | NormalizedPatch, reference: str | NormalizedPatch,
             weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS,
             language: str = "python") -> SimilarityScores:
    """CodeBLEU of the candidate's added code against the reference's.

    Components: token BLEU, keyword-weighted BLEU, AST subtree match and
    dataflow match. If either side's added code does not parse, the two
    syntactic components are dropped and the remaining weights renormalized.
    """
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {weights}")
    cand = candidate if isinstance(candidate, NormalizedPatch) else normalize_patch(candidate, language)
    ref = reference if isinstance(reference, NormalizedPatch) else normalize_patch(reference, language)
    ngram = ngram_similarity(cand, ref)

    if cand.empty != ref.empty:
        return SimilarityScores(ngram, 0.0, (0.0, 0.0, 0.0, 0.0), weights, False, ("empty_side",))

    cand_tok, ref_tok = cand.added_tokens(), ref.added_tokens()
    c1 = bleu(cand_tok, ref_tok)
    c2 = weighted_bleu(cand_tok, ref_tok)
    cand_trees = _parse_all(cand.added_code()) if language == "python" else None
    ref_trees = _parse_all(ref.added_code()) if language == "python" else None
    if cand_trees is None or ref_trees is None:
        w1, w2 = weights[0], weights[1]
        total = w1 + w2
        score = (w1 * c1 + w2 * c2) / total if total else 0.0
        return SimilarityScores(ngram, score, (c1, c2, None, None), weights, True, ("unparseable",))
    c3 = ast_match(cand_trees, ref_trees)
    c4 = dataflow_match(cand_trees, ref_trees)
    score = sum(w * c for w, c in zip(weights, (c1, c2, c3, c4)))
    return SimilarityScores(ngram, score, (c1, c2, c3, c4), weights)
