"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line."""

from __future__ import annotations

import ast
import itertools
import json
import random
import sysconfig
import time
from pathlib import Path

import pytest

from swesyn.agent import AgentConfig, ScriptedReplayBackend, TaskInstance, run_task
from swesyn.agent.core import FAULT_LOCALIZATION, PATCH_GENERATION, STAGES
from swesyn.cli import EXIT_OK, main
from swesyn.data_pipeline import filter_issue, filter_pr
from swesyn.metrics import (EmptyTruthAtLevel, FaultLocation, FaultLocationSet, Level, codebleu,
                            hit_flags, jaccard, localization_accuracy, localization_hit,
                            ngram_similarity, normalize_patch, rejection_decide)
from swesyn.patch_engine import Edit, EditPatch, HunkMismatch, apply_patch, render_diff
from swesyn.repo_model import compress_file, snapshot_from_files

from . import test_agent_core as agent_fixtures
from .conftest import TOY_REPO, TOY_SCRIPT, TOY_TASK, acceptance_line, entry, load_script, reply
from .filter_cases import ISSUE_CASES, PR_CASES
from .oracles import def_headers, jaccard_plain, max_window_matching, union_solves
from .rejection_cases import cases as rejection_cases
from .stub_server import StubServer, chat_handler
from .test_repo_model import _body_statements, _is_marker
from .test_similarity import STATEMENTS, clean, noisy, patch, rename

pytestmark = pytest.mark.acceptance


# -- 1. constant compliance ------------------------------------------------------------------

MANY = {f"pkg/m{i}.py": f"def f{i}(x):\n    return x + {i}\n" for i in range(8)}


def suite(toy_snapshot, toy_task):
    """Twenty (snapshot, task, script) fixtures."""
    out = [(toy_snapshot, toy_task, load_script())]
    junk = "Not sure yet."
    out.append((toy_snapshot, toy_task, [entry(s, i, junk) for s in STAGES for i in range(8)]))
    for seed in range(14):
        rng = random.Random(seed)
        rows = [entry("repo_understanding", i, rng.choice(agent_fixtures.RU_POOL)) for i in range(6)]
        rows += [entry(FAULT_LOCALIZATION, i, rng.choice(agent_fixtures.FL_POOL)) for i in range(8)]
        rows += [entry(PATCH_GENERATION, i, rng.choice(agent_fixtures.PG_POOL)) for i in range(5)]
        out.append((toy_snapshot, toy_task, rows))
    many = snapshot_from_files(MANY)
    task = TaskInstance("many-1", "f3 returns the wrong offset")
    for k in range(4):
        picks = [f"pkg/m{i}.py" for i in range(8)][k:] + ["pkg/ghost.py"] + [f"pkg/m{i}.py" for i in range(k)]
        rows = [entry("repo_understanding", 0, reply({"action": "select_files", "content": picks})),
                entry("repo_understanding", 1, reply({"action": "select_entities", "content": []})),
                entry("repo_understanding", 2, reply({"action": "plan", "content": "Check f3."}))]
        rows += [entry(FAULT_LOCALIZATION, i, reply({"api": "search_func", "args": [f"f{i}"]},
                                                    f"Reflection: f{i} looks fine."))
                 for i in range(8)]
        rows += [entry(PATCH_GENERATION, i, reply({"action": "edit", "content": [
            {"file": "pkg/m3.py", "original": "return y\n", "replacement": "return y - 3\n"}]}))
            for i in range(5)]
        out.append((many, task, rows))
    return out


def test_criterion_1_constant_compliance(toy_snapshot, toy_task):
    fixtures = suite(toy_snapshot, toy_task)
    config = AgentConfig()
    start = time.perf_counter()
    worst = {"files": 0, "loc": 0, "patch": 0}
    violations = []
    for n, (snap, task, rows) in enumerate(fixtures):
        traj = run_task(task, snap, config, ScriptedReplayBackend(rows))
        files = len(traj.understanding.relevant_files)
        loc = len(traj.steps_in(FAULT_LOCALIZATION))
        attempts = len(traj.steps_in(PATCH_GENERATION))
        worst = {"files": max(worst["files"], files), "loc": max(worst["loc"], loc),
                 "patch": max(worst["patch"], attempts)}
        if files > 5 or loc > 5 or attempts > 3:
            violations.append(n)
    elapsed = time.perf_counter() - start
    ok = len(fixtures) == 20 and not violations and elapsed < 10 and worst == {"files": 5, "loc": 5, "patch": 3}
    acceptance_line(1, ok, f"{len(fixtures)} trajectories, max files={worst['files']} "
                           f"loc iterations={worst['loc']} patch attempts={worst['patch']}, {elapsed:.2f}s")
    assert ok, violations


# -- 2. jaccard oracle equivalence ------------------------------------------------------------

PATHS = ["a.py", "b.py", "pkg/c.py"]
NAMES = ["f", "g", "K", "K.m", "K.n", "L"]


def random_plain(rng: random.Random) -> FaultLocationSet:
    locs = []
    for _ in range(rng.randint(0, 7)):
        kind = rng.choice("fnc")
        path = rng.choice(PATHS)
        if kind == "f":
            locs.append(FaultLocation.file_(path))
        elif kind == "n":
            locs.append(FaultLocation.function(path, rng.choice(NAMES)))
        else:
            locs.append(FaultLocation.class_(path, rng.choice(["K", "L", "M"])))
    return FaultLocationSet(locs)


def random_mixed(rng: random.Random) -> FaultLocationSet:
    plain = list(random_plain(rng))[:3]
    chunks = []
    for _ in range(rng.randint(0, 4)):
        s = rng.randint(1, 40)
        chunks.append(FaultLocation.chunk(rng.choice(PATHS[:2]), s, s + rng.randint(0, 7)))
    return FaultLocationSet(plain + chunks)


def greedy_pairs(a: list[tuple[str, int, int]], b: list[tuple[str, int, int]]) -> int:
    """Start-sorted greedy pairing written out independently."""
    taken = set()
    count = 0
    for fa, sa, ea in sorted(a, key=lambda w: (w[0], w[1])):
        for j, (fb, sb, eb) in sorted(enumerate(b), key=lambda kv: (kv[1][0], kv[1][1])):
            if j not in taken and fa == fb and sa <= eb and sb <= ea:
                taken.add(j)
                count += 1
                break
    return count


def oracle_jaccard(a: FaultLocationSet, b: FaultLocationSet, pairing) -> float:
    pa = {l.canonical for l in a if l.level is not Level.CHUNK}
    pb = {l.canonical for l in b if l.level is not Level.CHUNK}
    wa = [(l.file, *l.window) for l in a if l.level is Level.CHUNK]
    wb = [(l.file, *l.window) for l in b if l.level is Level.CHUNK]
    inter = len(pa & pb) + pairing(wa, wb)
    union = len(pa) + len(wa) + len(pb) + len(wb) - inter
    return 1.0 if union == 0 else inter / union


def test_criterion_2_jaccard_oracle():
    rng = random.Random(2)
    plain_bad = 0
    for _ in range(1000):
        a, b = random_plain(rng), random_plain(rng)
        if jaccard(a, b) != jaccard_plain(set(a.canonical()), set(b.canonical())):
            plain_bad += 1
    chunk_bad = 0
    for _ in range(200):
        a, b = random_mixed(rng), random_mixed(rng)
        got = jaccard(a, b)
        if got != oracle_jaccard(a, b, greedy_pairs) or got != oracle_jaccard(a, b, max_window_matching):
            chunk_bad += 1
    ok = plain_bad == 0 and chunk_bad == 0
    acceptance_line(2, ok, f"plain mismatches {plain_bad}/1000, chunk mismatches {chunk_bad}/200")
    assert ok


# -- 3. rejection-sampling truth table ---------------------------------------------------------

def test_criterion_3_rejection_truth_table(toy_snapshot, toy_task):
    rows = rejection_cases(toy_snapshot)
    wrong = [(name, rejection_decide(t, toy_task, toy_snapshot).value, want)
             for name, t, want in rows if rejection_decide(t, toy_task, toy_snapshot).value != want]
    ok = len(rows) == 9 and not wrong
    acceptance_line(3, ok, f"{9 - len(wrong)}/9 decisions match" + (f", wrong: {wrong}" if wrong else ""))
    assert ok


# -- 4. compressor soundness -------------------------------------------------------------------

CORPUS = [
    "textwrap.py", "shlex.py", "fnmatch.py", "bisect.py", "heapq.py", "colorsys.py", "difflib.py",
    "glob.py", "string.py", "copy.py", "dataclasses.py", "fractions.py", "statistics.py",
    "tokenize.py", "ast.py", "argparse.py", "csv.py", "calendar.py", "configparser.py",
    "gettext.py", "json/encoder.py", "json/decoder.py", "json/__init__.py", "email/utils.py",
    "html/parser.py", "http/cookies.py", "urllib/parse.py", "logging/handlers.py",
    "importlib/metadata/__init__.py", "collections/__init__.py",
]
SIZE_TARGET, SIZE_TOLERANCE = 0.40, 0.60


def def_names(tree: ast.AST) -> set[tuple[str, str]]:
    """(kind, dotted path) of every def/class at any depth, by a plain recursive walk."""
    found = set()

    def visit(node, prefix):
        for child in ast.iter_child_nodes(node):
            if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
                kind = "class" if isinstance(child, ast.ClassDef) else "def"
                name = prefix + child.name
                found.add((kind, name))
                visit(child, name + ".")
            else:
                visit(child, prefix)

    visit(tree, "")
    return found


def test_criterion_4_compressor_soundness():
    stdlib = Path(sysconfig.get_paths()["stdlib"])
    ratios, missing, leaks = [], [], []
    for rel in CORPUS:
        src = (stdlib / rel).read_text(encoding="utf-8")
        sk = compress_file(src, "python", path=rel)
        ratios.append(len(sk.text) / len(src))
        sk_tree = ast.parse(sk.text)
        if not def_names(ast.parse(src)) <= def_names(sk_tree):
            missing.append(rel)
        kept = set(def_headers(sk.text))
        if any(h not in kept for h in def_headers(src)):
            missing.append(rel)
        for _, body in _body_statements(sk_tree):
            if not all(_is_marker(s) or isinstance(s, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef))
                       for s in body):
                leaks.append(rel)
                break
    mean = sum(ratios) / len(ratios)
    ok = len(ratios) == 30 and not missing and not leaks and mean <= SIZE_TOLERANCE
    target = "met" if mean <= SIZE_TARGET else "missed"
    acceptance_line(4, ok, f"{len(ratios)} files, signatures kept in all but {len(set(missing))}, "
                           f"body leaks in {len(leaks)}, mean size {mean:.3f} "
                           f"(target {SIZE_TARGET:.2f} {target}, tolerance {SIZE_TOLERANCE:.2f})")
    assert ok, (missing, leaks)


# -- 5. patch round trip -----------------------------------------------------------------------

def random_patch(rng: random.Random, multi: bool):
    files, edits = {}, []
    for i in range(rng.randint(2, 3) if multi else 1):
        names = rng.sample(range(100), rng.randint(4, 25))
        lines = [f"v{n} = {rng.randint(0, 9)}" for n in names]
        path = f"pkg/mod{i}.py"
        files[path] = "\n".join(lines) + "\n"
        for line in rng.sample(lines, rng.randint(1, min(3, len(lines))) if multi else 1):
            name, value = line.split(" = ")
            edits.append(Edit(path, line + "\n", f"{name} = {int(value) + 10}\n"))
    return files, edits


def test_criterion_5_patch_round_trip():
    rng = random.Random(5)
    applied = double_rejected = 0
    for k in range(50):
        files, edits = random_patch(rng, multi=k % 2 == 1)
        snap = snapshot_from_files(files)
        diff = render_diff(EditPatch(tuple(edits)), snap).text
        with apply_patch(snap, diff) as tree:
            if all(e.replacement in (tree.root / e.file).read_text() for e in edits):
                applied += 1
            try:
                apply_patch(snap, diff, base=tree)
            except HunkMismatch:
                double_rejected += 1
    ok = applied == 50 and double_rejected == 50
    acceptance_line(5, ok, f"round trip {applied}/50, double apply rejected {double_rejected}/50")
    assert ok


# -- 6. similarity invariance ------------------------------------------------------------------

def test_criterion_6_similarity_invariance():
    rng = random.Random(6)
    perfect = 0
    for _ in range(20):
        before = rng.sample(STATEMENTS, rng.randint(2, 5))
        after = list(before)
        i = rng.randrange(len(after))
        after[i] = rng.choice([s for s in STATEMENTS if s != before[i]])
        ref = normalize_patch(patch(clean(before), clean(after)))
        variant = normalize_patch(patch(clean(before), noisy(after, rng)))
        ng = ngram_similarity(variant, ref)
        cb = codebleu(variant, ref).codebleu
        perfect += abs(ng - 1.0) <= 1e-9 and abs(cb - 1.0) <= 1e-9
    renamed_ok = 0
    programs = [
        "def f(items):\n    acc = 0\n    for item in items:\n        acc += item\n    return acc\n",
        "def g(a, b):\n    c = a * b\n    if c > a:\n        c = c - b\n    return c\n",
        "def h(text):\n    words = text.split()\n    n = len(words)\n    return n\n",
        "def k(xs):\n    out = []\n    for x in xs:\n        out.append(x + 1)\n    return out\n",
        "def m(d, key):\n    value = d.get(key)\n    d[key] = value\n    return value\n",
    ]
    for prog in programs:
        names = sorted({n.id for n in ast.walk(ast.parse(prog)) if isinstance(n, ast.Name)}
                       | {a.arg for a in ast.walk(ast.parse(prog)) if isinstance(a, ast.arg)})
        renamed = rename(prog, {n: f"{n}_renamed" for n in names if n not in ("len",)})
        s = codebleu(patch("def f():\n    pass\n", renamed), patch("def f():\n    pass\n", prog))
        renamed_ok += s.codebleu_components[2] == 1.0 and s.codebleu_components[0] < 1.0
    ok = perfect == 20 and renamed_ok == len(programs)
    acceptance_line(6, ok, f"comment/whitespace pairs at 1.0: {perfect}/20, "
                           f"renamed pairs with AST match 1.0: {renamed_ok}/{len(programs)}")
    assert ok


# -- 7. filter fidelity ------------------------------------------------------------------------

def test_criterion_7_filter_fidelity():
    right = sum(filter_issue(i).failed_rules == want for _, i, want in ISSUE_CASES)
    right += sum(filter_pr(p).failed_rules == want for _, p, want in PR_CASES)
    total = len(ISSUE_CASES) + len(PR_CASES)
    ok = total == 40 and right == 40
    acceptance_line(7, ok, f"{right}/{total} exact filter decisions")
    assert ok


# -- 8. pass@k and monotonicity ------------------------------------------------------------------

def test_criterion_8_pass_at_k_and_monotonicity(tmp_path, capsys):
    rng = random.Random(8)
    universe = [f"inst-{i}" for i in range(12)]
    runs, dirs = [], []
    for r in range(3):
        solved = {i for i in universe if rng.random() < 0.35}
        runs.append(solved)
        d = tmp_path / f"run{r}"
        d.mkdir()
        d.joinpath("metrics.jsonl").write_text("".join(
            json.dumps({"instance_id": i, "resolved": i in solved, "hits": None}) + "\n" for i in universe))
        dirs.append(str(d))
    assert main(["report", *dirs, "--format", "json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    rate, uniques = union_solves(runs, set(universe))
    pass_ok = rep["pass_at_k"] == rate and rep["unique_solves"] == uniques

    evaluations = 0
    monotone = True
    for _ in range(200):
        flags = []
        for _ in range(rng.randint(1, 10)):
            pred, truth = random_mixed(rng), random_mixed(rng)
            if len(truth):
                flags.append(hit_flags(pred, truth))
        both = [f for f in flags if f["function"]["full_recall"] is not None]
        if not both:
            continue
        evaluations += 1
        acc = localization_accuracy(both)
        for mode in ("full_recall", "any_overlap"):
            monotone &= acc.rate("file", mode) >= acc.rate("function", mode)
    ok = pass_ok and monotone and evaluations > 100
    acceptance_line(8, ok, f"pass@3 {rep['pass_at_k']:.4f} vs oracle {rate:.4f}, uniques {rep['unique_solves']} "
                           f"vs {uniques}; file >= function on {evaluations} evaluations: {monotone}")
    assert ok


# -- 9. end-to-end determinism -------------------------------------------------------------------

def strip_timestamps(path: Path) -> list[dict]:
    return [dict(json.loads(l), timestamp=None) for l in path.read_text().splitlines()]


def test_criterion_9_end_to_end_determinism(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = main(["solve", str(TOY_TASK), str(TOY_REPO), "--fixture", str(TOY_SCRIPT), "--out", str(out)])
        assert code == EXIT_OK
        outs.append(out)
    traj = [o / "toy__resize-1.trajectory.jsonl" for o in outs]
    same_traj = strip_timestamps(traj[0]) == strip_timestamps(traj[1])
    patches = [(o / "toy__resize-1.patch").read_bytes() for o in outs]
    same_patch = patches[0] == patches[1]
    resolved = all(json.loads((o / "metrics.jsonl").read_text())["resolved"] for o in outs)
    ok = same_traj and same_patch and resolved
    acceptance_line(9, ok, f"trajectories identical: {same_traj}, patches identical: {same_patch}, "
                           f"resolution check passed: {resolved}")
    assert ok


# -- 10. live-backend smoke against a stub --------------------------------------------------------

TRAJECTORY_KEYS = {"instance_id", "stage", "step_index", "observation", "cot", "action",
                   "action_result", "timestamp"}


def scripted_chat():
    """Answer the n-th model turn with the n-th response of the toy script."""
    responses = [e["response"] for e in load_script()]
    return lambda messages: responses[(len(messages) - 2) // 2]


def schema_valid(rows: list[dict]) -> bool:
    if not rows or any(set(r) < TRAJECTORY_KEYS for r in rows):
        return False
    order = [STAGES.index(r["stage"]) for r in rows]
    return order == sorted(order) and set(order) == {0, 1, 2}


def test_criterion_10_stub_chat_server(tmp_path):
    with StubServer(chat_handler(scripted_chat())) as srv:
        out = tmp_path / "live"
        code = main(["solve", str(TOY_TASK), str(TOY_REPO), "--backend", "http",
                     "--endpoint", srv.url + "/v1/chat/completions", "--out", str(out)])
    rows = [json.loads(l) for l in (out / "toy__resize-1.trajectory.jsonl").read_text().splitlines()]
    smoke_ok = code == EXIT_OK and schema_valid(rows)

    with StubServer(chat_handler(scripted_chat(), fail_first=2)) as srv:
        out2 = tmp_path / "flaky"
        code2 = main(["solve", str(TOY_TASK), str(TOY_REPO), "--backend", "http", "--endpoint", srv.url,
                      "--http-backoff", "0", "--out", str(out2)])
        requests_seen = len(srv.requests)
    retries = json.loads((out2 / "summary.json").read_text())["backend_retries"]
    logged = (out2 / "run.log").read_text().count("retry ")
    retry_ok = code2 == EXIT_OK and retries == 2 and logged == 2 and requests_seen == 6 + 2
    ok = smoke_ok and retry_ok
    acceptance_line(10, ok, f"stub run exit {code} with {len(rows)} schema-valid steps; "
                            f"fail-twice stub: exit {code2}, retries {retries}, logged {logged}")
    assert ok
