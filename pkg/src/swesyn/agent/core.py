"""Three-stage trajectory loop: understand the repository, localize, patch."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Iterable, Mapping

from ..code_search import (SEARCH_APIS, CodeIndex, EntityRecord, SearchError, SearchQuery,
                           build_index, format_results, search)
from ..metrics.locations import Derivation, FaultLocation, FaultLocationSet, Level
from ..patch_engine import (APPLY_CONFLICT, MALFORMED_EDIT_FORMAT, SNIPPET_NOT_FOUND, SYNTAX_ERROR,
                            ApplyError, Edit, EditPatch, PatchAttempt, PatchError, PatchResult,
                            apply_patch, classify_patch_error, lint_check, render_diff)
from ..repo_model import RepoSnapshot, compress_file, render_tree
from .actions import Action, ParseDiagnostic, parse_reply
from .backends import BackendError, CallKey, ModelBackend, complete

REPO_UNDERSTANDING = "repo_understanding"
FAULT_LOCALIZATION = "fault_localization"
PATCH_GENERATION = "patch_generation"
STAGES = (REPO_UNDERSTANDING, FAULT_LOCALIZATION, PATCH_GENERATION)

PATCH_PRODUCED = "patch_produced"
LOCALIZATION_ONLY = "localization_only"
FAILED = "failed"

ENTITY_CODE_LINES = 200

# feedback category -> PatchAttempt status
ATTEMPT_STATUS = {MALFORMED_EDIT_FORMAT: "format_error", SNIPPET_NOT_FOUND: "format_error",
                  SYNTAX_ERROR: "syntax_error", APPLY_CONFLICT: "apply_error"}


@lru_cache(maxsize=None)
def template(name: str) -> Template:
    text = resources.files("swesyn").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render(name: str, **fields) -> str:
    return template(name).substitute(**fields)


# -- domain types ---------------------------------------------------------------------

@dataclass(frozen=True)
class AgentConfig:
    relevant_files_n: int = 5
    localization_iteration_limit: int = 5
    patch_retry_limit: int = 3
    temperature: float = 0.3
    max_tokens: int = 1024

    def __post_init__(self):
        for name in ("relevant_files_n", "localization_iteration_limit", "patch_retry_limit",
                     "max_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")


@dataclass(frozen=True)
class TaskInstance:
    instance_id: str
    problem_statement: str
    repo: str = ""
    base_commit: str | None = None
    gold_patch: str | None = None
    resolution_check: str | list[str] | None = None
    created_at: str | None = None

    def __post_init__(self):
        if not self.instance_id:
            raise ValueError("instance_id must be non-empty")
        if not self.problem_statement or not self.problem_statement.strip():
            raise ValueError(f"{self.instance_id}: problem_statement must be non-empty")

    @classmethod
    def from_record(cls, rec: Mapping) -> "TaskInstance":
        return cls(instance_id=rec["instance_id"], problem_statement=rec.get("problem_statement", ""),
                   repo=rec.get("repo", ""), base_commit=rec.get("base_commit"),
                   gold_patch=rec.get("patch") or None, resolution_check=rec.get("resolution_check"),
                   created_at=rec.get("created_at"))

    def to_record(self) -> dict:
        return {"instance_id": self.instance_id, "repo": self.repo, "base_commit": self.base_commit,
                "problem_statement": self.problem_statement, "patch": self.gold_patch,
                "resolution_check": self.resolution_check, "created_at": self.created_at}


@dataclass(frozen=True)
class TrajectoryStep:
    stage: str
    step_index: int
    observation: str
    cot: str
    action: dict | None
    action_result: str
    response: str = ""
    timestamp: str = ""

    def to_record(self, instance_id: str) -> dict:
        return {"instance_id": instance_id, "stage": self.stage, "step_index": self.step_index,
                "observation": self.observation, "cot": self.cot, "action": self.action,
                "action_result": self.action_result, "response": self.response,
                "timestamp": self.timestamp}

    @classmethod
    def from_record(cls, rec: Mapping) -> "TrajectoryStep":
        return cls(rec["stage"], int(rec["step_index"]), rec["observation"], rec["cot"],
                   rec.get("action"), rec["action_result"], rec.get("response", ""),
                   rec.get("timestamp", ""))


@dataclass
class UnderstandingResult:
    relevant_files: list[str] = field(default_factory=list)
    relevant_entities: list[dict] = field(default_factory=list)
    plan: str = ""


@dataclass
class Trajectory:
    instance_id: str
    steps: list[TrajectoryStep] = field(default_factory=list)
    outcome: str = FAILED
    final_patch: str | None = None
    predicted_locations: FaultLocationSet = field(default_factory=FaultLocationSet)
    understanding: UnderstandingResult | None = None
    localization_degraded: bool = False
    patch_result: PatchResult | None = None

    def steps_in(self, stage: str) -> list[TrajectoryStep]:
        return [s for s in self.steps if s.stage == stage]

    def without_stage(self, stage: str) -> "Trajectory":
        return replace(self, steps=[s for s in self.steps if s.stage != stage])

    def step_records(self) -> list[dict]:
        return [s.to_record(self.instance_id) for s in self.steps]


def write_trajectory(trajectory: Trajectory, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trajectory.step_records():
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_trajectory_steps(path: str | os.PathLike) -> list[TrajectoryStep]:
    with open(path, encoding="utf-8") as fh:
        return [TrajectoryStep.from_record(json.loads(line)) for line in fh if line.strip()]


# -- conversation plumbing --------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class _Conversation:
    """Message history plus the step log; every backend turn becomes one step."""

    def __init__(self, task: TaskInstance, config: AgentConfig, backend: ModelBackend,
                 steps: list[TrajectoryStep]):
        self.task = task
        self.config = config
        self.backend = backend
        self.steps = steps
        self.messages: list[dict] = [{"role": "system", "content": render("system")}]

    def ask(self, stage: str, step_index: int, observation: str,
            expected: Iterable[str]) -> tuple[str, Action | None, ParseDiagnostic | None, str]:
        self.messages.append({"role": "user", "content": observation})
        key = CallKey(self.task.instance_id, stage, step_index)
        response = complete(self.backend, self.messages, self.config.temperature,
                            self.config.max_tokens, key)
        self.messages.append({"role": "assistant", "content": response})
        reply = parse_reply(response, expected)
        return response, reply.action, reply.diagnostic, reply.cot

    def record(self, stage: str, step_index: int, observation: str, cot: str,
               action: Action | None, result: str, response: str) -> None:
        self.steps.append(TrajectoryStep(stage, step_index, observation, cot,
                                         action.to_dict() if action else None, result, response, _now()))


def _diagnostic_result(diag: ParseDiagnostic) -> str:
    return f"Your reply could not be used ({diag}).\n"


# -- stage 1: repository understanding ---------------------------------------------------

def _ask_with_retry(conv: _Conversation, stage: str, index: int, observation: str, expected: str,
                    handle) -> tuple[int, str, object]:
    """One understanding turn, retried once on an unusable reply. Returns (next index, last result, value)."""
    for attempt in range(2):
        response, action, diag, cot = conv.ask(stage, index, observation, (expected,))
        if action is not None:
            result, value = handle(action)
            conv.record(stage, index, observation, cot, action, result, response)
            return index + 1, result, value
        result = _diagnostic_result(diag)
        conv.record(stage, index, observation, cot, None, result, response)
        index += 1
        observation = render("retry", previous_result=result, expected=expected)
    return index, result, None


def _entity_label(entry: Mapping) -> str:
    parts = [entry["file"]]
    name = ".".join(p for p in (entry.get("class"), entry.get("function")) if p)
    if name:
        parts.append(name)
    if "start" in entry:
        parts.append(f"[{entry['start']}-{entry['end']}]")
    return "::".join(parts)


def _resolve_entity(index: CodeIndex, entry: Mapping) -> list[EntityRecord] | None:
    """Index records an entity pick refers to; None when it names something absent."""
    path, cls, func = entry["file"], entry.get("class"), entry.get("function")
    if path not in index.snapshot.files:
        return None
    in_file = index.in_file(path)
    if func:
        matches = [r for r in in_file if r.kind in ("function", "method")
                   and (r.qualname == func or r.name == func.rsplit(".", 1)[-1])]
        if cls:
            matches = [r for r in matches if r.parent is not None
                       and (r.parent == cls or r.parent.rsplit(".", 1)[-1] == cls)]
        return matches or None
    if cls:
        matches = [r for r in in_file if r.kind == "class" and (r.qualname == cls or r.name == cls)]
        return matches or None
    return []


def stage_repo_understanding(task: TaskInstance, snapshot: RepoSnapshot, config: AgentConfig,
                             backend: ModelBackend, index: CodeIndex | None = None,
                             _conv: _Conversation | None = None
                             ) -> tuple[UnderstandingResult, list[TrajectoryStep]]:
    index = index or build_index(snapshot)
    conv = _conv or _Conversation(task, config, backend, [])
    first = len(conv.steps)
    result = UnderstandingResult()
    tree = render_tree(snapshot, source_only=True).text

    def take_files(action: Action):
        kept, notes = [], []
        for path in action.payload:
            if path not in snapshot.files:
                notes.append(f"File not found in repository: {path}")
            elif path not in kept:
                kept.append(path)
        if len(kept) > config.relevant_files_n:
            notes.append(f"Only the first {config.relevant_files_n} files were kept.")
            kept = kept[:config.relevant_files_n]
        text = "Selected files: " + (", ".join(kept) if kept else "(none)") + "\n"
        return text + "".join(n + "\n" for n in notes), kept

    def take_entities(action: Action):
        kept, notes = [], []
        for entry in action.payload:
            if _resolve_entity(index, entry) is None:
                notes.append(f"Entity not found in repository: {_entity_label(entry)}")
            else:
                kept.append({k: entry.get(k) for k in ("file", "class", "function")})
        text = "Selected entities: " + (", ".join(_entity_label(e) for e in kept) or "(none)") + "\n"
        return text + "".join(n + "\n" for n in notes), kept

    def take_plan(action: Action):
        return "Plan recorded.\n", action.payload

    step = 0
    obs = render("understand_files", issue=task.problem_statement, tree=tree, n=config.relevant_files_n)
    step, last, files = _ask_with_retry(conv, REPO_UNDERSTANDING, step, obs, "select_files", take_files)
    result.relevant_files = files or []

    skeletons = []
    for path in result.relevant_files:
        rec = snapshot.files[path]
        sk = compress_file(snapshot.text(path), rec.language or "", path=path)
        skeletons.append(f"## {path}\n{sk.text}")
    obs = render("understand_entities", previous_result=last,
                 skeletons="\n".join(skeletons) if skeletons else "(no files selected)\n")
    step, last, entities = _ask_with_retry(conv, REPO_UNDERSTANDING, step, obs, "select_entities",
                                           take_entities)
    result.relevant_entities = entities or []

    obs = render("understand_plan", previous_result=last)
    step, last, plan = _ask_with_retry(conv, REPO_UNDERSTANDING, step, obs, "plan", take_plan)
    result.plan = plan or ""
    return result, conv.steps[first:]


# -- stage 2: fault localization -----------------------------------------------------------

def _innermost_class(index: CodeIndex, rec: EntityRecord) -> EntityRecord | None:
    best = None
    for r in index.in_file(rec.file):
        if r.kind == "class" and r is not rec and r.start <= rec.start and rec.end <= r.end:
            if best is None or r.end - r.start <= best.end - best.start:
                best = r
    return best


def _locations_for(index: CodeIndex, rec: EntityRecord) -> list[FaultLocation]:
    locs = [FaultLocation.file_(rec.file)]
    if rec.kind == "class":
        locs.append(FaultLocation.class_(rec.file, rec.qualname))
        return locs
    locs.append(FaultLocation.function(rec.file, rec.qualname))
    cls = _innermost_class(index, rec)
    if cls is not None:
        locs.append(FaultLocation.class_(rec.file, cls.qualname))
    return locs


def _terminal_locations(index: CodeIndex, content: list[dict]) -> tuple[list[FaultLocation], list[str]]:
    locs, notes = [], []
    for entry in content:
        path = entry["file"]
        if path not in index.snapshot.files:
            notes.append(f"Dropped location, file not found: {_entity_label(entry)}")
            continue
        if "start" in entry:
            n = max(len(index.lines(path)), 1)
            s, e = entry["start"], entry["end"]
            if e < 1 or s > n:
                notes.append(f"Dropped location, lines outside the file: {_entity_label(entry)}")
                continue
            locs.append(FaultLocation.file_(path))
            locs.append(FaultLocation.chunk(path, max(1, s), min(n, e)))
            continue
        recs = _resolve_entity(index, entry)
        if recs is None:
            notes.append(f"Dropped location, entity not found: {_entity_label(entry)}")
            continue
        locs.append(FaultLocation.file_(path))
        for rec in recs:
            locs.extend(_locations_for(index, rec))
    return locs, notes


_IDENT = re.compile(r"[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*")


def _mentioned_locations(index: CodeIndex, text: str) -> list[FaultLocation]:
    """Entities and files named in free text (the degraded localization fallback)."""
    locs = []
    words = set(_IDENT.findall(text))
    paths = [p for p in index.snapshot.source_paths() if p in text]
    locs.extend(FaultLocation.file_(p) for p in paths)
    for rec in index.all_entities():
        if rec.qualname in words or (rec.name in words and not rec.name.startswith("__")):
            locs.extend(_locations_for(index, rec))
    return locs


def _format_entities(index: CodeIndex, prior: UnderstandingResult) -> str:
    if not prior.relevant_entities:
        return "(none selected)\n"
    lines = []
    for entry in prior.relevant_entities:
        recs = _resolve_entity(index, entry)
        if not recs:
            lines.append(f"- {_entity_label(entry)}")
        for rec in recs or []:
            lines.append(f"- {rec.file}:{rec.start}-{rec.end} {rec.kind} {rec.qualname}: "
                         f"{rec.signature.strip().splitlines()[0]}")
    return "\n".join(lines) + "\n"


def stage_fault_localization(task: TaskInstance, snapshot: RepoSnapshot, index: CodeIndex,
                             prior: UnderstandingResult, config: AgentConfig, backend: ModelBackend,
                             previous_result: str = "", _conv: _Conversation | None = None
                             ) -> tuple[FaultLocationSet, list[TrajectoryStep], bool]:
    """Returns (locations, steps, degraded)."""
    conv = _conv or _Conversation(task, config, backend, [])
    first = len(conv.steps)
    limit = config.localization_iteration_limit
    expected = ("locations",) + tuple(sorted(SEARCH_APIS))
    obs = render("localize_start", previous_result=previous_result, issue=task.problem_statement,
                 plan=prior.plan or "(no plan)", entities=_format_entities(index, prior),
                 remaining=limit)
    last_cot = ""
    for i in range(limit):
        response, action, diag, cot = conv.ask(FAULT_LOCALIZATION, i, obs, expected)
        last_cot = cot
        if action is None:
            result = _diagnostic_result(diag)
        elif action.is_search:
            query = SearchQuery(action.name, tuple(action.payload))
            try:
                result = format_results(query, search(index, query))
            except SearchError as exc:
                result = f"Search failed: {exc}\n"
        else:
            locs, notes = _terminal_locations(index, action.payload)
            found = FaultLocationSet(locs, Derivation.FROM_AGENT_TERMINAL)
            result = ("Fault locations accepted: " + (", ".join(found.canonical()) or "(none)") + "\n"
                      + "".join(n + "\n" for n in notes))
            conv.record(FAULT_LOCALIZATION, i, obs, cot, action, result, response)
            return found, conv.steps[first:], False
        conv.record(FAULT_LOCALIZATION, i, obs, cot, action, result, response)
        obs = render("localize_step", previous_result=result, remaining=limit - i - 1)
    found = FaultLocationSet(_mentioned_locations(index, last_cot), Derivation.FROM_AGENT_TERMINAL)
    return found, conv.steps[first:], True


# -- stage 3: patch generation --------------------------------------------------------------

def _location_code(index: CodeIndex, locations: FaultLocationSet) -> str:
    snap = index.snapshot
    blocks = []
    named = {l.file for l in locations if l.level is not Level.FILE}
    for loc in locations:
        lines = index.lines(loc.file) if loc.file in snap.files else []
        if loc.level is Level.CHUNK:
            s, e = loc.window
        elif loc.level is Level.FUNCTION:
            recs = [r for r in index.in_file(loc.file) if r.qualname == loc.qualified_name]
            if not recs:
                continue
            s, e = recs[0].start, recs[0].end
        elif loc.level is Level.FILE and loc.file not in named and loc.file in snap.files:
            rec = snap.files[loc.file]
            sk = compress_file(snap.text(loc.file), rec.language or "", path=loc.file)
            blocks.append(f"## {loc.file} (skeleton)\n{sk.text}")
            continue
        else:
            continue
        e = min(e, s + ENTITY_CODE_LINES - 1)
        body = "".join(lines[s - 1:e])
        blocks.append(f"## {loc.file}:{s}-{e}\n{body}")
    return "\n".join(blocks) + "\n" if blocks else "(no locations identified)\n"


def _attempt(snapshot: RepoSnapshot, action: Action | None, diag: ParseDiagnostic | None):
    """(diff, None) on success, (None, failure) otherwise."""
    if action is None:
        return None, diag
    patch = EditPatch(tuple(Edit(e["file"], e["original"], e["replacement"])
                            for e in (action.payload if isinstance(action.payload, list)
                                      else [action.payload])))
    try:
        rendered = render_diff(patch, snapshot)
    except PatchError as exc:
        return None, exc
    for path, text in sorted(rendered.post_images.items()):
        problems = lint_check(text, snapshot.files[path].language or "")
        if problems:
            return None, problems
    try:
        tree = apply_patch(snapshot, rendered.text)
    except ApplyError as exc:
        return None, exc
    tree.cleanup()
    return rendered.text, None


def stage_patch_generation(task: TaskInstance, snapshot: RepoSnapshot, locations: FaultLocationSet,
                           config: AgentConfig, backend: ModelBackend, index: CodeIndex | None = None,
                           plan: str = "", previous_result: str = "",
                           _conv: _Conversation | None = None
                           ) -> tuple[PatchResult, list[TrajectoryStep]]:
    index = index or build_index(snapshot)
    conv = _conv or _Conversation(task, config, backend, [])
    first = len(conv.steps)
    limit = config.patch_retry_limit
    attempts: list[PatchAttempt] = []
    obs = render("patch_start", previous_result=previous_result, issue=task.problem_statement,
                 plan=plan or "(no plan)", code=_location_code(index, locations))
    for i in range(limit):
        response, action, diag, cot = conv.ask(PATCH_GENERATION, i, obs, ("edit",))
        diff, failure = _attempt(snapshot, action, diag)
        if diff is not None:
            result = "Patch applied cleanly.\n" + diff
            conv.record(PATCH_GENERATION, i, obs, cot, action, result, response)
            attempts.append(PatchAttempt(i, "applied"))
            return PatchResult("applied", diff, attempts), conv.steps[first:]
        feedback = classify_patch_error(failure)
        result = f"Patch rejected [{feedback.category}]\n{feedback.text}\n"
        conv.record(PATCH_GENERATION, i, obs, cot, action, result, response)
        attempts.append(PatchAttempt(i, ATTEMPT_STATUS[feedback.category],
                                     f"[{feedback.category}] {feedback.text}"))
        obs = render("patch_retry", previous_result=result, attempt=i + 2, limit=limit)
    return PatchResult("exhausted", None, attempts), conv.steps[first:]


# -- whole task ------------------------------------------------------------------------------

def run_task(task: TaskInstance, snapshot: RepoSnapshot, config: AgentConfig,
             backend: ModelBackend, index: CodeIndex | None = None) -> Trajectory:
    """Run all three stages. Only backend failures raise; they carry the partial trajectory."""
    index = index or build_index(snapshot)
    traj = Trajectory(task.instance_id)
    conv = _Conversation(task, config, backend, traj.steps)
    try:
        prior, _ = stage_repo_understanding(task, snapshot, config, backend, index, _conv=conv)
        traj.understanding = prior
        last = conv.steps[-1].action_result if conv.steps else ""
        locs, _, degraded = stage_fault_localization(task, snapshot, index, prior, config, backend,
                                                     previous_result=last, _conv=conv)
        traj.predicted_locations = locs
        traj.localization_degraded = degraded
        last = conv.steps[-1].action_result if conv.steps else ""
        result, _ = stage_patch_generation(task, snapshot, locs, config, backend, index,
                                           plan=prior.plan, previous_result=last, _conv=conv)
        traj.patch_result = result
    except BackendError as exc:
        traj.outcome = FAILED
        exc.partial = traj
        raise
    if result.diff:
        traj.final_patch = result.diff
        traj.outcome = PATCH_PRODUCED
    elif len(traj.predicted_locations):
        traj.outcome = LOCALIZATION_ONLY
    else:
        traj.outcome = FAILED
    return traj
