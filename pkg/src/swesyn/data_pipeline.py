"""Issue/PR mining, heuristic filters, batch assembly and training-record emission."""

from __future__ import annotations

import json
import logging
import os
import re
import string
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Iterable, Mapping, Sequence

import requests

from .agent.core import PATCH_GENERATION, TaskInstance, Trajectory, TrajectoryStep
from .diffparse import CorruptDiff, parse_unified_diff
from .metrics.locations import UnresolvableDiff
from .metrics.sampling import Decision, MissingGoldPatch, SamplerConfig, rejection_decide
from .repo_model import SOURCE_EXTENSIONS, RepoSnapshot

log = logging.getLogger(__name__)

MIN_BODY_CHARS = 20
MAX_HYPERLINKS = 3
MIN_ENGLISH_RATIO = 0.8
MIN_CODE_FILES, MAX_CODE_FILES = 1, 5
MIN_STARS = 50
TOKEN_ENV = "GITHUB_TOKEN"

# -- filters ----------------------------------------------------------------------------

_ENGLISH_CHARS = frozenset(string.ascii_letters + string.digits + string.punctuation)


@dataclass(frozen=True)
class RawIssue:
    id: int
    title: str
    body: str
    created_at: str | None = None
    state: str = "closed"

    @property
    def hyperlink_count(self) -> int:
        return hyperlink_count(self.body)


@dataclass(frozen=True)
class RawPullRequest:
    id: int
    linked_issue_ids: tuple[int, ...]
    merged: bool
    merged_at: str | None
    changed_files: tuple[tuple[str, str], ...]  # (path, added | modified | deleted | renamed)
    diff: str
    base_commit: str | None
    title: str = ""
    body: str = ""


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    failed_rules: tuple[str, ...]

    @classmethod
    def of(cls, failed: Iterable[str]) -> "FilterDecision":
        failed = tuple(failed)
        return cls(not failed, failed)


def hyperlink_count(text: str) -> int:
    return text.count("http://") + text.count("https://")


def english_ratio(text: str) -> float:
    chars = [c for c in text if not c.isspace()]
    if not chars:
        return 0.0
    return sum(c in _ENGLISH_CHARS for c in chars) / len(chars)


def filter_issue(issue: RawIssue) -> FilterDecision:
    body = issue.body or ""
    failed = []
    if len(body.strip()) < MIN_BODY_CHARS:
        failed.append("R1")
    if hyperlink_count(body) > MAX_HYPERLINKS:
        failed.append("R2")
    if english_ratio(body) < MIN_ENGLISH_RATIO:
        failed.append("R3")
    return FilterDecision.of(failed)


DEFAULT_TEST_DIRS = ("tests", "test")


def is_test_path(path: str, test_dirs: Sequence[str] = DEFAULT_TEST_DIRS) -> bool:
    p = PurePosixPath(path)
    if any(part in test_dirs for part in p.parts[:-1]):
        return True
    stem = p.stem
    return stem.startswith("test_") or stem.endswith("_test")


def filter_pr(pr: RawPullRequest, source_extensions: Iterable[str] = tuple(SOURCE_EXTENSIONS),
              test_dirs: Sequence[str] = DEFAULT_TEST_DIRS) -> FilterDecision:
    exts = tuple(source_extensions)
    code = [p for p, _ in pr.changed_files if PurePosixPath(p).suffix in exts]
    failed = []
    if not MIN_CODE_FILES <= len(code) <= MAX_CODE_FILES:
        failed.append("P1")
    if code and all(is_test_path(p, test_dirs) for p in code):
        failed.append("P2")
    return FilterDecision.of(failed)


def changed_files_from_diff(diff: str) -> tuple[tuple[str, str], ...]:
    out = []
    for fp in parse_unified_diff(diff):
        if fp.is_new:
            kind = "added"
        elif fp.is_deleted:
            kind = "deleted"
        elif fp.old_path != fp.new_path:
            kind = "renamed"
        else:
            kind = "modified"
        out.append((fp.path, kind))
    return tuple(out)


def split_test_changes(diff: str, test_dirs: Sequence[str] = DEFAULT_TEST_DIRS) -> tuple[str, str]:
    """Split a diff into (code part, test part) by file."""
    blocks = re.split(r"(?m)^(?=diff --git )", diff)
    code, tests = [], []
    for block in blocks:
        if not block.strip():
            continue
        m = re.match(r"diff --git a/(\S+) b/(\S+)", block)
        path = m.group(2) if m else ""
        (tests if path and is_test_path(path, test_dirs) else code).append(block)
    return "".join(code), "".join(tests)


# -- fetching ---------------------------------------------------------------------------

class PipelineError(Exception):
    pass


class AuthFailure(PipelineError):
    pass


class RateLimited(PipelineError):
    pass


class RepoDenylisted(PipelineError):
    pass


class TooFewStars(PipelineError):
    def __init__(self, repo: str, stars: int):
        super().__init__(f"{repo} has {stars} stars (< {MIN_STARS})")
        self.stars = stars


class UnwritablePath(PipelineError):
    pass


@dataclass(frozen=True)
class Candidate:
    repo: str
    issue: RawIssue
    pr: RawPullRequest

    @property
    def base_commit(self) -> str | None:
        return self.pr.base_commit

    @property
    def instance_id(self) -> str:
        return f"{self.repo.replace('/', '__')}-{self.pr.id}"

    def to_task_record(self) -> dict:
        code, tests = split_test_changes(self.pr.diff)
        return {"instance_id": self.instance_id, "repo": self.repo, "base_commit": self.base_commit,
                "problem_statement": f"{self.issue.title}\n{self.issue.body}".strip(),
                "patch": code, "test_patch": tests, "created_at": self.pr.merged_at}


_LINK_RE = re.compile(r"\b(?:close[sd]?|fix(?:e[sd])?|resolve[sd]?)\s+#(\d+)", re.IGNORECASE)


def linked_issue_ids(text: str) -> tuple[int, ...]:
    seen = []
    for m in _LINK_RE.finditer(text or ""):
        n = int(m.group(1))
        if n not in seen:
            seen.append(n)
    return tuple(seen)


@dataclass
class ClientConfig:
    base_url: str = "https://api.github.com"
    token: str | None = None
    cache_dir: str | os.PathLike | None = None
    denylist: frozenset[str] = frozenset()
    min_stars: int = MIN_STARS
    max_retries: int = 3
    backoff: float = 2.0
    per_page: int = 100
    max_pages: int = 50
    timeout: float = 30.0


class GitHubClient:
    """Read-only REST client with retry on rate limits and a per-PR disk cache."""

    def __init__(self, config: ClientConfig, session: requests.Session | None = None):
        self.config = config
        self.token = config.token if config.token is not None else os.environ.get(TOKEN_ENV)
        self.session = session or requests.Session()
        self.stats = {"requests": 0, "retries": 0, "cache_hits": 0}
        self._lock = threading.Lock()

    def _bump(self, key: str) -> None:
        with self._lock:
            self.stats[key] += 1

    def get(self, path: str, params: Mapping | None = None, accept: str = "application/vnd.github+json"):
        headers = {"Accept": accept}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        url = self.config.base_url.rstrip("/") + path
        attempt = 0
        while True:
            self._bump("requests")
            try:
                resp = self.session.get(url, params=params, headers=headers, timeout=self.config.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                problem, wait = str(exc), None
            else:
                if resp.status_code == 401:
                    raise AuthFailure(f"GET {path}: HTTP 401")
                limited = resp.status_code == 429 or (
                    resp.status_code == 403 and resp.headers.get("X-RateLimit-Remaining") == "0")
                if resp.status_code == 403 and not limited:
                    raise AuthFailure(f"GET {path}: HTTP 403")
                if not limited and resp.status_code < 500:
                    if resp.status_code >= 400:
                        raise PipelineError(f"GET {path}: HTTP {resp.status_code}")
                    return resp
                problem = f"HTTP {resp.status_code}"
                wait = resp.headers.get("Retry-After")
                if attempt >= self.config.max_retries and limited:
                    raise RateLimited(f"GET {path}: rate limited after {attempt} retries")
            if attempt >= self.config.max_retries:
                raise PipelineError(f"GET {path}: {problem} after {attempt} retries")
            attempt += 1
            self._bump("retries")
            delay = float(wait) if wait else self.config.backoff * 2 ** (attempt - 1)
            log.warning("GET %s failed (%s); retry %d in %.1fs", path, problem, attempt, delay)
            if delay:
                time.sleep(delay)

    def json(self, path: str, params: Mapping | None = None):
        return self.get(path, params).json()


# -- cache ------------------------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _issue_to_json(issue: RawIssue) -> dict:
    return {"id": issue.id, "title": issue.title, "body": issue.body,
            "created_at": issue.created_at, "state": issue.state}


def _pr_to_json(pr: RawPullRequest) -> dict:
    return {"id": pr.id, "linked_issue_ids": list(pr.linked_issue_ids), "merged": pr.merged,
            "merged_at": pr.merged_at, "changed_files": [list(c) for c in pr.changed_files],
            "base_commit": pr.base_commit, "title": pr.title, "body": pr.body}


def _repo_cache(config: ClientConfig, repo: str) -> Path | None:
    return Path(config.cache_dir) / repo if config.cache_dir else None


def _store(root: Path, cand: Candidate) -> None:
    d = root / str(cand.pr.id)
    _atomic_write(d / "issue.json", json.dumps(_issue_to_json(cand.issue), sort_keys=True))
    _atomic_write(d / "pr.json", json.dumps(_pr_to_json(cand.pr), sort_keys=True))
    _atomic_write(d / "diff.patch", cand.pr.diff)


def _load(root: Path, repo: str, pr_id: int) -> Candidate:
    d = root / str(pr_id)
    issue = json.loads((d / "issue.json").read_text(encoding="utf-8"))
    pr = json.loads((d / "pr.json").read_text(encoding="utf-8"))
    diff = (d / "diff.patch").read_text(encoding="utf-8")
    return Candidate(repo, RawIssue(**issue), RawPullRequest(
        pr["id"], tuple(pr["linked_issue_ids"]), pr["merged"], pr["merged_at"],
        tuple(tuple(c) for c in pr["changed_files"]), diff, pr["base_commit"], pr["title"], pr["body"]))


def fetch_candidates(repo: str, client: GitHubClient) -> list[Candidate]:
    """Merged PRs of ``repo`` that close an issue, with the PR's base commit."""
    config = client.config
    if repo in config.denylist:
        raise RepoDenylisted(repo)
    root = _repo_cache(config, repo)
    index_path = root / "index.json" if root else None
    if index_path is not None and index_path.exists():
        index = json.loads(index_path.read_text(encoding="utf-8"))
        client._bump("cache_hits")
        return [_load(root, repo, pr_id) for pr_id in index["pr_ids"]]

    meta = client.json(f"/repos/{repo}")
    stars = int(meta.get("stargazers_count", 0))
    if stars < config.min_stars:
        raise TooFewStars(repo, stars)

    found: list[Candidate] = []
    for page in range(1, config.max_pages + 1):
        pulls = client.json(f"/repos/{repo}/pulls",
                            {"state": "all", "per_page": config.per_page, "page": page})
        for pull in pulls:
            if not pull.get("merged_at"):
                continue
            cand = _candidate(repo, pull, client)
            if cand is not None:
                found.append(cand)
        if len(pulls) < config.per_page:
            break
    found.sort(key=lambda c: c.pr.id)
    if root is not None:
        for cand in found:
            _store(root, cand)
        _atomic_write(index_path, json.dumps({"repo": repo, "stars": stars,
                                              "pr_ids": [c.pr.id for c in found]}))
    return found


def _candidate(repo: str, pull: Mapping, client: GitHubClient) -> Candidate | None:
    number = pull["number"]
    links = linked_issue_ids(f"{pull.get('title') or ''}\n{pull.get('body') or ''}")
    issue = None
    for n in links:
        data = client.json(f"/repos/{repo}/issues/{n}")
        if data.get("state") == "closed" and "pull_request" not in data:
            issue = RawIssue(n, data.get("title") or "", data.get("body") or "",
                             data.get("created_at"), data["state"])
            break
    if issue is None:
        return None
    diff = client.get(f"/repos/{repo}/pulls/{number}", accept="application/vnd.github.v3.diff").text
    try:
        changed = changed_files_from_diff(diff)
    except CorruptDiff:
        log.warning("%s#%s: unparseable diff, skipped", repo, number)
        return None
    pr = RawPullRequest(number, links, True, pull["merged_at"], changed, diff,
                        (pull.get("base") or {}).get("sha"), pull.get("title") or "",
                        pull.get("body") or "")
    return Candidate(repo, issue, pr)


def write_candidates(candidates: Iterable[Candidate], path: str | os.PathLike) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(json.dumps(c.to_task_record(), sort_keys=True) + "\n")
            n += 1
    return n


# -- batches ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchRecord:
    task: TaskInstance
    trajectory: Trajectory
    decision: Decision

    @property
    def instance_id(self) -> str:
        return self.task.instance_id


@dataclass
class SampleBatch:
    records: list[BatchRecord] = field(default_factory=list)
    iteration_tag: str = "0"
    counts: dict[str, int] = field(default_factory=dict)


def _timestamp_key(task: TaskInstance):
    return (task.created_at is None, task.created_at or "")


def assemble_batch(outcomes: Iterable[tuple[TaskInstance, Trajectory, RepoSnapshot]],
                   sampler: SamplerConfig = SamplerConfig(), iteration_tag: str = "0",
                   failures: list[tuple[str, str]] | None = None) -> SampleBatch:
    """Rejection-sample trajectories into a batch ordered by pull-request time.

    With ``failures`` given, records that cannot be scored (no gold patch, gold
    patch not matching the snapshot) are reported there and skipped instead of raising.
    """
    counts = {d.value: 0 for d in Decision}
    kept = []
    for task, traj, snapshot in outcomes:
        try:
            decision = rejection_decide(traj, task, snapshot, sampler)
        except (MissingGoldPatch, UnresolvableDiff) as exc:
            if failures is None:
                raise
            failures.append((task.instance_id, f"{type(exc).__name__}: {exc}"))
            continue
        counts[decision.value] += 1
        if decision is Decision.DROP:
            continue
        if decision is Decision.KEEP_LOCALIZATION_ONLY:
            traj = traj.without_stage(PATCH_GENERATION)
        kept.append(BatchRecord(task, traj, decision))
    kept.sort(key=lambda r: _timestamp_key(r.task))
    return SampleBatch(kept, iteration_tag, counts)


def training_target(step: TrajectoryStep) -> str:
    if step.action is None:
        return step.cot
    return f"{step.cot}\n{json.dumps(step.action, ensure_ascii=False)}".lstrip("\n")


def training_input(task: TaskInstance, step: TrajectoryStep) -> str:
    return f"# Issue\n{task.problem_statement}\n\n# Observation\n{step.observation}"


def emit_training_records(batch: SampleBatch, path: str | os.PathLike) -> int:
    """One (input, target) record per step; returns the number written."""
    n = 0
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in batch.records:
                for step in rec.trajectory.steps:
                    row = step.to_record(rec.instance_id)
                    row.update(decision=rec.decision.value, iteration=batch.iteration_tag,
                               input=training_input(rec.task, step), target=training_target(step))
                    fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
                    n += 1
    except OSError as exc:
        raise UnwritablePath(f"cannot write training records to {path}: {exc}") from exc
    return n


def read_training_records(path: str | os.PathLike) -> dict[str, list[TrajectoryStep]]:
    out: dict[str, list[TrajectoryStep]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.setdefault(row["instance_id"], []).append(TrajectoryStep.from_record(row))
    return out


# -- curriculum ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumQueue:
    # instance_id -> (failure count, first-seen sequence number)
    entries: Mapping[str, tuple[int, int]] = field(default_factory=dict)
    next_seq: int = 0

    @property
    def pending(self) -> list[tuple[str, int]]:
        order = sorted(self.entries.items(), key=lambda kv: (kv[1][0], kv[1][1]))
        return [(iid, count) for iid, (count, _) in order]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, instance_id: object) -> bool:
        return instance_id in self.entries


def curriculum_update(queue: CurriculumQueue,
                      outcomes: Mapping[str, bool] | Iterable[tuple[str, bool]]) -> CurriculumQueue:
    """Count failures, drop resolved instances. ``outcomes`` maps instance id to resolved."""
    items = outcomes.items() if isinstance(outcomes, Mapping) else outcomes
    entries = dict(queue.entries)
    seq = queue.next_seq
    for iid, resolved in items:
        if resolved:
            entries.pop(iid, None)
        elif iid in entries:
            count, first = entries[iid]
            entries[iid] = (count + 1, first)
        else:
            entries[iid] = (1, seq)
            seq += 1
    return CurriculumQueue(entries, seq)
