from __future__ import annotations

import json
import shutil
import subprocess
from pathlib import Path

import pytest

from swesyn.agent.core import TaskInstance
from swesyn.repo_model import build_snapshot

FIXTURES = Path(__file__).parent / "fixtures"
TOY_REPO = FIXTURES / "toy_repo"
TOY_TASK = FIXTURES / "toy_task.json"
TOY_SCRIPT = FIXTURES / "toy_script.jsonl"


@pytest.fixture
def toy_snapshot():
    return build_snapshot(TOY_REPO)


@pytest.fixture
def toy_task():
    return TaskInstance.from_record(json.loads(TOY_TASK.read_text()))


def git(cwd: Path, *args: str) -> str:
    env = {"GIT_AUTHOR_NAME": "t", "GIT_AUTHOR_EMAIL": "t@example.com",
           "GIT_COMMITTER_NAME": "t", "GIT_COMMITTER_EMAIL": "t@example.com",
           "GIT_CONFIG_GLOBAL": "/dev/null", "HOME": str(cwd), "PATH": "/usr/bin:/bin"}
    out = subprocess.run(["git", *args], cwd=cwd, env=env, capture_output=True, check=True)
    return out.stdout.decode().strip()


@pytest.fixture
def toy_git_repo(tmp_path):
    """The toy repo as a git repository with one commit; returns (path, sha)."""
    repo = tmp_path / "toy_git"
    shutil.copytree(TOY_REPO, repo)
    git(repo, "init", "-q")
    git(repo, "add", "-A")
    git(repo, "commit", "-q", "-m", "base")
    return repo, git(repo, "rev-parse", "HEAD")


def reply(obj: dict, cot: str = "Thinking it over.") -> str:
    """A model reply: reasoning followed by one fenced JSON action."""
    return f"{cot}\n```json\n{json.dumps(obj)}\n```"


def entry(stage: str, step_index: int, response: str, instance_id: str | None = None) -> dict:
    return {"stage": stage, "step_index": step_index, "response": response, "instance_id": instance_id}


def load_script() -> list[dict]:
    return [json.loads(l) for l in TOY_SCRIPT.read_text().splitlines() if l.strip()]


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, ok: bool, detail: str) -> None:
    """Record (and print) the verdict for one acceptance criterion."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
