"""``swesyn`` command line: solve one task, synthesize a batch, report on runs."""

from __future__ import annotations

import argparse
import json
import logging
import random
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .agent.backends import (HTTP_CHAT, SCRIPTED_REPLAY, BackendError, HttpChatBackend,
                             ScriptedReplayBackend)
from .agent.core import (PATCH_PRODUCED, AgentConfig, TaskInstance, Trajectory, run_task,
                         write_trajectory)
from .data_pipeline import SampleBatch, assemble_batch, emit_training_records
from .metrics.locations import UnresolvableDiff
from .metrics.sampling import (Decision, SamplerConfig, UniverseMismatch, hit_flags,
                               localization_accuracy, pass_at_k, score_trajectory)
from .patch_engine import PatchError, apply_patch, write_patch_file
from .repo_model import RepoError, RepoSnapshot, build_snapshot

log = logging.getLogger("swesyn")

EXIT_OK, EXIT_NO_PATCH, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2, 3
CHECK_TIMEOUT = 600


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    backend_kind: str
    fixture: str | None
    endpoint: str | None
    model: str
    agent: AgentConfig
    sampler: SamplerConfig
    jobs: int
    out: Path
    seed: int
    http_retries: int = 4
    http_backoff: float = 1.0

    def make_backend(self):
        if self.backend_kind == SCRIPTED_REPLAY:
            return ScriptedReplayBackend.from_file(self.fixture)
        return HttpChatBackend(self.endpoint, model=self.model, max_retries=self.http_retries,
                               backoff=self.http_backoff)


_BACKEND_ALIASES = {"scripted": SCRIPTED_REPLAY, SCRIPTED_REPLAY: SCRIPTED_REPLAY,
                    "http": HTTP_CHAT, HTTP_CHAT: HTTP_CHAT}


def run_config(args: argparse.Namespace) -> RunConfig:
    kind = _BACKEND_ALIASES.get(args.backend)
    if kind is None:
        raise ConfigError(f"unknown backend {args.backend!r}")
    if kind == SCRIPTED_REPLAY:
        if not args.fixture or args.endpoint:
            raise ConfigError("the scripted backend needs --fixture and no --endpoint")
        if not Path(args.fixture).is_file():
            raise ConfigError(f"fixture not found: {args.fixture}")
    elif not args.endpoint or args.fixture:
        raise ConfigError("the http backend needs --endpoint and no --fixture")
    try:
        agent = AgentConfig(args.files_n, args.loc_iters, args.patch_retries, args.temperature,
                            args.max_tokens)
        sampler = SamplerConfig(args.m1, args.m2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    if args.http_retries < 0 or args.http_backoff < 0:
        raise ConfigError("--http-retries and --http-backoff must not be negative")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out} ({exc})") from exc
    return RunConfig(kind, args.fixture, args.endpoint, args.model, agent, sampler, args.jobs,
                     out, args.seed, args.http_retries, args.http_backoff)


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    if root.level > logging.INFO or root.level == logging.NOTSET:
        root.setLevel(logging.INFO)
    return handler


# -- shared per-instance work ---------------------------------------------------------------

def load_snapshot(repo_path: str | Path, task: TaskInstance) -> RepoSnapshot:
    root = Path(repo_path)
    if not root.is_dir():
        raise RepoError(f"repository path does not exist: {root}")
    revision = task.base_commit if task.base_commit and (root / ".git").exists() else None
    return build_snapshot(root, revision)


def run_resolution_check(snapshot: RepoSnapshot, diff: str, check) -> bool:
    cmd = check if isinstance(check, list) else ["sh", "-c", check]
    try:
        tree = apply_patch(snapshot, diff)
    except PatchError:
        return False
    with tree:
        try:
            proc = subprocess.run(cmd, cwd=tree.root, capture_output=True, timeout=CHECK_TIMEOUT,
                                  check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            log.warning("resolution check failed to run: %s", exc)
            return False
    return proc.returncode == 0


def metric_record(task: TaskInstance, traj: Trajectory, snapshot: RepoSnapshot,
                  sampler: SamplerConfig) -> dict:
    rec = {"instance_id": task.instance_id, "outcome": traj.outcome,
           "patch_produced": traj.outcome == PATCH_PRODUCED, "resolved": False,
           "decision": None, "jaccard": None, "hits": None}
    if traj.final_patch and task.resolution_check:
        rec["resolved"] = run_resolution_check(snapshot, traj.final_patch, task.resolution_check)
    if task.gold_patch:
        try:
            scored = score_trajectory(traj, task, snapshot, sampler)
        except UnresolvableDiff as exc:
            log.warning("%s: cannot score localization: %s", task.instance_id, exc)
        else:
            rec["decision"] = scored.decision.value
            rec["jaccard"] = scored.jaccard
            rec["hits"] = hit_flags(scored.predicted, scored.truth)
    return rec


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


# -- solve --------------------------------------------------------------------------------

def _read_task(path: str) -> TaskInstance:
    """A task record from a JSON object, a JSON list or the first line of a JSON-lines file."""
    text = Path(path).read_text(encoding="utf-8").strip()
    try:
        rec = json.loads(text)
    except json.JSONDecodeError:
        rec = json.loads(text.splitlines()[0])
    if isinstance(rec, list):
        rec = rec[0]
    return TaskInstance.from_record(rec)


def cmd_solve(args: argparse.Namespace) -> int:
    try:
        cfg = run_config(args)
        task = _read_task(args.task)
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler = _attach_log(cfg.out)
    try:
        random.seed(cfg.seed)
        try:
            snapshot = load_snapshot(args.repo, task)
        except RepoError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        backend = cfg.make_backend()
        traj_path = cfg.out / f"{task.instance_id}.trajectory.jsonl"
        try:
            traj = run_task(task, snapshot, cfg.agent, backend)
        except BackendError as exc:
            if exc.partial is not None:
                write_trajectory(exc.partial, traj_path)
            log.error("%s: backend failure: %s", task.instance_id, exc)
            print(f"error: backend failure: {exc}", file=sys.stderr)
            return EXIT_BACKEND
        write_trajectory(traj, traj_path)
        if traj.final_patch:
            write_patch_file(cfg.out, task.instance_id, traj.final_patch)
        rec = metric_record(task, traj, snapshot, cfg.sampler)
        (cfg.out / "metrics.jsonl").write_text(_dump(rec) + "\n", encoding="utf-8")
        summary = {"instance_id": task.instance_id, "outcome": traj.outcome,
                   "resolved": rec["resolved"], "steps": len(traj.steps), "seed": cfg.seed}
        if isinstance(backend, HttpChatBackend):
            summary["backend_retries"] = backend.retry_count
        (cfg.out / "summary.json").write_text(_dump(summary) + "\n", encoding="utf-8")
        resolved = " resolved" if rec["resolved"] else ""
        print(f"{task.instance_id}: {traj.outcome}{resolved}")
        return EXIT_OK if traj.final_patch else EXIT_NO_PATCH
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


# -- synthesize -------------------------------------------------------------------------------

def _read_candidates(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_synthesize(args: argparse.Namespace) -> int:
    try:
        cfg = run_config(args)
        candidates = _read_candidates(args.candidates)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler = _attach_log(cfg.out)
    try:
        random.seed(cfg.seed)
        backend = cfg.make_backend()
        traj_dir = cfg.out / "trajectories"
        traj_dir.mkdir(exist_ok=True)
        base = Path(args.candidates).parent

        def work(raw: dict):
            iid = raw.get("instance_id", "?")
            try:
                task = TaskInstance.from_record(raw)
                repo = Path(raw.get("repo_path") or args.repo or "")
                if not repo.is_absolute():
                    repo = base / repo
                snapshot = load_snapshot(repo, task)
                traj = run_task(task, snapshot, cfg.agent, backend)
            except BackendError as exc:
                if exc.partial is not None:
                    write_trajectory(exc.partial, traj_dir / f"{iid}.jsonl")
                return iid, None, f"backend: {exc}"
            except (RepoError, ValueError, KeyError, OSError) as exc:
                return iid, None, f"{type(exc).__name__}: {exc}"
            write_trajectory(traj, traj_dir / f"{iid}.jsonl")
            return iid, (task, traj, snapshot), None

        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(work, candidates))

        failed = {iid: why for iid, _, why in results if why is not None}
        outcomes = [r for _, r, why in results if why is None]
        for iid, why in sorted(failed.items()):
            log.error("%s failed: %s", iid, why)
        errors: list[tuple[str, str]] = []
        batch = assemble_batch(outcomes, cfg.sampler, iteration_tag=args.iteration, failures=errors)
        for iid, why in errors:
            failed[iid] = why
        n = emit_training_records(batch, cfg.out / "training.jsonl")
        with open(cfg.out / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for task, traj, snapshot in outcomes:
                if task.instance_id in failed:
                    continue
                fh.write(_dump(metric_record(task, traj, snapshot, cfg.sampler)) + "\n")
        _write_batch_index(batch, cfg.out / "batch.jsonl")
        summary = {"counts": {d.value: batch.counts.get(d.value, 0) for d in Decision},
                   "failed": sorted(failed), "training_records": n, "seed": cfg.seed}
        (cfg.out / "synthesis_summary.json").write_text(_dump(summary) + "\n", encoding="utf-8")
        print(_dump(summary))
        return EXIT_OK
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def _write_batch_index(batch: SampleBatch, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in batch.records:
            fh.write(_dump({"instance_id": rec.instance_id, "decision": rec.decision.value,
                            "created_at": rec.task.created_at,
                            "steps": len(rec.trajectory.steps)}) + "\n")


# -- report -------------------------------------------------------------------------------------

def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def build_report(run_dirs: Sequence[str | Path]) -> dict:
    runs = [read_metrics(d) for d in run_dirs]
    resolved = [{r["instance_id"]: bool(r.get("resolved")) for r in run} for run in runs]
    pk = pass_at_k(resolved)
    per_run_acc = [localization_accuracy([r["hits"] for r in run if r.get("hits")]) for run in runs]
    union_flags = []
    by_id = [{r["instance_id"]: r.get("hits") for r in run} for run in runs]
    for iid in pk.universe:
        flags = [m[iid] for m in by_id if m.get(iid)]
        if not flags:
            continue
        merged = {}
        for level, modes in flags[0].items():
            merged[level] = {}
            for mode, value in modes.items():
                vals = [f[level][mode] for f in flags]
                merged[level][mode] = None if value is None else any(bool(v) for v in vals)
        union_flags.append(merged)
    union_acc = localization_accuracy(union_flags)

    def table(acc):
        return {f"{level}/{mode}": round(cell.rate, 6) for (level, mode), cell in sorted(acc.by_level.items())}

    return {"runs": [str(d) for d in run_dirs], "instances": len(pk.universe),
            "resolved_rates": list(pk.per_run_rates), "pass_at_k": pk.union_rate, "k": pk.k,
            "unique_solves": [len(u) for u in pk.unique_solves],
            "localization": [table(a) for a in per_run_acc], "localization_union": table(union_acc)}


def format_report(rep: dict) -> str:
    lines = [f"instances: {rep['instances']}"]
    for d, rate, uniq in zip(rep["runs"], rep["resolved_rates"], rep["unique_solves"]):
        lines.append(f"run {d}: resolved {rate:.2%}, unique solves {uniq}")
    lines.append(f"pass@{rep['k']}: {rep['pass_at_k']:.2%}")
    keys = sorted(rep["localization_union"])
    if keys:
        lines.append("localization accuracy (" + ", ".join(["level/mode"] + [
            f"run{i + 1}" for i in range(len(rep["runs"]))] + ["union"]) + "):")
        for key in keys:
            cells = [f"{t.get(key, 0.0):.2%}" for t in rep["localization"]]
            cells.append(f"{rep['localization_union'][key]:.2%}")
            lines.append(f"  {key}: " + " ".join(cells))
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    try:
        rep = build_report(args.runs)
    except UniverseMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(_dump(rep) if args.format == "json" else format_report(rep))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser) -> None:
    d = AgentConfig()
    s = SamplerConfig()
    p.add_argument("--backend", default="scripted", help="scripted | http")
    p.add_argument("--fixture", help="replay fixture (scripted backend)")
    p.add_argument("--endpoint", help="chat-completions URL (http backend)")
    p.add_argument("--model", default="default", help="model name sent to the http backend")
    p.add_argument("--http-retries", type=int, default=4, help="retries on 5xx, 429 and dropped connections")
    p.add_argument("--http-backoff", type=float, default=1.0, help="first retry delay in seconds, doubled each time")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--m1", type=float, default=s.m1, help="localization Jaccard gate")
    p.add_argument("--m2", type=float, default=s.m2, help="patch similarity gate")
    p.add_argument("--files-n", type=int, default=d.relevant_files_n)
    p.add_argument("--loc-iters", type=int, default=d.localization_iteration_limit)
    p.add_argument("--patch-retries", type=int, default=d.patch_retry_limit)
    p.add_argument("--temperature", type=float, default=d.temperature)
    p.add_argument("--max-tokens", type=int, default=d.max_tokens)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swesyn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run the agent on one task")
    p.add_argument("task", help="task instance file (JSON)")
    p.add_argument("repo", help="repository checkout")
    _run_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synthesize", help="run candidates and build a training batch")
    p.add_argument("candidates", help="candidate list (JSON lines)")
    p.add_argument("--repo", help="checkout used when a candidate has no repo_path")
    p.add_argument("--iteration", default="0", help="iteration tag for the batch")
    _run_flags(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("report", help="summarize one or more run directories")
    p.add_argument("runs", nargs="+", help="run directories containing metrics.jsonl")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
