"""Rejection sampling decisions, pass@k and localization accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from ..repo_model import RepoSnapshot
from .locations import (HIT_MODES, Derivation, EmptyTruthAtLevel, FaultLocationSet, Level,
                        extract_locations, jaccard, localization_hit)
from .similarity import SimilarityScores, codebleu, normalize_patch


class Decision(str, Enum):
    KEEP_FULL = "keep_full"
    KEEP_LOCALIZATION_ONLY = "keep_localization_only"
    DROP = "drop"


class MissingGoldPatch(ValueError):
    pass


class UniverseMismatch(ValueError):
    def __init__(self, differing: Iterable[str]):
        self.differing = sorted(differing)
        super().__init__("runs cover different instances: " + ", ".join(self.differing))


@dataclass(frozen=True)
class SamplerConfig:
    m1: float = 0.6
    m2: float = 0.5

    def __post_init__(self):
        for name in ("m1", "m2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class RejectionOutcome:
    decision: Decision
    jaccard: float
    similarity: SimilarityScores | None
    truth: FaultLocationSet
    predicted: FaultLocationSet


def score_trajectory(trajectory, task, snapshot: RepoSnapshot,
                     config: SamplerConfig = SamplerConfig()) -> RejectionOutcome:
    """Localization Jaccard, patch similarity and the resulting keep/drop decision."""
    if not getattr(task, "gold_patch", None):
        raise MissingGoldPatch(getattr(task, "instance_id", "?"))
    truth = extract_locations(task.gold_patch, snapshot, Derivation.FROM_GOLD_PATCH)
    patch = trajectory.final_patch
    if patch:
        predicted = extract_locations(patch, snapshot, Derivation.FROM_PREDICTED_PATCH)
    else:
        predicted = trajectory.predicted_locations
    score = jaccard(predicted, truth)
    if score < config.m1:
        return RejectionOutcome(Decision.DROP, score, None, truth, predicted)
    sims = None
    if patch:
        sims = codebleu(normalize_patch(patch), normalize_patch(task.gold_patch))
        if sims.best >= config.m2:
            return RejectionOutcome(Decision.KEEP_FULL, score, sims, truth, predicted)
    return RejectionOutcome(Decision.KEEP_LOCALIZATION_ONLY, score, sims, truth, predicted)


def rejection_decide(trajectory, task, snapshot: RepoSnapshot,
                     config: SamplerConfig = SamplerConfig()) -> Decision:
    return score_trajectory(trajectory, task, snapshot, config).decision


# -- pass@k -------------------------------------------------------------------------

@dataclass(frozen=True)
class PassAtK:
    universe: tuple[str, ...]
    per_run_rates: tuple[float, ...]
    union: frozenset[str]
    union_rate: float
    unique_solves: tuple[frozenset[str], ...]

    @property
    def k(self) -> int:
        return len(self.per_run_rates)


def pass_at_k(runs: Sequence[Mapping[str, bool] | set[str]],
              universe: Iterable[str] | None = None) -> PassAtK:
    """Union resolution over runs.

    ``runs`` are either {instance_id: resolved} maps (universe = keys, must
    agree across runs) or resolved-id sets with an explicit ``universe``.
    """
    resolved_sets: list[frozenset[str]] = []
    if universe is None:
        if not runs:
            raise ValueError("need at least one run or an explicit universe")
        keys = [frozenset(r) for r in runs]
        base = keys[0]
        differing = set()
        for k in keys[1:]:
            differing |= base ^ k
        if differing:
            raise UniverseMismatch(differing)
        uni = sorted(base)
        resolved_sets = [frozenset(i for i, ok in r.items() if ok) for r in runs]
    else:
        uni = sorted(set(universe))
        for r in runs:
            ids = frozenset(r if not isinstance(r, Mapping) else (i for i, ok in r.items() if ok))
            extra = ids - set(uni)
            if extra:
                raise UniverseMismatch(extra)
            resolved_sets.append(ids)
    n = len(uni)
    rates = tuple(len(s) / n if n else 0.0 for s in resolved_sets)
    union = frozenset().union(*resolved_sets) if resolved_sets else frozenset()
    uniques = []
    for i, s in enumerate(resolved_sets):
        others = frozenset().union(*(t for j, t in enumerate(resolved_sets) if j != i))
        uniques.append(s - others)
    return PassAtK(tuple(uni), rates, union, len(union) / n if n else 0.0, tuple(uniques))


# -- localization accuracy ------------------------------------------------------------

LEVELS = (Level.CHUNK, Level.FUNCTION, Level.FILE)


def hit_flags(pred: FaultLocationSet, truth: FaultLocationSet) -> dict[str, dict[str, bool | None]]:
    """{level: {mode: hit or None when the truth is empty at that level}}."""
    out: dict[str, dict[str, bool | None]] = {}
    for level in LEVELS:
        out[level.value] = {}
        for mode in HIT_MODES:
            try:
                out[level.value][mode] = localization_hit(pred, truth, level, mode)
            except EmptyTruthAtLevel:
                out[level.value][mode] = None
    return out


@dataclass
class LevelAccuracy:
    hits: int = 0
    total: int = 0
    excluded: int = 0

    @property
    def rate(self) -> float:
        return self.hits / self.total if self.total else 0.0


@dataclass
class LocalizationAccuracy:
    by_level: dict[tuple[str, str], LevelAccuracy] = field(default_factory=dict)

    def rate(self, level: str, mode: str) -> float:
        return self.by_level.get((level, mode), LevelAccuracy()).rate


def localization_accuracy(flags: Iterable[Mapping[str, Mapping[str, bool | None]]]) -> LocalizationAccuracy:
    acc = LocalizationAccuracy()
    for record in flags:
        for level in LEVELS:
            for mode in HIT_MODES:
                cell = acc.by_level.setdefault((level.value, mode), LevelAccuracy())
                value = record.get(level.value, {}).get(mode)
                if value is None:
                    cell.excluded += 1
                else:
                    cell.total += 1
                    cell.hits += bool(value)
    return acc
