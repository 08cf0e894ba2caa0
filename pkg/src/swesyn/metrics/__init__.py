"""Measurement: fault locations, patch similarity, sampling decisions, pass@k, reports."""

from .locations import (ANY_OVERLAP, FULL_RECALL, Derivation, EmptyTruthAtLevel, FaultLocation,
                        FaultLocationSet, Level, UnresolvableDiff, extract_locations, jaccard,
                        localization_hit)
from .sampling import (Decision, MissingGoldPatch, PassAtK, SamplerConfig, UniverseMismatch,
                       hit_flags, localization_accuracy, pass_at_k, rejection_decide,
                       score_trajectory)
from .similarity import (CorruptDiff, NormalizedPatch, SimilarityScores, codebleu,
                         ngram_similarity, normalize_patch)

__all__ = [
    "ANY_OVERLAP", "FULL_RECALL", "CorruptDiff", "Decision", "Derivation", "EmptyTruthAtLevel",
    "FaultLocation", "FaultLocationSet", "Level", "MissingGoldPatch", "NormalizedPatch",
    "PassAtK", "SamplerConfig", "SimilarityScores", "UniverseMismatch", "UnresolvableDiff",
    "codebleu", "extract_locations", "hit_flags", "jaccard", "localization_accuracy",
    "localization_hit", "ngram_similarity", "normalize_patch", "pass_at_k", "rejection_decide",
    "score_trajectory",
]
