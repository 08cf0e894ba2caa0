from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swesyn.metrics import (ANY_OVERLAP, EmptyTruthAtLevel, FaultLocation, FaultLocationSet,
                            Level, UnresolvableDiff, extract_locations, jaccard, localization_hit)
from swesyn.patch_engine import Edit, EditPatch, render_diff
from swesyn.repo_model import snapshot_from_files

from .oracles import jaccard_plain, max_window_matching

F, C, FN, CH = FaultLocation.file_, FaultLocation.class_, FaultLocation.function, FaultLocation.chunk


def diff_for(snapshot, path, original, replacement):
    return render_diff(EditPatch.of(Edit(path, original, replacement)), snapshot).text


# -- extraction -------------------------------------------------------------------

def test_method_edit_yields_function_class_file_and_chunk(toy_snapshot):
    # int(...) sits on line 19 of src/resize.py, inside Resizer.scale
    d = diff_for(toy_snapshot, "src/resize.py",
                 "return (int(width * self.factor), int(height * self.factor))",
                 "return (round(width * self.factor), round(height * self.factor))")
    got = extract_locations(d, toy_snapshot)
    assert set(got.canonical()) == {
        "src/resize.py", "src/resize.py::Resizer", "src/resize.py::Resizer.scale",
        "src/resize.py::[16-22]"}
    assert got.at(Level.CLASS) == [C("src/resize.py", "Resizer")]


def test_module_constant_edit_is_chunk_only(toy_snapshot):
    d = diff_for(toy_snapshot, "src/resize.py", 'DEFAULT_MODE = "nearest"', 'DEFAULT_MODE = "bilinear"')
    got = extract_locations(d, toy_snapshot)
    assert set(got.canonical()) == {"src/resize.py", "src/resize.py::[1-6]"}


def test_chunk_window_clipped_to_short_file():
    snap = snapshot_from_files({"c.py": "A = 1\nB = 2\nC = 3\nD = 4\n"})
    got = extract_locations(diff_for(snap, "c.py", "B = 2", "B = 20"), snap)
    assert set(got.canonical()) == {"c.py", "c.py::[1-4]"}


def test_empty_diff_gives_empty_set(toy_snapshot):
    assert len(extract_locations("", toy_snapshot)) == 0


def test_nearby_edits_merge_into_one_window():
    src = "".join(f"V{i} = {i}\n" for i in range(1, 21))
    snap = snapshot_from_files({"v.py": src})
    after = src.replace("V5 = 5", "V5 = 50").replace("V9 = 9", "V9 = 90")
    from swesyn.patch_engine import diff_between
    got = extract_locations(diff_between({"v.py": src}, {"v.py": after}), snap)
    # windows [2,8] and [6,12] overlap
    assert got.at(Level.CHUNK) == [CH("v.py", 2, 12)]


def test_unresolvable_context_raises(toy_snapshot):
    bogus = ("--- a/src/crop.py\n+++ b/src/crop.py\n@@ -1,2 +1,2 @@\n"
             "-this line is not there\n+x\n context\n")
    with pytest.raises(UnresolvableDiff):
        extract_locations(bogus, toy_snapshot)


def test_canonical_forms_and_invariants():
    assert CH("a.py", 3, 9).canonical == "a.py::[3-9]"
    assert FN("a.py", "K.m").canonical == "a.py::K.m"
    with pytest.raises(ValueError):
        FaultLocation("a.py", Level.CHUNK)
    with pytest.raises(ValueError):
        FaultLocation("a.py", Level.FUNCTION)
    s = FaultLocationSet([F("a.py"), FN("a.py", "f"), CH("a.py", 1, 4)])
    assert FaultLocationSet.from_canonical(s.canonical()) == s


# -- jaccard ----------------------------------------------------------------------

def test_jaccard_examples():
    a = FaultLocationSet([FN("a.py", "f"), FN("a.py", "g")])
    b = FaultLocationSet([FN("a.py", "g"), FN("b.py", "h")])
    assert jaccard(a, b) == pytest.approx(1 / 3)
    assert jaccard(a, a) == 1.0
    assert jaccard(FaultLocationSet([CH("a.py", 10, 16)]), FaultLocationSet([CH("a.py", 16, 22)])) == 1.0
    assert jaccard(FaultLocationSet(), FaultLocationSet()) == 1.0
    assert jaccard(a, FaultLocationSet()) == 0.0


def test_chunks_in_different_files_never_match():
    assert jaccard(FaultLocationSet([CH("a.py", 1, 5)]), FaultLocationSet([CH("b.py", 1, 5)])) == 0.0


PATHS = ["a.py", "b.py", "pkg/c.py"]
NAMES = ["f", "g", "K", "K.m", "K.n"]

plain_locs = st.one_of(
    st.builds(F, st.sampled_from(PATHS)),
    st.builds(FN, st.sampled_from(PATHS), st.sampled_from(NAMES)),
    st.builds(C, st.sampled_from(PATHS), st.sampled_from(["K", "L"])),
)


@st.composite
def chunk_locs(draw):
    start = draw(st.integers(1, 60))
    return CH(draw(st.sampled_from(PATHS[:2])), start, start + draw(st.integers(0, 8)))


plain_sets = st.lists(plain_locs, max_size=8).map(FaultLocationSet)
mixed_sets = st.lists(st.one_of(plain_locs, chunk_locs()), max_size=8).map(FaultLocationSet)


@settings(max_examples=300, deadline=None)
@given(plain_sets, plain_sets)
def test_jaccard_equals_set_algebra_without_chunks(a, b):
    assert jaccard(a, b) == jaccard_plain(set(a.canonical()), set(b.canonical()))


def greedy_oracle(a: FaultLocationSet, b: FaultLocationSet) -> float:
    plain_a = {l.canonical for l in a if l.level is not Level.CHUNK}
    plain_b = {l.canonical for l in b if l.level is not Level.CHUNK}
    wa = [(l.file, *l.window) for l in a if l.level is Level.CHUNK]
    wb = [(l.file, *l.window) for l in b if l.level is Level.CHUNK]
    inter = len(plain_a & plain_b) + max_window_matching(wa, wb)
    union = len(a) + len(b) - inter
    return 1.0 if union == 0 else inter / union


@settings(max_examples=200, deadline=None)
@given(mixed_sets, mixed_sets)
def test_jaccard_with_chunks_matches_exhaustive_pairing(a, b):
    # windows inside one set are merged, hence disjoint, so start-sorted greedy
    # pairing reaches the maximum matching found by exhaustive search
    assert jaccard(a, b) == pytest.approx(greedy_oracle(a, b), abs=0)


@settings(max_examples=200, deadline=None)
@given(mixed_sets, mixed_sets)
def test_jaccard_symmetric_and_bounded(a, b):
    j = jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == jaccard(b, a)
    if len(a):
        assert jaccard(a, a) == 1.0


@given(st.lists(chunk_locs(), max_size=10))
def test_set_merges_windows_to_same_line_coverage(chunks):
    s = FaultLocationSet(chunks)
    cover = {(c.file, n) for c in chunks for n in range(c.window[0], c.window[1] + 1)}
    assert {(c.file, n) for c in s.at(Level.CHUNK) for n in range(c.window[0], c.window[1] + 1)} == cover
    by_file = {}
    for c in s.at(Level.CHUNK):
        by_file.setdefault(c.file, []).append(c.window)
    for wins in by_file.values():
        wins.sort()
        assert all(w1[1] + 1 < w2[0] for w1, w2 in zip(wins, wins[1:]))


# -- granularity hits --------------------------------------------------------------

def test_identity_hit_at_function_level():
    s = FaultLocationSet([F("a.py"), FN("a.py", "f")])
    assert localization_hit(s, s, Level.FUNCTION)


def test_wrong_function_same_file():
    pred = FaultLocationSet([F("a.py"), FN("a.py", "g")])
    truth = FaultLocationSet([F("a.py"), FN("a.py", "f")])
    assert localization_hit(pred, truth, "file")
    assert not localization_hit(pred, truth, "function")


def test_module_chunk_only_truth_is_excluded_at_function_level():
    truth = FaultLocationSet([F("a.py"), CH("a.py", 1, 4)])
    with pytest.raises(EmptyTruthAtLevel):
        localization_hit(truth, truth, Level.FUNCTION)
    assert localization_hit(truth, truth, Level.CHUNK)


def test_full_recall_versus_any_overlap():
    truth = FaultLocationSet([FN("a.py", "f"), FN("b.py", "g")])
    pred = FaultLocationSet([FN("a.py", "f")])
    assert not localization_hit(pred, truth, Level.FUNCTION)
    assert localization_hit(pred, truth, Level.FUNCTION, mode=ANY_OVERLAP)


@settings(max_examples=300, deadline=None)
@given(mixed_sets, mixed_sets)
def test_function_hit_implies_file_hit(pred, truth):
    try:
        fn = localization_hit(pred, truth, Level.FUNCTION)
    except EmptyTruthAtLevel:
        return
    if fn:
        assert localization_hit(pred, truth, Level.FILE)
